"""Full-scale attention U-Net noise predictor (ADM-style residual blocks)."""

from __future__ import annotations

from typing import Any

import torch
import torch.nn.functional as F
from denoiser import BACKEND_UNET, DenoiserModel, timestep_embedding
from torch import nn


def _normalization(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(32, channels), channels)


def _zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.detach().zero_()
    return module


class ResBlock(nn.Module):
    def __init__(self, channels: int, emb_channels: int, out_channels: int, dropout: float) -> None:
        super().__init__()
        self.in_layers = nn.Sequential(
            _normalization(channels), nn.SiLU(), nn.Conv2d(channels, out_channels, 3, padding=1)
        )
        self.emb_layers = nn.Sequential(nn.SiLU(), nn.Linear(emb_channels, 2 * out_channels))
        self.out_norm = _normalization(out_channels)
        self.out_layers = nn.Sequential(
            nn.SiLU(),
            nn.Dropout(p=dropout),
            _zero_module(nn.Conv2d(out_channels, out_channels, 3, padding=1)),
        )
        self.skip = (
            nn.Identity() if out_channels == channels else nn.Conv2d(channels, out_channels, 1)
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.in_layers(x)
        scale, shift = self.emb_layers(emb).to(h.dtype)[:, :, None, None].chunk(2, dim=1)
        h = self.out_norm(h) * (1 + scale) + shift
        return self.skip(x) + self.out_layers(h)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, num_heads: int) -> None:
        super().__init__()
        if channels % num_heads:
            raise ValueError(f"channels {channels} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.norm = _normalization(channels)
        self.qkv = nn.Conv1d(channels, channels * 3, 1)
        self.proj_out = _zero_module(nn.Conv1d(channels, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, *spatial = x.shape
        flat = x.reshape(b, c, -1)
        qkv = self.qkv(self.norm(flat))
        q, k, v = qkv.reshape(b * self.num_heads, 3 * c // self.num_heads, -1).chunk(3, dim=1)
        scale = (c // self.num_heads) ** -0.25
        weight = torch.einsum("bct,bcs->bts", q * scale, k * scale).softmax(dim=-1)
        h = torch.einsum("bts,bcs->bct", weight, v).reshape(b, c, -1)
        return (flat + self.proj_out(h)).reshape(b, c, *spatial)


class _Level(nn.Module):
    """Residual blocks of one resolution, each optionally followed by attention."""

    def __init__(self, blocks: list[ResBlock], attentions: list[nn.Module]) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.attentions = nn.ModuleList(attentions)


class UNetDenoiser(DenoiserModel):
    """Encoder/decoder with skip connections, timestep-modulated residual blocks and
    self-attention at the resolutions listed in attention_resolutions (as downsample
    factors)."""

    def __init__(
        self,
        in_channels: int = 3,
        model_channels: int = 128,
        channel_mult: tuple[int, ...] = (1, 1, 2, 2, 4, 4),
        num_res_blocks: int = 2,
        attention_resolutions: tuple[int, ...] = (16, 32),
        num_heads: int = 4,
        dropout: float = 0.0,
    ) -> None:
        super().__init__()
        self.config: dict[str, Any] = {
            "in_channels": in_channels,
            "model_channels": model_channels,
            "channel_mult": list(channel_mult),
            "num_res_blocks": num_res_blocks,
            "attention_resolutions": list(attention_resolutions),
            "num_heads": num_heads,
            "dropout": dropout,
        }
        self.model_channels = model_channels
        emb_channels = model_channels * 4
        self.time_embed = nn.Sequential(
            nn.Linear(model_channels, emb_channels), nn.SiLU(), nn.Linear(emb_channels, emb_channels)
        )
        self.conv_in = nn.Conv2d(in_channels, model_channels, 3, padding=1)

        skip_channels = [model_channels]
        ch = model_channels
        factor = 1
        self.down_levels = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for level, mult in enumerate(channel_mult):
            blocks: list[ResBlock] = []
            attentions: list[nn.Module] = []
            for _ in range(num_res_blocks):
                blocks.append(ResBlock(ch, emb_channels, model_channels * mult, dropout))
                ch = model_channels * mult
                attentions.append(
                    AttentionBlock(ch, num_heads) if factor in attention_resolutions else nn.Identity()
                )
                skip_channels.append(ch)
            self.down_levels.append(_Level(blocks, attentions))
            if level != len(channel_mult) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_channels.append(ch)
                factor *= 2

        self.mid_block1 = ResBlock(ch, emb_channels, ch, dropout)
        self.mid_attention = AttentionBlock(ch, num_heads)
        self.mid_block2 = ResBlock(ch, emb_channels, ch, dropout)

        self.up_levels = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level, mult in reversed(list(enumerate(channel_mult))):
            blocks = []
            attentions = []
            for _ in range(num_res_blocks + 1):
                blocks.append(
                    ResBlock(ch + skip_channels.pop(), emb_channels, model_channels * mult, dropout)
                )
                ch = model_channels * mult
                attentions.append(
                    AttentionBlock(ch, num_heads) if factor in attention_resolutions else nn.Identity()
                )
            self.up_levels.append(_Level(blocks, attentions))
            if level != 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))
                factor //= 2

        self.out = nn.Sequential(
            _normalization(ch), nn.SiLU(), _zero_module(nn.Conv2d(ch, in_channels, 3, padding=1))
        )

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_embed(timestep_embedding(t, self.model_channels).to(x_t.dtype))
        h = self.conv_in(x_t)
        skips = [h]
        for index, level in enumerate(self.down_levels):
            for block, attention in zip(level.blocks, level.attentions):
                h = attention(block(h, emb))
                skips.append(h)
            if index < len(self.downsamples):
                h = self.downsamples[index](h)
                skips.append(h)

        h = self.mid_block2(self.mid_attention(self.mid_block1(h, emb)), emb)

        for index, level in enumerate(self.up_levels):
            for block, attention in zip(level.blocks, level.attentions):
                h = attention(block(torch.cat([h, skips.pop()], dim=1), emb))
            if index < len(self.upsamples):
                target = skips[-1].shape[-2:]
                h = self.upsamples[index](F.interpolate(h, size=target, mode="nearest"))
        return self.out(h)

    def descriptor(self) -> dict[str, Any]:
        return {"backend": BACKEND_UNET, **self.config}
