"""Pretrained backbone weights: download once, verify, cache, build."""

from __future__ import annotations

import logging
import os
import re
from collections.abc import Callable
from pathlib import Path

import requests
import torch
from cryptography.hazmat.primitives import hashes
from perception import FeatureBackbone, ToyBackbone, TorchvisionBackbone
from torch import nn

_LOGGER = logging.getLogger(__name__)

BACKBONE_WIDE_RESNET = "wide-resnet-101"
BACKBONE_RESNET = "resnet-101"
BACKBONE_TOY = "toy"
DEFAULT_BACKBONE = BACKBONE_WIDE_RESNET

CACHE_ENV_VAR = "MDPS_CACHE_DIR"
DEFAULT_CACHE_DIR = Path.home() / ".cache" / "mdps"
DOWNLOAD_TIMEOUT = 60
CHUNK_SIZE = 1 << 20
PERM_WEIGHTS = 0o640
PERM_DIR = 0o750

# torchvision names its weight files <arch>-<first 8 hex of the SHA-256>.pth
_URL_DIGEST_RE = re.compile(r"-([0-9a-f]{8,64})\.pth$")


class DigestMismatchError(RuntimeError):
    """Weight file content does not match its published digest."""

    def __init__(self, path: Path, expected: str, actual: str) -> None:
        super().__init__(f"Digest mismatch for {path}: expected {expected}..., got {actual}")
        self.path = path


class OfflineCacheMissError(RuntimeError):
    """Offline mode requested but the weights are not cached."""


def _wide_resnet_source() -> tuple[str, Callable[[], nn.Module]]:
    from torchvision.models import Wide_ResNet101_2_Weights, wide_resnet101_2

    return Wide_ResNet101_2_Weights.IMAGENET1K_V1.url, lambda: wide_resnet101_2(weights=None)


def _resnet_source() -> tuple[str, Callable[[], nn.Module]]:
    from torchvision.models import ResNet101_Weights, resnet101

    return ResNet101_Weights.IMAGENET1K_V1.url, lambda: resnet101(weights=None)


PRETRAINED_SOURCES: dict[str, Callable[[], tuple[str, Callable[[], nn.Module]]]] = {
    BACKBONE_WIDE_RESNET: _wide_resnet_source,
    BACKBONE_RESNET: _resnet_source,
}
VALID_BACKBONES = (*PRETRAINED_SOURCES, BACKBONE_TOY)


def validate_backbone_name(name: str) -> str:
    if name not in VALID_BACKBONES:
        raise ValueError(f"Unknown backbone {name!r}; choose one of {list(VALID_BACKBONES)}")
    return name


def resolve_cache_dir(cache_dir: str | Path | None = None) -> Path:
    """Environment override first, then the configured path, then ~/.cache/mdps."""
    override = os.environ.get(CACHE_ENV_VAR)
    if override:
        return Path(override)
    if cache_dir:
        return Path(cache_dir)
    return DEFAULT_CACHE_DIR


def url_digest(url: str) -> str:
    match = _URL_DIGEST_RE.search(url)
    if not match:
        raise ValueError(f"Cannot derive a content digest from weight URL {url}")
    return match.group(1)


def file_sha256(path: Path) -> str:
    digest = hashes.Hash(hashes.SHA256())
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.finalize().hex()


def verify_digest(path: Path, expected_prefix: str) -> None:
    actual = file_sha256(path)
    if not actual.startswith(expected_prefix):
        raise DigestMismatchError(path, expected_prefix, actual[: len(expected_prefix)])


def cached_weights_path(name: str, digest: str, cache_dir: Path) -> Path:
    return cache_dir / name / f"{digest}.weights"


def _download(url: str, target: Path) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    target.parent.chmod(PERM_DIR)
    partial = target.with_suffix(".partial")
    _LOGGER.info("Downloading backbone weights from %s", url)
    with requests.get(url, stream=True, timeout=DOWNLOAD_TIMEOUT) as response:
        response.raise_for_status()
        with open(partial, "wb") as handle:
            for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                handle.write(chunk)
    partial.replace(target)
    target.chmod(PERM_WEIGHTS)


def ensure_weights(name: str, url: str, cache_dir: Path, offline: bool = False) -> Path:
    """Return a verified local copy of the weights at url, downloading on a cache miss.

    Raises:
        OfflineCacheMissError: If offline and the file is not cached
        DigestMismatchError: If the cached or downloaded file fails verification
    """
    digest = url_digest(url)
    path = cached_weights_path(name, digest, cache_dir)
    if path.exists():
        verify_digest(path, digest)
        _LOGGER.debug("Using cached weights %s", path)
        return path
    if offline:
        raise OfflineCacheMissError(
            f"Backbone {name!r} is not cached at {path} and offline mode is set"
        )
    _download(url, path)
    try:
        verify_digest(path, digest)
    except DigestMismatchError:
        _LOGGER.error("Downloaded weights for %s failed verification, removing %s", name, path)
        path.unlink(missing_ok=True)
        raise
    return path


def fetch_pretrained(
    name: str = DEFAULT_BACKBONE,
    cache_dir: str | Path | None = None,
    offline: bool = False,
) -> FeatureBackbone:
    """Build a feature backbone, fetching its ImageNet weights when needed.

    Args:
        name: One of wide-resnet-101, resnet-101, toy
        cache_dir: Weight cache root; MDPS_CACHE_DIR overrides it
        offline: Use the cache only, never the network

    Returns:
        Backbone in eval mode
    """
    validate_backbone_name(name)
    if name == BACKBONE_TOY:
        return ToyBackbone().eval()

    url, build_trunk = PRETRAINED_SOURCES[name]()
    path = ensure_weights(name, url, resolve_cache_dir(cache_dir), offline=offline)
    trunk = build_trunk()
    trunk.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    _LOGGER.info("Loaded %s backbone from %s", name, path)
    return TorchvisionBackbone(trunk).eval()
