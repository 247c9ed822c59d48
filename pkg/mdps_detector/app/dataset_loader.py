"""MVTec-layout dataset loading, preprocessing and the synthetic texture benchmark."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from noise_schedule import RANGE_UNIT, ImageTensor, MaskImage, to_model_space
from PIL import Image, UnidentifiedImageError
from run_store import PERM_DIR, PERM_FILE, validate_name
from scipy.ndimage import gaussian_filter

_LOGGER = logging.getLogger(__name__)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
VALID_SPLITS = (SPLIT_TRAIN, SPLIT_TEST)
LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"
GOOD_DIR = "good"
GROUND_TRUTH_DIR = "ground_truth"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MASK_THRESHOLD = 127

MIN_SYNTHETIC_SIZE = 32
MAX_DEFECT_FRACTION = 0.25
DEFECT_RECTANGLE = "rectangle"
DEFECT_SCRIBBLE = "scribble"
DEFECT_COLOR_SHIFT = "color_shift"
DEFECT_TYPES = (DEFECT_RECTANGLE, DEFECT_SCRIBBLE, DEFECT_COLOR_SHIFT)


class DatasetLayoutError(ValueError):
    """Dataset directory is missing, incomplete or unreadable."""


@dataclass(frozen=True)
class DatasetSpec:
    root: Path
    category: str
    split: str = SPLIT_TRAIN
    resize: int = 256
    center_crop: int | None = 224

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))
        validate_name(self.category, "Category")
        if self.split not in VALID_SPLITS:
            raise ValueError(f"split must be one of {list(VALID_SPLITS)}, got {self.split!r}")
        if self.resize < 1:
            raise ValueError(f"resize must be >= 1, got {self.resize}")
        if self.center_crop is not None and not 1 <= self.center_crop <= self.resize:
            raise ValueError(
                f"center_crop must be in [1, resize={self.resize}], got {self.center_crop}"
            )

    @property
    def category_dir(self) -> Path:
        return self.root / self.category

    @property
    def output_size(self) -> int:
        return self.center_crop or self.resize


@dataclass(frozen=True)
class LabeledSample:
    image: ImageTensor
    label: str
    gt_mask: MaskImage
    image_id: str
    defect: str = GOOD_DIR

    def __post_init__(self) -> None:
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ValueError(f"label must be normal or anomalous, got {self.label!r}")
        self.gt_mask.check_matches(self.image)

    @property
    def is_anomalous(self) -> bool:
        return self.label == LABEL_ANOMALOUS


@dataclass
class SyntheticBenchmark:
    train: list[LabeledSample] = field(default_factory=list)
    test: list[LabeledSample] = field(default_factory=list)


def _center_crop(image: Image.Image, size: int) -> Image.Image:
    width, height = image.size
    left = (width - size) // 2
    top = (height - size) // 2
    return image.crop((left, top, left + size, top + size))


def preprocess_image(image: Image.Image, resize: int, center_crop: int | None) -> torch.Tensor:
    """RGB, bilinear resize to resize x resize, optional center crop; (3, H, W) in [0, 1]."""
    image = image.convert("RGB")
    if image.size != (resize, resize):
        image = image.resize((resize, resize), Image.BILINEAR)
    if center_crop is not None and center_crop != resize:
        image = _center_crop(image, center_crop)
    array = np.asarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def preprocess_mask(mask: Image.Image, resize: int, center_crop: int | None) -> torch.Tensor:
    """Nearest-neighbour resize, crop, then binarize at > 127."""
    mask = mask.convert("L")
    if mask.size != (resize, resize):
        mask = mask.resize((resize, resize), Image.NEAREST)
    if center_crop is not None and center_crop != resize:
        mask = _center_crop(mask, center_crop)
    return torch.from_numpy((np.asarray(mask) > MASK_THRESHOLD).astype(np.float32))


def _open(path: Path) -> Image.Image:
    try:
        with Image.open(path) as handle:
            handle.load()
            return handle.copy()
    except (OSError, UnidentifiedImageError) as ex:
        _LOGGER.error("Failed to read image %s: %s", path, ex)
        raise DatasetLayoutError(f"Unreadable image {path}: {ex}") from ex


def _image_files(directory: Path) -> list[Path]:
    return sorted(
        (p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )


def _find_mask(spec: DatasetSpec, defect: str, stem: str) -> Path:
    directory = spec.category_dir / GROUND_TRUTH_DIR / defect
    for suffix in IMAGE_SUFFIXES:
        candidate = directory / f"{stem}_mask{suffix}"
        if candidate.exists():
            return candidate
    raise DatasetLayoutError(f"Missing ground-truth mask for test/{defect}/{stem} in {directory}")


def load_dataset(spec: DatasetSpec) -> list[LabeledSample]:
    """Load one split of one category from an MVTec-style directory tree.

    Layout: <root>/<category>/train/good/*, <root>/<category>/test/<defect>/*,
    <root>/<category>/ground_truth/<defect>/<name>_mask.*. Samples are ordered
    lexicographically by path relative to the split directory.

    Raises:
        DatasetLayoutError: If a layout directory or a mask is missing, or an image is unreadable
    """
    split_dir = spec.category_dir / spec.split
    if not split_dir.is_dir():
        raise DatasetLayoutError(f"Dataset directory not found: {split_dir}")

    if spec.split == SPLIT_TRAIN:
        defects = [GOOD_DIR]
        if not (split_dir / GOOD_DIR).is_dir():
            raise DatasetLayoutError(f"Dataset directory not found: {split_dir / GOOD_DIR}")
    else:
        defects = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
        if not defects:
            raise DatasetLayoutError(f"No defect directories in {split_dir}")

    files = sorted(
        ((defect, path) for defect in defects for path in _image_files(split_dir / defect)),
        key=lambda item: f"{item[0]}/{item[1].name}",
    )
    samples: list[LabeledSample] = []
    for defect, path in files:
        validate_name(defect, "Defect type")
        image = preprocess_image(_open(path), spec.resize, spec.center_crop)
        if defect == GOOD_DIR:
            label = LABEL_NORMAL
            mask = torch.zeros(image.shape[1:])
        else:
            label = LABEL_ANOMALOUS
            mask_image = _open(_find_mask(spec, defect, path.stem))
            mask = preprocess_mask(mask_image, spec.resize, spec.center_crop)
        samples.append(
            LabeledSample(
                image=ImageTensor(image, RANGE_UNIT),
                label=label,
                gt_mask=MaskImage(mask),
                image_id=validate_name(f"{defect}_{path.stem}", "Image id"),
                defect=defect,
            )
        )
    _LOGGER.info(
        "Loaded %d %s samples for category %s from %s",
        len(samples),
        spec.split,
        spec.category,
        spec.root,
    )
    return samples


def stack_model_space(samples: list[LabeledSample]) -> torch.Tensor:
    """(N, C, H, W) batch of sample images in [-1, 1]."""
    if not samples:
        raise ValueError("No samples to stack")
    return to_model_space(torch.stack([s.image.data for s in samples]))


def _texture(rng: np.random.Generator, palette: np.ndarray, period: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = rng.uniform(-0.15, 0.15) + np.pi / 4
    phase = rng.uniform(0.0, 2.0 * np.pi)
    stripes = np.sin(2.0 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    channels = []
    for base in palette:
        grain = gaussian_filter(rng.standard_normal((size, size)), sigma=1.5)
        grain /= max(float(np.abs(grain).max()), 1e-12)
        channels.append(base + 0.12 * stripes + 0.08 * grain)
    return np.stack(channels)


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _draw_rectangle(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray) -> None:
    size = mask.shape[0]
    height = int(rng.integers(size // 10, size // 4 + 1))
    width = int(rng.integers(size // 10, size // 4 + 1))
    top = int(rng.integers(0, size - height + 1))
    left = int(rng.integers(0, size - width + 1))
    mean = image[:, top : top + height, left : left + width].mean(axis=(1, 2))
    color = np.where(mean > 0.5, mean - 0.4, mean + 0.4)
    image[:, top : top + height, left : left + width] = color[:, None, None]
    mask[top : top + height, left : left + width] = 1


def _draw_scribble(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray) -> None:
    size = mask.shape[0]
    row, col = (float(v) for v in rng.uniform(size * 0.25, size * 0.75, 2))
    heading = rng.uniform(0.0, 2.0 * np.pi)
    color = rng.uniform(0.0, 1.0, image.shape[0])
    for _ in range(int(size * 1.5)):
        heading += rng.normal(0.0, 0.4)
        row = float(np.clip(row + np.sin(heading), 0, size - 2))
        col = float(np.clip(col + np.cos(heading), 0, size - 2))
        r, c = int(row), int(col)
        mask[r : r + 2, c : c + 2] = 1
    image[:, mask.astype(bool)] = color[:, None]


def _draw_color_shift(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray) -> None:
    size = mask.shape[0]
    radius = rng.uniform(size / 10, size / 5)
    center = rng.uniform(radius, size - radius, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    region = (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2
    shift = rng.uniform(0.3, 0.45, image.shape[0])
    for channel in range(image.shape[0]):
        values = image[channel][region]
        raised = values + shift[channel]
        image[channel][region] = np.where(raised <= 1.0, raised, values - shift[channel])
    mask[region] = 1


_DEFECT_PAINTERS = {
    DEFECT_RECTANGLE: _draw_rectangle,
    DEFECT_SCRIBBLE: _draw_scribble,
    DEFECT_COLOR_SHIFT: _draw_color_shift,
}


def generate_synthetic(
    seed: int,
    n_train: int,
    n_test_normal: int,
    n_test_anomalous: int,
    size: int = 64,
) -> SyntheticBenchmark:
    """Deterministic procedural-texture benchmark with injected defects.

    Normal images share a palette and stripe period drawn from the seed; each image
    jitters stripe angle and phase and gets its own smoothed grain. Anomalous images
    are fresh normal images with one rectangle, scribble or colour-shift defect
    (cycled in that order) and an exact ground-truth mask. Pixel values are quantized
    to multiples of 1/255 so the set survives a PNG round trip unchanged.
    """
    if n_train < 1 or n_test_normal < 1 or n_test_anomalous < 0:
        raise ValueError("n_train and n_test_normal must be >= 1 and n_test_anomalous >= 0")
    if size < MIN_SYNTHETIC_SIZE:
        raise ValueError(f"size must be >= {MIN_SYNTHETIC_SIZE}, got {size}")

    category_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    palette = category_rng.uniform(0.3, 0.7, 3)
    period = float(category_rng.uniform(size / 8, size / 4))

    def image_rng(group: int, index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(group, index)))

    def normal_sample(group: int, index: int, image_id: str) -> LabeledSample:
        image = _quantize(_texture(image_rng(group, index), palette, period, size))
        return LabeledSample(
            image=ImageTensor(torch.from_numpy(image.astype(np.float32)), RANGE_UNIT),
            label=LABEL_NORMAL,
            gt_mask=MaskImage.zeros(size, size),
            image_id=image_id,
        )

    benchmark = SyntheticBenchmark()
    benchmark.train = [normal_sample(1, i, f"{GOOD_DIR}_{i:03d}") for i in range(n_train)]
    benchmark.test = [normal_sample(2, i, f"{GOOD_DIR}_{i:03d}") for i in range(n_test_normal)]

    for index in range(n_test_anomalous):
        rng = image_rng(3, index)
        defect = DEFECT_TYPES[index % len(DEFECT_TYPES)]
        image = _texture(rng, palette, period, size)
        mask = np.zeros((size, size), dtype=np.float32)
        _DEFECT_PAINTERS[defect](rng, image, mask)
        if mask.mean() > MAX_DEFECT_FRACTION:
            raise RuntimeError(f"Defect {defect} covers {mask.mean():.2%} of the image")
        benchmark.test.append(
            LabeledSample(
                image=ImageTensor(torch.from_numpy(_quantize(image).astype(np.float32)), RANGE_UNIT),
                label=LABEL_ANOMALOUS,
                gt_mask=MaskImage(torch.from_numpy(mask)),
                image_id=f"{defect}_{index:03d}",
                defect=defect,
            )
        )
    _LOGGER.info(
        "Generated synthetic benchmark: %d train, %d test (%d anomalous), %dx%d",
        n_train,
        n_test_normal + n_test_anomalous,
        n_test_anomalous,
        size,
        size,
    )
    return benchmark


def _save_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.parent.chmod(PERM_DIR)
    Image.fromarray(array).save(path)
    path.chmod(PERM_FILE)


def write_mvtec_layout(benchmark: SyntheticBenchmark, root: Path, category: str) -> Path:
    """Write a benchmark as <root>/<category>/{train,test,ground_truth}/... PNG files."""
    validate_name(category, "Category")
    category_dir = Path(root) / category
    for split, samples in ((SPLIT_TRAIN, benchmark.train), (SPLIT_TEST, benchmark.test)):
        for sample in samples:
            stem = sample.image_id.removeprefix(f"{sample.defect}_")
            pixels = np.round(sample.image.data.permute(1, 2, 0).numpy() * 255.0).astype(np.uint8)
            _save_png(pixels, category_dir / split / sample.defect / f"{stem}.png")
            if sample.is_anomalous:
                mask = (sample.gt_mask.data.numpy() * 255).astype(np.uint8)
                _save_png(mask, category_dir / GROUND_TRUTH_DIR / sample.defect / f"{stem}_mask.png")
    _LOGGER.info("Wrote synthetic benchmark for %s under %s", category, category_dir)
    return category_dir
