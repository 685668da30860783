"""Directory datasets of 8-bit rasters with filename-paired index masks.

Layout::

    root/images/<stem>.png|ppm|pgm|tif|tiff|jpg
    root/labels/<stem>.png        (optional, pixel value = class index)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from ..errors import DimensionError, IngestionError, ValidationError

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp"}
DOMAINS = ("source", "target")


@dataclass
class PairedSample:
    """One image (``(C, H, W)`` float32 in [-1, 1]) and its optional ``(H, W)`` label."""

    image: np.ndarray
    label: Optional[np.ndarray]
    name: str

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.image.shape[1:]:
            raise DimensionError(
                f"{self.name}: image {self.image.shape[1:]} and label {self.label.shape} differ"
            )


@dataclass
class ImageBatch:
    data: torch.Tensor
    domain_tag: str = "source"


@dataclass
class MaskBatch:
    labels: torch.Tensor
    num_classes: int


def to_unit_range(raster: np.ndarray) -> np.ndarray:
    """uint8 raster -> float32 in [-1, 1]."""
    return raster.astype(np.float32) / 127.5 - 1.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _read_raster(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if mode == "label":
                if im.mode not in ("L", "P", "I", "I;16", "1"):
                    im = im.convert("L")
                return np.asarray(im).astype(np.int64)
            return np.asarray(im.convert(mode))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode {path}: {exc}") from exc


def load_directory_dataset(root, channels: int, num_classes: int, with_labels: bool = True) -> list[PairedSample]:
    """Load every image under ``root/images`` in lexicographic order.

    ``num_classes`` counts label values including background (2 for binary).
    Images without a matching ``labels/<stem>.png`` come back with ``label=None``.
    With ``with_labels=False`` the labels directory is never opened.
    """
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise IngestionError(f"{root} has no images/ directory")
    if channels not in (1, 3):
        raise ValidationError(f"channels must be 1 or 3, got {channels}")
    mode = "L" if channels == 1 else "RGB"
    label_dir = root / "labels"
    labels = {}
    if with_labels and label_dir.is_dir():
        labels = {p.stem: p for p in label_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}

    samples = []
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        raster = _read_raster(path, mode)
        if raster.ndim == 2:
            raster = raster[..., None]
        image = to_unit_range(raster).transpose(2, 0, 1).copy()
        label = None
        if path.stem in labels:
            label = _read_raster(labels[path.stem], "label")
            if label.max(initial=0) >= num_classes:
                raise ValidationError(
                    f"{labels[path.stem]}: mask value {label.max()} >= num_classes {num_classes}"
                )
        samples.append(PairedSample(image, label, path.stem))
    return samples


def save_directory_dataset(samples: Sequence[PairedSample], root) -> Path:
    """Write samples as PNG images (and labels where present) under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if any(s.label is not None for s in samples):
        (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        raster = to_uint8(s.image).transpose(1, 2, 0)
        if raster.shape[2] == 1:
            raster = raster[..., 0]
        Image.fromarray(raster).save(root / "images" / f"{s.name}.png")
        if s.label is not None:
            Image.fromarray(s.label.astype(np.uint8), mode="L").save(root / "labels" / f"{s.name}.png")
    return root


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def epoch_order(n: int, shuffle_seed: Optional[int], epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iterator(
    dataset: Sequence[PairedSample],
    batch_size: int,
    shuffle_seed: Optional[int] = 0,
    epoch: int = 0,
    *,
    with_labels: bool = True,
    domain: str = "source",
    num_classes: int = 2,
    limit: Optional[int] = None,
) -> Iterator[tuple[ImageBatch, Optional[MaskBatch]]]:
    """Yield ``ceil(N / batch_size)`` batches; the last one may be partial.

    Order is a deterministic function of ``(shuffle_seed, epoch)``;
    ``shuffle_seed=None`` keeps dataset order. ``with_labels=False`` never
    touches sample labels. ``limit`` truncates the epoch to that many samples.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if domain not in DOMAINS:
        raise ValidationError(f"domain must be one of {DOMAINS}")
    order = epoch_order(len(dataset), shuffle_seed, epoch)
    if limit is not None:
        order = order[:limit]
    for start in range(0, len(order), batch_size):
        chosen = [dataset[i] for i in order[start:start + batch_size]]
        images = ImageBatch(torch.from_numpy(np.stack([s.image for s in chosen])), domain)
        masks = None
        if with_labels:
            if any(s.label is None for s in chosen):
                missing = next(s.name for s in chosen if s.label is None)
                raise ValidationError(f"sample {missing} has no label")
            masks = MaskBatch(torch.from_numpy(np.stack([s.label for s in chosen])).long(), num_classes)
        yield images, masks
