"""Resize and crop operations shared by images and their label maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import DimensionError, ValidationError
from .dataset import PairedSample

CROP_KINDS = ("random", "center", "quadrant_tile")


@dataclass(frozen=True)
class CropSpec:
    crop_kind: str
    crop_size: tuple[int, int]
    resize_to: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.crop_kind not in CROP_KINDS:
            raise ValidationError(f"crop_kind must be one of {CROP_KINDS}, got {self.crop_kind!r}")
        object.__setattr__(self, "crop_size", tuple(int(v) for v in self.crop_size))
        if self.resize_to is not None:
            object.__setattr__(self, "resize_to", tuple(int(v) for v in self.resize_to))
            if any(c > r for c, r in zip(self.crop_size, self.resize_to)):
                raise ValidationError(f"crop {self.crop_size} exceeds resize target {self.resize_to}")
        if min(self.crop_size) < 1:
            raise ValidationError("crop_size must be positive")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> Optional["CropSpec"]:
        if d is None:
            return None
        return cls(d["crop_kind"], tuple(d["crop_size"]),
                   tuple(d["resize_to"]) if d.get("resize_to") else None)

    def to_dict(self) -> dict:
        return {"crop_kind": self.crop_kind, "crop_size": list(self.crop_size),
                "resize_to": list(self.resize_to) if self.resize_to else None}


def resize(sample: PairedSample, size: tuple[int, int]) -> PairedSample:
    """Bilinear for the image, nearest-neighbour for the label."""
    if tuple(sample.image.shape[1:]) == tuple(size):
        return sample
    img = torch.from_numpy(sample.image)[None]
    img = F.interpolate(img, size=size, mode="bilinear", align_corners=False, antialias=True)
    image = img[0].clamp(-1, 1).numpy()
    label = None
    if sample.label is not None:
        lab = torch.from_numpy(sample.label)[None, None].float()
        label = F.interpolate(lab, size=size, mode="nearest-exact")[0, 0].long().numpy()
    return PairedSample(image, label, sample.name)


def crop_at(sample: PairedSample, top: int, left: int, size: tuple[int, int], name=None) -> PairedSample:
    h, w = size
    image = sample.image[:, top:top + h, left:left + w].copy()
    label = None if sample.label is None else sample.label[top:top + h, left:left + w].copy()
    return PairedSample(image, label, name or sample.name)


def crop_offsets(spec: CropSpec, height: int, width: int, rng_seed: int = 0) -> list[tuple[int, int]]:
    ch, cw = spec.crop_size
    if ch > height or cw > width:
        raise DimensionError(f"crop {ch}x{cw} is larger than image {height}x{width}")
    if spec.crop_kind == "center":
        return [((height - ch) // 2, (width - cw) // 2)]
    if spec.crop_kind == "random":
        rng = np.random.default_rng(rng_seed)
        return [(int(rng.integers(0, height - ch + 1)), int(rng.integers(0, width - cw + 1)))]
    # four corner-anchored tiles; they overlap when 2*crop > image
    return [(0, 0), (0, width - cw), (height - ch, 0), (height - ch, width - cw)]


def apply_crop(sample: PairedSample, spec: Optional[CropSpec], rng_seed: int = 0) -> list[PairedSample]:
    """Resize (optional) then crop. Quadrant tiling yields 4 patches, other kinds 1.

    ``spec=None`` is a no-op returning ``[sample]``.
    """
    if spec is None:
        return [sample]
    if spec.resize_to is not None:
        sample = resize(sample, spec.resize_to)
    _, h, w = sample.image.shape
    offsets = crop_offsets(spec, h, w, rng_seed)
    if spec.crop_kind == "quadrant_tile":
        return [crop_at(sample, t, l, spec.crop_size, f"{sample.name}_q{k}")
                for k, (t, l) in enumerate(offsets)]
    (t, l), = offsets
    return [crop_at(sample, t, l, spec.crop_size)]


def crop_dataset(samples, spec: Optional[CropSpec], seed: int = 0) -> list[PairedSample]:
    out = []
    for i, s in enumerate(samples):
        out.extend(apply_crop(s, spec, rng_seed=seed + i))
    return out
