"""Procedural two-domain segmentation data.

Both domains share the same geometry per sample index; they differ only by a
fixed appearance shift applied to the domain-A rendering::

    b = offset + scale * a + texture(x, y)

with a smooth per-sample background texture. The shift is exactly invertible
given the sample's texture, so ``invert_shift`` recovers domain A up to 8-bit
quantization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from ..errors import ValidationError

# intensity range of the domain-A rendering, before the shift
A_RANGE = (0.1, 0.9)


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    splits: dict = field(default_factory=lambda: {"train": 40, "adapt": 40, "test": 40})
    foreground_classes: int = 1
    channels: int = 3
    seed: int = 0
    remap_scale: float = -0.75
    remap_offset: float = 0.85
    texture_amplitude: float = 0.07
    texture_sigma: float = 4.0
    blur_sigma: float = 0.6
    vessel_width: int = 3

    def __post_init__(self):
        problems = []
        if self.image_size < 16 or self.image_size % 4:
            problems.append("image_size must be >= 16 and divisible by 4")
        if self.foreground_classes not in (1, 2):
            problems.append("foreground_classes must be 1 (vessels) or 2 (disk + ring)")
        if self.channels not in (1, 3):
            problems.append("channels must be 1 or 3")
        if not self.splits or any(int(n) < 0 for n in self.splits.values()):
            problems.append("splits must map names to non-negative counts")
        if abs(self.remap_scale) < 0.5:
            problems.append("|remap_scale| must be >= 0.5 to keep the shift invertible at 8 bits")
        lo = self.remap_offset + min(self.remap_scale * v for v in A_RANGE) - self.texture_amplitude
        hi = self.remap_offset + max(self.remap_scale * v for v in A_RANGE) + self.texture_amplitude
        if lo < 0 or hi > 1:
            problems.append(f"shift maps intensities to [{lo:.3f}, {hi:.3f}], outside [0, 1]")
        if self.texture_amplitude < 0 or self.vessel_width < 1:
            problems.append("texture_amplitude must be >= 0 and vessel_width >= 1")
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def num_label_classes(self) -> int:
        return self.foreground_classes + 1

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"invalid synthetic spec: {exc}") from exc


def _rng(spec: SyntheticSpec, split: str, k: int, stream: int) -> np.random.Generator:
    split_id = sorted(spec.splits).index(split)
    return np.random.default_rng([spec.seed, split_id, k, stream])


def _vessel_mask(spec: SyntheticSpec, rng) -> np.ndarray:
    n = spec.image_size
    canvas = Image.new("L", (n, n), 0)
    draw = ImageDraw.Draw(canvas)
    paths = []
    step = n / 18
    for c in range(int(rng.integers(3, 6))):
        if c == 0 or rng.random() < 0.3:
            # enter from a random border point, heading inwards
            side = rng.integers(4)
            t = rng.uniform(0.15, 0.85) * n
            pos = [(t, 0.0), (n - 1.0, t), (t, n - 1.0), (0.0, t)][side]
            heading = [np.pi / 2, np.pi, -np.pi / 2, 0.0][side] + rng.normal(0, 0.4)
        else:
            parent = paths[int(rng.integers(len(paths)))]
            pos = parent[int(rng.integers(len(parent)))]
            heading = rng.uniform(0, 2 * np.pi)
        pts = [pos]
        for _ in range(int(rng.integers(10, 22))):
            heading += rng.normal(0, 0.35)
            pos = (pos[0] + step * np.cos(heading), pos[1] + step * np.sin(heading))
            pts.append(pos)
        paths.append(pts)
        draw.line(pts, fill=1, width=spec.vessel_width, joint="curve")
    return np.asarray(canvas, dtype=np.int64)


def _cardiac_mask(spec: SyntheticSpec, rng) -> np.ndarray:
    n = spec.image_size
    s = n / 64
    r_in = rng.uniform(7, 13) * s
    thick = rng.uniform(3, 6) * s
    margin = r_in + thick + 2
    cy, cx = rng.uniform(margin, n - margin, size=2)
    ecc = rng.uniform(0.8, 1.25)
    yy, xx = np.mgrid[0:n, 0:n]
    d = np.sqrt(((yy - cy) * ecc) ** 2 + ((xx - cx) / ecc) ** 2)
    mask = np.zeros((n, n), dtype=np.int64)
    mask[d <= r_in + thick] = 2
    mask[d <= r_in] = 1
    return mask


def _palette(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    if spec.channels == 1:
        return np.array([0.2]), np.array([0.85])
    return np.array([0.75, 0.40, 0.20]), np.array([0.25, 0.15, 0.80])


def render_domain_a(spec: SyntheticSpec, mask: np.ndarray, rng) -> np.ndarray:
    """Domain-A image in [0, 1], ``(C, H, W)``, quantized to 8-bit levels."""
    level = {0: 0.0, 1: 1.0, 2: 0.5}
    structure = np.vectorize(level.get, otypes=[float])(mask) if spec.foreground_classes == 2 else mask.astype(float)
    structure = gaussian_filter(structure, spec.blur_sigma)
    bg, fg = _palette(spec)
    img = bg[:, None, None] + (fg - bg)[:, None, None] * structure[None]
    noise = gaussian_filter(rng.normal(size=mask.shape), 1.5)
    img = img + 0.03 * noise / (np.abs(noise).max() + 1e-12)
    img = np.clip(img, *A_RANGE)
    return np.rint(img * 255) / 255


def texture_field(spec: SyntheticSpec, split: str, k: int) -> np.ndarray:
    """Smooth background texture added in domain B, ``(H, W)`` in [-amp, amp]."""
    rng = _rng(spec, split, k, stream=2)
    t = gaussian_filter(rng.normal(size=(spec.image_size,) * 2), spec.texture_sigma)
    return spec.texture_amplitude * t / (np.abs(t).max() + 1e-12)


def apply_shift(spec: SyntheticSpec, a: np.ndarray, texture: np.ndarray) -> np.ndarray:
    return spec.remap_offset + spec.remap_scale * a + texture[None]


def invert_shift(spec: SyntheticSpec, b: np.ndarray, texture: np.ndarray) -> np.ndarray:
    return (b - texture[None] - spec.remap_offset) / spec.remap_scale


def render_sample(spec: SyntheticSpec, split: str, k: int):
    """Return ``(mask, image_a, image_b)`` with images as uint8 ``(H, W, C)``."""
    rng = _rng(spec, split, k, stream=1)
    mask = _vessel_mask(spec, rng) if spec.foreground_classes == 1 else _cardiac_mask(spec, rng)
    a = render_domain_a(spec, mask, rng)
    b = apply_shift(spec, a, texture_field(spec, split, k))
    to8 = lambda x: np.clip(np.rint(x * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return mask, to8(a), to8(b)


def _save(raster: np.ndarray, path: Path) -> None:
    if raster.ndim == 3 and raster.shape[2] == 1:
        raster = raster[..., 0]
    Image.fromarray(raster).save(path)


def generate_synthetic_domains(spec: SyntheticSpec, root) -> dict:
    """Write ``root/{A,B}/<split>/{images,labels}`` and ``root/manifest.json``.

    Returns the manifest. Sample ``k`` of a split has the same mask in both
    domains. Output is byte-identical for identical specs.
    """
    root = Path(root)
    for split, count in sorted(spec.splits.items()):
        for dom in ("A", "B"):
            for sub in ("images", "labels"):
                (root / dom / split / sub).mkdir(parents=True, exist_ok=True)
        for k in range(int(count)):
            mask, a, b = render_sample(spec, split, k)
            stem = f"{split}_{k:04d}"
            for dom, img in (("A", a), ("B", b)):
                _save(img, root / dom / split / "images" / f"{stem}.png")
                _save(mask.astype(np.uint8), root / dom / split / "labels" / f"{stem}.png")
    manifest = {
        "spec": asdict(spec),
        "seed": spec.seed,
        "num_label_classes": spec.num_label_classes,
        "domains": {dom: {split: str(Path(dom) / split) for split in sorted(spec.splits)}
                    for dom in ("A", "B")},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
