"""Generators, discriminators and segmenters, plus checkpoint I/O."""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

SEGMENTER_KINDS = ("attention_unet", "nested_unet")


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 3
    num_classes: int = 1
    segmenter_kind: str = "attention_unet"
    base_width: int = 64
    generator_blocks: int = 9
    init_seed: int = 0
    # not part of the capacity contract, but needed to size the networks
    disc_layers: int = 3
    segmenter_depth: int = 4

    def __post_init__(self):
        if self.image_channels < 1:
            raise ValidationError("image_channels must be >= 1")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.base_width < 4:
            raise ValidationError("base_width must be >= 4")
        if self.generator_blocks < 1:
            raise ValidationError("generator_blocks must be >= 1")
        if self.segmenter_kind not in SEGMENTER_KINDS:
            raise ValidationError(
                f"unknown segmenter_kind {self.segmenter_kind!r}; expected one of {SEGMENTER_KINDS}"
            )
        if self.disc_layers < 1 or self.segmenter_depth < 2:
            raise ValidationError("disc_layers must be >= 1 and segmenter_depth >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- #
# Generator
# --------------------------------------------------------------------------- #


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3, bias=False),
            nn.InstanceNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3, bias=False),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Residual encoder-decoder image translator with tanh output.

    7x7 stem, two stride-2 downsampling convolutions, ``n_blocks`` residual
    blocks, two transposed-convolution upsampling stages and a 7x7 output conv.
    """

    downsampling = 4

    def __init__(self, channels: int, width: int = 64, n_blocks: int = 9):
        super().__init__()
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(channels, width, 7, bias=False),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
        ]
        ch = width
        for _ in range(2):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1, bias=False),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1, bias=False),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.downsampling or w % self.downsampling:
            raise DimensionError(
                f"generator input {h}x{w} must be divisible by {self.downsampling}"
            )
        return self.model(x)


# --------------------------------------------------------------------------- #
# Discriminator
# --------------------------------------------------------------------------- #


class PatchDiscriminator(nn.Module):
    """Patch-level real/fake scorer; 70x70 receptive field with ``n_layers=3``.

    Output is an unbounded score grid, fed to the least-squares loss directly.
    """

    def __init__(self, channels: int, width: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        ch = width
        for n in range(1, n_layers + 1):
            out = width * min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers += [
                nn.Conv2d(ch, out, 4, stride=stride, padding=1, bias=False),
                nn.InstanceNorm2d(out),
                nn.LeakyReLU(0.2, True),
            ]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        self.n_layers = n_layers

    def output_size(self, size: int) -> int:
        """Spatial extent of the score grid for an input of extent ``size``."""
        for m in self.model:
            if isinstance(m, nn.Conv2d):
                size = (size + 2 * m.padding[0] - m.kernel_size[0]) // m.stride[0] + 1
        return size

    def forward(self, x):
        h, w = x.shape[-2:]
        if self.output_size(h) < 1 or self.output_size(w) < 1:
            raise DimensionError(f"discriminator input {h}x{w} is too small for {self.n_layers} layers")
        return self.model(x)


# --------------------------------------------------------------------------- #
# Segmenters
# --------------------------------------------------------------------------- #


def _norm(ch: int) -> nn.GroupNorm:
    # one group per channel: batch-independent, and every channel is centred so a
    # following ReLU cannot silence it for a whole image
    return nn.GroupNorm(ch, ch)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class AttentionGate(nn.Module):
    """Additive attention: gates skip features ``x`` by coefficients from ``g``."""

    def __init__(self, g_ch: int, x_ch: int, inter_ch: int):
        super().__init__()
        self.W_g = nn.Sequential(nn.Conv2d(g_ch, inter_ch, 1, bias=False), _norm(inter_ch))
        self.W_x = nn.Sequential(nn.Conv2d(x_ch, inter_ch, 1, bias=False), _norm(inter_ch))
        self.psi = nn.Conv2d(inter_ch, 1, 1)

    def forward(self, g, x):
        a = F.relu(self.W_g(g) + self.W_x(x))
        return x * torch.sigmoid(self.psi(a))


def _up(x, like):
    # size-matched upsampling handles inputs not divisible by 2**depth (e.g. 364)
    return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)


def _to_probs(logits: torch.Tensor) -> torch.Tensor:
    if logits.shape[1] == 1:
        return torch.sigmoid(logits)
    return torch.softmax(logits, dim=1)


class AttentionUNet(nn.Module):
    def __init__(self, in_ch: int, num_classes: int, width: int = 64, depth: int = 4):
        super().__init__()
        widths = [width * 2 ** i for i in range(depth)]
        self.encoders = nn.ModuleList()
        prev = in_ch
        for w in widths:
            self.encoders.append(ConvBlock(prev, w))
            prev = w
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(depth - 1)):
            lo, hi = widths[i], widths[i + 1]
            self.ups.append(nn.Sequential(nn.Conv2d(hi, lo, 3, padding=1, bias=False), _norm(lo), nn.ReLU(True)))
            self.gates.append(AttentionGate(lo, lo, max(lo // 2, 1)))
            self.decoders.append(ConvBlock(2 * lo, lo))
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def logits(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for up, gate, dec in zip(self.ups, self.gates, self.decoders):
            skip = skips.pop()
            g = up(_up(x, skip))
            x = dec(torch.cat([gate(g, skip), g], dim=1))
        return self.head(x)

    def forward(self, x):
        return _to_probs(self.logits(x))


class NestedUNet(nn.Module):
    """U-Net++ with dense nested skip pathways and a single output head."""

    def __init__(self, in_ch: int, num_classes: int, width: int = 32, depth: int = 5):
        super().__init__()
        self.depth = depth
        widths = [width * 2 ** i for i in range(depth)]
        self.nodes = nn.ModuleDict()
        for j in range(depth):
            for i in range(depth - j):
                if j == 0:
                    cin = in_ch if i == 0 else widths[i - 1]
                else:
                    cin = widths[i] * j + widths[i + 1]
                self.nodes[f"{i}_{j}"] = ConvBlock(cin, widths[i])
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def logits(self, x):
        out = {}
        for i in range(self.depth):
            inp = x if i == 0 else F.max_pool2d(out[(i - 1, 0)], 2)
            out[(i, 0)] = self.nodes[f"{i}_0"](inp)
        for j in range(1, self.depth):
            for i in range(self.depth - j):
                same = [out[(i, k)] for k in range(j)]
                below = _up(out[(i + 1, j - 1)], same[0])
                out[(i, j)] = self.nodes[f"{i}_{j}"](torch.cat(same + [below], dim=1))
        return self.head(out[(0, self.depth - 1)])

    def forward(self, x):
        return _to_probs(self.logits(x))


# --------------------------------------------------------------------------- #
# Builders
# --------------------------------------------------------------------------- #


def build_generator(cfg: ModelConfig) -> ResnetGenerator:
    return ResnetGenerator(cfg.image_channels, cfg.base_width, cfg.generator_blocks)


def build_discriminator(cfg: ModelConfig) -> PatchDiscriminator:
    return PatchDiscriminator(cfg.image_channels, cfg.base_width, cfg.disc_layers)


def build_segmenter(cfg: ModelConfig) -> nn.Module:
    if cfg.segmenter_kind == "attention_unet":
        return AttentionUNet(cfg.image_channels, cfg.num_classes, cfg.base_width, cfg.segmenter_depth)
    if cfg.segmenter_kind == "nested_unet":
        return NestedUNet(cfg.image_channels, cfg.num_classes, cfg.base_width, cfg.segmenter_depth)
    raise ValidationError(f"unknown segmenter_kind {cfg.segmenter_kind!r}")


@dataclass
class ModelBundle:
    """The five networks trained jointly. ``U`` is ``None`` for a plain Cycle-GAN."""

    G: nn.Module
    F: nn.Module
    D_X: nn.Module
    D_Y: nn.Module
    U: Optional[nn.Module] = None

    def named_modules(self) -> Iterator[tuple[str, nn.Module]]:
        for name in ("G", "F", "D_X", "D_Y", "U"):
            m = getattr(self, name)
            if m is not None:
                yield name, m

    def to(self, device) -> "ModelBundle":
        for _, m in self.named_modules():
            m.to(device)
        return self

    def state_dict(self) -> dict:
        return {name: m.state_dict() for name, m in self.named_modules()}

    def load_state_dict(self, state: dict) -> None:
        names = {n for n, _ in self.named_modules()}
        if set(state) != names:
            raise ValidationError(f"checkpoint holds {sorted(state)}, bundle has {sorted(names)}")
        for name, m in self.named_modules():
            m.load_state_dict(state[name])


def init_weights(module, seed: int):
    """Gaussian(0, 0.02) convolution weights and zero biases, seeded.

    Accepts a ``ModelBundle`` or a single module and returns it.
    """
    gen = torch.Generator().manual_seed(seed)
    modules = [m for _, m in module.named_modules()] if isinstance(module, ModelBundle) else [module]
    with torch.no_grad():
        for root in modules:
            for m in root.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                    if m.bias is not None:
                        m.bias.zero_()
    return module


def build_bundle(cfg: ModelConfig, with_segmenter: bool = True) -> ModelBundle:
    bundle = ModelBundle(
        G=build_generator(cfg),
        F=build_generator(cfg),
        D_X=build_discriminator(cfg),
        D_Y=build_discriminator(cfg),
        U=build_segmenter(cfg) if with_segmenter else None,
    )
    return init_weights(bundle, cfg.init_seed)


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #


def save_checkpoint(path, state: dict, model_cfg: ModelConfig, epoch: int, **extra) -> Path:
    """Write ``{model_config, epoch, state, ...}`` atomically (write then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"model_config": model_cfg.to_dict(), "epoch": epoch, "state": state, **extra}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_checkpoint(path, expected_cfg: Optional[ModelConfig] = None) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    stored = ModelConfig.from_dict(payload["model_config"])
    if expected_cfg is not None and stored != expected_cfg:
        raise ValidationError(
            f"checkpoint {path} was written for {stored}, which does not match {expected_cfg}"
        )
    payload["model_config"] = stored
    return payload
