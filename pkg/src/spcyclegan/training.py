"""SP Cycle-GAN training, dataset translation and downstream segmenter training."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data.dataset import PairedSample, batch_iterator, save_directory_dataset, to_uint8, to_unit_range
from .data.transforms import CropSpec, apply_crop
from .errors import DimensionError, TrainingError, ValidationError
from .losses import (
    LossConfig,
    cycle_loss,
    focal_tversky_loss,
    lsgan_loss,
    num_label_classes,
    sp_generator_objective,
    structure_loss,
)
from .models import (
    ModelBundle,
    ModelConfig,
    build_bundle,
    build_segmenter,
    init_weights,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

GAN_BETAS = (0.5, 0.999)
SEG_BETAS = (0.9, 0.999)
# offset separating the target-domain shuffle stream from the source stream
_TARGET_STREAM = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 200
    anneal_start_epoch: int = 150
    lr_gan: float = 2e-4
    lr_seg: float = 1e-3
    batch_size: int = 2
    buffer_capacity: int = 50
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 0  # 0 writes only the final checkpoint

    def __post_init__(self):
        if not 0 < self.anneal_start_epoch <= self.total_epochs:
            raise ValidationError("need 0 < anneal_start_epoch <= total_epochs")
        if self.lr_gan <= 0 or self.lr_seg <= 0:
            raise ValidationError("learning rates must be positive")
        if self.buffer_capacity < 1:
            raise ValidationError("buffer_capacity must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ValidationError("checkpoint_every must be >= 0")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(cfg: TrainConfig, base_lr: float, epoch: int) -> float:
    """Constant ``base_lr`` until ``anneal_start_epoch``, then linear decay towards 0.

    The rate would reach exactly 0 at ``epoch == total_epochs``, one past the
    last trained epoch.
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.anneal_start_epoch:
        return base_lr
    return base_lr * (cfg.total_epochs - epoch) / (cfg.total_epochs - cfg.anneal_start_epoch)


def set_deterministic(seed: int, strict: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if strict:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


# --------------------------------------------------------------------------- #
# Replay buffer
# --------------------------------------------------------------------------- #


class ReplayBuffer:
    """Pool of past generated images shown to a discriminator.

    Below capacity every image is stored and returned as is. At capacity each
    query returns the fresh image with probability 0.5, otherwise a uniformly
    chosen stored image, which the fresh one then replaces.
    """

    def __init__(self, capacity: int = 50, rng: Optional[random.Random] = None):
        if capacity < 1:
            raise ValidationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.stored: list[torch.Tensor] = []
        self.rng = rng or random.Random(0)
        self.swaps = 0

    def __len__(self):
        return len(self.stored)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        """Apply ``replay_sample`` to each image of a ``(B, C, H, W)`` batch."""
        out = [replay_sample(self, img, self.rng) for img in images.detach()]
        return torch.stack(out)


def replay_sample(buffer: ReplayBuffer, fresh: torch.Tensor, rng) -> torch.Tensor:
    fresh = fresh.detach()
    if len(buffer.stored) < buffer.capacity:
        buffer.stored.append(fresh.clone())
        return fresh
    if rng.random() < 0.5:
        return fresh
    idx = rng.randrange(buffer.capacity)
    old = buffer.stored[idx]
    buffer.stored[idx] = fresh.clone()
    buffer.swaps += 1
    return old


# --------------------------------------------------------------------------- #
# One SP Cycle-GAN iteration
# --------------------------------------------------------------------------- #


@dataclass
class IterationRecord:
    epoch: int
    step: int
    adv_G: float
    adv_F: float
    d_x: float
    d_y: float
    cyc_X: float
    cyc_Y: float
    struct: float
    total: float
    lr_gan: float
    lr_seg: float

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizers(bundle: ModelBundle, cfg: TrainConfig) -> dict:
    opts = {
        "gen": torch.optim.Adam(list(bundle.G.parameters()) + list(bundle.F.parameters()),
                                lr=cfg.lr_gan, betas=GAN_BETAS),
        "disc": torch.optim.Adam(list(bundle.D_X.parameters()) + list(bundle.D_Y.parameters()),
                                 lr=cfg.lr_gan, betas=GAN_BETAS),
    }
    if bundle.U is not None:
        opts["seg"] = torch.optim.Adam(bundle.U.parameters(), lr=cfg.lr_seg, betas=SEG_BETAS)
    return opts


def make_buffers(cfg: TrainConfig) -> dict:
    return {
        "X": ReplayBuffer(cfg.buffer_capacity, random.Random(cfg.seed * 2)),
        "Y": ReplayBuffer(cfg.buffer_capacity, random.Random(cfg.seed * 2 + 1)),
    }


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _scalar(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def _check_finite(values: dict) -> None:
    for name, v in values.items():
        if not torch.isfinite(v).all():
            raise TrainingError(f"non-finite {name} loss ({_scalar(v)}); training aborted")


def train_step(
    bundle: ModelBundle,
    batch_src: tuple[torch.Tensor, Optional[torch.Tensor]],
    batch_tgt: torch.Tensor,
    cfg: TrainConfig,
    buffers: dict,
    optimizers: dict,
    *,
    epoch: int = 0,
    step: int = 0,
) -> IterationRecord:
    """One joint generator+segmenter update followed by one discriminator update.

    ``batch_src`` is ``(x, label)``; ``batch_tgt`` is the unlabelled target images.
    When ``bundle.U`` is None the structure term is absent from the graph and
    the step is a plain Cycle-GAN step.
    """
    x, label = batch_src
    y = batch_tgt
    lcfg = cfg.loss
    G, F_, D_X, D_Y, U = bundle.G, bundle.F, bundle.D_X, bundle.D_Y, bundle.U
    if U is not None and label is None:
        raise ValidationError("source batch must be labelled for the structure loss")

    # generator + segmenter phase; discriminators frozen
    _requires_grad([D_X, D_Y], False)
    optimizers["gen"].zero_grad(set_to_none=True)
    if U is not None:
        optimizers["seg"].zero_grad(set_to_none=True)

    fake_y = G(x)
    rec_x = F_(fake_y)
    fake_x = F_(y)
    rec_y = G(fake_x)
    parts = {
        "adv_G": lsgan_loss(D_Y(fake_y), True),
        "adv_F": lsgan_loss(D_X(fake_x), True),
        "cyc_X": cycle_loss(x, rec_x),
        "cyc_Y": cycle_loss(y, rec_y),
    }
    if U is not None:
        parts["struct"] = structure_loss(U(rec_x), label, lcfg)
        total = sp_generator_objective(parts, lcfg)
    else:
        struct_free = dict(parts, struct=0.0)
        total = sp_generator_objective(struct_free, lcfg)
        parts["struct"] = torch.zeros((), dtype=x.dtype)
    _check_finite(dict(parts, total=total))

    gen_params = [p for m in (G, F_) for p in m.parameters()]
    # zeta-weighted structure gradients reach G and F through `total`;
    # the segmenter is trained on the unweighted structure loss
    total.backward(inputs=gen_params, retain_graph=U is not None)
    if U is not None:
        parts["struct"].backward(inputs=list(U.parameters()))
        optimizers["seg"].step()
    optimizers["gen"].step()

    # discriminator phase; generator outputs detached
    _requires_grad([D_X, D_Y], True)
    optimizers["disc"].zero_grad(set_to_none=True)
    pooled_y = buffers["Y"].query(fake_y)
    pooled_x = buffers["X"].query(fake_x)
    d_y = 0.5 * (lsgan_loss(D_Y(y), True) + lsgan_loss(D_Y(pooled_y), False))
    d_x = 0.5 * (lsgan_loss(D_X(x), True) + lsgan_loss(D_X(pooled_x), False))
    _check_finite({"d_x": d_x, "d_y": d_y})
    (d_x + d_y).backward()
    optimizers["disc"].step()

    return IterationRecord(
        epoch=epoch,
        step=step,
        adv_G=_scalar(parts["adv_G"]),
        adv_F=_scalar(parts["adv_F"]),
        d_x=_scalar(d_x),
        d_y=_scalar(d_y),
        cyc_X=_scalar(parts["cyc_X"]),
        cyc_Y=_scalar(parts["cyc_Y"]),
        struct=_scalar(parts["struct"]),
        total=_scalar(total),
        lr_gan=optimizers["gen"].param_groups[0]["lr"],
        lr_seg=optimizers["seg"].param_groups[0]["lr"] if "seg" in optimizers else 0.0,
    )


# --------------------------------------------------------------------------- #
# Full schedules
# --------------------------------------------------------------------------- #


class MetricsLog:
    """Newline-delimited JSON records; in-memory only when ``path`` is None."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "epoch"]


def _epoch_crop(samples: Sequence[PairedSample], crop: Optional[CropSpec], seed: int, epoch: int):
    if crop is None:
        return list(samples)
    out = []
    for i, s in enumerate(samples):
        rng_seed = int(np.random.default_rng([seed, epoch, i]).integers(2**31))
        out.extend(apply_crop(s, crop, rng_seed=rng_seed))
    return out


def _device(device=None) -> torch.device:
    if device is None:
        device = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(device)


def train_sp_cyclegan(
    source: Sequence[PairedSample],
    target: Sequence[PairedSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    out_dir=None,
    crop: Optional[CropSpec] = None,
    use_segmenter: bool = True,
    deterministic: bool = True,
    device=None,
) -> tuple[ModelBundle, MetricsLog]:
    """Train G, F, D_X, D_Y (and U when ``use_segmenter``) for ``total_epochs``.

    Each epoch pairs ``min(len(source), len(target))`` samples from two
    independent shuffles. Target labels are never read.
    """
    if not source or not target:
        raise ValidationError("source and target datasets must be non-empty")
    if use_segmenter and any(s.label is None for s in source):
        raise ValidationError("every source sample needs a label for the structure loss")
    set_deterministic(train_cfg.seed, strict=deterministic)
    dev = _device(device)
    bundle = build_bundle(model_cfg, with_segmenter=use_segmenter).to(dev)
    for _, m in bundle.named_modules():
        m.train()
    optimizers = make_optimizers(bundle, train_cfg)
    buffers = make_buffers(train_cfg)
    out_dir = Path(out_dir) if out_dir else None
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None)
    n_labels = num_label_classes(model_cfg.num_classes)
    pairs = min(len(source), len(target))

    # labels are stripped from the target before anything else sees them
    target = [PairedSample(s.image, None, s.name) for s in target]

    step = 0
    for epoch in range(train_cfg.total_epochs):
        lr_g = lr_at_epoch(train_cfg, train_cfg.lr_gan, epoch)
        lr_s = lr_at_epoch(train_cfg, train_cfg.lr_seg, epoch)
        set_lr(optimizers["gen"], lr_g)
        set_lr(optimizers["disc"], lr_g)
        if "seg" in optimizers:
            set_lr(optimizers["seg"], lr_s)
        src = _epoch_crop(source, crop, train_cfg.seed, epoch)
        tgt = _epoch_crop(target, crop, train_cfg.seed + _TARGET_STREAM, epoch)
        src_it = batch_iterator(src, train_cfg.batch_size, train_cfg.seed, epoch,
                                with_labels=use_segmenter, num_classes=n_labels, limit=pairs)
        tgt_it = batch_iterator(tgt, train_cfg.batch_size, train_cfg.seed + _TARGET_STREAM, epoch,
                                with_labels=False, domain="target", limit=pairs)
        epoch_recs = []
        for (xb, mb), (yb, _) in zip(src_it, tgt_it):
            label = mb.labels.to(dev) if mb is not None else None
            rec = train_step(bundle, (xb.data.to(dev), label), yb.data.to(dev), train_cfg,
                             buffers, optimizers, epoch=epoch, step=step)
            metrics.write({"kind": "iteration", **rec.to_dict()})
            epoch_recs.append(rec)
            step += 1
        summary = {"kind": "epoch", "epoch": epoch, "steps": len(epoch_recs), "lr_gan": lr_g, "lr_seg": lr_s}
        for key in ("adv_G", "adv_F", "d_x", "d_y", "cyc_X", "cyc_Y", "struct", "total"):
            summary[key] = float(np.mean([getattr(r, key) for r in epoch_recs]))
        metrics.write(summary)
        log.info("epoch %d/%d total=%.4f struct=%.4f", epoch + 1, train_cfg.total_epochs,
                 summary["total"], summary["struct"])
        if out_dir and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_bundle(out_dir / f"checkpoint_epoch{epoch + 1:04d}.pt", bundle, model_cfg, epoch + 1, train_cfg)
    if out_dir:
        save_bundle(out_dir / "final.pt", bundle, model_cfg, train_cfg.total_epochs, train_cfg)
    return bundle, metrics


def save_bundle(path, bundle: ModelBundle, model_cfg: ModelConfig, epoch: int, train_cfg: TrainConfig):
    return save_checkpoint(path, bundle.state_dict(), model_cfg, epoch,
                           train_config=json.dumps(train_cfg.to_dict(), sort_keys=True))


def load_bundle(path, model_cfg: Optional[ModelConfig] = None) -> tuple[ModelBundle, dict]:
    payload = load_checkpoint(path, model_cfg)
    cfg = payload["model_config"]
    bundle = build_bundle(cfg, with_segmenter="U" in payload["state"])
    bundle.load_state_dict(payload["state"])
    return bundle, payload


# --------------------------------------------------------------------------- #
# Translation and downstream segmentation
# --------------------------------------------------------------------------- #


@torch.no_grad()
def translate_dataset(
    generator: nn.Module,
    dataset: Sequence[PairedSample],
    crop: Optional[CropSpec] = None,
    out_dir=None,
    *,
    seed: int = 0,
    device=None,
) -> list[PairedSample]:
    """Crop every sample, translate the image, keep the label unchanged.

    Translated images are quantized to 8 bits so the returned samples match
    what is written under ``out_dir``.
    """
    dev = _device(device)
    was_training = generator.training
    generator.eval()
    out = []
    try:
        for i, sample in enumerate(dataset):
            for patch in apply_crop(sample, crop, rng_seed=seed + i):
                x = torch.from_numpy(patch.image)[None].to(dev)
                try:
                    y = generator(x)
                except RuntimeError as exc:
                    raise DimensionError(f"{patch.name}: generator rejected shape {tuple(x.shape)}: {exc}") from exc
                if y.shape != x.shape:
                    raise DimensionError(f"{patch.name}: generator changed shape {tuple(x.shape)} -> {tuple(y.shape)}")
                image = to_unit_range(to_uint8(y[0].cpu().numpy()))
                out.append(PairedSample(image, patch.label, patch.name))
    finally:
        generator.train(was_training)
    if out_dir:
        save_directory_dataset(out, out_dir)
    return out


@dataclass
class SegmenterResult:
    segmenter: nn.Module
    history: list[dict]
    best_epoch: int
    best_loss: float


def train_segmenter(
    dataset: Sequence[PairedSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    out_path=None,
    deterministic: bool = True,
    device=None,
) -> SegmenterResult:
    """Fit a segmenter with the focal-Tversky loss; keep the lowest-loss epoch.

    The learning rate follows ``lr_at_epoch`` with base ``train_cfg.lr_seg``.
    """
    if not dataset:
        raise ValidationError("segmentation dataset is empty")
    unlabelled = [s.name for s in dataset if s.label is None]
    if unlabelled:
        raise ValidationError(f"unlabelled sample {unlabelled[0]} in segmentation training set")
    set_deterministic(train_cfg.seed, strict=deterministic)
    dev = _device(device)
    seg = init_weights(build_segmenter(model_cfg), model_cfg.init_seed).to(dev)
    seg.train()
    opt = torch.optim.Adam(seg.parameters(), lr=train_cfg.lr_seg, betas=SEG_BETAS)
    n_labels = num_label_classes(model_cfg.num_classes)
    history = []
    best_loss, best_epoch, best_state = math.inf, -1, None
    for epoch in range(train_cfg.total_epochs):
        lr = lr_at_epoch(train_cfg, train_cfg.lr_seg, epoch)
        set_lr(opt, lr)
        losses = []
        for xb, mb in batch_iterator(dataset, train_cfg.batch_size, train_cfg.seed, epoch,
                                     num_classes=n_labels):
            opt.zero_grad(set_to_none=True)
            loss = focal_tversky_loss(seg(xb.data.to(dev)), mb.labels.to(dev), train_cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite segmentation loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mean = float(np.mean(losses))
        history.append({"kind": "epoch", "epoch": epoch, "loss": mean, "lr_seg": lr})
        if mean < best_loss:
            best_loss, best_epoch = mean, epoch
            best_state = copy.deepcopy(seg.state_dict())
    seg.load_state_dict(best_state)
    seg.eval()
    if out_path:
        save_checkpoint(out_path, seg.state_dict(), model_cfg, best_epoch + 1,
                        kind="segmenter", best_loss=best_loss)
    return SegmenterResult(seg, history, best_epoch, best_loss)


def load_segmenter(path, model_cfg: Optional[ModelConfig] = None) -> nn.Module:
    payload = load_checkpoint(path, model_cfg)
    seg = build_segmenter(payload["model_config"])
    seg.load_state_dict(payload["state"])
    return seg.eval()
