"""Segmentation and adversarial losses used by the structure-preserving Cycle-GAN.

All functions are pure and differentiable with respect to their floating point
inputs. Probability maps are ``(B, C, H, W)``: ``C == 1`` is the binary case
(channel 0 holds the foreground probability), ``C >= 2`` is multi-class with
class 0 as background. Label maps are integer ``(B, H, W)`` tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

GENERATOR_PARTS = ("adv_G", "adv_F", "cyc_X", "cyc_Y", "struct")


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of every loss term.

    ``alpha`` weighs false negatives, ``beta`` false positives. The focal
    exponent applied to ``1 - TI`` is ``1 / gamma``.
    """

    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 4.0 / 3.0
    epsilon: float = 1e-6
    zeta: float = 4.0
    lambda_cyc: float = 10.0

    def __post_init__(self):
        checks = {
            "alpha": self.alpha >= 0,
            "beta": self.beta >= 0,
            "gamma": self.gamma > 0,
            "epsilon": self.epsilon > 0,
            "zeta": self.zeta >= 0,
            "lambda_cyc": self.lambda_cyc >= 0,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValidationError(f"invalid LossConfig fields: {', '.join(bad)}")

    def to_dict(self) -> dict:
        return asdict(self)


def num_label_classes(channels: int) -> int:
    """Number of label values a probability map with ``channels`` outputs covers."""
    return 2 if channels == 1 else channels


def one_hot(target: torch.Tensor, channels: int) -> torch.Tensor:
    """Encode ``(B, H, W)`` labels to match a ``(B, channels, H, W)`` probability map.

    For ``channels == 1`` the single channel is the indicator of class 1.
    """
    if target.dtype.is_floating_point or target.dtype == torch.bool:
        raise ValidationError(f"labels must be an integer tensor, got {target.dtype}")
    n = num_label_classes(channels)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n):
        raise ValidationError(
            f"label values must lie in [0, {n - 1}], found range "
            f"[{int(target.min())}, {int(target.max())}]"
        )
    if channels == 1:
        return (target == 1).unsqueeze(1)
    return F.one_hot(target.long(), n).permute(0, 3, 1, 2)


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.dim() != 4:
        raise DimensionError(f"pred must be (B, C, H, W), got shape {tuple(pred.shape)}")
    if target.dim() != 3:
        raise DimensionError(f"target must be (B, H, W), got shape {tuple(target.shape)}")
    if pred.shape[0] != target.shape[0] or pred.shape[2:] != target.shape[1:]:
        raise DimensionError(
            f"pred {tuple(pred.shape)} and target {tuple(target.shape)} disagree"
        )


def tversky_index(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Batch-pooled Tversky index for every non-background class.

    Returns a vector with one entry per foreground class (length 1 for binary,
    ``C - 1`` otherwise). For class ``c`` with ground truth indicator ``g``::

        TI_c = (sum p*g + eps) / (sum p*g + alpha*sum (1-p)*g + beta*sum p*(1-g) + eps)

    where the complement ``1 - p`` is the probability of "not class c", which is
    the background probability in the binary case.
    """
    _check_pair(pred, target)
    g = one_hot(target, pred.shape[1]).to(pred.dtype)
    if pred.shape[1] > 1:
        pred, g = pred[:, 1:], g[:, 1:]
    dims = (0, 2, 3)
    tp = (pred * g).sum(dims)
    fn = ((1 - pred) * g).sum(dims)
    fp = (pred * (1 - g)).sum(dims)
    eps = cfg.epsilon
    return (tp + eps) / (tp + cfg.alpha * fn + cfg.beta * fp + eps)


def focal_tversky_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Sum over foreground classes of ``(1 - TI_c) ** (1 / gamma)``."""
    ti = tversky_index(pred, target, cfg)
    # TI <= 1 analytically; clamp guards against rounding below zero
    return (1 - ti).clamp_min(0).pow(1.0 / cfg.gamma).sum()


def structure_loss(segmenter_out: torch.Tensor, source_label: torch.Tensor,
                   cfg: LossConfig) -> torch.Tensor:
    """Focal-Tversky loss of the segmenter output on a cycle-recovered source image.

    ``segmenter_out`` is ``U(F(G(x)))``; ``source_label`` is the label of ``x``.
    Only source-domain labels ever reach this function.
    """
    return focal_tversky_loss(segmenter_out, source_label, cfg)


def dice_score(pred_labels: torch.Tensor, target: torch.Tensor, class_id: int) -> float:
    """Hard Dice overlap of the ``class_id`` indicator maps.

    Returns 1.0 when neither map contains the class and 0.0 when exactly one does.
    """
    if pred_labels.shape != target.shape:
        raise DimensionError(
            f"label maps differ in shape: {tuple(pred_labels.shape)} vs {tuple(target.shape)}"
        )
    a = pred_labels == class_id
    b = target == class_id
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / size


def lsgan_loss(disc_out: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    """Least-squares adversarial loss against a constant 1 (real) or 0 (fake) map."""
    if disc_out.numel() == 0:
        raise ValidationError("discriminator output is empty")
    target = 1.0 if target_is_real else 0.0
    return ((disc_out - target) ** 2).mean()


def cycle_loss(original: torch.Tensor, recovered: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and its cycle reconstruction."""
    if original.shape != recovered.shape:
        raise DimensionError(
            f"cycle pair differs in shape: {tuple(original.shape)} vs {tuple(recovered.shape)}"
        )
    return (original - recovered).abs().mean()


def sp_generator_objective(parts: Mapping[str, torch.Tensor | float], cfg: LossConfig):
    """Weighted generator objective: adversarial + cycle + structure terms."""
    missing = [k for k in GENERATOR_PARTS if k not in parts]
    if missing:
        raise ValidationError(f"missing objective parts: {', '.join(missing)}")
    return (
        parts["adv_G"]
        + parts["adv_F"]
        + cfg.lambda_cyc * (parts["cyc_X"] + parts["cyc_Y"])
        + cfg.zeta * parts["struct"]
    )
