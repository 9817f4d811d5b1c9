"""Training objectives.

Partial cross-entropy restricts supervision to annotated scribble pixels.
Multi-scale consistency makes each auxiliary mask agree with the
undersampled (and gradient-barriered) full-resolution prediction. The
compactness prior P^2/(4*pi*A) serves as the baseline regulariser. A
dynamic weight keeps the regulariser pinned to a fixed fraction of the
supervised cost.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .datakit import Scribble
from .model import PyramidPrediction, downsample_target

RATIO_MODES = ("fixed_ratio", "literal")
PIXEL_REDUCTIONS = ("mean", "sum")
METHODS = ("pyag", "pce_only", "pce_compactness")


@dataclass
class LossConfig:
    a0: float = 0.1
    ratio_mode: str = "fixed_ratio"
    pixel_reduction: str = "mean"
    epsilon: float = 1e-8

    def validate(self) -> "LossConfig":
        if self.a0 <= 0:
            raise ValueError("a0 must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.ratio_mode not in RATIO_MODES:
            raise ValueError(f"ratio_mode must be one of {RATIO_MODES}")
        if self.pixel_reduction not in PIXEL_REDUCTIONS:
            raise ValueError(f"pixel_reduction must be one of {PIXEL_REDUCTIONS}")
        return self


@dataclass
class LossBreakdown:
    """Per-term values of one training step. self_total holds whichever
    regulariser the method uses (0 for pce_only)."""

    pce: torch.Tensor
    self_per_depth: list = field(default_factory=list)
    self_total: torch.Tensor = None
    weight_a: float = 0.0
    total: torch.Tensor = None

    def floats(self) -> dict:
        pce = float(self.pce)
        self_total = float(self.self_total)
        weight_a = float(self.weight_a)
        return {
            "pce": pce,
            "self_per_depth": [float(v) for v in self.self_per_depth],
            "self_total": self_total,
            "weight_a": weight_a,
            # recomposed in float64 so the reported terms satisfy
            # total = pce + a * reg exactly
            "total": pce + weight_a * self_total,
        }


def _as_pred(pred) -> torch.Tensor:
    if isinstance(pred, PyramidPrediction):
        pred = pred.final
    if not torch.is_tensor(pred):
        pred = torch.as_tensor(np.asarray(pred))
    if pred.ndim == 3:
        pred = pred.unsqueeze(0)
    if pred.ndim != 4:
        raise ValueError(f"prediction must be (B, c, H, W), got {tuple(pred.shape)}")
    return pred


def _as_classes(scribble, device) -> torch.Tensor:
    if isinstance(scribble, Scribble):
        scribble = scribble.classes
    t = torch.as_tensor(np.asarray(scribble), dtype=torch.long, device=device)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3:
        raise ValueError(f"scribble must be (B, H, W), got {tuple(t.shape)}")
    return t


def pce_loss(pred, scribble, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Cross-entropy over annotated pixels only.

    A pixel counts as annotated when its scribble value is a valid class
    index; anything else (the UNLABELED sentinel included) contributes
    nothing. Returns 0 when no pixel is annotated.
    """
    config.validate()
    pred = _as_pred(pred)
    classes = _as_classes(scribble, pred.device)
    if classes.shape != (pred.shape[0], pred.shape[2], pred.shape[3]):
        raise ValueError(
            f"scribble shape {tuple(classes.shape)} does not match prediction "
            f"{tuple(pred.shape)}"
        )
    c = pred.shape[1]
    annotated = (classes >= 0) & (classes < c)
    if not annotated.any():
        return pred.sum() * 0.0
    log_p = torch.log(pred + config.epsilon)
    picked = log_p.gather(1, classes.clamp(0, c - 1).unsqueeze(1)).squeeze(1)
    values = -picked[annotated]
    loss = values.mean() if config.pixel_reduction == "mean" else values.sum()
    return loss.clamp_min(0.0)


def self_consistency_loss(
    pyramid: PyramidPrediction,
    config: LossConfig = LossConfig(),
    downsample_mode: str = "avgpool",
):
    """Cross-entropy of every auxiliary mask against the undersampled final
    prediction, summed over depths.

    Targets come from downsample_target and are therefore fixed: the
    consistency signal never reaches the full-resolution stream.
    Returns (total, per-depth list).
    """
    config.validate()
    maps = [_as_pred(m) for m in pyramid.maps]
    if len(maps) < 2:
        warnings.warn("pyramid has a single map, consistency loss is 0", RuntimeWarning)
        zero = maps[0].sum() * 0.0
        return zero, []
    per_depth = []
    for d in range(1, len(maps)):
        target = downsample_target(maps[0], d, mode=downsample_mode)
        ce = -(target * torch.log(maps[d] + config.epsilon)).sum(dim=1)
        term = ce.mean() if config.pixel_reduction == "mean" else ce.sum()
        per_depth.append(term.clamp_min(0.0))
    total = per_depth[0]
    for term in per_depth[1:]:
        total = total + term
    return total, per_depth


def dynamic_weight(pce, self_total, config: LossConfig = LossConfig()) -> float:
    """Balance factor between supervised and regularisation cost.

    fixed_ratio pins the weighted regulariser to a0 times the supervised
    loss (a = a0 * pce / self); literal applies the ratio the other way
    around (a = a0 * self / pce). Either way the weight is a plain number:
    no gradient flows through it.
    """
    config.validate()
    p = float(pce)
    s = float(self_total)
    if p < 0 or s < 0:
        raise ValueError("losses must be non-negative")
    if config.ratio_mode == "fixed_ratio":
        return config.a0 * p / max(s, config.epsilon)
    return config.a0 * s / max(p, config.epsilon)


def compactness_loss(pred, eps: float = 1e-8) -> torch.Tensor:
    """Shape-compactness prior P^2 / (4*pi*A) of the foreground probability.

    Foreground is 1 minus the background channel; P sums absolute forward
    differences along rows and columns, A is the total foreground mass.
    Equals 1 for a continuous disk and grows for scattered or elongated
    masks. Batched inputs are averaged.
    """
    pred = _as_pred(pred)
    fg = 1.0 - pred[:, 0]
    d_row = (fg[:, 1:, :] - fg[:, :-1, :]).abs().sum(dim=(1, 2))
    d_col = (fg[:, :, 1:] - fg[:, :, :-1]).abs().sum(dim=(1, 2))
    perimeter = d_row + d_col
    area = fg.sum(dim=(1, 2)) + eps
    return (perimeter**2 / (4.0 * math.pi * area)).mean()


def total_loss(
    pyramid: PyramidPrediction,
    scribble,
    config: LossConfig = LossConfig(),
    method: str = "pyag",
    downsample_mode: str = "avgpool",
) -> LossBreakdown:
    """Compose the training objective for the selected method.

    pyag: partial CE + dynamically weighted multi-scale consistency.
    pce_compactness: partial CE + dynamically weighted compactness prior.
    pce_only: partial CE alone (weight pinned to 0).
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    pce = pce_loss(pyramid.final, scribble, config)
    per_depth: list = []
    if method == "pyag":
        reg, per_depth = self_consistency_loss(pyramid, config, downsample_mode)
    elif method == "pce_compactness":
        reg = compactness_loss(pyramid.final)
    else:
        reg = pyramid.final.sum() * 0.0
    weight_a = 0.0 if method == "pce_only" else dynamic_weight(pce, reg, config)
    total = pce + weight_a * reg
    return LossBreakdown(
        pce=pce, self_per_depth=per_depth, self_total=reg, weight_a=weight_a, total=total
    )
