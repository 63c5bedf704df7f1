"""Detection head, training targets and the refinement loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, ParameterSet

FG_IOU = 0.55


@dataclass
class RefineOutput:
    confidence_logit: Tensor  # (M,)
    residual: Tensor  # (M, 7)


@dataclass
class TrainingTarget:
    iou: np.ndarray  # (M,)
    conf_target: np.ndarray  # (M,)
    reg_target: np.ndarray  # (M, 7)
    is_regression_active: np.ndarray  # (M,) bool

    @classmethod
    def build(cls, iou, reg_target, conf_fn=None) -> "TrainingTarget":
        iou = np.asarray(iou, dtype=np.float64)
        conf_fn = conf_fn or conf_target_from_iou
        return cls(iou=iou, conf_target=conf_fn(iou), reg_target=np.asarray(reg_target, dtype=np.float64),
                   is_regression_active=iou > FG_IOU)


def conf_target_from_iou(iou):
    """IoU-scaled confidence target ``clamp(2 * iou - 0.5, 0, 1)``."""
    return np.clip(2.0 * np.asarray(iou, dtype=np.float64) - 0.5, 0.0, 1.0)


@dataclass
class TrainingSample:
    indices: np.ndarray
    n_fg: int
    n_bg: int
    imbalanced: bool


def sample_training_set(ious, m_hat: int, rng: np.random.Generator, fg_thresh: float = FG_IOU) -> TrainingSample:
    """Pick ``m_hat / 2`` foreground and ``m_hat / 2`` background proposals.

    A short side is filled from the other side and the result is flagged.
    """
    if m_hat % 2:
        raise ValueError(f"m_hat must be even, got {m_hat}")
    ious = np.asarray(ious)
    if ious.size == 0:
        raise ValueError("cannot sample from an empty proposal pool")
    fg = np.flatnonzero(ious > fg_thresh)
    bg = np.flatnonzero(ious <= fg_thresh)
    half = m_hat // 2
    n_fg = min(half, len(fg))
    n_bg = min(m_hat - n_fg, len(bg))
    n_fg = min(m_hat - n_bg, len(fg))
    pick_fg = rng.choice(fg, size=n_fg, replace=False) if n_fg else fg[:0]
    pick_bg = rng.choice(bg, size=n_bg, replace=False) if n_bg else bg[:0]
    return TrainingSample(indices=np.concatenate([pick_fg, pick_bg]), n_fg=n_fg, n_bg=n_bg,
                          imbalanced=(n_fg != half or n_bg != half))


def refine_loss(out: RefineOutput, target: TrainingTarget, reg_weight: float = 1.0) -> Tensor:
    """Mean over the batch of BCE(confidence) + gated smooth-L1(residual).

    The regression term counts only samples with IoU above the foreground gate.
    """
    m = out.confidence_logit.shape[0]
    if out.residual.shape[0] != m or len(target.conf_target) != m:
        raise ad.ShapeError("refine_loss", out.confidence_logit.shape, out.residual.shape,
                            target.conf_target.shape)
    cls = ad.bce_with_logits(out.confidence_logit, target.conf_target)
    gate = target.is_regression_active.astype(np.float64)[:, None] * reg_weight
    reg = ad.smooth_l1(out.residual - Tensor(target.reg_target), beta=1.0) * Tensor(gate)
    return (ad.sum_(cls) + ad.sum_(reg)) * (1.0 / m)


def fuse_scores(rpn_score, second_score):
    """Average of first-stage and second-stage confidences."""
    return 0.5 * (np.asarray(rpn_score, dtype=np.float64) + np.asarray(second_score, dtype=np.float64))


class DetectHead:
    """Two independent two-layer FFNs: confidence (1) and residual (7)."""

    def __init__(self, params: ParameterSet, d_model: int, name: str = "head"):
        self.conf = MLP(params, f"{name}.conf", [d_model, d_model, 1])
        # small last layer so an untrained model barely moves proposals
        self.reg = MLP(params, f"{name}.reg", [d_model, d_model, 7], last_init_scale=0.01)

    def __call__(self, y: Tensor) -> RefineOutput:
        flat = ad.reshape(y, (-1, y.shape[-1])) if y.ndim != 2 else y
        logit = ad.reshape(self.conf(flat), (-1,))
        return RefineOutput(confidence_logit=logit, residual=self.reg(flat))
