"""Training losses: edge BCE, grid least squares, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from docdewarp.errors import ConfigError, DimensionError
from docdewarp.nn import functional as F
from docdewarp.nn.tensor import Tensor, make_result

DEFAULT_LAMBDA = 0.9
DEFAULT_EPSILON = 1e-7


@dataclass
class ObjectiveConfig:
    lam: float = DEFAULT_LAMBDA
    bce_epsilon: float = DEFAULT_EPSILON
    grid_norm: str = "l2"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.bce_epsilon < 0.5:
            raise ConfigError(f"bce_epsilon must be in (0, 0.5), got {self.bce_epsilon}")
        if self.grid_norm not in ("l2", "l1"):
            raise ConfigError(f"grid_norm must be 'l2' or 'l1', got {self.grid_norm!r}")


def _target(t, like: Tensor) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.shape != like.shape:
        raise DimensionError(f"prediction {like.shape} and target {arr.shape} differ in shape")
    return arr.astype(like.dtype, copy=False)


def edge_loss(pred_prob: Tensor, gt, eps: float = DEFAULT_EPSILON) -> Tensor:
    """Mean binary cross-entropy over pixels; ``pred_prob`` is clamped to ``[eps, 1-eps]``.

    The clamp passes no gradient where it is active.
    """
    y = _target(gt, pred_prob)
    p = np.clip(pred_prob.data, eps, 1.0 - eps)
    n = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n
    inside = (pred_prob.data >= eps) & (pred_prob.data <= 1.0 - eps)

    def backward(g):
        return (g * inside * (p - y) / (p * (1.0 - p)) / n,)

    return make_result(np.asarray(loss, dtype=pred_prob.dtype), (pred_prob,), backward)


def grid_loss(pred: Tensor, gt, norm: str = "l2") -> Tensor:
    """Mean squared (or absolute, ``norm="l1"``) error over every grid element."""
    y = _target(gt, pred)
    if norm == "l2":
        return F.mse(pred, y)
    diff = pred.data - y
    n = diff.size
    sign = np.sign(diff)
    return make_result(np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype), (pred,), lambda g: (g * sign / n,))


def combine(grid_term, edge_term, lam: float = DEFAULT_LAMBDA):
    """``L_g + lam * L_e``; works on floats and on scalar tensors."""
    if lam == 0:
        return grid_term
    return grid_term + edge_term * lam


@dataclass
class LossBreakdown:
    total: Tensor
    grid: float
    edge: float | None


def combined_loss(output, gt_grid, gt_edges, cfg: ObjectiveConfig | None = None) -> LossBreakdown:
    """Loss for one model output.

    ``output`` is a ``ModelOutput``; ``gt_grid`` is ``(N, 2, S, S)`` and
    ``gt_edges`` ``(N, 1, S, S)``. Without an edge head (gate disabled) or
    with ``lam = 0`` only the grid term is used.
    """
    cfg = cfg if cfg is not None else ObjectiveConfig()
    lg = grid_loss(output.grid, gt_grid, cfg.grid_norm)
    if output.edge_logits is None or cfg.lam == 0 or gt_edges is None:
        return LossBreakdown(lg, float(lg.data), None)
    le = edge_loss(F.sigmoid(output.edge_logits), gt_edges, cfg.bce_epsilon)
    return LossBreakdown(combine(lg, le, cfg.lam), float(lg.data), float(le.data))
