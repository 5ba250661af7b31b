"""Composite segmentation training loss: global multi-class Dice plus cross-entropy.

The Dice term is one global fraction over the included classes and all
voxels, with squared terms in the denominator.  The cross-entropy term
runs over all classes including background.  Both are built from tape
primitives, so gradients come from the reverse-mode engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    clamped_log,
    div,
    mul,
    scale,
    tensor_sum,
)


class LossInputError(ValueError):
    """Loss inputs violate a documented precondition (e.g. target not one-hot)."""


@dataclass(frozen=True)
class LossConfig:
    """Knobs governing the Dice and cross-entropy terms.

    ``class_set`` selects the classes entering the Dice fraction; ``None``
    means every class except background (class 0), the standard choice that
    prevents the empty-foreground trivial optimum.  ``epsilon`` keeps the
    Dice denominator away from zero; ``prob_clamp`` floors probabilities
    before the log in cross-entropy.
    """

    epsilon: float = 1e-5
    class_set: tuple[int, ...] | None = None
    ce_reduction: str = "mean"
    prob_clamp: float = 1e-12

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.prob_clamp <= 0:
            raise ValueError(f"prob_clamp must be positive, got {self.prob_clamp}")
        if self.ce_reduction not in ("sum", "mean"):
            raise ValueError(f"ce_reduction must be 'sum' or 'mean', got {self.ce_reduction!r}")
        if self.class_set is not None and len(self.class_set) == 0:
            raise ValueError("class_set must be non-empty")

    def resolve_class_set(self, num_classes: int) -> tuple[int, ...]:
        if self.class_set is None:
            return tuple(range(1, num_classes))
        bad = [c for c in self.class_set if not 0 <= c < num_classes]
        if bad:
            raise ValueError(f"class_set entries {bad} out of range for {num_classes} classes")
        return tuple(sorted(set(self.class_set)))


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """[N, D, H, W] integer class grid -> [N, C, D, H, W] one-hot floats."""
    labels = np.asarray(labels)
    if labels.ndim != 4:
        raise ShapeError(f"one_hot: labels must be rank-4 [N, D, H, W], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"one_hot: label values span [{labels.min()}, {labels.max()}], "
            f"outside [0, {num_classes - 1}]"
        )
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(np.moveaxis(eye[labels], 4, 1))


def _check_pair(op: str, p: Tensor, g: Tensor) -> None:
    if p.data.ndim != 5 or g.data.ndim != 5:
        raise ShapeError(f"{op}: inputs must be rank-5, got {p.data.shape} and {g.data.shape}")
    if p.data.shape != g.data.shape:
        raise ShapeError(f"{op}: prediction shape {p.data.shape} != target shape {g.data.shape}")


def _check_one_hot(op: str, g: Tensor) -> None:
    gd = g.data
    if not np.all((gd == 0) | (gd == 1)):
        raise LossInputError(f"{op}: target contains values other than 0 and 1")
    sums = gd.sum(axis=1)
    if not np.all(sums == 1):
        bad = int((sums != 1).sum())
        raise LossInputError(f"{op}: target is not one-hot ({bad} voxel rows do not sum to 1)")


def dice_loss(p: Tensor, g: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Global multi-class Dice loss over ``cfg.class_set`` and all voxels.

    1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + epsilon), every sum running
    jointly over the included classes and all voxels (a single fraction).
    Differentiable w.r.t. ``p``.
    """
    cfg = cfg or LossConfig()
    _check_pair("dice_loss", p, g)
    _check_one_hot("dice_loss", g)
    cset = cfg.resolve_class_set(p.data.shape[1])
    mask = np.zeros((1, p.data.shape[1], 1, 1, 1), dtype=p.data.dtype)
    mask[0, list(cset)] = 1.0
    mask_t = Tensor(np.ascontiguousarray(np.broadcast_to(mask, p.data.shape)))
    g_masked = Tensor(g.data * mask)

    pm = mul(p, mask_t)
    intersection = tensor_sum(mul(pm, g_masked))
    p_sq = tensor_sum(mul(pm, pm))
    g_sq = float((g.data * mask).sum())  # one-hot: squares equal the values
    denom = add(p_sq, Tensor(np.asarray(g_sq + cfg.epsilon, dtype=p.data.dtype)))
    frac = div(scale(intersection, 2.0), denom)
    return add(Tensor(np.asarray(1.0, dtype=p.data.dtype)), scale(frac, -1.0))


def ce_loss(p: Tensor, g: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Cross-entropy -sum(g * log(p)) over all classes including background.

    Probabilities are floored at ``cfg.prob_clamp`` before the log; with
    ``ce_reduction='mean'`` the sum is divided by the number of voxels.
    """
    cfg = cfg or LossConfig()
    _check_pair("ce_loss", p, g)
    lp = clamped_log(p, cfg.prob_clamp)
    loss = scale(tensor_sum(mul(g, lp)), -1.0)
    if cfg.ce_reduction == "mean":
        n, _, d, h, w = p.data.shape
        loss = scale(loss, 1.0 / (n * d * h * w))
    return loss


def total_loss(p: Tensor, g: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Unit-weight sum of the Dice and cross-entropy terms."""
    cfg = cfg or LossConfig()
    return add(dice_loss(p, g, cfg), ce_loss(p, g, cfg))
