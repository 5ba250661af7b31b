"""Patch-based SGD training loop minimizing the composite Dice + CE loss.

An epoch is a fixed number of sampled batches, not a full pass: patches
are drawn with a configurable foreground bias, so the notion of "seeing
the whole dataset" does not apply.  Everything downstream of the seed is
deterministic, which the determinism tests rely on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, softmax_channels
from .losses import LossConfig, ce_loss, dice_loss, one_hot, total_loss  # noqa: F401  (total_loss re-exported for callers)
from .nifti import LabelMap, Volume
from .unet import UNet3D, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step diagnostics."""

    def __init__(self, step: int, lr: float, dice_value: float, ce_value: float):
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.6g}, dice={dice_value:.6g}, ce={ce_value:.6g})"
        )
        self.step = step
        self.lr = lr
        self.dice_value = dice_value
        self.ce_value = ce_value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batches_per_epoch: int = 50
    batch_size: int = 2
    patch_size: tuple[int, int, int] = (32, 32, 32)
    learning_rate: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    lr_exponent: float = 0.9
    seed: int = 0
    train_fraction: float = 0.82
    foreground_patch_bias: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, batches_per_epoch and batch_size must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if not 0.0 <= self.foreground_patch_bias <= 1.0:
            raise ValueError("foreground_patch_bias must be in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ValueError(f"patch_size must be three positive ints, got {self.patch_size}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class Case:
    """One dataset entry: an intensity volume with its ground-truth labels."""

    case_id: str
    image: Volume
    labels: LabelMap


@dataclass
class EpochStats:
    epoch: int
    mean_total_loss: float
    mean_dice_loss: float
    mean_ce_loss: float
    lr: float


def split_dataset(case_ids: list[str], train_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic shuffled split into round(n*fraction) train / remainder test."""
    ids = list(case_ids)
    if len(ids) < 2:
        raise ValueError(f"split needs at least 2 cases, got {len(ids)}")
    n_train = int(round(len(ids) * train_fraction))
    if n_train < 1 or len(ids) - n_train < 1:
        raise ValueError(
            f"fraction {train_fraction} leaves fewer than 1 case on one side of a "
            f"{len(ids)}-case split"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


@dataclass
class PatchSample:
    image: np.ndarray
    labels: np.ndarray
    corner: tuple[int, int, int]


def sample_patch(
    volume,
    labelmap,
    patch_size: tuple[int, int, int],
    rng: np.random.Generator,
    foreground_bias: float = 0.5,
    fg_coords: np.ndarray | None = None,
) -> PatchSample:
    """Axis-aligned crop at identical image/label coordinates.

    With probability ``foreground_bias`` the window is chosen to contain at
    least one foreground voxel (uniformly picked, window placed uniformly
    among the positions covering it).
    """
    img = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    lbl = labelmap.classes if isinstance(labelmap, LabelMap) else np.asarray(labelmap)
    if img.shape != lbl.shape:
        raise ValueError(f"sample_patch: image shape {img.shape} != label shape {lbl.shape}")
    for axis in range(3):
        if img.shape[axis] < patch_size[axis]:
            raise ValueError(
                f"sample_patch: volume extent {img.shape[axis]} on axis {axis} smaller "
                f"than patch {patch_size[axis]}"
            )
    corner = []
    if rng.random() < foreground_bias:
        if fg_coords is None:
            fg_coords = np.argwhere(lbl > 0)
        if len(fg_coords):
            voxel = fg_coords[rng.integers(len(fg_coords))]
            for axis in range(3):
                lo = max(0, int(voxel[axis]) - patch_size[axis] + 1)
                hi = min(int(voxel[axis]), img.shape[axis] - patch_size[axis])
                corner.append(int(rng.integers(lo, hi + 1)))
    if not corner:
        corner = [int(rng.integers(0, img.shape[a] - patch_size[a] + 1)) for a in range(3)]
    d, h, w = corner
    pd, ph, pw = patch_size
    return PatchSample(
        image=np.ascontiguousarray(img[d:d + pd, h:h + ph, w:w + pw]),
        labels=np.ascontiguousarray(lbl[d:d + pd, h:h + ph, w:w + pw]),
        corner=(d, h, w),
    )


def poly_lr(base_lr: float, step: int, total_steps: int, exponent: float = 0.9) -> float:
    """Polynomial decay (1 - step/total)^exponent; exactly 0 at step == total."""
    return base_lr * (1.0 - step / total_steps) ** exponent


class SGD:
    """Stochastic gradient descent with (optionally Nesterov) momentum."""

    def __init__(self, params: list[Tensor], momentum: float = 0.99, nesterov: bool = True):
        self.params = params
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            v *= self.momentum
            v += g
            update = g + self.momentum * v if self.nesterov else v
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train(
    model: UNet3D,
    dataset: list[Case],
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    log_path=None,
    checkpoint_path=None,
) -> tuple[UNet3D, list[EpochStats]]:
    """Run epochs x batches_per_epoch SGD steps on the composite loss.

    Emits per-epoch mean loss terms (optionally as a CSV log), writes a
    checkpoint when a path is given, and aborts with diagnostics on a
    non-finite loss.  Fully deterministic given (model, dataset, cfg).
    """
    if not dataset:
        raise ValueError("train: empty training set")
    loss_cfg = loss_cfg or LossConfig()
    dtype = cfg.np_dtype
    model.set_dtype(dtype)
    num_classes = model.config.num_classes
    div = model.config.spatial_divisor
    for axis, ext in enumerate(cfg.patch_size):
        if ext % div != 0:
            raise ValueError(f"patch extent {ext} on axis {axis} not divisible by {div}")

    images = [np.asarray(c.image.data, dtype=dtype) for c in dataset]
    labels = [c.labels.classes for c in dataset]
    fg_coords = [np.argwhere(l > 0) for l in labels]

    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD(model.parameters(), momentum=cfg.momentum, nesterov=cfg.nesterov)
    total_steps = cfg.epochs * cfg.batches_per_epoch
    history: list[EpochStats] = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        lr = 0.0
        for _ in range(cfg.batches_per_epoch):
            lr = poly_lr(cfg.learning_rate, step, total_steps, cfg.lr_exponent)
            batch_img = np.empty((cfg.batch_size, 1) + tuple(cfg.patch_size), dtype=dtype)
            batch_lbl = np.empty((cfg.batch_size,) + tuple(cfg.patch_size), dtype=np.uint8)
            for b in range(cfg.batch_size):
                idx = int(rng.integers(len(dataset)))
                patch = sample_patch(
                    images[idx], labels[idx], cfg.patch_size, rng,
                    foreground_bias=cfg.foreground_patch_bias, fg_coords=fg_coords[idx],
                )
                batch_img[b, 0] = patch.image
                batch_lbl[b] = patch.labels
            g = Tensor(one_hot(batch_lbl, num_classes, dtype=dtype))
            with Tape() as tape:
                probs = softmax_channels(model.forward(Tensor(batch_img)))
                dice = dice_loss(probs, g, loss_cfg)
                ce = ce_loss(probs, g, loss_cfg)
                loss = dice + ce
                dice_v, ce_v, total_v = dice.item(), ce.item(), loss.item()
                if not np.isfinite(total_v):
                    raise TrainingDiverged(step, lr, dice_v, ce_v)
                loss.backward()
            optimizer.step(lr)
            optimizer.zero_grad()
            tape.clear()
            sums += (total_v, dice_v, ce_v)
            step += 1
        mean = sums / cfg.batches_per_epoch
        history.append(EpochStats(epoch, float(mean[0]), float(mean[1]), float(mean[2]), lr))

    if log_path is not None:
        write_training_log(history, log_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, history


def write_training_log(history: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mean_total_loss", "mean_dice_loss", "mean_ce_loss", "lr"])
        for row in history:
            writer.writerow([
                row.epoch,
                repr(row.mean_total_loss),
                repr(row.mean_dice_loss),
                repr(row.mean_ce_loss),
                repr(row.lr),
            ])
