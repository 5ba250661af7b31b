"""Whole-volume prediction via sliding windows and argmax decoding.

Per-voxel class probabilities are averaged uniformly over every window
covering the voxel (accumulated in float64, fixed window order), then
decoded with argmax; ties resolve to the lowest class id.  Volumes smaller
than the patch are reflect-padded and cropped back after prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, softmax_channels
from .metrics import FOREGROUND_CLASSES, DiceReport, aggregate, case_dice
from .nifti import LabelMap, Volume
from .training import Case
from .unet import UNet3D


def _window_starts(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if starts[-1] != last:
        starts.append(last)
    return starts


def predict(
    model: UNet3D,
    volume: Volume,
    patch_size: tuple[int, int, int] = (32, 32, 32),
    stride: tuple[int, int, int] | None = None,
) -> LabelMap:
    """Segment one volume; output extents equal the input's."""
    patch_size = tuple(int(p) for p in patch_size)
    stride = patch_size if stride is None else tuple(int(s) for s in stride)
    for axis in range(3):
        if not 1 <= stride[axis] <= patch_size[axis]:
            raise ValueError(
                f"stride {stride[axis]} on axis {axis} invalid (need 1 <= stride <= patch "
                f"{patch_size[axis]})"
            )
    div = model.config.spatial_divisor
    if any(p % div != 0 for p in patch_size):
        raise ValueError(f"patch size {patch_size} not divisible by {div}")

    dtype = model.parameters()[0].data.dtype
    img = np.asarray(volume.data, dtype=dtype)
    pads = [(0, max(0, patch_size[a] - img.shape[a])) for a in range(3)]
    padded = np.pad(img, pads, mode="reflect") if any(p[1] for p in pads) else img

    num_classes = model.config.num_classes
    prob_sum = np.zeros((num_classes,) + padded.shape, dtype=np.float64)
    cover = np.zeros(padded.shape, dtype=np.float64)
    starts = [_window_starts(padded.shape[a], patch_size[a], stride[a]) for a in range(3)]
    for d in starts[0]:
        for h in starts[1]:
            for w in starts[2]:
                window = padded[d:d + patch_size[0], h:h + patch_size[1], w:w + patch_size[2]]
                logits = model.forward(Tensor(window[None, None]))
                probs = softmax_channels(logits).data[0]
                prob_sum[:, d:d + patch_size[0], h:h + patch_size[1], w:w + patch_size[2]] += probs
                cover[d:d + patch_size[0], h:h + patch_size[1], w:w + patch_size[2]] += 1.0
    assert cover.min() >= 1.0
    mean_probs = prob_sum / cover
    decoded = np.argmax(mean_probs, axis=0).astype(np.uint8)
    decoded = decoded[: img.shape[0], : img.shape[1], : img.shape[2]]
    return LabelMap(classes=decoded, spacing=volume.spacing)


@dataclass(frozen=True)
class EvalConfig:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    stride: tuple[int, int, int] | None = None
    classes: tuple[int, ...] = FOREGROUND_CLASSES
    jobs: int = 1


def evaluate_cases(model: UNet3D, cases: list[Case], cfg: EvalConfig | None = None) -> DiceReport:
    """Predict every case and aggregate per-class DSC.

    Per-case failures (e.g. shape mismatches) are recorded on the report's
    ``errors`` map instead of aborting the batch.  With ``jobs > 1`` cases
    are evaluated concurrently; output ordering stays deterministic.
    """
    cfg = cfg or EvalConfig()
    if not cases:
        raise ValueError("evaluate_cases: empty test set")

    def one(case: Case):
        pred = predict(model, case.image, cfg.patch_size, cfg.stride)
        return case_dice(pred, case.labels, classes=cfg.classes)

    results: dict[str, dict[int, float]] = {}
    errors: dict[str, str] = {}
    ordered = sorted(cases, key=lambda c: c.case_id)
    if cfg.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = {c.case_id: pool.submit(one, c) for c in ordered}
        for case_id in sorted(futures):
            try:
                results[case_id] = futures[case_id].result()
            except Exception as exc:
                errors[case_id] = str(exc)
    else:
        for case in ordered:
            try:
                results[case.case_id] = one(case)
            except Exception as exc:
                errors[case.case_id] = str(exc)
    if not results:
        raise ValueError(f"evaluate_cases: every case failed: {errors}")
    report = aggregate(results)
    report.errors.update(errors)
    return report
