"""Deterministic synthetic uterus phantoms with exact voxel-level ground truth.

Geometry is analytic on purpose: an ellipsoidal wall shell (class 1)
enclosing a cavity (class 2), sphere-shaped myomas (class 3) seeded on the
wall, and an optional small cyst (class 4).  Because the label map is
constructed, not annotated, downstream tests can use tight thresholds.

Painting order (later overwrites earlier): wall, cavity, myoma, cyst —
with the one carve-out that myomas never replace cavity voxels, so the
cavity stays a single intact region strictly inside the shell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nifti import LabelMap, Volume

# Per-class intensity means: background, wall, cavity, myoma, cyst.
# Cavity and cyst bright (fluid), myoma close to wall so it is the harder
# class, mirroring the clinical difficulty ordering.
DEFAULT_INTENSITY_MEANS = (0.12, 0.52, 0.78, 0.33, 0.92)


@dataclass(frozen=True)
class PhantomSpec:
    """Generator knobs; every field has a desk-scale default."""

    size: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    wall_thickness: tuple[float, float] = (2.0, 3.5)
    myoma_count: tuple[int, int] = (1, 3)
    myoma_radius: tuple[float, float] = (2.0, 4.5)
    cyst_probability: float = 0.5
    cyst_radius: tuple[float, float] = (1.2, 2.2)
    noise_sd: float = 0.04
    intensity_means: tuple[float, float, float, float, float] = DEFAULT_INTENSITY_MEANS
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.size) != 3 or any(s < 16 for s in self.size):
            raise ValueError(f"size must be >= 16 per axis, got {self.size}")
        for name in ("wall_thickness", "myoma_radius", "cyst_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range ({lo}, {hi}) invalid")
        lo, hi = self.myoma_count
        if not 0 <= lo <= hi:
            raise ValueError(f"myoma_count range ({lo}, {hi}) invalid")
        if not 0.0 <= self.cyst_probability <= 1.0:
            raise ValueError(f"cyst_probability {self.cyst_probability} outside [0, 1]")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd {self.noise_sd} must be non-negative")
        if len(self.intensity_means) != 5:
            raise ValueError("intensity_means needs one value per class (5)")


# Outer ellipsoid semi-axes as fractions of the grid extent.
_AXIS_FRACTION = (0.28, 0.38)
# Minimum cavity semi-axis, voxels; keeps class 2 non-empty with margin.
_MIN_CAVITY_SEMI_AXIS = 2.0


def _ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    q = (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    )
    return q <= 1.0


def _sphere_mask(shape, center, radius) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    q = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return q <= radius * radius


def generate(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Produce one (intensity volume, label map) pair, fully determined by the seed."""
    size = spec.size
    worst_axis = _AXIS_FRACTION[0] * min(size)
    if spec.wall_thickness[0] > worst_axis - _MIN_CAVITY_SEMI_AXIS:
        raise ValueError(
            f"wall thickness {spec.wall_thickness[0]} cannot fit inside the smallest "
            f"possible ellipsoid semi-axis {worst_axis:.1f} while keeping a cavity"
        )
    rng = np.random.default_rng(spec.seed)

    center = np.array(
        [size[i] / 2.0 + rng.uniform(-size[i] / 12.0, size[i] / 12.0) for i in range(3)]
    )
    semi = np.array([rng.uniform(*_AXIS_FRACTION) * size[i] for i in range(3)])
    thickness = min(rng.uniform(*spec.wall_thickness), float(semi.min()) - _MIN_CAVITY_SEMI_AXIS)

    labels = np.zeros(size, dtype=np.uint8)
    outer = _ellipsoid_mask(size, center, semi)
    inner = _ellipsoid_mask(size, center, semi - thickness)
    labels[outer] = 1
    labels[inner] = 2

    wall_voxels = np.argwhere(labels == 1)
    n_myomas = int(rng.integers(spec.myoma_count[0], spec.myoma_count[1] + 1))
    for _ in range(n_myomas):
        c = wall_voxels[rng.integers(len(wall_voxels))]
        r = rng.uniform(*spec.myoma_radius)
        sphere = _sphere_mask(size, c.astype(float), r)
        labels[sphere & (labels != 2)] = 3

    if rng.random() < spec.cyst_probability:
        shell = np.argwhere(labels == 1)
        if len(shell):
            c = shell[rng.integers(len(shell))]
            r = rng.uniform(*spec.cyst_radius)
            labels[_sphere_mask(size, c.astype(float), r)] = 4

    means = np.array(spec.intensity_means, dtype=np.float64)
    intensity = means[labels] + rng.normal(0.0, spec.noise_sd, size=size)
    volume = Volume(data=intensity.astype(np.float32), spacing=spec.spacing)
    return volume, LabelMap(classes=labels, spacing=spec.spacing)
