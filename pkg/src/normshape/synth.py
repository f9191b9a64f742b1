"""Synthetic pancreas-like cohorts: curved, tapering tubes swept along a
quadratic Bezier centerline, with an optional body-shrinkage abnormality.

Everything is a pure function of (parameters, seed), so cohorts are fully
reproducible and can be regenerated anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import errors
from .volume import MaskVolume, connected_components

_MIN_FOREGROUND = 50
_CURVE_SAMPLES = 192


@dataclass
class ShapeGenParams:
    grid_dims: tuple[int, int, int] = (48, 32, 16)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    # head -> body -> tail control points, in voxel coordinates
    centerline_control_points: tuple = ((9.0, 9.0, 8.0), (24.0, 25.0, 8.0), (40.0, 12.0, 8.0))
    radius_profile: tuple[float, float, float] = (5.5, 4.0, 2.8)
    jitter_sd: float = 1.2
    seed: int = 0

    def __post_init__(self):
        if any(r <= 0 for r in self.radius_profile):
            raise ValueError("radii must be positive")
        if self.jitter_sd < 0:
            raise ValueError("jitter_sd must be >= 0")
        rmax = max(self.radius_profile)
        for pt in self.centerline_control_points:
            for c, n in zip(pt, self.grid_dims):
                if c < rmax or c > n - 1 - rmax:
                    raise ValueError(
                        f"control point {pt} too close to the grid edge for radius {rmax}"
                    )


@dataclass
class AbnormalityParams:
    shrink_center_t: float = 0.5
    shrink_width: float = 0.35
    shrink_factor: float = 0.45
    volume_preserving: bool = True

    def __post_init__(self):
        if not (0.0 < self.shrink_factor <= 1.0):
            raise ValueError("shrink_factor must be in (0, 1]")
        if not (0.0 < self.shrink_width <= 1.0):
            raise ValueError("shrink_width must be in (0, 1]")


def _jittered_geometry(params: ShapeGenParams):
    pts = np.array(params.centerline_control_points, dtype=np.float64)
    radii = np.array(params.radius_profile, dtype=np.float64)
    if params.jitter_sd > 0:
        rng = np.random.default_rng(params.seed)
        pts = pts + rng.normal(0.0, params.jitter_sd, size=pts.shape)
        radii = np.maximum(1.0, radii + rng.normal(0.0, 0.25 * params.jitter_sd, size=3))
    return pts, radii


def _centerline(pts: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Quadratic Bezier through (head, body, tail) control points."""
    t = t[:, None]
    return (1 - t) ** 2 * pts[0] + 2 * t * (1 - t) * pts[1] + t**2 * pts[2]


def _radius_at(radii: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Piecewise-linear head->body->tail radius profile."""
    r = np.where(
        t < 0.5,
        radii[0] + (radii[1] - radii[0]) * (2 * t),
        radii[1] + (radii[2] - radii[1]) * (2 * t - 1),
    )
    return r


def _shrink_multiplier(t: np.ndarray, ab: AbnormalityParams) -> np.ndarray:
    """Smooth bump dipping to shrink_factor around shrink_center_t."""
    u = (t - ab.shrink_center_t) / ab.shrink_width
    bump = np.where(np.abs(u) < 1.0, np.cos(0.5 * np.pi * u) ** 2, 0.0)
    return 1.0 - (1.0 - ab.shrink_factor) * bump


def _rasterize_tube(grid_dims, centers: np.ndarray, radii_t: np.ndarray) -> np.ndarray:
    nx, ny, nz = grid_dims
    xs = np.arange(nx, dtype=np.float64)
    ys = np.arange(ny, dtype=np.float64)
    zs = np.arange(nz, dtype=np.float64)
    mask = np.zeros(grid_dims, dtype=bool)
    for c, r in zip(centers, radii_t):
        dx2 = (xs - c[0]) ** 2
        dy2 = (ys - c[1]) ** 2
        dz2 = (zs - c[2]) ** 2
        mask |= (dx2[:, None, None] + dy2[None, :, None] + dz2[None, None, :]) <= r * r
    return mask.astype(np.uint8)


def _build(params: ShapeGenParams, radius_scale_fn=None) -> MaskVolume:
    pts, radii = _jittered_geometry(params)
    t = np.linspace(0.0, 1.0, _CURVE_SAMPLES)
    centers = _centerline(pts, t)
    r = _radius_at(radii, t)
    if radius_scale_fn is not None:
        r = radius_scale_fn(r, t)
    data = _rasterize_tube(params.grid_dims, centers, r)
    mask = MaskVolume(data=data, spacing_mm=params.spacing_mm)
    if mask.foreground_count() < _MIN_FOREGROUND:
        raise errors.DegenerateShape(
            f"only {mask.foreground_count()} foreground voxels (seed {params.seed})"
        )
    return mask


def gen_healthy(params: ShapeGenParams) -> MaskVolume:
    """Healthy tube swept along the jittered centerline."""
    return _build(params)


def gen_abnormal(params: ShapeGenParams, ab: AbnormalityParams) -> MaskVolume:
    """Healthy tube with a smooth radius shrinkage around the body.

    With volume_preserving set, a global radius rescale (bisection) matches
    the healthy voxel count of the same seed to within 2%.
    """
    if ab.shrink_factor == 1.0:
        return gen_healthy(params)

    def shrunk(r, t, scale=1.0):
        return r * _shrink_multiplier(t, ab) * scale

    if not ab.volume_preserving:
        return _build(params, shrunk)

    target = gen_healthy(params).foreground_count()

    def count_at(scale: float) -> tuple[int, MaskVolume]:
        m = _build(params, lambda r, t: shrunk(r, t, scale))
        return m.foreground_count(), m

    lo, hi = 1.0, 1.6
    c, m = count_at(1.0)
    if abs(c - target) / target <= 0.02:
        return m
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        c, m = count_at(mid)
        if abs(c - target) / target <= 0.02:
            return m
        if c < target:
            lo = mid
        else:
            hi = mid
    raise errors.VolumeMatchFailed(
        f"could not match healthy volume within 2% (seed {params.seed})"
    )


def gen_cohort(n: int, params: ShapeGenParams, ab: AbnormalityParams | None, base_seed: int):
    """n masks with seeds base_seed..base_seed+n-1; every mask is verified to
    be a single 6-connected component (regenerated with a fresh seed on
    failure, up to 10 tries)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        seed = base_seed + i
        for attempt in range(10):
            p = replace(params, seed=seed)
            try:
                mask = gen_healthy(p) if ab is None else gen_abnormal(p, ab)
            except (errors.DegenerateShape, errors.VolumeMatchFailed):
                mask = None
            if mask is not None and connected_components(mask) == 1:
                out.append(mask)
                break
            seed += 100003 * (attempt + 1)
        else:
            raise errors.GenerationExhausted(f"sample {i} failed after 10 retries")
    return out
