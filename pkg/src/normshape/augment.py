"""Shape-preserving augmentation: random similarity transforms (translate,
rotate, isotropically scale) applied to binary masks by inverse mapping
with nearest-neighbor sampling, so masks stay binary and hole-free."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .volume import MaskVolume


@dataclass
class AugmentRanges:
    max_translation_voxels: tuple[float, float, float] = (4.0, 4.0, 2.0)
    max_rotation_deg: tuple[float, float, float] = (15.0, 15.0, 15.0)
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if any(t < 0 for t in self.max_translation_voxels):
            raise ValueError("translations must be non-negative")
        if any(r < 0 for r in self.max_rotation_deg):
            raise ValueError("rotations must be non-negative")
        lo, hi = self.scale_range
        if not (0 < lo <= 1 <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= 1 <= hi")


def _rotation_matrix(angles_deg) -> np.ndarray:
    """Euler rotations applied as Rz @ Ry @ Rx in physical (mm) space."""
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def similarity_transform(
    mask: MaskVolume,
    translation_voxels=(0.0, 0.0, 0.0),
    rotation_deg=(0.0, 0.0, 0.0),
    scale: float = 1.0,
) -> MaskVolume:
    """Apply scale -> rotate -> translate about the grid center.

    The transform acts in physical coordinates; each output voxel center is
    inverse-mapped and sampled nearest-neighbor (outside the grid -> 0).
    Identity parameters return a bitwise copy.
    """
    if mask.foreground_count() == 0:
        raise errors.EmptyMask("cannot augment an empty mask")
    identity = (
        all(t == 0 for t in translation_voxels)
        and all(r == 0 for r in rotation_deg)
        and scale == 1.0
    )
    if identity:
        return MaskVolume(data=mask.data.copy(), spacing_mm=mask.spacing_mm)

    dims = np.array(mask.dims)
    spacing = np.array(mask.spacing_mm)
    center = (dims - 1) / 2.0 * spacing
    t_mm = np.array(translation_voxels, dtype=np.float64) * spacing
    rot = _rotation_matrix(rotation_deg)

    # forward: y = R (s x) + t  (about the center) => x = R^T (y - t) / s
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    y = np.stack([g * s for g, s in zip(grids, spacing)], axis=-1) - center
    x = (y - t_mm) @ rot  # (y - t) @ R == R^T (y - t) rowwise
    x /= scale
    src = (x + center) / spacing
    src_idx = np.floor(src + 0.5).astype(np.int64)
    inside = np.all((src_idx >= 0) & (src_idx < dims), axis=-1)
    si = np.clip(src_idx, 0, dims - 1)
    data = np.where(inside, mask.data[si[..., 0], si[..., 1], si[..., 2]], 0).astype(np.uint8)
    return MaskVolume(data=data, spacing_mm=mask.spacing_mm)


def random_similarity(mask: MaskVolume, ranges: AugmentRanges, rng_seed: int) -> MaskVolume:
    """Sample a similarity transform uniformly within `ranges` (deterministic
    in rng_seed) and apply it."""
    rng = np.random.default_rng(rng_seed)
    t = [rng.uniform(-m, m) if m > 0 else 0.0 for m in ranges.max_translation_voxels]
    r = [rng.uniform(-m, m) if m > 0 else 0.0 for m in ranges.max_rotation_deg]
    lo, hi = ranges.scale_range
    s = rng.uniform(lo, hi) if hi > lo else lo
    return similarity_transform(mask, translation_voxels=t, rotation_deg=r, scale=s)
