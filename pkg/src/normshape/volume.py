"""3D binary mask volumes: representation, MVOL/FVOL IO, geometric
preprocessing (resampling, centering) and shape metrics (Dice, volume,
signed distance, connected components).

Conventions:
  * arrays are indexed [x, y, z]; the on-disk flat order is x-fastest
  * spacing is millimeters per voxel along (x, y, z)
  * signed distance is voxel-center to voxel-center, negative inside
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import errors
from ._accel import maybe_njit, prange

_BIG = 1e20  # stand-in for +inf inside the distance transform


@dataclass
class MaskVolume:
    """Binary voxel grid with physical spacing."""

    data: np.ndarray  # uint8, shape (nx, ny, nz), values in {0, 1}
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise errors.SizeMismatch(f"expected 3D data, got {self.data.ndim}D")
        if self.data.dtype != np.uint8:
            if not np.isin(self.data, (0, 1)).all():
                raise errors.NonBinaryVoxel("voxel values must be 0 or 1")
            self.data = self.data.astype(np.uint8)
        elif self.data.max(initial=0) > 1:
            raise errors.NonBinaryVoxel("voxel values must be 0 or 1")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if any(s <= 0 for s in self.spacing_mm):
            raise errors.InvalidSpacing(f"non-positive spacing {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def foreground_count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MaskVolume)
            and self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and bool((self.data == other.data).all())
        )


@dataclass
class ScalarField:
    """Real-valued voxel grid sharing the MaskVolume geometry."""

    data: np.ndarray  # float, shape (nx, ny, nz)
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise errors.SizeMismatch(f"expected 3D data, got {self.data.ndim}D")
        if not np.isfinite(self.data).all():
            raise errors.SizeMismatch("scalar field contains non-finite values")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if any(s <= 0 for s in self.spacing_mm):
            raise errors.InvalidSpacing(f"non-positive spacing {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# MVOL / FVOL IO
# ---------------------------------------------------------------------------

def _read_header(fh, magic: str):
    line1 = fh.readline().decode("ascii", errors="replace").rstrip("\n")
    if line1 != f"{magic} 1":
        raise errors.MalformedHeader(f"bad magic line {line1!r}")
    try:
        dims = tuple(int(t) for t in fh.readline().split())
        spacing = tuple(float(t) for t in fh.readline().split())
    except ValueError as e:
        raise errors.MalformedHeader(f"unparseable header field: {e}") from e
    if len(dims) != 3 or any(n <= 0 for n in dims):
        raise errors.MalformedHeader(f"bad dims {dims}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise errors.MalformedHeader(f"bad spacing {spacing}")
    if fh.readline() != b"BINARY\n":
        raise errors.MalformedHeader("missing BINARY marker")
    return dims, spacing


def load_mask(path) -> MaskVolume:
    with open(path, "rb") as fh:
        dims, spacing = _read_header(fh, "MVOL")
        nx, ny, nz = dims
        payload = fh.read()
    if len(payload) != nx * ny * nz:
        raise errors.SizeMismatch(
            f"payload has {len(payload)} bytes, header says {nx * ny * nz}"
        )
    flat = np.frombuffer(payload, dtype=np.uint8)
    if flat.max(initial=0) > 1:
        raise errors.NonBinaryVoxel("payload byte not in {0,1}")
    data = flat.reshape((nx, ny, nz), order="F")
    return MaskVolume(data=data.copy(), spacing_mm=spacing)


def save_mask(mask: MaskVolume, path) -> None:
    nx, ny, nz = mask.dims
    sx, sy, sz = mask.spacing_mm
    try:
        with open(path, "wb") as fh:
            fh.write(b"MVOL 1\n")
            fh.write(f"{nx} {ny} {nz}\n".encode("ascii"))
            fh.write(f"{sx!r} {sy!r} {sz!r}\n".encode("ascii"))
            fh.write(b"BINARY\n")
            fh.write(mask.data.ravel(order="F").tobytes())
    except OSError as e:
        raise errors.IoFailure(str(e)) from e


def load_field(path) -> ScalarField:
    with open(path, "rb") as fh:
        dims, spacing = _read_header(fh, "FVOL")
        nx, ny, nz = dims
        payload = fh.read()
    if len(payload) != 4 * nx * ny * nz:
        raise errors.SizeMismatch(
            f"payload has {len(payload)} bytes, expected {4 * nx * ny * nz}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return ScalarField(data=flat.reshape((nx, ny, nz), order="F"), spacing_mm=spacing)


def save_field(field: ScalarField, path) -> None:
    nx, ny, nz = field.dims
    sx, sy, sz = field.spacing_mm
    try:
        with open(path, "wb") as fh:
            fh.write(b"FVOL 1\n")
            fh.write(f"{nx} {ny} {nz}\n".encode("ascii"))
            fh.write(f"{sx!r} {sy!r} {sz!r}\n".encode("ascii"))
            fh.write(b"BINARY\n")
            fh.write(field.data.astype("<f4").ravel(order="F").tobytes())
    except OSError as e:
        raise errors.IoFailure(str(e)) from e


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def resample(mask: MaskVolume, target_spacing) -> MaskVolume:
    """Nearest-neighbor resampling onto a grid with the given spacing.

    Output voxel centers are mapped into the input index space and rounded;
    masks stay strictly binary.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise errors.InvalidSpacing(f"non-positive target spacing {target_spacing}")
    out_dims = tuple(
        max(1, int(round(n * s_in / s_out)))
        for n, s_in, s_out in zip(mask.dims, mask.spacing_mm, target_spacing)
    )
    idx = []
    for n_out, n_in, s_in, s_out in zip(out_dims, mask.dims, mask.spacing_mm, target_spacing):
        # output voxel-center position (j + 0.5) * s_out, mapped to input index
        pos = (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5
        idx.append(np.clip(np.floor(pos + 0.5).astype(np.int64), 0, n_in - 1))
    data = mask.data[np.ix_(*idx)]
    return MaskVolume(data=data.copy(), spacing_mm=target_spacing)


def center_in_grid(mask: MaskVolume, target_dims) -> MaskVolume:
    """Translate the foreground so its rounded centroid sits at the center
    of a fresh grid of target_dims. Voxel count is preserved exactly."""
    target_dims = tuple(int(n) for n in target_dims)
    coords = np.argwhere(mask.data == 1)
    if coords.shape[0] == 0:
        raise errors.EmptyMask("cannot center an empty mask")
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    extent = hi - lo + 1
    if any(e > t for e, t in zip(extent, target_dims)):
        raise errors.DoesNotFit(
            f"bounding box {tuple(extent)} exceeds target grid {target_dims}"
        )
    centroid = np.floor(coords.mean(axis=0) + 0.5).astype(np.int64)
    center = np.array([t // 2 for t in target_dims], dtype=np.int64)
    offset = center - centroid
    new_coords = coords + offset
    # the centroid shift could still push the bounding box over an edge;
    # clamp the offset so everything fits
    for a in range(3):
        under = -new_coords[:, a].min()
        if under > 0:
            new_coords[:, a] += under
        over = new_coords[:, a].max() - (target_dims[a] - 1)
        if over > 0:
            new_coords[:, a] -= over
    out = np.zeros(target_dims, dtype=np.uint8)
    out[new_coords[:, 0], new_coords[:, 1], new_coords[:, 2]] = 1
    return MaskVolume(data=out, spacing_mm=mask.spacing_mm)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def dice(a: MaskVolume, b: MaskVolume) -> float:
    if a.dims != b.dims:
        raise errors.DimMismatch(f"dims {a.dims} vs {b.dims}")
    na = int(a.data.sum())
    nb = int(b.data.sum())
    if na + nb == 0:
        return 1.0
    inter = int((a.data & b.data).sum())
    return 2.0 * inter / (na + nb)


def volume_mm3(mask: MaskVolume) -> float:
    sx, sy, sz = mask.spacing_mm
    return float(mask.data.sum()) * sx * sy * sz


def connected_components(mask: MaskVolume) -> int:
    """Number of 6-connected foreground components."""
    structure = ndimage.generate_binary_structure(3, 1)
    _, n = ndimage.label(mask.data, structure=structure)
    return int(n)


# ---------------------------------------------------------------------------
# Signed distance transform
# ---------------------------------------------------------------------------

@maybe_njit(parallel=True)
def _sqdt_lines(F, s2):  # pragma: no cover - exercised via signed_distance
    """One separable pass of the lower-envelope squared distance transform.

    F has shape (n_lines, n); each line is transformed in place with
    per-axis squared spacing s2. Lines are independent, so the parallel
    schedule cannot change the result.
    """
    m, n = F.shape
    for li in prange(m):
        f = F[li].copy()
        v = np.empty(n, np.int64)
        z = np.empty(n + 1, np.float64)
        k = 0
        v[0] = 0
        z[0] = -_BIG
        z[1] = _BIG
        for q in range(1, n):
            fq = f[q] + s2 * q * q
            s = 0.0
            while True:
                p = v[k]
                s = (fq - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
                if s <= z[k] and k > 0:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = _BIG
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            p = v[k]
            F[li, q] = s2 * (q - p) * (q - p) + f[p]


def _squared_distance_to_sites(sites: np.ndarray, spacing) -> np.ndarray:
    """Exact squared Euclidean distance (mm²) from every voxel center to the
    nearest voxel center marked in `sites`."""
    F = np.where(sites, 0.0, _BIG)
    for axis in range(3):
        s2 = spacing[axis] * spacing[axis]
        moved = np.moveaxis(F, axis, -1)
        lines = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
        _sqdt_lines(lines, s2)
        F = np.moveaxis(lines.reshape(moved.shape), -1, axis).copy()
    return F


def signed_distance(mask: MaskVolume) -> ScalarField:
    """Distance (mm) to the nearest voxel center of the opposite class,
    negative inside the foreground."""
    fg = mask.data.astype(bool)
    n_fg = int(fg.sum())
    if n_fg == 0 or n_fg == fg.size:
        raise errors.UniformMask("mask has no boundary")
    d_to_fg = np.sqrt(_squared_distance_to_sites(fg, mask.spacing_mm))
    d_to_bg = np.sqrt(_squared_distance_to_sites(~fg, mask.spacing_mm))
    field = np.where(fg, -d_to_bg, d_to_fg)
    return ScalarField(data=field, spacing_mm=mask.spacing_mm)
