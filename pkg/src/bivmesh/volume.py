"""Voxel-grid containers, exact Euclidean distance transform, gradient fields,
trilinear sampling, and the voxel-index <-> NDC coordinate map.

All grids are indexed ``array[x, y, z]`` with shape ``(nx, ny, nz)``.  The
on-disk payload is z-slowest ("zyx-c-contiguous"); I/O transposes.
"""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .anatomy import TARGET_REGION_LABELS, VALID_VOLUME_LABELS


class VolumeError(ValueError):
    pass


class VolumeFormatError(VolumeError):
    pass


class DegenerateFieldWarning(UserWarning):
    """A distance field was built from an all-foreground or all-background mask."""


_INF = 1e30


def _as_triple(x, name):
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size != 3:
        raise VolumeError(f"{name} must have 3 components, got {arr.size}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class LabelVolume:
    """3D grid of anatomical labels with physical spacing and origin (mm)."""

    labels: np.ndarray            # (nx, ny, nz) uint8
    spacing: tuple                # mm per voxel, per axis
    origin: tuple                 # mm position of the (0, 0, 0) voxel center

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if labels.ndim != 3 or min(labels.shape) < 2:
            raise VolumeError(f"volume dims must be >= (2,2,2), got {labels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")
        if labels.max(initial=0) > max(VALID_VOLUME_LABELS):
            bad = int(labels.max())
            raise VolumeError(f"label value {bad} outside {{0..3}}")

    @property
    def dims(self):
        return self.labels.shape


@dataclass(frozen=True)
class ScalarField:
    """Dense per-voxel real values (mm for boundary-distance fields)."""

    values: np.ndarray            # (nx, ny, nz) float64
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if values.ndim != 3:
            raise VolumeError("scalar field must be 3-dimensional")
        if not np.all(np.isfinite(values)):
            raise VolumeError("scalar field contains non-finite values")

    @property
    def dims(self):
        return self.values.shape


@dataclass(frozen=True)
class VectorField:
    """Dense per-voxel 3-vectors (NDC displacement units)."""

    vectors: np.ndarray           # (nx, ny, nz, 3) float64
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "spacing", _as_triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        if vectors.ndim != 4 or vectors.shape[-1] != 3:
            raise VolumeError("vector field must have shape (nx, ny, nz, 3)")
        if not np.all(np.isfinite(vectors)):
            raise VolumeError("vector field contains non-finite values")

    @property
    def dims(self):
        return self.vectors.shape[:3]


@dataclass(frozen=True)
class NdcMap:
    """Affine map voxel-index-space <-> the NDC cube [-1, 1]^3.

    ``ndc = translation + scale * index``.  The physical scale is uniform
    (one mm-per-NDC-unit factor shared by all axes), so mapped shapes are
    preserved; the volume bounding box fits in [-1, 1]^3 centered at origin.
    """

    scale: np.ndarray             # (3,) NDC units per voxel index step
    translation: np.ndarray       # (3,) NDC position of voxel (0, 0, 0)

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "translation", trans)
        if np.any(scale == 0.0):
            raise VolumeError("NdcMap scale components must be nonzero")

    @classmethod
    def for_grid(cls, dims, spacing):
        dims = np.asarray(dims, dtype=np.float64)
        spacing = np.asarray(spacing, dtype=np.float64)
        half_extent = float(np.max(dims * spacing)) / 2.0
        scale = spacing / half_extent
        translation = -(dims - 1.0) * spacing / (2.0 * half_extent)
        return cls(scale=scale, translation=translation)

    @classmethod
    def for_volume(cls, vol):
        return cls.for_grid(vol.dims, vol.spacing)

    def index_to_ndc(self, idx):
        return self.translation + self.scale * np.asarray(idx, dtype=np.float64)

    def ndc_to_index(self, p):
        return (np.asarray(p, dtype=np.float64) - self.translation) / self.scale


def mm_per_ndc_unit(field, ndc):
    """Millimetres represented by one NDC unit of `ndc` over `field`'s grid."""
    return float(field.spacing[0] / ndc.scale[0])


# ---------------------------------------------------------------------------
# Volume / field file I/O: <name>.json header + <name>.raw little-endian payload
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("dims", "spacing_mm", "origin_mm", "dtype", "order")


def _paths(path):
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _read_header(header_path):
    try:
        text = header_path.read_text()
    except OSError as e:
        raise VolumeFormatError(f"cannot read header {header_path}: {e}") from e
    try:
        header = json.loads(text)
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"malformed header {header_path}: {e}") from e
    for key in _HEADER_KEYS:
        if key not in header:
            raise VolumeFormatError(f"malformed header {header_path}: missing '{key}'")
    if header["order"] != "zyx-c-contiguous":
        raise VolumeFormatError(f"unsupported order {header['order']!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(int(d) != d or d < 1 for d in dims):
        raise VolumeFormatError(f"malformed dims {dims!r}")
    return header


def _read_payload(raw_path, expected_bytes):
    try:
        payload = raw_path.read_bytes()
    except OSError as e:
        raise VolumeFormatError(f"cannot read payload {raw_path}: {e}") from e
    if len(payload) != expected_bytes:
        raise VolumeFormatError(
            f"size mismatch: header implies {expected_bytes} bytes, "
            f"payload has {len(payload)}"
        )
    return payload


def load_volume(path):
    """Load a LabelVolume from a header+raw pair (path may omit the suffix)."""
    header_path, raw_path = _paths(path)
    header = _read_header(header_path)
    if header["dtype"] != "u8":
        raise VolumeFormatError(f"label volume dtype must be 'u8', got {header['dtype']!r}")
    nx, ny, nz = (int(d) for d in header["dims"])
    payload = _read_payload(raw_path, nx * ny * nz)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(nz, ny, nx).transpose(2, 1, 0)
    if arr.max(initial=0) > max(VALID_VOLUME_LABELS):
        raise VolumeFormatError(f"label value {int(arr.max())} outside {{0..3}}")
    return LabelVolume(labels=arr.copy(), spacing=header["spacing_mm"],
                       origin=header["origin_mm"])


def save_volume(vol, path):
    header_path, raw_path = _paths(path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": "u8",
        "order": "zyx-c-contiguous",
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(vol.labels.transpose(2, 1, 0)).tobytes())
    return header_path, raw_path


def load_field(path):
    """Load a ScalarField or VectorField ('f32' header, optional channels: 3)."""
    header_path, raw_path = _paths(path)
    header = _read_header(header_path)
    if header["dtype"] != "f32":
        raise VolumeFormatError(f"field dtype must be 'f32', got {header['dtype']!r}")
    nx, ny, nz = (int(d) for d in header["dims"])
    channels = int(header.get("channels", 1))
    payload = _read_payload(raw_path, nx * ny * nz * channels * 4)
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if channels == 3:
        arr = arr.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
        return VectorField(vectors=arr.copy(), spacing=header["spacing_mm"],
                           origin=header["origin_mm"])
    arr = arr.reshape(nz, ny, nx).transpose(2, 1, 0)
    return ScalarField(values=arr.copy(), spacing=header["spacing_mm"],
                       origin=header["origin_mm"])


def save_field(field, path):
    header_path, raw_path = _paths(path)
    header = {
        "dims": list(field.dims),
        "spacing_mm": list(field.spacing),
        "origin_mm": list(field.origin),
        "dtype": "f32",
        "order": "zyx-c-contiguous",
    }
    if isinstance(field, VectorField):
        header["channels"] = 3
        data = field.vectors.transpose(2, 1, 0, 3)
    else:
        data = field.values.transpose(2, 1, 0)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    raw_path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return header_path, raw_path


# ---------------------------------------------------------------------------
# Resampling and masks
# ---------------------------------------------------------------------------

def resample_isotropic(vol, target):
    """Nearest-neighbour resample to isotropic `target` mm spacing.

    The physical bounding box (voxel boxes, not centers) is preserved within
    one voxel.
    """
    if target <= 0:
        raise VolumeError("target spacing must be positive")
    dims = np.asarray(vol.dims, dtype=np.float64)
    spacing = np.asarray(vol.spacing, dtype=np.float64)
    extent = dims * spacing
    out_dims = np.ceil(extent / target - 1e-9).astype(int)
    if np.any(out_dims < 2):
        raise VolumeError(
            f"target {target} mm larger than the volume extent on an axis "
            f"(extent {tuple(extent)})"
        )
    origin = np.asarray(vol.origin, dtype=np.float64)
    out_origin = origin - spacing / 2.0 + target / 2.0
    # Per-axis nearest source index for every output voxel center.
    src_idx = []
    for a in range(3):
        centers = out_origin[a] + target * np.arange(out_dims[a])
        i = np.rint((centers - origin[a]) / spacing[a]).astype(int)
        src_idx.append(np.clip(i, 0, int(dims[a]) - 1))
    labels = vol.labels[np.ix_(src_idx[0], src_idx[1], src_idx[2])]
    return LabelVolume(labels=labels, spacing=(target,) * 3, origin=tuple(out_origin))


def surface_mask(vol, target):
    """Binary foreground mask of the segmentation region bounded by `target`."""
    if target not in TARGET_REGION_LABELS:
        raise VolumeError(f"unknown surface target {target!r}")
    region = TARGET_REGION_LABELS[target]
    return np.isin(vol.labels, region)


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform (separable parabola lower envelopes)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _lower_envelope_1d(f, out, v, z, step):
    # Squared-distance transform of one scan line.  With step == 1 and integer
    # inputs all outputs are integer-valued (exact in float64).
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -_INF
    z[1] = _INF
    for q in range(1, n):
        fq = f[q] + (q * step) ** 2
        while True:
            vk = v[k]
            s = (fq - (f[vk] + (vk * step) ** 2)) / (2.0 * step * (q - vk))
            if s <= z[k] and k > 0:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        x = q * step
        while z[k + 1] < x:
            k += 1
        dx = x - v[k] * step
        out[q] = dx * dx + f[v[k]]


@njit(cache=True)
def _edt_pass_last_axis(D, step):
    a, b, n = D.shape
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1)
    for i in range(a):
        for j in range(b):
            for q in range(n):
                f[q] = D[i, j, q]
            _lower_envelope_1d(f, out, v, z, step)
            for q in range(n):
                D[i, j, q] = out[q]


def squared_distance_to_set(mask, spacing=(1.0, 1.0, 1.0)):
    """Exact squared Euclidean distance from every voxel to the nearest
    voxel center of the set marked by `mask` (anisotropic spacing respected).

    Raises if the set is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise VolumeError("distance to an empty voxel set is undefined")
    spacing = np.asarray(spacing, dtype=np.float64)
    D = np.where(mask, 0.0, _INF)
    for ax in range(3):
        Dm = np.ascontiguousarray(np.moveaxis(D, ax, 2))
        _edt_pass_last_axis(Dm, float(spacing[ax]))
        D = np.moveaxis(Dm, 2, ax)
    return np.ascontiguousarray(D)


def edt(mask, spacing, origin=(0.0, 0.0, 0.0)):
    """Unsigned boundary distance d(p) = dist(p, foreground) + dist(p, background).

    The distance of an absent class (all-foreground / all-background mask) is
    the volume-diagonal sentinel, reported via DegenerateFieldWarning.
    """
    mask = np.asarray(mask, dtype=bool)
    spacing = _as_triple(spacing, "spacing")
    dims = np.asarray(mask.shape, dtype=np.float64)
    sentinel = float(np.linalg.norm(dims * np.asarray(spacing)))
    n_fg = int(mask.sum())
    if n_fg == 0 or n_fg == mask.size:
        absent = "foreground" if n_fg == 0 else "background"
        warnings.warn(
            f"degenerate field: mask has no {absent}; using +extent sentinel",
            DegenerateFieldWarning,
            stacklevel=2,
        )
    if n_fg > 0:
        d_fg = np.sqrt(squared_distance_to_set(mask, spacing))
    else:
        d_fg = np.full(mask.shape, sentinel)
    if n_fg < mask.size:
        d_bg = np.sqrt(squared_distance_to_set(~mask, spacing))
    else:
        d_bg = np.full(mask.shape, sentinel)
    return ScalarField(values=d_fg + d_bg, spacing=spacing, origin=origin)


# ---------------------------------------------------------------------------
# Gradient fields
# ---------------------------------------------------------------------------

def raw_gradient(d, ndc):
    """Partial-derivative gradient of the distance field in NDC units
    (central differences in the interior, one-sided at the boundaries)."""
    if min(d.dims) < 3:
        raise VolumeError("gradient needs dims >= 3 per axis")
    s_mm = mm_per_ndc_unit(d, ndc)
    values = d.values / s_mm
    gx, gy, gz = np.gradient(values, ndc.scale[0], ndc.scale[1], ndc.scale[2])
    return VectorField(vectors=np.stack((gx, gy, gz), axis=-1),
                       spacing=d.spacing, origin=d.origin)


def gradient_field(d, ndc, eps=1e-6):
    """Descent displacement field g(p) = -d(p) * grad d / max(|grad d|, eps).

    One addition of a sampled value moves a vertex approximately onto the
    nearest point of the mask boundary.
    """
    grad = raw_gradient(d, ndc)
    s_mm = mm_per_ndc_unit(d, ndc)
    d_ndc = d.values / s_mm
    norm = np.linalg.norm(grad.vectors, axis=-1)
    denom = np.maximum(norm, eps)
    vec = -(d_ndc / denom)[..., None] * grad.vectors
    return VectorField(vectors=vec, spacing=d.spacing, origin=d.origin)


# ---------------------------------------------------------------------------
# Trilinear sampling
# ---------------------------------------------------------------------------

def sample_trilinear(field, points):
    """Trilinearly interpolate `field` at NDC points (shape (..., 3) or (3,)).

    Points outside the voxel-center hull are clamped to the hull.
    """
    data = field.vectors if isinstance(field, VectorField) else field.values
    p = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise VolumeError("non-finite sample point")
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    if p2.shape[-1] != 3:
        raise VolumeError("sample points must have 3 components")
    ndc = NdcMap.for_grid(field.dims, field.spacing)
    u = (p2 - ndc.translation) / ndc.scale
    dims = field.dims
    out_trailing = data.shape[3:] if data.ndim == 4 else ()
    i0 = np.empty((len(p2), 3), dtype=np.int64)
    t = np.empty((len(p2), 3))
    for a in range(3):
        ua = np.clip(u[:, a], 0.0, dims[a] - 1.0)
        ia = np.minimum(np.floor(ua).astype(np.int64), dims[a] - 2) if dims[a] > 1 else np.zeros(len(p2), np.int64)
        i0[:, a] = ia
        t[:, a] = ua - ia
    acc = np.zeros((len(p2),) + out_trailing)
    for dx in (0, 1):
        wx = (1.0 - t[:, 0]) if dx == 0 else t[:, 0]
        for dy in (0, 1):
            wy = (1.0 - t[:, 1]) if dy == 0 else t[:, 1]
            for dz in (0, 1):
                wz = (1.0 - t[:, 2]) if dz == 0 else t[:, 2]
                w = wx * wy * wz
                vals = data[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                if out_trailing:
                    acc += w[:, None] * vals
                else:
                    acc += w * vals
    return acc[0] if single else acc
