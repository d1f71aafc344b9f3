"""Synthetic bi-ventricular label volumes and the procedural labeled template.

The phantom is assembled from analytic ellipsoid solids in a canonical frame
(long axis on Z, apex at -Z), optionally tilted and swung, then rasterized at
voxel centers.  The analytic solids are returned alongside the volume so
tests can measure true surface distances.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import anatomy
from .anatomy import LV, MYO, RV
from .mesh import LabeledMesh, midpoint_subdivide
from .volume import LabelVolume


class PhantomError(ValueError):
    pass


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (128, 128, 128)
    spacing: float = 2.0                      # mm, isotropic
    lv_semi_axes: tuple = (22.0, 22.0, 38.0)  # LV cavity ellipsoid (mm)
    lv_wall: float = 10.0                     # LV wall thickness (mm)
    rv_center: tuple = (30.0, 0.0, 2.0)       # RV ellipsoid center (mm)
    rv_semi_axes: tuple = (30.0, 26.0, 40.0)  # RV epicardial ellipsoid (mm)
    rv_wall: float = 3.0                      # RV free-wall thickness (mm)
    base_height: float = 26.0                 # basal truncation plane z (mm)
    tilt: float = 0.0                         # long-axis tilt about Y (rad)
    swing: float = 0.0                        # rotation about Z (rad)
    jitter: float = 0.0                       # fractional shape jitter from seed
    seed: int = 0

    def __post_init__(self):
        if self.lv_wall <= 0 or self.rv_wall <= 0:
            raise PhantomError("wall thicknesses must be positive")
        if self.spacing <= 0:
            raise PhantomError("spacing must be positive")
        if min(self.dims) < 2:
            raise PhantomError("dims must be >= 2 per axis")

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "spacing": self.spacing,
            "lv_semi_axes": list(self.lv_semi_axes),
            "lv_wall": self.lv_wall,
            "rv_center": list(self.rv_center),
            "rv_semi_axes": list(self.rv_semi_axes),
            "rv_wall": self.rv_wall,
            "base_height": self.base_height,
            "tilt": self.tilt,
            "swing": self.swing,
            "jitter": self.jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class DegradationSpec:
    slice_multiplier: int = 1                 # through-plane decimation factor
    max_shift_mm: float = 0.0                 # per-slice in-plane shift bound
    drop_apical: int = 0
    drop_basal: int = 0

    def __post_init__(self):
        if self.slice_multiplier < 1:
            raise PhantomError("slice multiplier must be >= 1")
        if self.max_shift_mm < 0:
            raise PhantomError("shift bound must be >= 0")
        if self.drop_apical < 0 or self.drop_basal < 0:
            raise PhantomError("dropped slice counts must be >= 0")


def _ellipsoid_distance(points, center, semi):
    """Distance from points to an axis-aligned ellipsoid surface.

    Solves the nearest-point condition sum((a_i p_i / (a_i^2 + t))^2) = 1 by
    bisection; falls back to radial projection on the (measure-zero) axis
    singularities.  Oracle-grade accuracy (<< one voxel).
    """
    p = np.asarray(points, dtype=np.float64) - np.asarray(center)
    a = np.asarray(semi, dtype=np.float64)
    a2 = a ** 2
    lo = np.full(len(p), -a2.min() * (1.0 - 1e-12))
    hi = np.sqrt(((a * p) ** 2).sum(axis=1)) + a.max()

    def F(t):
        return ((a * p / (a2 + t[:, None])) ** 2).sum(axis=1) - 1.0

    ok = F(lo) > 0
    t_lo, t_hi = lo.copy(), hi.copy()
    for _ in range(90):
        mid = 0.5 * (t_lo + t_hi)
        pos = F(mid) > 0
        t_lo = np.where(pos, mid, t_lo)
        t_hi = np.where(pos, t_hi, mid)
    t = 0.5 * (t_lo + t_hi)
    x = a2 * p / (a2 + t[:, None])
    dist = np.linalg.norm(x - p, axis=1)
    if not ok.all():
        # radial fallback for points on a principal axis
        r = np.sqrt(((p / a) ** 2).sum(axis=1))
        x_rad = np.where(r[:, None] > 1e-12, p / np.maximum(r, 1e-12)[:, None], [1, 0, 0] * a)
        d_rad = np.linalg.norm(x_rad - p, axis=1)
        dist = np.where(ok, dist, d_rad)
    return dist


@dataclass(frozen=True)
class AnalyticSurfaces:
    """Canonical-frame solids of a phantom plus its world rotation."""

    ellipsoids: dict                           # name -> (center, semi_axes), mm
    base_height: float
    rotation: np.ndarray                       # world = rotation @ canonical

    def surface_distance(self, points):
        """Min distance from world-frame points to any phantom surface."""
        p = np.asarray(points, dtype=np.float64)
        q = p @ self.rotation                  # R^-1 p  (R orthonormal)
        best = np.full(len(q), np.inf)
        for center, semi in self.ellipsoids.values():
            best = np.minimum(best, _ellipsoid_distance(q, center, semi))
        # basal cut plane counts for points inside the epicardial hull
        inside = np.zeros(len(q), dtype=bool)
        for name in ("lv_epi", "rv_epi"):
            center, semi = self.ellipsoids[name]
            r = (((q - center) / semi) ** 2).sum(axis=1)
            inside |= r <= 1.0
        d_plane = np.abs(q[:, 2] - self.base_height)
        best = np.where(inside, np.minimum(best, d_plane), best)
        return best

    def to_dict(self):
        return {
            "ellipsoids": {k: [list(c), list(s)] for k, (c, s) in self.ellipsoids.items()},
            "base_height": self.base_height,
            "rotation": self.rotation.tolist(),
        }


def _jittered(spec):
    rng = np.random.default_rng(spec.seed)
    j = spec.jitter

    def f(n=1):
        return 1.0 + j * rng.uniform(-1.0, 1.0, n)

    lv_semi = np.asarray(spec.lv_semi_axes) * f(3)
    lv_wall = spec.lv_wall * float(f())
    rv_semi = np.asarray(spec.rv_semi_axes) * f(3)
    rv_wall = spec.rv_wall * float(f())
    rv_center = np.asarray(spec.rv_center, dtype=np.float64)
    rv_center = rv_center + j * rng.uniform(-1.0, 1.0, 3) * np.array([6.0, 6.0, 4.0])
    base = spec.base_height + j * float(rng.uniform(-1.0, 1.0)) * 8.0
    return lv_semi, lv_wall, rv_semi, rv_wall, rv_center, base


def generate_phantom(spec):
    """Rasterize the phantom and return (LabelVolume, AnalyticSurfaces)."""
    lv_semi, lv_wall, rv_semi, rv_wall, rv_center, base = _jittered(spec)
    lv_epi_semi = lv_semi + lv_wall
    rv_endo_semi = rv_semi - rv_wall
    if np.any(rv_endo_semi <= 0):
        raise PhantomError("RV wall thicker than the RV ellipsoid")

    dims = spec.dims
    spacing = (spec.spacing,) * 3
    origin = tuple(-(np.asarray(dims) - 1) * spec.spacing / 2.0)
    ax = [origin[a] + spec.spacing * np.arange(dims[a]) for a in range(3)]
    X, Y, Z = np.meshgrid(*ax, indexing="ij")
    P = np.stack([X, Y, Z], axis=-1)
    R = _rot_z(spec.swing) @ _rot_y(spec.tilt)
    Q = P @ R                                   # R^-1 applied row-wise

    def inside(center, semi):
        d = (Q - np.asarray(center)) / np.asarray(semi)
        return (d ** 2).sum(axis=-1) <= 1.0

    lv_endo_in = inside((0.0, 0.0, 0.0), lv_semi)
    lv_epi_in = inside((0.0, 0.0, 0.0), lv_epi_semi)
    rv_endo_in = inside(rv_center, rv_endo_semi)
    rv_epi_in = inside(rv_center, rv_semi)
    below = Q[..., 2] <= base

    if not (rv_epi_in & lv_epi_in).any():
        raise PhantomError("RV not attachable to the LV wall")

    myo = ((lv_epi_in & ~lv_endo_in) | (rv_epi_in & ~rv_endo_in & ~lv_epi_in)) & below
    lv = lv_endo_in & below
    rv = rv_endo_in & ~lv_epi_in & below
    labels = np.zeros(dims, dtype=np.uint8)
    labels[myo] = MYO
    labels[rv] = RV
    labels[lv] = LV
    for name, mask in (("LV", lv), ("RV", rv), ("Myo", myo)):
        if not mask.any():
            raise PhantomError(f"phantom geometry left the {name} region empty")

    surfaces = AnalyticSurfaces(
        ellipsoids={
            "lv_endo": ((0.0, 0.0, 0.0), tuple(lv_semi)),
            "lv_epi": ((0.0, 0.0, 0.0), tuple(lv_epi_semi)),
            "rv_endo": (tuple(rv_center), tuple(rv_endo_semi)),
            "rv_epi": (tuple(rv_center), tuple(rv_semi)),
        },
        base_height=float(base),
        rotation=R,
    )
    vol = LabelVolume(labels=labels, spacing=spacing, origin=origin)
    return vol, surfaces


def degrade(vol, dspec, seed=0):
    """Through-plane decimation, per-slice in-plane shifts, end-slice drops."""
    rng = np.random.default_rng(seed)
    m = dspec.slice_multiplier
    labels = vol.labels[:, :, ::m].copy()
    sz = vol.spacing[2] * m
    nx, ny, nz = labels.shape

    if dspec.max_shift_mm > 0:
        for k in range(nz):
            sx_mm, sy_mm = rng.uniform(-dspec.max_shift_mm, dspec.max_shift_mm, 2)
            dx = int(np.rint(sx_mm / vol.spacing[0]))
            dy = int(np.rint(sy_mm / vol.spacing[1]))
            sl = labels[:, :, k]
            shifted = np.zeros_like(sl)
            xs0, xs1 = max(0, dx), min(nx, nx + dx)
            xd0, xd1 = max(0, -dx), min(nx, nx - dx)
            ys0, ys1 = max(0, dy), min(ny, ny + dy)
            yd0, yd1 = max(0, -dy), min(ny, ny - dy)
            shifted[xs0:xs1, ys0:ys1] = sl[xd0:xd1, yd0:yd1]
            labels[:, :, k] = shifted

    da, db = dspec.drop_apical, dspec.drop_basal
    labels = labels[:, :, da: nz - db if db else nz]
    if labels.shape[2] < 3:
        raise PhantomError("degradation left fewer than 3 slices")
    origin = (vol.origin[0], vol.origin[1], vol.origin[2] + da * sz)
    return LabelVolume(labels=labels, spacing=(vol.spacing[0], vol.spacing[1], sz),
                       origin=origin)


# ---------------------------------------------------------------------------
# Procedural labeled template
# ---------------------------------------------------------------------------

def _open_bowl(center, semi, rim_z, rings, segments):
    """Truncated-ellipsoid bowl, apex at -Z, open rim at z = rim_z.

    Returns (vertices, faces, rim_index_array); faces wind for outward normals.
    """
    cx, cy, cz = center
    a, b, c = semi
    cos_max = (cz - rim_z) / c
    cos_max = min(1.0, max(-1.0, cos_max))
    theta_max = math.acos(cos_max)
    verts = [(cx, cy, cz - c)]
    for i in range(1, rings + 1):
        theta = theta_max * i / rings
        st, ct = math.sin(theta), math.cos(theta)
        for s in range(segments):
            phi = 2.0 * math.pi * s / segments
            verts.append((cx + a * st * math.cos(phi),
                          cy + b * st * math.sin(phi),
                          cz - c * ct))
    faces = []
    ring = lambda i, s: 1 + (i - 1) * segments + (s % segments)
    for s in range(segments):
        faces.append((0, ring(1, s + 1), ring(1, s)))
    for i in range(1, rings):
        for s in range(segments):
            a0, a1 = ring(i, s), ring(i, s + 1)
            b0, b1 = ring(i + 1, s), ring(i + 1, s + 1)
            faces.append((a0, a1, b0))
            faces.append((a1, b1, b0))
    rim = np.array([ring(rings, s) for s in range(segments)], dtype=np.int64)
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64), rim


_TEMPLATE_BOWLS = {
    # name: (center, semi_axes, rim_z, rings, segments)
    "outer": ((0.05, 0.0, 0.0), (0.42, 0.34, 0.46), 0.22, 10, 20),
    "lv_endo": ((-0.10, 0.0, 0.02), (0.16, 0.16, 0.30), 0.20, 7, 14),
    "rv_endo": ((0.17, 0.0, 0.03), (0.20, 0.20, 0.28), 0.20, 7, 12),
}
# Notional LV epicardial ellipsoid the RV-endo bowl is clipped against,
# giving the template its crescent-shaped RV cavity with a septal patch.
_TEMPLATE_LV_EPI = ((-0.05, 0.0, 0.0), (0.27, 0.27, 0.38))
_RV_SECTOR_DEG = 70.0


def _clip_outside_ellipsoid(verts, center, semi):
    """Push vertices inside the ellipsoid radially (in XY, z fixed) onto it."""
    c = np.asarray(center)
    a = np.asarray(semi)
    rel = verts - c
    q = (rel / a) ** 2
    inside = q.sum(axis=1) < 1.0
    out = verts.copy()
    for i in np.flatnonzero(inside):
        x, y, z = rel[i]
        planar = (x / a[0]) ** 2 + (y / a[1]) ** 2
        room = 1.0 - (z / a[2]) ** 2
        if planar <= 1e-12 or room <= 0.0:
            continue
        s = np.sqrt(room / planar)
        out[i, 0] = c[0] + s * x
        out[i, 1] = c[1] + s * y
    return out


def procedural_template(subdivisions=0, resolution=1.0):
    """Parametric bi-ventricular template: LV/RV endocardial bowls plus one
    epicardial bowl split into LV-epi / RV-epi sectors, valve labels on every
    open rim.  Long axis on Z, apex at -Z, normalized to NDC.

    The default lands near the canonical 388-vertex / 780-face budget;
    `resolution` scales the tessellation and `subdivisions` applies midpoint
    refinement afterwards.
    """
    if subdivisions < 0:
        raise PhantomError("subdivision level must be >= 0")
    all_verts, all_faces, all_labels = [], [], []
    offset = 0
    for name, (center, semi, rim_z, rings, segments) in _TEMPLATE_BOWLS.items():
        rings_r = max(3, int(round(rings * resolution)))
        seg_r = max(6, int(round(segments * resolution)))
        v, f, rim = _open_bowl(center, semi, rim_z, rings_r, seg_r)
        if name == "rv_endo":
            v = _clip_outside_ellipsoid(v, *_TEMPLATE_LV_EPI)
        labels = np.empty(len(v), dtype=np.uint8)
        if name == "lv_endo":
            labels[:] = anatomy.LV_ENDO
        elif name == "rv_endo":
            labels[:] = anatomy.RV_ENDO
        else:
            phi = np.degrees(np.arctan2(v[:, 1] - center[1], v[:, 0] - center[0]))
            labels[:] = np.where(np.abs(phi) <= _RV_SECTOR_DEG,
                                 anatomy.RV_EPI, anatomy.LV_EPI)
            labels[0] = anatomy.LV_EPI          # apex belongs to the LV
        labels[rim] = anatomy.VALVE
        all_verts.append(v)
        all_faces.append(f + offset)
        all_labels.append(labels)
        offset += len(v)
    vertices = np.vstack(all_verts)
    # keep vertices exactly representable in the f32 mesh format
    vertices = vertices.astype(np.float32).astype(np.float64)
    mesh = LabeledMesh(vertices=vertices,
                       faces=np.vstack(all_faces),
                       labels=np.concatenate(all_labels))
    for _ in range(subdivisions):
        mesh, _ = midpoint_subdivide(mesh)
    return mesh


def save_surfaces(surfaces, path):
    path.write_text(json.dumps(surfaces.to_dict(), indent=2) + "\n")
    return path


def load_surfaces(path):
    d = json.loads(path.read_text())
    ell = {k: (tuple(c), tuple(s)) for k, (c, s) in d["ellipsoids"].items()}
    return AnalyticSurfaces(ellipsoids=ell, base_height=d["base_height"],
                            rotation=np.asarray(d["rotation"]))
