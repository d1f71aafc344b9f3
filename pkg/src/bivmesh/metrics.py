"""Evaluation suite: volumetric overlap, surface distances, triangle quality,
manifoldness, and wall-clock timing."""

import csv
import json
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .gsn import boundary_voxel_mask
from .mesh import MeshError, build_edges, mesh_to_label_volume
from .volume import NdcMap, mm_per_ndc_unit, squared_distance_to_set


class MetricsError(ValueError):
    pass


def timed(op, *args, **kwargs):
    """Run op and return (result, wall seconds) from the monotonic clock."""
    t0 = time.perf_counter()
    result = op(*args, **kwargs)
    return result, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# Volumetric metrics
# ---------------------------------------------------------------------------

def dice(a, b):
    """2|a n b| / (|a| + |b|); defined as 1 when both volumes are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricsError(f"dim mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def hausdorff(a, b, percentile=100.0):
    """Symmetric boundary-voxel Hausdorff distance in voxel units.

    Exact (100th percentile) by default; pass percentile=95 for the robust
    variant.  Distances come from the exact EDT of each boundary set.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricsError(f"dim mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise MetricsError("hausdorff of an empty volume")
    ba = boundary_voxel_mask(a)
    bb = boundary_voxel_mask(b)
    if not ba.any():
        ba = a                                  # all-foreground degenerate case
    if not bb.any():
        bb = b
    unit = (1.0, 1.0, 1.0)
    d_to_b = np.sqrt(squared_distance_to_set(bb, unit))[ba]
    d_to_a = np.sqrt(squared_distance_to_set(ba, unit))[bb]
    if percentile >= 100.0:
        return float(max(d_to_b.max(), d_to_a.max()))
    return float(max(np.percentile(d_to_b, percentile),
                     np.percentile(d_to_a, percentile)))


# ---------------------------------------------------------------------------
# Exact point-to-mesh distance
# ---------------------------------------------------------------------------

def _clamp01(x):
    return np.clip(x, 0.0, 1.0)


def _sq_point_triangle(P, A, B, C):
    """Exact squared distance from points P to triangles (A, B, C), pairwise."""
    E0 = B - A
    E1 = C - A
    D = A - P
    a = (E0 * E0).sum(axis=1)
    b = (E0 * E1).sum(axis=1)
    c = (E1 * E1).sum(axis=1)
    d = (E0 * D).sum(axis=1)
    e = (E1 * D).sum(axis=1)
    det = np.maximum(a * c - b * b, 1e-300)
    s = b * e - c * d
    t = b * d - a * e

    a_s = np.maximum(a, 1e-300)
    c_s = np.maximum(c, 1e-300)
    denom = np.maximum(a - 2.0 * b + c, 1e-300)

    s_in = s / det
    t_in = t / det

    # edge/corner candidates
    s_r1 = _clamp01((c + e - b - d) / denom)      # edge s + t = 1
    t_r1 = 1.0 - s_r1
    t_r3 = _clamp01(-e / c_s)                     # edge s = 0
    s_r5 = _clamp01(-d / a_s)                     # edge t = 0

    inside = s + t <= det
    s_neg = s < 0.0
    t_neg = t < 0.0

    # region 2: corner C side
    r2_edge1 = (c + e) > (b + d)
    s_r2 = np.where(r2_edge1, s_r1, 0.0)
    t_r2 = np.where(r2_edge1, t_r1, t_r3)
    # region 6: corner B side
    r6_edge1 = (a + d) > (b + e)
    t_r6 = np.where(r6_edge1, _clamp01((a + d - b - e) / denom), 0.0)
    s_r6 = np.where(r6_edge1, 1.0 - t_r6, s_r5)
    # region 4: corner A side
    r4_est = d < 0.0
    s_r4 = np.where(r4_est, s_r5, 0.0)
    t_r4 = np.where(r4_est, 0.0, t_r3)

    S = np.where(
        inside,
        np.where(s_neg, np.where(t_neg, s_r4, 0.0),
                 np.where(t_neg, s_r5, s_in)),
        np.where(s_neg, s_r2, np.where(t_neg, s_r6, s_r1)),
    )
    T = np.where(
        inside,
        np.where(s_neg, np.where(t_neg, t_r4, t_r3),
                 np.where(t_neg, 0.0, t_in)),
        np.where(s_neg, t_r2, np.where(t_neg, t_r6, t_r1)),
    )
    closest = A + S[:, None] * E0 + T[:, None] * E1
    diff = closest - P
    return (diff * diff).sum(axis=1)


def point_mesh_distance(points, m, chunk=512):
    """Exact minimum distance from each point to any triangle of the mesh.

    A kd-tree over face centroids prunes candidates without giving up
    exactness: a face can only beat the current bound if its centroid lies
    within bound + max circumradius.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = m.vertices[m.faces]
    centroids = tri.mean(axis=1)
    radii = np.linalg.norm(tri - centroids[:, None, :], axis=2).max(axis=1)
    r_max = float(radii.max())
    tree = cKDTree(centroids)
    _, j0 = tree.query(points)
    ub = np.sqrt(_sq_point_triangle(points, tri[j0, 0], tri[j0, 1], tri[j0, 2]))
    best = ub.copy()
    for lo in range(0, len(points), chunk):
        hi = min(lo + chunk, len(points))
        groups = tree.query_ball_point(points[lo:hi], best[lo:hi] + r_max + 1e-12)
        pi = np.repeat(np.arange(lo, hi), [len(g) for g in groups])
        if len(pi) == 0:
            continue
        fi = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
        sq = _sq_point_triangle(points[pi], tri[fi, 0], tri[fi, 1], tri[fi, 2])
        np.minimum.at(best, pi, np.sqrt(sq))
    return best


def label_interface_mask(labels):
    """Foreground voxels with a 6-neighbour of a different label (in-grid)."""
    labels = np.asarray(labels)
    diff = np.zeros(labels.shape, dtype=bool)
    diff[1:, :, :] |= labels[1:, :, :] != labels[:-1, :, :]
    diff[:-1, :, :] |= labels[:-1, :, :] != labels[1:, :, :]
    diff[:, 1:, :] |= labels[:, 1:, :] != labels[:, :-1, :]
    diff[:, :-1, :] |= labels[:, :-1, :] != labels[:, 1:, :]
    diff[:, :, 1:] |= labels[:, :, 1:] != labels[:, :, :-1]
    diff[:, :, :-1] |= labels[:, :, :-1] != labels[:, :, 1:]
    return (labels > 0) & diff


def asd(m, gt_vol, n=5000, seed=0):
    """Mean exact point-to-mesh distance (mm) over n points sampled uniformly
    from the ground-truth segmentation's boundary-voxel centers."""
    if m.n_faces == 0:
        raise MetricsError("empty mesh")
    boundary = label_interface_mask(gt_vol.labels)
    idx = np.argwhere(boundary)
    if len(idx) == 0:
        raise MetricsError("ground-truth surface is empty")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(idx), size=n, replace=len(idx) < n)
    ndc = NdcMap.for_volume(gt_vol)
    pts = ndc.index_to_ndc(idx[pick])
    dists = point_mesh_distance(pts, m)
    s_mm = float(gt_vol.spacing[0] / ndc.scale[0])
    return float(dists.mean() * s_mm)


# ---------------------------------------------------------------------------
# Mesh quality
# ---------------------------------------------------------------------------

def aspect_ratio(m):
    """Per-triangle longest edge / (2 sqrt(3) inradius); 1 at equilateral."""
    V, F = m.vertices, m.faces
    A, B, C = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    e = np.stack([np.linalg.norm(B - C, axis=1),
                  np.linalg.norm(C - A, axis=1),
                  np.linalg.norm(A - B, axis=1)])
    area = 0.5 * np.linalg.norm(np.cross(B - A, C - A), axis=1)
    if np.any(area <= 0.0) or np.any(e <= 0.0):
        raise MetricsError("zero-area face")
    s = e.sum(axis=0) / 2.0
    inradius = area / s
    vals = e.max(axis=0) / (2.0 * np.sqrt(3.0) * inradius)
    return vals, float(vals.mean())


def scaled_jacobian(m):
    """(2/sqrt(3)) * min corner sine; 1 at equilateral, 0 for collinear."""
    V, F = m.vertices, m.faces
    P = [V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]]
    qs = []
    for k in range(3):
        u = P[(k + 1) % 3] - P[k]
        w = P[(k + 2) % 3] - P[k]
        lu = np.linalg.norm(u, axis=1)
        lw = np.linalg.norm(w, axis=1)
        if np.any(lu <= 0.0) or np.any(lw <= 0.0):
            raise MetricsError("zero-length edge")
        qs.append(np.linalg.norm(np.cross(u, w), axis=1) / (lu * lw))
    vals = (2.0 / np.sqrt(3.0)) * np.minimum(np.minimum(qs[0], qs[1]), qs[2])
    return vals, float(vals.mean())


def _face_normals(m):
    V, F = m.vertices, m.faces
    n = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(norm, 1e-300)


def normal_consistency(m):
    """Mean dot product of unit normals across interior edges."""
    table = build_edges(m)
    interior = table.face_counts == 2
    if not interior.any():
        return 1.0
    normals = _face_normals(m)
    f0 = table.incident[interior, 0]
    f1 = table.incident[interior, 1]
    return float((normals[f0] * normals[f1]).sum(axis=1).mean())


def non_manifold_ratio(m):
    """Fraction of faces touching an edge with more than 2 incident faces."""
    if m.n_faces == 0:
        return 0.0
    pairs = np.sort(m.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, inverse, counts = np.unique(pairs, axis=0, return_inverse=True,
                                   return_counts=True)
    bad_edge = counts[inverse] > 2
    bad_face = bad_edge.reshape(-1, 3).any(axis=1)
    return float(bad_face.sum() / m.n_faces)


# ---------------------------------------------------------------------------
# Report assembly and serialization
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    case_id: str
    dice_lv: float
    dice_rv: float
    dice_myo: float
    dice_mean: float
    hausdorff_vox: float
    hausdorff95_vox: float
    asd_mm: float
    aspect_ratio: float
    scaled_jacobian: float
    normal_consistency: float
    non_manifold_ratio: float
    seconds: float

    FIELDS = ("case_id", "dice_lv", "dice_rv", "dice_myo", "dice_mean",
              "hausdorff_vox", "hausdorff95_vox", "asd_mm", "aspect_ratio",
              "scaled_jacobian", "normal_consistency", "non_manifold_ratio",
              "seconds")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}


def evaluate_mesh(m, gt_vol, n_samples=5000, seed=0, seconds=0.0, case_id=""):
    """Full per-case report of a reconstructed mesh against its ground truth."""
    from .anatomy import LV, MYO, RV

    ndc = NdcMap.for_volume(gt_vol)
    pred = mesh_to_label_volume(m, gt_vol.dims, ndc, gt_vol.spacing, gt_vol.origin)
    gt = gt_vol.labels
    pl = pred.labels
    d_lv = dice(pl == LV, gt == LV)
    d_rv = dice(pl == RV, gt == RV)
    d_myo = dice(pl == MYO, gt == MYO)
    hd = hausdorff(pl > 0, gt > 0)
    hd95 = hausdorff(pl > 0, gt > 0, percentile=95.0)
    surf = asd(m, gt_vol, n=n_samples, seed=seed)
    _, aspr = aspect_ratio(m)
    _, jacr = scaled_jacobian(m)
    return MetricsReport(
        case_id=case_id,
        dice_lv=d_lv, dice_rv=d_rv, dice_myo=d_myo,
        dice_mean=(d_lv + d_rv + d_myo) / 3.0,
        hausdorff_vox=hd, hausdorff95_vox=hd95,
        asd_mm=surf,
        aspect_ratio=aspr,
        scaled_jacobian=jacr,
        normal_consistency=normal_consistency(m),
        non_manifold_ratio=non_manifold_ratio(m),
        seconds=seconds,
    )


def write_report_json(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return path


def write_batch_csv(reports, path):
    """One row per case plus mean and std footer rows over numeric columns."""
    numeric = [k for k in MetricsReport.FIELDS if k != "case_id"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsReport.FIELDS)
        for r in reports:
            d = r.to_dict()
            writer.writerow([d["case_id"]] + [repr(float(d[k])) for k in numeric])
        if reports:
            vals = {k: np.array([r.to_dict()[k] for r in reports], dtype=np.float64)
                    for k in numeric}
            writer.writerow(["mean"] + [repr(float(vals[k].mean())) for k in numeric])
            writer.writerow(["std"] + [repr(float(vals[k].std())) for k in numeric])
    return path
