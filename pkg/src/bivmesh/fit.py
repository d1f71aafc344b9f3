"""Patient-specific template adjustment: rigid "swing" rotation about the long
axis followed by iterative per-label gradient-field deformation."""

import math
from dataclasses import dataclass, field

import numpy as np

from .anatomy import DEFORM_ORDER, RV, RV_EPI, VALVE
from .mesh import LabeledMesh
from .volume import sample_trilinear


class FitError(ValueError):
    pass


class DegenerateProjectionError(FitError):
    pass


@dataclass(frozen=True)
class SwingRotation:
    """Rotation about the Z axis through the NDC origin."""

    angle: float                                  # radians, in (-pi, pi]
    pivot: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (-math.pi < self.angle <= math.pi + 1e-12):
            raise FitError(f"angle {self.angle} outside (-pi, pi]")

    @property
    def matrix(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 10
    step_clamp: float = 0.25                      # max per-iteration NDC displacement
    targets: tuple = DEFORM_ORDER                 # enabled surface targets

    def __post_init__(self):
        if self.iterations < 1:
            raise FitError("iterations must be >= 1")
        if self.step_clamp <= 0:
            raise FitError("step clamp must be positive")


@dataclass
class FitLog:
    """Per-iteration mean sampled displacement magnitude (a |d(v)| proxy)."""

    mean_distance: np.ndarray                     # (iterations,)
    per_label: dict = field(default_factory=dict) # target -> (iterations,)


def rv_centroid(m):
    """Arithmetic mean of the RV-epicardial vertex positions."""
    sel = m.labels == RV_EPI
    if not sel.any():
        raise FitError("mesh has no RV-epi vertices")
    return m.vertices[sel].mean(axis=0)


def seg_rv_centroid(vol, ndc):
    """Mean of the RV voxel centers of a segmentation, mapped to NDC."""
    idx = np.argwhere(vol.labels == RV)
    if len(idx) == 0:
        raise FitError("segmentation has no RV voxels")
    return ndc.index_to_ndc(idx).mean(axis=0)


def _signed_xy_angle(src, dst):
    sn = math.hypot(src[0], src[1])
    dn = math.hypot(dst[0], dst[1])
    if sn <= 1e-6 or dn <= 1e-6:
        raise DegenerateProjectionError("RV centroid projects onto the Z axis")
    phi = math.atan2(dst[1], dst[0]) - math.atan2(src[1], src[0])
    if phi <= -math.pi:
        phi += 2.0 * math.pi
    elif phi > math.pi:
        phi -= 2.0 * math.pi
    return phi


def swing_align(m, target_centroid):
    """Rotate the mesh about Z so its RV-centroid azimuth matches the target's.

    Returns (rotated mesh, SwingRotation).
    """
    src = rv_centroid(m)
    phi = _signed_xy_angle(src, np.asarray(target_centroid, dtype=np.float64))
    rot = SwingRotation(angle=phi)
    vertices = m.vertices @ rot.matrix.T
    return LabeledMesh(vertices=vertices, faces=m.faces, labels=m.labels), rot


def deform_in_field(m, fields, cfg=None):
    """Iteratively move each label group along its sampled descent field.

    `fields` maps each enabled surface target to a VectorField.  Valve
    vertices never move.  Returns (mesh, FitLog); the log records the mean
    sampled displacement magnitude per iteration (pre-clamp), which for a
    descent field equals the sampled boundary distance.
    """
    cfg = cfg or FitConfig()
    order = [t for t in DEFORM_ORDER if t in cfg.targets]
    for t in order:
        if t not in fields:
            raise FitError(f"missing gradient field for enabled target {t}")
    v = m.vertices.copy()
    sums = np.zeros(cfg.iterations)
    counts = np.zeros(cfg.iterations)
    per_label = {}
    for target in order:
        sel = (m.labels == target) & (m.labels != VALVE)
        if not sel.any():
            continue
        label_means = np.zeros(cfg.iterations)
        for it in range(cfg.iterations):
            offset = sample_trilinear(fields[target], v[sel])
            mag = np.linalg.norm(offset, axis=1)
            factor = np.minimum(1.0, cfg.step_clamp / np.maximum(mag, 1e-300))
            v[sel] = v[sel] + offset * factor[:, None]
            sums[it] += mag.sum()
            counts[it] += len(mag)
            label_means[it] = mag.mean()
        per_label[target] = label_means
    mean = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    out = LabeledMesh(vertices=v, faces=m.faces, labels=m.labels)
    return out, FitLog(mean_distance=mean, per_label=per_label)
