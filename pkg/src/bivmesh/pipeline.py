"""End-to-end reconstruction pipelines and the ablation scheme catalogue."""

from dataclasses import dataclass

import numpy as np

from .anatomy import SURFACE_TARGETS
from .fit import FitConfig, deform_in_field, seg_rv_centroid, swing_align
from .gsn import build_point_cloud_set, gsn_forward, gsn_layer
from .mesh import laplacian_filter, loop_subdivide
from .metrics import evaluate_mesh, timed
from .volume import NdcMap, edt, gradient_field, surface_mask


SCHEMES = {
    1: "base template + two loop subdivisions",
    2: "gradient deformation + two loop subdivisions",
    3: "gradient deformation only",
    4: "gradient deformation + single learned subdivision",
    5: "gradient deformation + double learned subdivision",
}


class PipelineError(ValueError):
    pass


def build_fields(vol, eps=1e-6):
    """Per-surface-target descent displacement fields of a segmentation."""
    ndc = NdcMap.for_volume(vol)
    fields = {}
    for target in SURFACE_TARGETS:
        mask = surface_mask(vol, target)
        d = edt(mask, vol.spacing, origin=vol.origin)
        fields[target] = gradient_field(d, ndc, eps=eps)
    return fields


def fit_template(vol, template, cfg=None, align=True, deform=True, fields=None):
    """Swing alignment followed by gradient-field deformation.

    Returns (mesh, FitLog-or-None, SwingRotation-or-None).
    """
    mesh = template
    rot = None
    log = None
    if align:
        ndc = NdcMap.for_volume(vol)
        mesh, rot = swing_align(mesh, seg_rv_centroid(vol, ndc))
    if deform:
        if fields is None:
            fields = build_fields(vol)
        mesh, log = deform_in_field(mesh, fields, cfg or FitConfig())
    return mesh, log, rot


@dataclass
class ReconstructionResult:
    mesh: object
    report: object
    fit_log: object
    scheme: int
    seconds: float


def reconstruct(vol, template, scheme, stack=None, cfg=None,
                smooth_lambda=0.13, smooth_iterations=10,
                n_asd_samples=5000, seed=0, case_id="", fields=None,
                fitted=None, fit_log=None, evaluate=True):
    """Run one ablation scheme end to end.

    Precomputed `fields` / `fitted` may be shared across schemes of the same
    case; the reported generation time then excludes the shared stages.
    """
    if scheme not in SCHEMES:
        raise PipelineError(f"unknown scheme {scheme}; valid: 1..5")
    if scheme in (4, 5) and stack is None:
        raise PipelineError(f"scheme {scheme} needs a trained checkpoint")

    def generate():
        nonlocal fit_log
        if scheme == 1:
            mesh = template
        else:
            fitted_mesh = fitted
            if fitted_mesh is None:
                fitted_mesh, fl, _ = fit_template(vol, template, cfg, fields=fields)
                fit_log = fl
            mesh = fitted_mesh
        if scheme in (1, 2):
            mesh = loop_subdivide(loop_subdivide(mesh))
        elif scheme == 4:
            mesh = gsn_layer(mesh, stack.layers[0])
        elif scheme == 5:
            mesh = gsn_forward(mesh, stack)[-1]
        return laplacian_filter(mesh, lam=smooth_lambda,
                                iterations=smooth_iterations)

    mesh, seconds = timed(generate)
    report = None
    if evaluate:
        report = evaluate_mesh(mesh, vol, n_samples=n_asd_samples, seed=seed,
                               seconds=seconds, case_id=case_id)
    return ReconstructionResult(mesh=mesh, report=report, fit_log=fit_log,
                                scheme=scheme, seconds=seconds)


def build_training_case(vol, template, cfg=None, max_points=5000, seed=0):
    """(adjusted template, point-cloud set) pair for one training volume."""
    fitted, _, _ = fit_template(vol, template, cfg)
    ndc = NdcMap.for_volume(vol)
    pcs = build_point_cloud_set(vol, ndc, max_points=max_points, seed=seed)
    return fitted, pcs
