"""Bi-ventricular surface reconstruction from labeled voxel volumes.

Pipeline: distance/gradient fields from a segmentation, rigid swing
alignment, per-label gradient-field template deformation, learned
graph-subdivision refinement, and a full evaluation suite.
"""

from .anatomy import (
    LV_ENDO,
    LV_EPI,
    RV_ENDO,
    RV_EPI,
    SURFACE_TARGETS,
    VALVE,
)
from .fit import FitConfig, SwingRotation, deform_in_field, rv_centroid, seg_rv_centroid, swing_align
from .gsn import (
    GsnStack,
    LossWeights,
    MlpParams,
    TrainConfig,
    backprop,
    chamfer_loss,
    extract_point_cloud,
    gsn_forward,
    gsn_layer,
    laplacian_loss,
    mlp_forward,
    total_loss,
    train,
)
from .mesh import (
    EdgeTable,
    LabeledMesh,
    SubdivisionMap,
    build_edges,
    laplacian_filter,
    load_mesh,
    loop_subdivide,
    midpoint_subdivide,
    save_mesh,
    voxelize,
)
from .metrics import (
    MetricsReport,
    asd,
    aspect_ratio,
    dice,
    evaluate_mesh,
    hausdorff,
    non_manifold_ratio,
    normal_consistency,
    scaled_jacobian,
    timed,
)
from .phantom import DegradationSpec, PhantomSpec, degrade, generate_phantom, procedural_template
from .pipeline import SCHEMES, build_fields, fit_template, reconstruct
from .volume import (
    LabelVolume,
    NdcMap,
    ScalarField,
    VectorField,
    edt,
    gradient_field,
    load_volume,
    resample_isotropic,
    sample_trilinear,
    save_volume,
    surface_mask,
)

__version__ = "0.1.0"
