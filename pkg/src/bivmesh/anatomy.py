"""Shared label taxonomy for volumes and meshes."""

# Voxel label ids in a LabelVolume.
BG = 0
LV = 1
RV = 2
MYO = 3
VALID_VOLUME_LABELS = (BG, LV, RV, MYO)
VOLUME_LABEL_NAMES = {BG: "background", LV: "lv", RV: "rv", MYO: "myo"}

# Per-vertex surface labels of a LabeledMesh (also the PLY anat_label codes).
LV_ENDO = 0
RV_ENDO = 1
LV_EPI = 2
RV_EPI = 3
VALVE = 4
VALID_SURFACE_LABELS = (LV_ENDO, RV_ENDO, LV_EPI, RV_EPI, VALVE)
SURFACE_LABEL_NAMES = {
    LV_ENDO: "lv-endo",
    RV_ENDO: "rv-endo",
    LV_EPI: "lv-epi",
    RV_EPI: "rv-epi",
    VALVE: "valve",
}
SURFACE_LABEL_IDS = {name: code for code, name in SURFACE_LABEL_NAMES.items()}

# The four deformable surface targets; valve vertices carry no target.
SURFACE_TARGETS = (LV_ENDO, RV_ENDO, LV_EPI, RV_EPI)

# Segmentation region each surface bounds.  Epicardial surfaces bound the
# myocardium-inclusive unions; this is the unique assignment consistent with
# the template's five labels.
TARGET_REGION_LABELS = {
    LV_ENDO: (LV,),
    RV_ENDO: (RV,),
    LV_EPI: (LV, MYO),
    RV_EPI: (LV, RV, MYO),
}

# Fixed per-label processing order of the template adjustment step.
DEFORM_ORDER = (LV_EPI, LV_ENDO, RV_ENDO, RV_EPI)

# When a subdivided edge joins two labels, the new vertex takes whichever
# endpoint label ranks first here (keeps boundary rings conservative toward
# structural labels).
NEW_VERTEX_LABEL_PRIORITY = (VALVE, LV_EPI, RV_EPI, LV_ENDO, RV_ENDO)
