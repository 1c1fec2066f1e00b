"""Dual-phase 3D tumor screening by segmentation-for-classification."""

from .clsnet import ClsConfig, ClsHead, roi_from_mask
from .evaluation import cross_validate, dsc, evaluate, make_folds
from .inference import predict_volume, window_starts
from .phantom import PhantomSpec, generate_case, generate_dataset
from .postclassify import classify_phase, connected_components, fuse_phases, retain_components
from .segnet import SegModel, SegNetConfig, load_model, save_model, train
from .volume import (
    CaseRecord,
    DatasetManifest,
    LabelMask,
    Volume3D,
    load_case,
    load_manifest,
    read_mask,
    read_volume,
    write_mask,
    write_volume,
)

__version__ = "0.1.0"
