"""Left-ventricle segmentation toolkit.

A self-contained stack for binary segmentation of short-axis cine MR
slices: a taped reverse-mode autodiff core over 4-D float64 tensors,
U-Net variants differing only in their normalization scheme (including
two learnable blends of batch statistics with group or instance
statistics), elastic/affine/rotation augmentation, overlap and contour
distance metrics, a DICOM-subset reader, synthetic phantoms, and a
deterministic training engine with binary checkpoints. The CLI
(`lvseg`) drives the whole workflow; UNetSegmenter wraps it in a
scikit-learn estimator.
"""

from .augment import AugmentConfig, affine, elastic, expand, pipeline, rotate
from .checks import run_gradcheck_suite
from .data import (
    CineSample,
    DicomFormatError,
    DicomMagicError,
    DicomMissingTagError,
    DicomTruncatedError,
    DicomUnsupportedError,
    DicomValueError,
    load_dataset,
    load_sample,
    parse_contour,
    rasterize,
    read_dicom,
    save_sample,
    serialize_contour,
    split_patients,
    synth_phantom,
)
from .engine import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    bce_loss,
    evaluate,
    load_checkpoint,
    predict_masks,
    save_checkpoint,
    soft_dice_loss,
    train,
)
from .estimator import UNetSegmenter
from .layers import ConvParams, conv2d, crop_center, elu, maxpool2, relu, upsample2
from .metrics import (
    ContourPolyline,
    MetricsReport,
    SliceRecord,
    aggregate,
    apd,
    dice,
    extract_contour,
    parse_report_csv,
    report_to_csv,
    sensitivity,
)
from .model import ACTIVATIONS, VARIANTS, ModelState, UNetSpec, build, forward
from .norm import NORM_KINDS, NormSpec, NormState, init_norm_state, normalize
from .tensor import Tape, Tensor, backward, gradcheck, moments, reduce_sum, sigmoid

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AugmentConfig", "affine", "elastic", "expand", "pipeline", "rotate",
    "run_gradcheck_suite",
    "CineSample", "DicomFormatError", "DicomMagicError", "DicomMissingTagError",
    "DicomTruncatedError", "DicomUnsupportedError", "DicomValueError",
    "load_dataset", "load_sample", "parse_contour", "rasterize", "read_dicom",
    "save_sample", "serialize_contour", "split_patients", "synth_phantom",
    "CheckpointError", "TrainConfig", "TrainingDivergedError", "bce_loss",
    "evaluate", "load_checkpoint", "predict_masks", "save_checkpoint",
    "soft_dice_loss", "train",
    "UNetSegmenter",
    "ConvParams", "conv2d", "crop_center", "elu", "maxpool2", "relu", "upsample2",
    "ContourPolyline", "MetricsReport", "SliceRecord", "aggregate", "apd",
    "dice", "extract_contour", "parse_report_csv", "report_to_csv", "sensitivity",
    "ACTIVATIONS", "VARIANTS", "ModelState", "UNetSpec", "build", "forward",
    "NORM_KINDS", "NormSpec", "NormState", "init_norm_state", "normalize",
    "Tape", "Tensor", "backward", "gradcheck", "moments", "reduce_sum", "sigmoid",
]
