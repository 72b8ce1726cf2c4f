"""Spectral domain adaptation: low-frequency amplitude transfer between
images, probability-map fusion into pseudo-labels, and segmentation
scoring, with a batch CLI over all of it."""

from .errors import (
    DataError,
    DimensionError,
    FormatError,
    MemoryBudgetError,
    ParameterError,
)
from .spectral import (
    AmplitudePhase,
    BetaMask,
    ImageTensor,
    SweepPoint,
    beta_sweep,
    build_mask,
    decompose,
    dft2d_forward,
    dft2d_inverse,
    recompose,
    spectral_transfer,
)
from .dataprep import (
    IGNORE_LABEL,
    RNG_ALGORITHM_ID,
    LabelRemap,
    PrepConfig,
    load_image,
    load_label,
    make_stream,
    pair_source_target,
    prep_image,
    random_crop,
    remap_labels,
    resize_bilinear,
    save_image,
    save_label,
)
from .fusion import (
    DEFAULT_THRESHOLD,
    BufferMeter,
    FusionManifest,
    FusionReport,
    ProbMap,
    argmax_labels,
    load_probmap,
    mbt_mean,
    pseudo_labels,
    read_manifest,
    store_probmap,
    streaming_fuse,
)
from .eval import (
    CITYSCAPES_CLASSES,
    ClassIouReport,
    ConfusionMatrix,
    ErrorRow,
    class_iou,
    confusion_accumulate,
    emit_report,
    iou_table,
    miou_from_per_class,
    relative_error,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "DataError",
    "DimensionError",
    "FormatError",
    "MemoryBudgetError",
    "ParameterError",
    "AmplitudePhase",
    "BetaMask",
    "ImageTensor",
    "SweepPoint",
    "beta_sweep",
    "build_mask",
    "decompose",
    "dft2d_forward",
    "dft2d_inverse",
    "recompose",
    "spectral_transfer",
    "IGNORE_LABEL",
    "RNG_ALGORITHM_ID",
    "LabelRemap",
    "PrepConfig",
    "load_image",
    "load_label",
    "make_stream",
    "pair_source_target",
    "prep_image",
    "random_crop",
    "remap_labels",
    "resize_bilinear",
    "save_image",
    "save_label",
    "DEFAULT_THRESHOLD",
    "BufferMeter",
    "FusionManifest",
    "FusionReport",
    "ProbMap",
    "argmax_labels",
    "load_probmap",
    "mbt_mean",
    "pseudo_labels",
    "read_manifest",
    "store_probmap",
    "streaming_fuse",
    "CITYSCAPES_CLASSES",
    "ClassIouReport",
    "ConfusionMatrix",
    "ErrorRow",
    "class_iou",
    "confusion_accumulate",
    "emit_report",
    "iou_table",
    "miou_from_per_class",
    "relative_error",
]
