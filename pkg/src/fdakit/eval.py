"""Segmentation scoring: confusion-matrix accumulation, per-class IoU and
mIoU, and reference-vs-measured error tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataprep import IGNORE_LABEL
from .errors import DataError, DimensionError, ParameterError

__all__ = [
    "CITYSCAPES_CLASSES",
    "UNDEFINED_MARK",
    "ERRATUM_TOLERANCE",
    "ConfusionMatrix",
    "ClassIouReport",
    "ErrorRow",
    "confusion_accumulate",
    "class_iou",
    "miou_from_per_class",
    "relative_error",
    "emit_report",
    "iou_table",
    "default_class_names",
]

# the 19-class benchmark palette, in the conventional order
CITYSCAPES_CLASSES = (
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "light",
    "sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motocycle",
    "bicycle",
)

# rendered in place of an IoU whose union is empty
UNDEFINED_MARK = "—"

# a recomputed error further than this from the published figure marks the
# published figure as an erratum in the report
ERRATUM_TOLERANCE = 0.05


@dataclass(eq=False)
class ConfusionMatrix:
    """counts[g, p] = pixels with ground truth g predicted p.

    ignored_pixels counts everything excluded from the matrix, so
    counts.sum() + ignored_pixels equals the number of pixels seen.
    """

    counts: np.ndarray  # (K, K) int64
    ignored_pixels: int = 0

    def __post_init__(self):
        c = self.counts
        if not isinstance(c, np.ndarray) or c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DimensionError("counts must be a square (K, K) matrix")
        if c.shape[0] < 1:
            raise DimensionError("need at least one class")
        if c.dtype != np.int64:
            raise ParameterError(f"counts must be int64, got {c.dtype}")
        if int(c.min(initial=0)) < 0 or self.ignored_pixels < 0:
            raise DataError("pixel counts cannot be negative")

    @classmethod
    def zeros(cls, classes: int) -> "ConfusionMatrix":
        if classes < 1:
            raise ParameterError(f"need at least one class, got {classes}")
        if classes >= IGNORE_LABEL:
            raise ParameterError(
                f"class count {classes} collides with ignore value {IGNORE_LABEL}"
            )
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum()) + self.ignored_pixels

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other.classes:
            raise DimensionError(
                f"cannot merge {self.classes}-class and {other.classes}-class matrices"
            )
        return ConfusionMatrix(
            self.counts + other.counts, self.ignored_pixels + other.ignored_pixels
        )


def _check_labels(arr, classes: int, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise DimensionError(f"{name} labels must be 2-D, got {a.ndim}-D")
    if not np.issubdtype(a.dtype, np.integer):
        raise ParameterError(f"{name} labels must be integers, got {a.dtype}")
    bad = (a != IGNORE_LABEL) & ((a < 0) | (a >= classes))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise DataError(
            f"{name} label {int(a[y, x])} at pixel ({y}, {x}) is outside "
            f"[0, {classes}) and is not {IGNORE_LABEL}"
        )
    return a


def confusion_accumulate(pred, gt, cm: ConfusionMatrix) -> ConfusionMatrix:
    """Fold one prediction/ground-truth pair into ``cm`` (mutated, returned).

    Accumulation is order-independent across images. A prediction of the
    ignore value at a scored pixel has no matrix cell; it is counted as
    ignored so the pixel total still balances.
    """
    p = _check_labels(pred, cm.classes, "pred")
    g = _check_labels(gt, cm.classes, "gt")
    if p.shape != g.shape:
        raise DimensionError(f"pred shape {p.shape} != gt shape {g.shape}")
    scored = (g != IGNORE_LABEL) & (p != IGNORE_LABEL)
    cm.ignored_pixels += int(g.size - np.count_nonzero(scored))
    k = cm.classes
    flat = g[scored].astype(np.int64) * k + p[scored].astype(np.int64)
    cm.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
    return cm


def default_class_names(classes: int) -> tuple:
    if classes == len(CITYSCAPES_CLASSES):
        return CITYSCAPES_CLASSES
    return tuple(f"class_{i}" for i in range(classes))


def miou_from_per_class(per_class) -> float:
    """Arithmetic mean of the defined (non-NaN) per-class values."""
    defined = [float(v) for v in per_class if not math.isnan(float(v))]
    if not defined:
        return math.nan
    return sum(defined) / len(defined)


@dataclass(frozen=True)
class ClassIouReport:
    """Per-class IoU (NaN where the union is empty) and their mean."""

    per_class: tuple
    miou: float
    class_names: tuple

    def __post_init__(self):
        if len(self.per_class) != len(self.class_names):
            raise DimensionError(
                f"{len(self.per_class)} values for {len(self.class_names)} names"
            )

    @classmethod
    def from_values(cls, per_class, class_names=None) -> "ClassIouReport":
        vals = tuple(float(v) for v in per_class)
        names = default_class_names(len(vals)) if class_names is None else tuple(class_names)
        return cls(vals, miou_from_per_class(vals), names)


def class_iou(cm: ConfusionMatrix, class_names=None) -> ClassIouReport:
    """IoU_k = diag_k / (row_k + col_k - diag_k); empty union makes IoU_k
    undefined and excluded from the mean."""
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - diag
    per = np.full(cm.classes, math.nan)
    defined = union > 0
    per[defined] = diag[defined] / union[defined]
    return ClassIouReport.from_values(per, class_names)


def relative_error(reference: float, measured: float) -> float:
    """Percent shortfall of ``measured`` against ``reference``; negative
    when the measurement exceeds the reference."""
    ref = float(reference)
    meas = float(measured)
    if not math.isfinite(ref) or ref <= 0.0:
        raise ParameterError(f"reference must be positive and finite, got {reference}")
    if not math.isfinite(meas):
        raise ParameterError(f"measured value must be finite, got {measured}")
    return 100.0 * (ref - meas) / ref


@dataclass(frozen=True)
class ErrorRow:
    """One experiment's reference-vs-measured comparison.

    ``published_error`` is the error figure printed in the source being
    reproduced, when there is one; the report recomputes the error from the
    raw values and annotates disagreements instead of echoing them.
    """

    experiment_id: str
    reference: float
    measured: float
    published_error: float | None = None

    @property
    def error(self) -> float:
        return relative_error(self.reference, self.measured)

    @property
    def is_erratum(self) -> bool:
        if self.published_error is None or math.isnan(self.measured):
            return False
        return abs(self.published_error - self.error) > ERRATUM_TOLERANCE


def _fmt(value, digits: int) -> str:
    if value is None or math.isnan(value):
        return UNDEFINED_MARK
    return f"{value:.{digits}f}"


def _render_table(header, rows, format):
    if format == "csv":
        return "\n".join(",".join(cells) for cells in [header] + rows) + "\n"
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for cells in [header] + rows:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        lines.append("  ".join([first] + rest).rstrip())
    return "\n".join(lines) + "\n"


def emit_report(rows, format: str = "text") -> str:
    """Render experiment rows as a table; columns are experiment id,
    reference mIoU, measured mIoU, recomputed error %, and a note flagging
    published error figures that disagree with the recomputation."""
    if not rows:
        raise ParameterError("no rows to report")
    if format not in ("text", "csv"):
        raise ParameterError(f"unknown format '{format}'")
    digits = 2 if format == "text" else 4
    header = ["experiment", "reference", "measured", "error_percent", "note"]
    body = []
    for row in rows:
        err = None if math.isnan(row.measured) else row.error
        note = ""
        if row.is_erratum:
            note = (
                f"published {row.published_error:.2f} disagrees with the row's "
                f"own values; recomputed {err:.2f}"
            )
        body.append(
            [
                row.experiment_id,
                _fmt(row.reference, digits),
                _fmt(row.measured, digits),
                _fmt(err, digits),
                note,
            ]
        )
    return _render_table(header, body, format)


def iou_table(report: ClassIouReport, format: str = "text") -> str:
    """Render a ClassIouReport as a per-class table with a trailing mIoU
    row; undefined IoUs render as the undefined mark."""
    if format not in ("text", "csv"):
        raise ParameterError(f"unknown format '{format}'")
    body = [
        [name, _fmt(value, 4)]
        for name, value in zip(report.class_names, report.per_class)
    ]
    body.append(["mIoU", _fmt(report.miou, 4)])
    return _render_table(["class", "iou"], body, format)
