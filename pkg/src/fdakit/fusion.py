"""Probability-map fusion into pseudo-labels, plus the disk-cached
streaming engine that fuses many large maps under a fixed memory budget.

The streaming path and the in-memory path (``mbt_mean`` followed by
``pseudo_labels``) are required to produce bitwise-identical label maps:
both sum the per-model score tensors in model order and divide once at the
end, with no compensated summation.
"""

from __future__ import annotations

import math
import struct
import threading
import zlib
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataprep import IGNORE_LABEL, save_label
from .errors import (
    DataError,
    DimensionError,
    FormatError,
    MemoryBudgetError,
    ParameterError,
)

__all__ = [
    "IGNORE_LABEL",
    "PROBMAP_MAGIC",
    "PROBMAP_VERSION",
    "CODEC_RAW",
    "CODEC_ZLIB",
    "DEFAULT_THRESHOLD",
    "ProbMap",
    "FusionManifest",
    "FusionReport",
    "BufferMeter",
    "mbt_mean",
    "argmax_labels",
    "pseudo_labels",
    "store_probmap",
    "load_probmap",
    "read_manifest",
    "streaming_fuse",
]

# tolerance on per-pixel score sums for maps flagged as normalized
_NORMALIZED_TOL = 1e-5 + 1e-12

# global confidence gate applied when no gating mode is chosen
DEFAULT_THRESHOLD = 0.9


@dataclass(eq=False)
class ProbMap:
    """Per-pixel class scores: ``scores[k]`` is the H x W plane of class k.

    ``normalized`` asserts that scores sum to 1 per pixel (softmax output);
    it is verified at construction. ``model_index`` identifies which member
    of an ensemble produced the map and fixes the fusion summation order.
    """

    scores: np.ndarray  # (K, H, W) float64, nonnegative
    normalized: bool = False
    model_index: int | None = None

    def __post_init__(self):
        s = self.scores
        if not isinstance(s, np.ndarray) or s.ndim != 3:
            raise DimensionError("scores must be a (K, H, W) array")
        if min(s.shape) < 1:
            raise DimensionError(f"empty probability map: shape {s.shape}")
        if s.dtype != np.float64:
            raise ParameterError(f"scores must be float64, got {s.dtype}")
        lo, hi = float(s.min()), float(s.max())
        if not (lo >= 0.0 and math.isfinite(hi)):
            raise DataError("scores must be finite and nonnegative")
        if self.normalized:
            deviation = float(np.abs(s.sum(axis=0) - 1.0).max())
            if deviation > _NORMALIZED_TOL:
                raise DataError(
                    f"map flagged normalized but pixel sums deviate by {deviation:.3e}"
                )

    @classmethod
    def from_scores(cls, arr, normalized=False, model_index=None) -> "ProbMap":
        return cls(
            np.ascontiguousarray(np.asarray(arr, dtype=np.float64)),
            normalized=normalized,
            model_index=model_index,
        )

    @property
    def classes(self) -> int:
        return self.scores.shape[0]

    @property
    def height(self) -> int:
        return self.scores.shape[1]

    @property
    def width(self) -> int:
        return self.scores.shape[2]


def _ordered_maps(maps: Sequence[ProbMap]) -> list[ProbMap]:
    # model order fixes the summation sequence; without full indexing the
    # caller's order stands
    indices = [m.model_index for m in maps]
    if all(i is not None for i in indices):
        return sorted(maps, key=lambda m: m.model_index)
    return list(maps)


def mbt_mean(maps: Sequence[ProbMap]) -> ProbMap:
    """Elementwise arithmetic mean of an ensemble's probability maps.

    Maps are summed in model-index order, so any list ordering of the same
    maps yields a bitwise-identical result. The output is flagged
    normalized only when every input is.
    """
    if not maps:
        raise ParameterError("need at least one probability map")
    ordered = _ordered_maps(maps)
    shape = ordered[0].scores.shape
    for m in ordered[1:]:
        if m.scores.shape != shape:
            raise DimensionError(
                f"map shape {m.scores.shape} != first map shape {shape}"
            )
    acc = ordered[0].scores.copy()
    for m in ordered[1:]:
        acc += m.scores
    acc /= float(len(ordered))
    return ProbMap(acc, normalized=all(m.normalized for m in ordered))


def argmax_labels(pmap: ProbMap) -> np.ndarray:
    """Per-pixel winning class, lowest index on ties. Returns (H, W) uint8."""
    if pmap.classes > IGNORE_LABEL:
        raise ParameterError(
            f"{pmap.classes} classes cannot share an 8-bit map with ignore={IGNORE_LABEL}"
        )
    return np.argmax(pmap.scores, axis=0).astype(np.uint8)


def pseudo_labels(
    pmap: ProbMap,
    threshold: float | None = None,
    top_fraction: float | None = None,
) -> np.ndarray:
    """Confidence-gated labels: low-confidence pixels become 255.

    ``threshold`` keeps pixels whose winning score is >= threshold;
    ``top_fraction`` keeps, per class, the best fraction of that class's
    winning pixels ranked by score (ties broken by row-major scan order,
    count rounded up). At most one gate may be given; with neither, the
    global gate at DEFAULT_THRESHOLD applies.
    """
    if threshold is not None and top_fraction is not None:
        raise ParameterError("threshold and top_fraction are mutually exclusive")
    if threshold is None and top_fraction is None:
        threshold = DEFAULT_THRESHOLD
    if not pmap.normalized:
        raise ParameterError("pseudo-label gating needs a normalized map")
    if pmap.classes > IGNORE_LABEL:
        raise ParameterError(
            f"{pmap.classes} classes cannot share an 8-bit map with ignore={IGNORE_LABEL}"
        )

    winners = np.argmax(pmap.scores, axis=0)
    winning = np.take_along_axis(pmap.scores, winners[np.newaxis], axis=0)[0]

    if threshold is not None:
        if not (0.0 <= threshold <= 1.0):
            raise ParameterError(f"threshold must be in [0, 1], got {threshold}")
        keep = winning >= threshold
    else:
        if not (0.0 < top_fraction <= 1.0):
            raise ParameterError(f"top_fraction must be in (0, 1], got {top_fraction}")
        flat_winners = winners.ravel()
        flat_scores = winning.ravel()
        keep = np.zeros(flat_winners.shape, dtype=bool)
        for c in range(pmap.classes):
            pixels = np.flatnonzero(flat_winners == c)
            if pixels.size == 0:
                continue
            quota = math.ceil(top_fraction * pixels.size)
            order = np.argsort(-flat_scores[pixels], kind="stable")
            keep[pixels[order[:quota]]] = True
        keep = keep.reshape(winners.shape)

    out = np.where(keep, winners, IGNORE_LABEL)
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# probability-map cache files

PROBMAP_MAGIC = b"FDAP"
PROBMAP_VERSION = 1
CODEC_RAW = 0
CODEC_ZLIB = 1

# magic, version, H, W, K, normalized flag, codec id (little-endian)
_HEADER = struct.Struct("<4sIIIIBB")
_PLANE_LEN = struct.Struct("<Q")


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def store_probmap(pmap: ProbMap, path, codec: int = CODEC_ZLIB) -> int:
    """Write a map to its cache file; returns bytes written.

    Layout: 22-byte header, then per class plane a u64 payload length and
    the plane's float64 little-endian samples, compressed per the codec id.
    The roundtrip through ``load_probmap`` is lossless.
    """
    if codec not in (CODEC_RAW, CODEC_ZLIB):
        raise ParameterError(f"unknown codec id {codec}")
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(
            _HEADER.pack(
                PROBMAP_MAGIC,
                PROBMAP_VERSION,
                pmap.height,
                pmap.width,
                pmap.classes,
                int(pmap.normalized),
                codec,
            )
        )
        for k in range(pmap.classes):
            raw = np.ascontiguousarray(pmap.scores[k]).astype("<f8", copy=False).tobytes()
            payload = zlib.compress(raw, 6) if codec == CODEC_ZLIB else raw
            written += fh.write(_PLANE_LEN.pack(len(payload)))
            written += fh.write(payload)
    return written


def _read_header(fh, path) -> tuple[int, int, int, bool, int]:
    magic, version, height, width, classes, normalized, codec = _HEADER.unpack(
        _read_exact(fh, _HEADER.size, "header")
    )
    if magic != PROBMAP_MAGIC:
        raise FormatError(f"bad magic {magic!r} in '{path}', expected {PROBMAP_MAGIC!r}")
    if version != PROBMAP_VERSION:
        raise FormatError(f"unsupported version {version} in '{path}'")
    if min(height, width, classes) < 1:
        raise FormatError(f"bad dimensions {classes}x{height}x{width} in '{path}'")
    if codec not in (CODEC_RAW, CODEC_ZLIB):
        raise FormatError(f"unknown codec id {codec} in '{path}'")
    return height, width, classes, bool(normalized), codec


def peek_probmap_dims(path) -> tuple[int, int, int]:
    """Read (K, H, W) from a cache file header without loading the planes."""
    with open(path, "rb") as fh:
        height, width, classes, _, _ = _read_header(fh, path)
    return classes, height, width


def load_probmap(path, model_index: int | None = None) -> ProbMap:
    """Read a cache file back into a ProbMap; inverse of ``store_probmap``."""
    with open(path, "rb") as fh:
        height, width, classes, normalized, codec = _read_header(fh, path)
        scores = np.empty((classes, height, width), dtype=np.float64)
        plane_bytes = height * width * 8
        for k in range(classes):
            (length,) = _PLANE_LEN.unpack(_read_exact(fh, _PLANE_LEN.size, f"plane {k} length"))
            payload = _read_exact(fh, length, f"plane {k} payload")
            if codec == CODEC_ZLIB:
                try:
                    raw = zlib.decompress(payload)
                except zlib.error as exc:
                    raise FormatError(f"corrupt plane {k} payload in '{path}': {exc}") from exc
            else:
                raw = payload
            if len(raw) != plane_bytes:
                raise FormatError(
                    f"plane {k} payload in '{path}' decodes to {len(raw)} bytes, "
                    f"expected {plane_bytes}"
                )
            scores[k] = np.frombuffer(raw, dtype="<f8").reshape(height, width)
    return ProbMap(scores, normalized=normalized, model_index=model_index)


# ---------------------------------------------------------------------------
# streaming fusion

@dataclass(frozen=True)
class FusionManifest:
    """Work list for streaming fusion: (image_id, per-model cache paths)."""

    entries: tuple[tuple[str, tuple[Path, ...]], ...]
    model_count: int
    memory_budget: int | None = None  # bytes; None = unconstrained

    def __post_init__(self):
        if self.model_count < 1:
            raise ParameterError("manifest needs at least one model")
        for image_id, paths in self.entries:
            if len(paths) != self.model_count:
                raise FormatError(
                    f"entry '{image_id}' lists {len(paths)} paths, "
                    f"expected {self.model_count}"
                )


def read_manifest(path, memory_budget: int | None = None) -> FusionManifest:
    """Parse a tab-separated ``image_id<TAB>path_1<TAB>...<TAB>path_M`` file.

    Relative chunk paths are resolved against the manifest's directory.
    """
    base = Path(path).resolve().parent
    entries = []
    seen = set()
    model_count = None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.rstrip("\n").split("\t")
        if len(fields) < 2:
            raise FormatError(f"{path}:{lineno}: expected image_id and at least one path")
        image_id, paths = fields[0], fields[1:]
        if model_count is None:
            model_count = len(paths)
        elif len(paths) != model_count:
            raise FormatError(
                f"{path}:{lineno}: {len(paths)} paths, expected {model_count}"
            )
        if image_id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate image id '{image_id}'")
        seen.add(image_id)
        entries.append((image_id, tuple(base / p for p in paths)))
    if not entries:
        raise FormatError(f"manifest '{path}' lists no images")
    return FusionManifest(tuple(entries), model_count, memory_budget)


class BufferMeter:
    """Thread-safe accounting of the tensor buffers the fusion engine holds.

    Tracks engine-owned arrays (score chunks, the running-sum accumulator,
    gate planes, the label plane), not allocator internals.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._current = 0
        self._peak = 0

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            self._current += nbytes
            if self._current > self._peak:
                self._peak = self._current

    def release(self, nbytes: int) -> None:
        with self._lock:
            self._current -= nbytes

    @property
    def current(self) -> int:
        return self._current

    @property
    def peak(self) -> int:
        return self._peak


@dataclass(frozen=True)
class FusionReport:
    images_processed: int
    peak_buffer_bytes: int
    label_files: tuple[Path, ...]
    failures: tuple[tuple[str, str], ...]
    model_count: int
    workers: int


def _image_requirement(classes: int, height: int, width: int) -> int:
    # documented per-image bound: two decompressed maps plus one label plane
    return 2 * classes * height * width * 8 + height * width


def _fuse_one(
    image_id: str,
    paths: Sequence[Path],
    threshold: float | None,
    top_fraction: float | None,
    output_dir: Path,
    meter: BufferMeter,
    budget_share: int | None,
) -> Path:
    classes, height, width = peek_probmap_dims(paths[0])
    map_bytes = classes * height * width * 8
    label_bytes = height * width
    if budget_share is not None and _image_requirement(classes, height, width) > budget_share:
        raise MemoryBudgetError(
            f"image '{image_id}' needs {_image_requirement(classes, height, width)} "
            f"bytes (two {classes}x{height}x{width} maps plus a label plane) but the "
            f"budget share is {budget_share} bytes"
        )

    acc = None
    all_normalized = True
    for m, chunk_path in enumerate(paths):
        pm = load_probmap(chunk_path, model_index=m)
        if pm.scores.shape != (classes, height, width):
            raise DimensionError(
                f"chunk '{chunk_path}' has shape {pm.scores.shape}, "
                f"expected {(classes, height, width)}"
            )
        all_normalized = all_normalized and pm.normalized
        meter.alloc(map_bytes)
        if acc is None:
            acc = pm.scores
        else:
            acc += pm.scores
            meter.release(map_bytes)
        del pm
    acc /= float(len(paths))

    # gate planes: int64 winners + float64 winning scores, then the label plane
    gate_bytes = 16 * height * width
    meter.alloc(gate_bytes + label_bytes)
    labels = pseudo_labels(
        ProbMap(acc, normalized=all_normalized),
        threshold=threshold,
        top_fraction=top_fraction,
    )
    meter.release(gate_bytes)
    del acc
    meter.release(map_bytes)

    out_path = output_dir / f"{image_id}.png"
    save_label(labels, out_path)
    meter.release(label_bytes)
    return out_path


def streaming_fuse(
    manifest: FusionManifest,
    output_dir,
    threshold: float | None = None,
    top_fraction: float | None = None,
    workers: int = 1,
) -> FusionReport:
    """Fuse per-model cached maps image by image under the memory budget.

    Each image's chunks are decompressed one at a time and folded into a
    single running-sum buffer, so at most two decompressed maps plus one
    label plane are resident per worker at any moment, independent of the
    model count and of how many images the manifest lists. Output label
    files are bitwise identical to ``pseudo_labels(mbt_mean(maps))`` run on
    the same inputs, and identical for any worker count.

    A missing or corrupt chunk fails that image only and is recorded in the
    report; an unsatisfiable memory budget aborts the run.
    """
    if threshold is not None and top_fraction is not None:
        raise ParameterError("threshold and top_fraction are mutually exclusive")
    if threshold is None and top_fraction is None:
        threshold = DEFAULT_THRESHOLD
    if workers < 1:
        raise ParameterError(f"workers must be >= 1, got {workers}")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    budget = manifest.memory_budget
    effective_workers = min(workers, len(manifest.entries))
    if budget is not None:
        try:
            classes, height, width = peek_probmap_dims(manifest.entries[0][1][0])
        except (OSError, FormatError):
            # sizing chunk unreadable; run sequentially and let per-image
            # handling report the failure
            effective_workers = 1
        else:
            per_worker = _image_requirement(classes, height, width)
            if per_worker > budget:
                raise MemoryBudgetError(
                    f"memory budget {budget} bytes cannot hold even one image's "
                    f"working set of {per_worker} bytes "
                    f"(two {classes}x{height}x{width} maps plus a label plane)"
                )
            effective_workers = min(effective_workers, budget // per_worker)
    budget_share = None if budget is None else budget // effective_workers

    meter = BufferMeter()
    label_files: list[Path] = []
    failures: list[tuple[str, str]] = []

    def run(entry):
        image_id, paths = entry
        try:
            return image_id, _fuse_one(
                image_id, paths, threshold, top_fraction, output_dir, meter, budget_share
            ), None
        except MemoryBudgetError:
            raise
        except (OSError, FormatError, DimensionError, DataError, ParameterError) as exc:
            return image_id, None, f"{type(exc).__name__}: {exc}"

    if effective_workers == 1:
        results = [run(entry) for entry in manifest.entries]
    else:
        with ThreadPoolExecutor(max_workers=effective_workers) as pool:
            futures = [pool.submit(run, entry) for entry in manifest.entries]
            done, pending = wait(futures, return_when=FIRST_EXCEPTION)
            for f in pending:
                f.cancel()
            results = [f.result() for f in done]  # re-raises MemoryBudgetError

    for image_id, out_path, error in sorted(results, key=lambda r: r[0]):
        if error is None:
            label_files.append(out_path)
        else:
            failures.append((image_id, error))

    return FusionReport(
        images_processed=len(label_files),
        peak_buffer_bytes=meter.peak,
        label_files=tuple(label_files),
        failures=tuple(failures),
        model_count=manifest.model_count,
        workers=effective_workers,
    )
