"""Image and label I/O, deterministic resize/crop preprocessing, and
class-index remapping.

Every random draw flows through a named per-item generator derived from
(seed, item name), so batch outputs are identical regardless of worker
count or processing order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, DimensionError, FormatError, ParameterError
from .spectral import ImageTensor

__all__ = [
    "RNG_ALGORITHM_ID",
    "IGNORE_LABEL",
    "PrepConfig",
    "LabelRemap",
    "make_stream",
    "load_image",
    "save_image",
    "load_label",
    "save_label",
    "resize_bilinear",
    "random_crop",
    "prep_image",
    "pair_source_target",
    "remap_labels",
]

# recorded in run manifests; bump if the stream derivation ever changes
RNG_ALGORITHM_ID = "pcg64-sha256-stream-v1"

IGNORE_LABEL = 255


def make_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one work item, stable across run order.

    The stream key mixes the run seed with sha256(name), so adding,
    removing, or reordering sibling items never shifts anyone's draws.
    """
    if seed < 0:
        raise ParameterError(f"seed must be nonnegative, got {seed}")
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *words])))


@dataclass(frozen=True)
class PrepConfig:
    """Preprocessing recipe: resize, then randomly crop. Sizes are (width, height)."""

    resize_to: tuple[int, int] = (1280, 720)
    crop_to: tuple[int, int] = (1024, 512)
    seed: int = 0
    pairing_seed: int = 0

    def __post_init__(self):
        if min(self.resize_to) < 1 or min(self.crop_to) < 1:
            raise ParameterError("resize and crop dimensions must be positive")
        if self.crop_to[0] > self.resize_to[0] or self.crop_to[1] > self.resize_to[1]:
            raise ParameterError(
                f"crop {self.crop_to} exceeds resize {self.resize_to}"
            )
        if self.seed < 0 or self.pairing_seed < 0:
            raise ParameterError("seeds must be nonnegative")


def load_image(path) -> ImageTensor:
    """Decode an 8-bit RGB image file into a planar float tensor."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except OSError:
        raise
    except Exception as exc:  # PIL decode failures come in many flavors
        raise OSError(f"cannot decode image '{path}': {exc}") from exc
    return ImageTensor.from_interleaved(arr)


def save_image(img: ImageTensor, path) -> None:
    """Encode a tensor as an 8-bit image file.

    Samples are rounded half-away-from-zero and clamped to [0, 255]; the
    in-memory tensor is untouched.
    """
    quantized = np.clip(np.floor(img.planes + 0.5), 0.0, 255.0).astype(np.uint8)
    data = np.ascontiguousarray(np.moveaxis(quantized, 0, -1))
    if img.channels == 3:
        pil = Image.fromarray(data, "RGB")
    elif img.channels == 1:
        pil = Image.fromarray(data[:, :, 0], "L")
    else:
        raise ParameterError(f"cannot encode {img.channels}-channel image")
    pil.save(path)


def load_label(path) -> np.ndarray:
    """Decode an 8-bit grayscale label file into an (H, W) uint8 array."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise FormatError(
                    f"label file '{path}' must be 8-bit grayscale, got mode {im.mode}"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except OSError:
        raise
    except Exception as exc:
        raise OSError(f"cannot decode label '{path}': {exc}") from exc
    return arr


def save_label(labels: np.ndarray, path) -> None:
    """Encode an (H, W) uint8 label array as a grayscale image file."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DimensionError(f"label map must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise DataError(f"label map must be uint8, got {arr.dtype}")
    Image.fromarray(arr, "L").save(path)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # align-corners sampling; a single output sample takes the axis midpoint
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _resize_plane(plane: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = plane.shape
    ys = _axis_coords(h, height)
    xs = _axis_coords(w, width)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.minimum(y0, h - 1)
    x0 = np.minimum(x0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)  # edge clamp
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = plane[np.ix_(y0, x0)] * (1.0 - fx) + plane[np.ix_(y0, x1)] * fx
    bottom = plane[np.ix_(y1, x0)] * (1.0 - fx) + plane[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy) + bottom * fy


def resize_bilinear(img: ImageTensor, width: int, height: int) -> ImageTensor:
    """Bilinear resize with the align-corners convention and edge clamping.

    Outputs are convex combinations of input samples, so the value range
    never grows. Label maps must not go through this (class indices would
    blend); they are cropped or nearest-neighbor sampled instead.
    """
    if width < 1 or height < 1:
        raise ParameterError(f"target size must be positive, got {width}x{height}")
    planes = np.empty((img.channels, height, width), dtype=np.float64)
    for c in range(img.channels):
        planes[c] = _resize_plane(img.planes[c], width, height)
    return ImageTensor(planes)


def random_crop(
    img: ImageTensor, width: int, height: int, rng: np.random.Generator
) -> tuple[ImageTensor, tuple[int, int]]:
    """Crop a width x height window at a uniformly drawn offset.

    Returns the crop and its (x, y) offset. The same generator state always
    produces the same offsets.
    """
    if width > img.width or height > img.height:
        raise DimensionError(
            f"crop {width}x{height} exceeds image {img.width}x{img.height}"
        )
    x = int(rng.integers(0, img.width - width + 1))
    y = int(rng.integers(0, img.height - height + 1))
    window = np.ascontiguousarray(img.planes[:, y : y + height, x : x + width])
    return ImageTensor(window), (x, y)


def prep_image(
    img: ImageTensor, config: PrepConfig, rng: np.random.Generator
) -> tuple[ImageTensor, tuple[int, int]]:
    """Resize to config.resize_to, then randomly crop to config.crop_to."""
    resized = resize_bilinear(img, *config.resize_to)
    return random_crop(resized, *config.crop_to, rng)


def pair_source_target(
    source_ids: Sequence[str], target_ids: Sequence[str], pairing_seed: int
) -> list[tuple[str, str]]:
    """Pair every source id with a uniformly drawn target id (with replacement)."""
    if not source_ids or not target_ids:
        raise ParameterError("source and target id lists must be non-empty")
    rng = make_stream(pairing_seed, "pairing")
    picks = rng.integers(0, len(target_ids), size=len(source_ids))
    return [(src, target_ids[int(i)]) for src, i in zip(source_ids, picks)]


@dataclass(frozen=True, eq=False)
class LabelRemap:
    """Total uint8 lookup table; ids without an explicit mapping go to 255."""

    table: np.ndarray  # (256,) uint8

    def __post_init__(self):
        if self.table.shape != (256,) or self.table.dtype != np.uint8:
            raise ParameterError("remap table must be 256 uint8 entries")

    @classmethod
    def identity(cls) -> "LabelRemap":
        return cls(np.arange(256, dtype=np.uint8))

    @classmethod
    def from_pairs(cls, pairs) -> "LabelRemap":
        """Build from (source_id, target_id) pairs; unmapped ids become 255."""
        table = np.full(256, IGNORE_LABEL, dtype=np.uint8)
        for src, dst in pairs:
            if not (0 <= src <= 255 and 0 <= dst <= 255):
                raise ParameterError(f"remap ids must be in [0, 255], got {src}->{dst}")
            table[src] = dst
        return cls(table)

    @classmethod
    def from_file(cls, path) -> "LabelRemap":
        """Parse a table of whitespace-separated ``src dst`` pairs, # comments."""
        pairs = []
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise FormatError(
                    f"{path}:{lineno}: expected 'src dst' id pair, got {raw!r}"
                )
            try:
                pairs.append((int(fields[0]), int(fields[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-integer id in {raw!r}") from exc
        return cls.from_pairs(pairs)


def remap_labels(labels: np.ndarray, remap: LabelRemap) -> np.ndarray:
    """Apply the lookup table per pixel."""
    arr = np.asarray(labels)
    if arr.dtype != np.uint8:
        raise DataError(f"label map must be uint8, got {arr.dtype}")
    return remap.table[arr]
