"""2-D spectral machinery: exact transforms, amplitude/phase views, and the
low-frequency amplitude swap used for cross-domain style transfer.

Everything runs in double precision. Forward transforms are unnormalized
(the DC coefficient at index (0, 0) equals the plane sum); the inverse
applies the 1/(H*W) factor. Spectra are kept in unshifted layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, DimensionError, ParameterError

__all__ = [
    "RESIDUAL_TOL",
    "ImageTensor",
    "AmplitudePhase",
    "BetaMask",
    "SweepPoint",
    "dft2d_forward",
    "dft2d_inverse",
    "decompose",
    "recompose",
    "build_mask",
    "spectral_transfer",
    "beta_sweep",
]

# tolerated imaginary leakage of an inverse transform, relative to
# max(1, peak input magnitude); more than this means a broken spectrum
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Planar real-valued raster: ``planes[c]`` is one H x W channel.

    Samples are nominally in [0, 255] but are never clamped in memory;
    clamping happens only when a tensor is encoded to an image file.
    """

    planes: np.ndarray  # (C, H, W) float64

    def __post_init__(self):
        p = self.planes
        if not isinstance(p, np.ndarray) or p.ndim != 3:
            raise DimensionError("image tensor needs a (C, H, W) array of planes")
        if min(p.shape) < 1:
            raise DimensionError(f"empty image tensor: shape {p.shape}")
        if p.dtype != np.float64:
            raise ParameterError(f"planes must be float64, got {p.dtype}")
        lo, hi = float(p.min()), float(p.max())
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise DataError("image samples must be finite")

    @classmethod
    def from_array(cls, arr) -> "ImageTensor":
        """Build from (C, H, W) data, or a single (H, W) plane."""
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 2:
            a = a[np.newaxis]
        return cls(np.ascontiguousarray(a))

    @classmethod
    def from_interleaved(cls, arr) -> "ImageTensor":
        """Build from channel-last (H, W, C) data, e.g. a decoded image file."""
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 3:
            raise DimensionError("interleaved data must be (H, W, C)")
        return cls(np.ascontiguousarray(np.moveaxis(a, -1, 0)))

    def to_interleaved(self) -> np.ndarray:
        """Channel-last (H, W, C) copy, the layout image encoders expect."""
        return np.ascontiguousarray(np.moveaxis(self.planes, 0, -1))

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def peak(self) -> float:
        """Largest absolute sample value."""
        return float(np.abs(self.planes).max())


class AmplitudePhase(NamedTuple):
    """Polar view of a spectrum: ``amplitude * exp(i * phase)``."""

    amplitude: np.ndarray
    phase: np.ndarray


def _as_plane(plane) -> np.ndarray:
    a = np.asarray(plane, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"plane must be 2-D, got {a.ndim}-D")
    if a.size == 0:
        raise DimensionError(f"empty plane: shape {a.shape}")
    if not np.isfinite(a).all():
        raise DataError("plane samples must be finite")
    return a


def _as_spectrum(spec) -> np.ndarray:
    s = np.asarray(spec, dtype=np.complex128)
    if s.ndim != 2:
        raise DimensionError(f"spectrum must be 2-D, got {s.ndim}-D")
    if s.size == 0:
        raise DimensionError(f"empty spectrum: shape {s.shape}")
    return s


def dft2d_forward(plane) -> np.ndarray:
    """Unnormalized forward transform of one real plane.

    coeff(m, n) = sum_{h,w} x(h, w) * exp(-2i*pi*(h*m/H + w*n/W)), DC at (0, 0).
    Exact for arbitrary H, W, including non-power-of-two sizes.
    """
    return np.fft.fft2(_as_plane(plane))


def dft2d_inverse(spec) -> tuple[np.ndarray, float]:
    """Inverse transform back to a real plane.

    Returns the real part and the largest absolute imaginary component that
    was discarded. The residual is ~1e-13 for conjugate-symmetric spectra;
    anything large means the spectrum did not come from a real plane.
    """
    z = np.fft.ifft2(_as_spectrum(spec))
    residual = float(np.abs(z.imag).max())
    return np.ascontiguousarray(z.real), residual


def decompose(spec) -> AmplitudePhase:
    """Split a spectrum into amplitude |F| and phase arg(F).

    arg of an exactly-zero coefficient is defined as 0 so that the polar
    form stays deterministic (numpy would give pi for -0.0 + 0j).
    """
    s = _as_spectrum(spec)
    amplitude = np.abs(s)
    phase = np.angle(s)
    phase[amplitude == 0.0] = 0.0
    return AmplitudePhase(amplitude, phase)


def recompose(ap: AmplitudePhase) -> np.ndarray:
    """Rebuild the complex spectrum ``amplitude * (cos phase + i sin phase)``."""
    amplitude = np.asarray(ap[0], dtype=np.float64)
    phase = np.asarray(ap[1], dtype=np.float64)
    if amplitude.shape != phase.shape:
        raise DimensionError(
            f"amplitude shape {amplitude.shape} != phase shape {phase.shape}"
        )
    if amplitude.size and float(amplitude.min()) < 0.0:
        raise ParameterError("amplitude entries must be nonnegative")
    return amplitude * np.exp(1j * phase)


@dataclass(frozen=True)
class BetaMask:
    """Centered low-frequency window of a spectrum.

    The window spans the inclusive range [-half_height, half_height] x
    [-half_width, half_width] in DC-centered frequency coordinates, an odd
    side length in each axis. That makes the region symmetric under
    frequency negation, which is what keeps an amplitude swap between two
    real images producing a real image. A half-width of 0 in either axis
    deactivates the mask entirely.
    """

    beta: float
    height: int
    width: int
    half_height: int
    half_width: int

    @property
    def active(self) -> bool:
        return self.half_height >= 1 and self.half_width >= 1

    @property
    def cell_count(self) -> int:
        if not self.active:
            return 0
        return (2 * self.half_height + 1) * (2 * self.half_width + 1)

    def as_bool_array(self) -> np.ndarray:
        """Boolean (H, W) selector in unshifted layout (DC at (0, 0))."""
        if not self.active:
            return np.zeros((self.height, self.width), dtype=bool)
        hc = ((np.arange(self.height) + self.height // 2) % self.height) - self.height // 2
        wc = ((np.arange(self.width) + self.width // 2) % self.width) - self.width // 2
        return (np.abs(hc)[:, None] <= self.half_height) & (
            np.abs(wc)[None, :] <= self.half_width
        )


def build_mask(beta: float, height: int, width: int) -> BetaMask:
    """Low-frequency window with half-widths floor(beta*H), floor(beta*W).

    beta must lie in [0, 0.5); the strict upper bound keeps the window away
    from the Nyquist row/column so it can never wrap onto itself.
    """
    if not (0.0 <= beta < 0.5):
        raise ParameterError(f"beta must be in [0, 0.5), got {beta}")
    if height < 1 or width < 1:
        raise DimensionError(f"mask needs positive dimensions, got {height}x{width}")
    return BetaMask(
        beta=float(beta),
        height=int(height),
        width=int(width),
        half_height=int(math.floor(beta * height)),
        half_width=int(math.floor(beta * width)),
    )


def spectral_transfer(
    src: ImageTensor,
    tgt: ImageTensor,
    beta: float,
    return_residual: bool = False,
):
    """Swap the centered low-frequency amplitude of ``src`` with ``tgt``'s.

    Per channel: transform both images, replace the source amplitude with
    the target amplitude on the beta window (DC included), keep the source
    phase everywhere, and transform back. The output is real-valued and
    unclamped, with the same dimensions as the inputs.

    An inactive window (beta small enough that floor(beta*H) or
    floor(beta*W) is 0) returns an exact copy of ``src``.

    With ``return_residual`` the largest discarded imaginary component over
    all channels is returned alongside the image.
    """
    if src.planes.shape != tgt.planes.shape:
        raise DimensionError(
            f"source shape {src.planes.shape} != target shape {tgt.planes.shape}"
        )
    mask = build_mask(beta, src.height, src.width)
    if not mask.active:
        out = ImageTensor(src.planes.copy())
        return (out, 0.0) if return_residual else out

    region = mask.as_bool_array()
    limit = RESIDUAL_TOL * max(1.0, src.peak(), tgt.peak())
    planes = np.empty_like(src.planes)
    worst = 0.0
    for c in range(src.channels):
        amp_s, pha_s = decompose(dft2d_forward(src.planes[c]))
        amp_t = np.abs(dft2d_forward(tgt.planes[c]))
        composite = recompose(AmplitudePhase(np.where(region, amp_t, amp_s), pha_s))
        planes[c], residual = dft2d_inverse(composite)
        worst = max(worst, residual)
    if worst > limit:
        raise FloatingPointError(
            f"imaginary residual {worst:.3e} exceeds {limit:.3e}; "
            "composite spectrum lost conjugate symmetry"
        )
    out = ImageTensor(planes)
    return (out, worst) if return_residual else out


class SweepPoint(NamedTuple):
    beta: float
    image: ImageTensor
    l2_distance: float


def beta_sweep(
    src: ImageTensor, tgt: ImageTensor, betas: Sequence[float]
) -> list[SweepPoint]:
    """One amplitude swap per beta, with each output's L2 distance from src.

    Distances are reported for inspection only; growth with beta is typical
    (larger windows import more target style) but is not guaranteed.
    """
    values = [float(b) for b in betas]
    if any(b2 < b1 for b1, b2 in zip(values, values[1:])):
        raise ParameterError("betas must be sorted ascending")
    points = []
    for beta in values:
        image = spectral_transfer(src, tgt, beta)
        distance = float(np.sqrt(((image.planes - src.planes) ** 2).sum()))
        points.append(SweepPoint(beta, image, distance))
    return points
