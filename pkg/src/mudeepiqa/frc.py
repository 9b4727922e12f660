"""Single-image Fourier ring correlation (FRC) resolution estimates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .imagecore import Image

THRESHOLD = 1.0 / 7.0
SMOOTHING = 5
RING_WIDTH = 1  # in frequency samples

# recorded next to any FRC label so it can be regenerated
FRC_SETTINGS = {
    "split": "2x2 checkerboard, diagonal pairs averaged",
    "threshold": THRESHOLD,
    "ring_width_samples": RING_WIDTH,
    "smoothing_window": SMOOTHING,
    "no_crossing": "cutoff set to Nyquist (0.5) and flagged",
    "units": "sub-image cycles/pixel; resolution_px = 1/cutoff in sub-image pixels",
}


class FRCError(ValueError):
    pass


@dataclass(frozen=True)
class FRCCurve:
    frequencies: np.ndarray  # cycles / pixel
    correlations: np.ndarray
    ring_width: float
    energy: np.ndarray  # sqrt(sum|Fa|^2 * sum|Fb|^2) per ring


@dataclass(frozen=True)
class ResolutionEstimate:
    cutoff_frequency: float
    resolution_px: float
    resolution_um: float | None = None
    no_crossing: bool = False


def split_subimages(image: Image) -> tuple[Image, Image]:
    """Two half-size images from the diagonals of every 2x2 block.

    A averages positions (0,0) and (1,1); B averages (0,1) and (1,0). Both
    are centered on the block, so they differ only in noise. Odd dimensions
    lose their last row/column.
    """
    px = image.pixels.astype(np.float64)
    h, w = px.shape
    if h % 2 or w % 2:
        warnings.warn(f"odd image size {h}x{w}; cropping to even", stacklevel=2)
        px = px[: h - h % 2, : w - w % 2]
    a = 0.5 * (px[0::2, 0::2] + px[1::2, 1::2])
    b = 0.5 * (px[0::2, 1::2] + px[1::2, 0::2])
    size = None if image.pixel_size is None else 2 * image.pixel_size
    return Image(a, size), Image(b, size)


def _ring_index(shape: tuple[int, int]) -> tuple[np.ndarray, int]:
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    n = min(h, w)
    radius = np.sqrt(fy**2 + fx**2) * n / RING_WIDTH
    return np.rint(radius).astype(np.int64), n // (2 * RING_WIDTH)


def frc_curve(a: Image | np.ndarray, b: Image | np.ndarray) -> FRCCurve:
    """Correlation of the spectra of ``a`` and ``b`` over rings of constant frequency.

    Rings run from 1 frequency sample up to Nyquist; the DC term is excluded.
    """
    pa = a.pixels if isinstance(a, Image) else np.asarray(a)
    pb = b.pixels if isinstance(b, Image) else np.asarray(b)
    if pa.shape != pb.shape:
        raise FRCError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    fa = np.fft.fft2(pa.astype(np.float64))
    fb = np.fft.fft2(pb.astype(np.float64))
    ring, n_rings = _ring_index(pa.shape)
    keep = ring <= n_rings
    idx = ring[keep]
    cross = np.bincount(idx, (fa * np.conj(fb)).real[keep], minlength=n_rings + 1)
    pow_a = np.bincount(idx, (np.abs(fa) ** 2)[keep], minlength=n_rings + 1)
    pow_b = np.bincount(idx, (np.abs(fb) ** 2)[keep], minlength=n_rings + 1)
    energy = np.sqrt(pow_a * pow_b)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(energy > 0, cross / energy, 0.0)
    corr = np.clip(corr, -1.0, 1.0)
    n = min(pa.shape)
    freqs = np.arange(n_rings + 1) * RING_WIDTH / n
    return FRCCurve(freqs[1:], corr[1:], RING_WIDTH / n, energy[1:])


def smooth(values: np.ndarray, window: int = SMOOTHING) -> np.ndarray:
    """Centered moving average; the window shrinks at both ends."""
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(values.size)
    lo = np.clip(idx - half, 0, values.size)
    hi = np.clip(idx + half + 1, 0, values.size)
    return (c[hi] - c[lo]) / (hi - lo)


def threshold_crossing(curve: FRCCurve, threshold: float = THRESHOLD) -> tuple[float, bool]:
    """First frequency at which the smoothed curve drops below ``threshold``.

    Linearly interpolated between the bracketing rings; returns (0.5, True)
    when the curve never crosses.
    """
    y = smooth(curve.correlations)
    f = curve.frequencies
    below = np.flatnonzero(y < threshold)
    if below.size == 0:
        return 0.5, True
    i = below[0]
    if i == 0:
        return float(f[0]), False
    y0, y1 = y[i - 1], y[i]
    t = (y0 - threshold) / (y0 - y1)
    return float(f[i - 1] + t * (f[i] - f[i - 1])), False


def frc_resolution(image: Image) -> ResolutionEstimate:
    if min(image.shape) < 64:
        raise FRCError(f"image {image.shape} too small for FRC (need >= 64x64)")
    if not np.ptp(image.pixels) > 0:
        raise FRCError("FRC undefined for a zero-variance image")
    a, b = split_subimages(image)
    cutoff, flag = threshold_crossing(frc_curve(a, b))
    res = 1.0 / cutoff
    um = None if a.pixel_size is None else res * a.pixel_size
    return ResolutionEstimate(cutoff, res, um, flag)


def label_manifest(manifest, entries=None) -> dict[str, float]:
    """FRC resolution (sub-image pixels) for every entry that has an image file."""
    entries = manifest.entries if entries is None else entries
    return {e.id: frc_resolution(manifest.load(e)).resolution_px for e in entries}
