"""Input-space style alignment: Fourier amplitude swapping and histogram matching.

All spectra in this module are centred (zero frequency at ``(H//2, W//2)``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class SpectralDecomposition:
    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape:
            raise ValueError(f"amplitude {self.amplitude.shape} and phase {self.phase.shape} differ in shape")


@dataclass
class FrequencyMask:
    mask: np.ndarray
    beta: float


def fft_decompose(image) -> SpectralDecomposition:
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("image must be finite")
    spec = np.fft.fftshift(np.fft.fft2(image))
    return SpectralDecomposition(np.abs(spec), np.angle(spec))


def fft_compose(spec: SpectralDecomposition, clamp: bool = True) -> np.ndarray:
    """Inverse of :func:`fft_decompose`; real part, clamped to [0, 1] by default."""
    if spec.amplitude.shape != spec.phase.shape:
        raise ValueError(f"amplitude {spec.amplitude.shape} and phase {spec.phase.shape} differ in shape")
    if np.any(spec.amplitude < 0):
        raise ValueError("amplitude must be non-negative")
    z = spec.amplitude * np.exp(1j * spec.phase)
    out = np.fft.ifft2(np.fft.ifftshift(z)).real
    return np.clip(out, 0.0, 1.0) if clamp else out


def build_lowfreq_mask(h: int, w: int, beta: float) -> FrequencyMask:
    """Centred rectangle with half-extents floor(beta*h/2), floor(beta*w/2).

    ``beta == 1`` covers the whole grid; ``beta == 0`` is empty.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    mask = np.zeros((h, w), dtype=np.uint8)
    if beta == 0.0:
        return FrequencyMask(mask, beta)
    if beta == 1.0:
        mask[:] = 1
        return FrequencyMask(mask, beta)
    ch, cw = h // 2, w // 2
    bh, bw = int(np.floor(beta * h / 2)), int(np.floor(beta * w / 2))
    mask[max(ch - bh, 0):ch + bh + 1, max(cw - bw, 0):cw + bw + 1] = 1
    return FrequencyMask(mask, beta)


def blend_amplitude(src_amp, tgt_amp, beta):
    m = build_lowfreq_mask(*src_amp.shape, beta).mask.astype(np.float64)
    return src_amp * (1.0 - m) + tgt_amp * m


def fft_style_transfer(src, tgt, beta: float = 0.04, clamp: bool = True) -> np.ndarray:
    """Render ``src`` with the low-frequency amplitude of ``tgt``; source phase kept."""
    src = np.asarray(src)
    tgt = np.asarray(tgt)
    if src.shape != tgt.shape:
        raise ValueError(f"shape mismatch {src.shape} vs {tgt.shape}")
    s = fft_decompose(src)
    t = fft_decompose(tgt)
    mixed = SpectralDecomposition(blend_amplitude(s.amplitude, t.amplitude, beta), s.phase)
    return fft_compose(mixed, clamp=clamp)


def _bin_index(img, bins):
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * bins), 0, bins - 1).astype(np.int64)


def histogram_bin_mapping(src, tgt, bins: int = 256) -> np.ndarray:
    """Map each source bin to the smallest target bin with CDF >= the source CDF."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    src = np.asarray(src)
    tgt = np.asarray(tgt)
    if src.size == 0 or tgt.size == 0:
        raise ValueError("empty image")
    src_cum = np.cumsum(np.bincount(_bin_index(src, bins).ravel(), minlength=bins))
    tgt_cum = np.cumsum(np.bincount(_bin_index(tgt, bins).ravel(), minlength=bins))
    return kernels.histogram_bin_map(src_cum, tgt_cum)


def histogram_match(src, tgt, bins: int = 256) -> np.ndarray:
    """Histogram matching of ``src`` onto ``tgt`` over ``bins`` levels.

    Intensities are quantised as ``floor(x * bins)``. Each source bin is sent
    to its matched target bin, and that bin is rendered as the mean intensity
    of the target pixels it holds, so the output only takes values present in
    the target's bin means and stays inside [0, 1].
    """
    mapping = histogram_bin_mapping(src, tgt, bins)
    src = np.asarray(src)
    tgt_flat = np.asarray(tgt, dtype=np.float64).ravel()
    tgt_bins = _bin_index(tgt_flat, bins)
    counts = np.bincount(tgt_bins, minlength=bins)
    sums = np.bincount(tgt_bins, weights=tgt_flat, minlength=bins)
    # the matched bin always holds target pixels: its CDF step is positive
    level = np.divide(sums, counts, out=(np.arange(bins) + 0.5) / bins, where=counts > 0)
    # bins holding a single repeated value reproduce it exactly
    lo = np.full(bins, np.inf)
    hi = np.full(bins, -np.inf)
    np.minimum.at(lo, tgt_bins, tgt_flat)
    np.maximum.at(hi, tgt_bins, tgt_flat)
    level = np.where(lo == hi, lo, level)
    out = level[mapping[_bin_index(src, bins)]]
    return out.astype(src.dtype if np.issubdtype(src.dtype, np.floating) else np.float64)


def stylize(src, tgt, method: str = "fft", beta: float = 0.04, bins: int = 256) -> np.ndarray:
    if method == "fft":
        out = fft_style_transfer(src, tgt, beta)
    elif method == "histogram":
        out = histogram_match(src, tgt, bins)
    else:
        raise ValueError(f"unknown style method {method!r}")
    return np.asarray(out, dtype=np.float32)
