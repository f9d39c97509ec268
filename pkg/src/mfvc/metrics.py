"""Rate and quality instruments: PSNR, multiscale SSIM, bits per pixel,
rate-curve comparison, and per-pixel entropy heatmaps.

Frames follow the 8-bit convention (peak 255) whether stored as uint8 or
float. PSNR is computed over all RGB channels jointly; MS-SSIM is computed
per channel and averaged. Everything here is a pure function.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .tensor import ShapeError

PSNR_CAP_DB = 99.0

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5


@dataclass(frozen=True)
class RdPoint:
    """One operating point of a codec: rate in bits per pixel, quality in
    PSNR dB or MS-SSIM."""

    bpp: float
    quality: float

    def __post_init__(self):
        if self.bpp <= 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB at peak 255, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frames differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP_DB)


def _gaussian_window() -> np.ndarray:
    x = np.arange(_WINDOW_SIZE, dtype=np.float64) - (_WINDOW_SIZE - 1) / 2
    g = np.exp(-(x**2) / (2.0 * _WINDOW_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def _valid_filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: np.ndarray):
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu_a = _valid_filter(a, window)
    mu_b = _valid_filter(b, window)
    var_a = _valid_filter(a * a, window) - mu_a**2
    var_b = _valid_filter(b * b, window) - mu_b**2
    cov = _valid_filter(a * b, window) - mu_a * mu_b
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return lum, cs


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2, img.shape[1] // 2
    return img[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))


def _ms_ssim_single(a: np.ndarray, b: np.ndarray, scales: int) -> float:
    window = _gaussian_window()
    weights = np.asarray(MSSSIM_WEIGHTS[:scales], dtype=np.float64)
    weights = weights / weights.sum()
    value = 1.0
    for s in range(scales):
        lum, cs = _ssim_terms(a, b, window)
        if s == scales - 1:
            term = float(np.mean(lum * cs))
        else:
            term = float(np.mean(cs))
        value *= max(term, 0.0) ** weights[s]
        if s != scales - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    return value


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int = 5) -> float:
    """Multiscale SSIM with an 11x11 Gaussian window (sigma 1.5).

    The luminance term enters at the coarsest scale only; with fewer than
    five scales the leading standard weights are renormalized. RGB inputs
    are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frames differ in shape: {a.shape} vs {b.shape}")
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ValueError(f"scales must be in [1, {len(MSSSIM_WEIGHTS)}]")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"frames must be (C, H, W) or (H, W), got shape {a.shape}")
    minimum = 2 ** (scales - 1) * _WINDOW_SIZE
    if min(a.shape[1], a.shape[2]) < minimum:
        raise ValueError(
            f"frames of {a.shape[1]}x{a.shape[2]} are too small for {scales} scales; "
            f"the minimum extent is {minimum}"
        )
    return float(np.mean([_ms_ssim_single(a[c], b[c], scales) for c in range(a.shape[0])]))


def bpp(stream_bits: int, width: int, height: int, frames: int) -> float:
    """Bits per pixel; header bits are included in ``stream_bits`` by
    convention."""
    if width < 1 or height < 1 or frames < 1:
        raise ValueError("dimensions must be positive")
    return stream_bits / (width * height * frames)


def _curve(points: Sequence[RdPoint]):
    pts = sorted(points, key=lambda p: p.quality)
    q = np.array([p.quality for p in pts], dtype=np.float64)
    r = np.log(np.array([p.bpp for p in pts], dtype=np.float64))
    if len(q) < 4:
        raise ValueError(f"need at least 4 rate points per curve, got {len(q)}")
    if np.any(np.diff(q) <= 0):
        raise ValueError("curve has duplicate quality values")
    return q, PchipInterpolator(q, r)


def bd_rate(anchor: Sequence[RdPoint], test: Sequence[RdPoint]) -> float:
    """Average rate difference of ``test`` against ``anchor`` in percent,
    integrated over the overlapping quality interval on monotone
    piecewise-cubic fits of log-rate versus quality."""
    qa, fa = _curve(anchor)
    qt, ft = _curve(test)
    lo = max(qa[0], qt[0])
    hi = min(qa[-1], qt[-1])
    if hi <= lo:
        raise ValueError(f"quality ranges do not overlap: [{qa[0]}, {qa[-1]}] vs [{qt[0]}, {qt[-1]}]")
    diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float((np.exp(diff) - 1.0) * 100.0)


def entropy_heatmap(bits_plane: np.ndarray, factor: int) -> np.ndarray:
    """Spread per-latent bits uniformly over their pixel footprints.

    ``bits_plane`` is (C, h, w) or (h, w) per-symbol bits; the result is an
    (h*factor, w*factor) map whose sum equals the total bits exactly.
    """
    plane = np.asarray(bits_plane, dtype=np.float64)
    if plane.ndim == 3:
        plane = plane.sum(axis=0)
    if plane.ndim != 2:
        raise ShapeError(f"bits plane must be (C, h, w) or (h, w), got shape {plane.shape}")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return np.kron(plane, np.ones((factor, factor))) / (factor * factor)


def save_heatmap_csv(path, heatmap: np.ndarray) -> None:
    np.savetxt(path, np.asarray(heatmap), delimiter=",", fmt="%.6g")


def save_heatmap_pgm(path, heatmap: np.ndarray) -> None:
    """8-bit binary PGM, normalized to the map maximum."""
    hm = np.asarray(heatmap, dtype=np.float64)
    peak = hm.max()
    img = np.zeros_like(hm, dtype=np.uint8) if peak <= 0 else np.clip(
        np.rint(hm / peak * 255.0), 0, 255
    ).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


EVAL_CSV_COLUMNS = ("frame_index", "frame_type", "bits", "bpp", "psnr", "ms_ssim")


def write_eval_csv(path, rows: Sequence[dict]) -> None:
    """Per-frame evaluation table; one row per frame in display order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_CSV_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in EVAL_CSV_COLUMNS])
