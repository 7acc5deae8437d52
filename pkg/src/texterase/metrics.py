"""Image-pair quality metrics and corpus aggregation.

All metrics quantize to 8-bit first. PSNR and MSE share one 8-bit MSE; AGE,
pEPs and pCEPs operate on ITU-R 601 grayscale with an error threshold of 20
gray levels (configurable) and a replicate-border 4-neighborhood for the
clustered-error fraction.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os

import numpy as np
from scipy.signal import fftconvolve

PSNR_INF = math.inf
ERROR_THRESHOLD = 20.0
LUMA = (0.299, 0.587, 0.114)

# Canonical 5-scale weights for multi-scale structural similarity.
MSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def quantize(img: np.ndarray) -> np.ndarray:
    """[0,1] float (or already 8-bit) -> float64 0..255 integers."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64)
    return np.floor(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5)


def _check_pair(a, b):
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError(f"shape mismatch: {np.asarray(a).shape} vs "
                         f"{np.asarray(b).shape}")


def mse8(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    qa, qb = quantize(a), quantize(b)
    return float(np.mean((qa - qb) ** 2))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """8-bit MSE reported on the [0,1] scale (tables print it in percent)."""
    return mse8(a, b) / 255.0 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(255^2 / 8-bit MSE); +inf for identical pairs."""
    m = mse8(a, b)
    if m == 0:
        return PSNR_INF
    return 10.0 * math.log10(255.0 ** 2 / m)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_single(a: np.ndarray, b: np.ndarray, data_range: float = 255.0):
    """Single-scale SSIM on a 2-D array: 11x11 Gaussian window, sigma 1.5,
    weighted (population) statistics, valid-region mean.

    Returns (mean ssim, mean contrast-structure).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        return fftconvolve(x, k, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2]) / 4.0


def _mssim_gray(a: np.ndarray, b: np.ndarray) -> float:
    # Use as many of the 5 canonical scales as fit the 11-px window,
    # renormalizing the weights for small images.
    n_scales = 1
    s = min(a.shape)
    while n_scales < len(MSSIM_WEIGHTS) and s // 2 >= SSIM_WINDOW:
        n_scales += 1
        s //= 2
    weights = np.asarray(MSSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    vals = []
    for i in range(n_scales):
        sim, cs = ssim_single(a, b)
        vals.append(sim if i == n_scales - 1 else cs)
        if i < n_scales - 1:
            a, b = _downsample2(a), _downsample2(b)
    result = 1.0
    for v, w in zip(vals, weights):
        result *= max(v, 0.0) ** w
    return float(result)


def mssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale structural similarity in [0,1]; channels averaged."""
    _check_pair(a, b)
    qa, qb = quantize(a), quantize(b)
    if qa.ndim == 2:
        qa, qb = qa[..., None], qb[..., None]
    vals = [_mssim_gray(qa[..., c], qb[..., c]) for c in range(qa.shape[-1])]
    return float(np.clip(np.mean(vals), 0.0, 1.0))


def to_gray(img: np.ndarray) -> np.ndarray:
    q = quantize(img)
    if q.ndim == 2:
        return q
    return q[..., 0] * LUMA[0] + q[..., 1] * LUMA[1] + q[..., 2] * LUMA[2]


def age_peps_pceps(a: np.ndarray, b: np.ndarray,
                   threshold: float = ERROR_THRESHOLD):
    """(mean gray |diff|, error-pixel fraction, clustered-error fraction).

    An error pixel exceeds ``threshold`` gray levels; a clustered error pixel
    is an error pixel whose four replicate-border neighbors are all errors.
    """
    _check_pair(a, b)
    ga, gb = to_gray(a), to_gray(b)
    diff = np.abs(ga - gb)
    err = diff > threshold
    age = float(diff.mean())
    peps = float(err.mean())
    p = np.pad(err, 1, mode="edge")
    clustered = err & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return age, peps, float(clustered.mean())


@dataclasses.dataclass
class MetricReport:
    names: list
    per_image: list  # dicts: psnr, mssim, mse, age, peps, pceps
    means: dict
    psnr_excluded: int  # +inf entries left out of the psnr mean


def compute_all(a: np.ndarray, b: np.ndarray) -> dict:
    p = psnr(a, b)
    m = mse(a, b)
    # psnr/mse consistency holds by construction; keep the assert hot.
    if math.isfinite(p):
        assert abs(p - 10.0 * math.log10(1.0 / m)) < 1e-9
    age, peps, pceps = age_peps_pceps(a, b)
    return {"psnr": p, "mssim": mssim(a, b), "mse": m,
            "age": age, "peps": peps, "pceps": pceps}


def evaluate_corpus(pred_dir, gt_dir) -> MetricReport:
    """Metrics for same-named files in two directories, plus means."""
    from .data import read_image
    exts = (".png", ".bmp", ".jpg", ".jpeg")
    preds = sorted(n for n in os.listdir(pred_dir)
                   if n.lower().endswith(exts))
    gts = set(os.listdir(gt_dir))
    names = [n for n in preds if n in gts]
    if not names:
        raise FileNotFoundError(
            f"no matching filenames between {pred_dir} and {gt_dir}")
    missing = [n for n in preds if n not in gts]
    if missing:
        raise FileNotFoundError(
            f"no ground-truth counterpart for {missing[0]!r} in {gt_dir}")
    per_image = []
    for name in names:
        a = read_image(os.path.join(pred_dir, name))
        b = read_image(os.path.join(gt_dir, name))
        per_image.append(compute_all(a, b))
    finite_psnr = [r["psnr"] for r in per_image if math.isfinite(r["psnr"])]
    means = {}
    for key in ("psnr", "mssim", "mse", "age", "peps", "pceps"):
        if key == "psnr":
            means[key] = float(np.mean(finite_psnr)) if finite_psnr else PSNR_INF
        else:
            means[key] = float(np.mean([r[key] for r in per_image]))
    return MetricReport(names=names, per_image=per_image, means=means,
                        psnr_excluded=len(per_image) - len(finite_psnr))


def write_csv(report: MetricReport, path) -> None:
    keys = ("psnr", "mssim", "mse", "age", "peps", "pceps")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("name",) + keys)
        for name, row in zip(report.names, report.per_image):
            w.writerow([name] + [row[k] for k in keys])
        w.writerow(["MEAN"] + [report.means[k] for k in keys])


def summary(report: MetricReport) -> str:
    m = report.means
    lines = [
        f"images evaluated : {len(report.names)}",
        f"psnr  (dB)       : {m['psnr']:.4f}"
        + (f"  ({report.psnr_excluded} identical pair(s) excluded)"
           if report.psnr_excluded else ""),
        f"mssim (%)        : {m['mssim'] * 100:.4f}",
        f"mse   (%)        : {m['mse'] * 100:.6f}",
        f"age              : {m['age']:.4f}",
        f"peps             : {m['peps']:.6f}",
        f"pceps            : {m['pceps']:.6f}",
    ]
    return "\n".join(lines)
