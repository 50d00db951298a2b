"""Localization, fidelity and payload metrics on numpy arrays."""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

PSNR_CAP = 100.0


def _as_np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def confusion(pred_bin: np.ndarray, gt: np.ndarray) -> tuple:
    p, g = pred_bin.astype(bool), gt.astype(bool)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return tp, fp, fn, tn


def f1_iou(pred_bin, gt) -> tuple:
    """Tampered = positive.  Both are 1.0 when prediction and truth are empty."""
    tp, fp, fn, _ = confusion(_as_np(pred_bin), _as_np(gt))
    denom_f1, denom_iou = 2 * tp + fp + fn, tp + fp + fn
    f1 = 2 * tp / denom_f1 if denom_f1 else 1.0
    iou = tp / denom_iou if denom_iou else 1.0
    return f1, iou


def pixel_auc(scores, gt) -> float:
    """Rank-sum (Mann-Whitney) AUC over pixels with tied scores averaged; NaN for one-class truth."""
    s, g = _as_np(scores).ravel(), _as_np(gt).ravel().astype(bool)
    n_pos, n_neg = int(g.sum()), int((~g).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[g].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_mask_metrics(pred, gt, tau: float = 0.5) -> dict:
    pred, gt = _as_np(pred), _as_np(gt)
    pred, gt = np.squeeze(pred), np.squeeze(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")
    f1, iou = f1_iou(pred >= tau, gt)
    return {"f1": f1, "iou": iou, "auc": pixel_auc(pred, gt)}


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _as_np(a), _as_np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """'valid' correlation of a 2-D image with a 2-D window via sliding views."""
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", view, win)


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM over the valid region, averaged over channels."""
    a, b = _as_np(a), _as_np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window(win_size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def compute_fidelity_metrics(a, b, cap: float = PSNR_CAP) -> dict:
    return {"psnr": psnr(a, b, cap), "ssim": ssim(a, b)}


def bit_accuracy(a, b) -> float:
    a, b = _as_np(a).ravel(), _as_np(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"payload length mismatch {a.size} vs {b.size}")
    return float(np.mean((a >= 0.5) == (b >= 0.5)))
