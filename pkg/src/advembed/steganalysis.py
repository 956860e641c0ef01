"""Quality and detection metrics: SSIM, sample-pair analysis, chi-square, AUC.

Detectors work on the 8-bit pixel values, so float images are first mapped
through :func:`advembed.data.to_uint8`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import chi2, rankdata

from .data import from_uint8, to_uint8

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {img.shape}")
    return img


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` uniform windows and channels."""
    a, b = _hwc(a), _hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    w = min(window, a.shape[0], a.shape[1])
    scores = []
    for ch in range(a.shape[2]):
        wa = sliding_window_view(a[:, :, ch], (w, w))
        wb = sliding_window_view(b[:, :, ch], (w, w))
        mu_a, mu_b = wa.mean(axis=(2, 3)), wb.mean(axis=(2, 3))
        da = wa - mu_a[..., None, None]
        db = wb - mu_b[..., None, None]
        var_a, var_b = (da * da).mean(axis=(2, 3)), (db * db).mean(axis=(2, 3))
        cov = (da * db).mean(axis=(2, 3))
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def ssim_loss_percent(cover, stego) -> float:
    return 100.0 * (1.0 - ssim(cover, stego))


def _pairs(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = np.concatenate([plane[:, :-1].ravel(), plane[:-1, :].ravel()])
    v = np.concatenate([plane[:, 1:].ravel(), plane[1:, :].ravel()])
    return u, v


def spa_estimate(plane: np.ndarray) -> float:
    """Estimated LSB-replacement rate of one 8-bit channel from adjacent pairs.

    With (u, v) running over horizontal and vertical neighbours:
    X holds pairs where v is even and u < v or v is odd and u > v, Y the
    mirror case, Z the equal pairs and W the pairs differing only in the
    LSB. Embedding at rate p moves pairs between these sets at known rates,
    and a natural cover has |X| close to |Y|, which gives

        (|W| + |Z|) / 2 * p^2 + (2|X| - |P|) p + |Y| - |X| = 0.

    The smaller root is the estimate. Near p = 1 the two roots merge and
    sampling noise can push the discriminant below zero; the real part of
    the complex pair is used then.
    """
    u, v = _pairs(plane.astype(np.int64))
    if not len(u):
        return 0.0
    v_even = v % 2 == 0
    x = int(np.count_nonzero((v_even & (u < v)) | (~v_even & (u > v))))
    y = int(np.count_nonzero((v_even & (u > v)) | (~v_even & (u < v))))
    z = int(np.count_nonzero(u == v))
    w = int(np.count_nonzero((u // 2 == v // 2) & (u != v)))
    a = (w + z) / 2
    b = 2 * x - len(u)
    c = y - x
    if a == 0:
        return 0.0
    disc = b * b - 4 * a * c
    p = -b / (2 * a) if disc < 0 else (-b - np.sqrt(disc)) / (2 * a)
    return float(max(p, 0.0))


def spa_score(img) -> float:
    """Channel-averaged sample-pair estimate of the LSB-replacement rate (>= 0)."""
    px = to_uint8(_hwc(img))
    return float(np.mean([spa_estimate(px[:, :, ch]) for ch in range(px.shape[2])]))


def lsb_chi_square_score(img, min_expected: float = 1.0) -> float:
    """Probability that the even/odd value pairs have been equalized by LSB embedding.

    The histogram of 8-bit values is split into pairs (2i, 2i+1). LSB
    replacement pushes each pair towards equal counts, so a small
    chi-square distance from the pair means gives a score close to 1.
    Pairs whose expected count is below ``min_expected`` are skipped; with
    fewer than two usable pairs the score is 0.
    """
    px = to_uint8(_hwc(img)).ravel()
    hist = np.bincount(px, minlength=256).astype(np.float64)
    even, odd = hist[0::2], hist[1::2]
    expected = (even + odd) / 2
    keep = expected >= min_expected
    if np.count_nonzero(keep) < 2:
        return 0.0
    stat = float(np.sum((even[keep] - expected[keep]) ** 2 / expected[keep]))
    return float(chi2.sf(stat, np.count_nonzero(keep) - 1))


def lsb_replace(img, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Reference LSB-replacement embedder used to calibrate the detectors.

    Each 8-bit sample is selected with probability ``rate`` and its LSB is
    overwritten with a random bit.
    """
    if not 0 <= rate <= 1:
        raise ValueError("rate must be in [0, 1]")
    px = to_uint8(_hwc(img))
    chosen = rng.random(px.shape) < rate
    bits = rng.integers(0, 2, size=px.shape, dtype=np.uint8)
    out = np.where(chosen, (px & 0xFE) | bits, px).astype(np.uint8)
    return from_uint8(out)


def auc_roc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve; label 1 marks stego. Ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative sample")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
