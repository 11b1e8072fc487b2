"""Training objectives: edge-aware depth smoothness, SSIM photometric loss,
RGB rendering loss, and the scheduled blend between them.

The schedule weight w = exp(beta * t) moves the objective from the
geometry-driven terms (depth smoothness + photometric for pinhole rigs, the
bundle-adjustment objective + photometric for fisheye rigs) toward the pure
rendering loss as iterations t grow.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

log = logging.getLogger(__name__)

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2

DEFAULT_BETA = {"pinhole": -1e4, "fisheye": -1e3}


@dataclass(frozen=True)
class LossBreakdown:
    depth: float
    photo: float
    rgb: float
    fba: float
    total: float
    blend_weight: float


def _axis_grad(arr: np.ndarray, axis: int) -> np.ndarray:
    return np.diff(arr, axis=axis)


def depth_smoothness(depth: np.ndarray, image: np.ndarray) -> float:
    """Mean absolute depth gradient, downweighted across image edges.

    value = mean |dD/dx| e^{-|dI/dx|} + mean |dD/dy| e^{-|dI/dy|}
    with image gradients averaged over channels.
    """
    depth = np.asarray(depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if depth.shape != image.shape[:2]:
        raise ValueError("depth and image dimensions do not match")
    total = 0.0
    for axis in (1, 0):
        dd = np.abs(_axis_grad(depth, axis))
        di = np.abs(_axis_grad(image, axis)).mean(axis=2)
        total += float((dd * np.exp(-di)).mean())
    return total


def _window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(x**2) / (2.0 * _SSIM_SIGMA**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over fully interior 11x11 Gaussian windows,
    computed per channel and averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions do not match")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    win = _window()
    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        var_x = convolve2d(x * x, win, mode="valid") - mu_x * mu_x
        var_y = convolve2d(y * y, win, mode="valid") - mu_y * mu_y
        cov = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)
        den = (mu_x**2 + mu_y**2 + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
        scores.append((num / den).mean())
    return float(np.mean(scores))


def rgb_loss(rendered: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error over pixels and channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise ValueError("image dimensions do not match")
    diff = rendered - truth
    return float((diff * diff).mean())


def photometric_loss(warped, target: np.ndarray, alpha: float = 0.85) -> float:
    """SSIM/MSE blend averaged over the warped views:
    (1/N) sum_j alpha (1 - SSIM(I'_j, I_o)) / 2 + (1 - alpha) MSE(I'_j, I_o).
    """
    if len(warped) < 1:
        raise ValueError("need at least one warped view")
    terms = []
    for w in warped:
        term = (1.0 - alpha) * rgb_loss(w, target)
        if alpha != 0.0:
            term += alpha * (1.0 - ssim(w, target)) / 2.0
        terms.append(term)
    return float(np.mean(terms))


def scheduled_loss(
    components: dict,
    t: float,
    beta: float | None = None,
    mode: str = "pinhole",
) -> LossBreakdown:
    """Blend the staged objectives with weight e^{beta t}.

    pinhole: w (depth + photo) + (1 - w) rgb
    fisheye: w (fba + photo) + (1 - w) rgb
    """
    if mode not in DEFAULT_BETA:
        raise ValueError(f"unknown mode {mode!r}")
    if t < 0:
        raise ValueError("iteration t must be non-negative")
    beta = DEFAULT_BETA[mode] if beta is None else float(beta)
    depth = float(components.get("depth", 0.0))
    photo = float(components.get("photo", 0.0))
    rgb = float(components.get("rgb", 0.0))
    fba = float(components.get("fba", 0.0))
    for name, value in (("depth", depth), ("photo", photo), ("rgb", rgb), ("fba", fba)):
        if value < 0:
            raise ValueError(f"loss component {name} must be non-negative")
    w = float(np.exp(beta * t))
    first = fba if mode == "fisheye" else depth
    total = w * (first + photo) + (1.0 - w) * rgb
    return LossBreakdown(
        depth=depth, photo=photo, rgb=rgb, fba=fba, total=total, blend_weight=w
    )
