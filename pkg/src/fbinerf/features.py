"""Deterministic multi-scale image features.

A fixed hand-crafted pyramid stands in for a learned backbone: each level
carries grayscale, blurred grayscale, x/y gradients, and four local-contrast
channels, standardized per channel.  The coarsest level additionally passes
through a fixed orthogonal channel mix to form the contextual features.

All operations are pure; pyramids are immutable after construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateConfiguration,
    ImageTooSmall,
    NotEnoughViews,
    OutOfBounds,
)
from .geometry import PoseSE3, skew

log = logging.getLogger(__name__)

_MIN_SIDE = 32
_CONTRAST_OFFSETS = ((0, 2), (2, 0), (2, 2), (2, -2))
_MIX_SEED = 20240611
_POOL_GRID = 4


@dataclass(frozen=True)
class FeatureConfig:
    levels: int = 3
    blur_sigma: float = 1.5
    boundary: str = "reflect"  # or "wrap" for periodic images

    def __post_init__(self):
        if self.boundary not in ("reflect", "wrap"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-level feature volumes (H, W, d) plus contextual features."""

    levels: tuple
    contextual: np.ndarray

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]


def _to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def _shifted(a: np.ndarray, dy: int, dx: int, mode: str) -> np.ndarray:
    """result[i, j] = a[i - dy, j - dx] with the requested boundary rule."""
    if mode == "wrap":
        return np.roll(a, (dy, dx), axis=(0, 1))
    r = max(abs(dy), abs(dx))
    p = np.pad(a, r, mode="reflect")
    h, w = a.shape
    return p[r - dy : r - dy + h, r - dx : r - dx + w]


def _standardize(channel: np.ndarray) -> np.ndarray:
    centered = channel - channel.mean()
    std = centered.std()
    if std < 1e-8:
        return centered
    return centered / std


def _level_channels(gray: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    mode = cfg.boundary
    blur = ndimage.gaussian_filter(gray, cfg.blur_sigma, mode=mode)
    gx = ndimage.sobel(gray, axis=1, mode=mode)
    gy = ndimage.sobel(gray, axis=0, mode=mode)
    chans = [gray, blur, gx, gy]
    chans += [gray - _shifted(gray, dy, dx, mode) for dy, dx in _CONTRAST_OFFSETS]
    return np.stack([_standardize(c) for c in chans], axis=-1)


def _downsample(gray: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    return ndimage.gaussian_filter(gray, 1.0, mode=cfg.boundary)[::2, ::2]


def _mix_matrix(d: int) -> np.ndarray:
    rng = np.random.default_rng(_MIX_SEED)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q


def extract_features(image: np.ndarray, config: FeatureConfig | None = None) -> FeaturePyramid:
    """Build the feature pyramid of an RGB or grayscale image in [0, 1]."""
    cfg = config or FeatureConfig()
    gray = _to_gray(image)
    h, w = gray.shape
    if h < _MIN_SIDE or w < _MIN_SIDE:
        raise ImageTooSmall(f"need at least {_MIN_SIDE}x{_MIN_SIDE}, got {h}x{w}")
    levels = []
    for _ in range(cfg.levels):
        feats = _level_channels(gray, cfg)
        feats.flags.writeable = False
        levels.append(feats)
        gray = _downsample(gray, cfg)
    contextual = levels[-1] @ _mix_matrix(levels[-1].shape[2])
    contextual.flags.writeable = False
    return FeaturePyramid(tuple(levels), contextual)


def bilinear_sample(values: np.ndarray, uv: np.ndarray):
    """Bilinear interpolation with a validity mask.

    values is (H, W) or (H, W, C); uv is (..., 2) in (u=column, v=row) order.
    Returns (samples, valid); samples at invalid coordinates are zero.
    Exact at integer coordinates.
    """
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[..., None]
    h, w = values.shape[:2]
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(np.where(valid, u, 0.0), 0, w - 1)
    vc = np.clip(np.where(valid, v, 0.0), 0, h - 1)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(uc, np.int64)
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(vc, np.int64)
    fu = (uc - u0)[..., None]
    fv = (vc - v0)[..., None]
    s = (
        values[v0, u0] * (1 - fu) * (1 - fv)
        + values[v0, u0 + 1] * fu * (1 - fv)
        + values[v0 + 1, u0] * (1 - fu) * fv
        + values[v0 + 1, u0 + 1] * fu * fv
    )
    s = np.where(valid[..., None], s, 0.0)
    if squeeze:
        s = s[..., 0]
    return s, valid


def bilinear_sample_with_grad(values: np.ndarray, uv: np.ndarray):
    """Like bilinear_sample but also returns d(sample)/d(u, v), shape (..., C, 2)."""
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[..., None]
    h, w = values.shape[:2]
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(np.where(valid, u, 0.0), 0, w - 1)
    vc = np.clip(np.where(valid, v, 0.0), 0, h - 1)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(uc, np.int64)
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(vc, np.int64)
    fu = (uc - u0)[..., None]
    fv = (vc - v0)[..., None]
    a = values[v0, u0]
    b = values[v0, u0 + 1]
    c = values[v0 + 1, u0]
    d = values[v0 + 1, u0 + 1]
    s = a * (1 - fu) * (1 - fv) + b * fu * (1 - fv) + c * (1 - fu) * fv + d * fu * fv
    ds_du = (b - a) * (1 - fv) + (d - c) * fv
    ds_dv = (c - a) * (1 - fu) + (d - b) * fu
    mask = valid[..., None]
    s = np.where(mask, s, 0.0)
    grad = np.stack([np.where(mask, ds_du, 0.0), np.where(mask, ds_dv, 0.0)], axis=-1)
    if squeeze:
        s = s[..., 0]
        grad = grad[..., 0, :]
    return s, grad, valid


def _catmull_rom_weights(x: np.ndarray):
    """Catmull-Rom weights and derivatives for the 4-tap stencil.

    x is the fractional offset in [0, 1); returns (w, dw) of shape (..., 4)
    covering taps at offsets -1, 0, 1, 2.  Weights sum to one and reproduce
    the sample values exactly at integer coordinates.
    """
    x2 = x * x
    x3 = x2 * x
    w = np.stack(
        [
            -0.5 * x + x2 - 0.5 * x3,
            1.0 - 2.5 * x2 + 1.5 * x3,
            0.5 * x + 2.0 * x2 - 1.5 * x3,
            -0.5 * x2 + 0.5 * x3,
        ],
        axis=-1,
    )
    dw = np.stack(
        [
            -0.5 + 2.0 * x - 1.5 * x2,
            -5.0 * x + 4.5 * x2,
            0.5 + 4.0 * x - 4.5 * x2,
            -x + 1.5 * x2,
        ],
        axis=-1,
    )
    return w, dw


def _cubic_parts(values: np.ndarray, uv: np.ndarray):
    """Shared internals of the cubic samplers.

    The 4x4 Catmull-Rom stencil needs one extra ring of support, so pixels
    whose stencil would leave the image fall back to the bilinear result;
    the validity mask is identical to bilinear_sample's.
    """
    h, w = values.shape[:2]
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[..., 0], uv[..., 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(np.where(valid, u, 0.0), 0, w - 1)
    vc = np.clip(np.where(valid, v, 0.0), 0, h - 1)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(uc, np.int64)
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(vc, np.int64)
    interior = (u0 >= 1) & (u0 <= w - 3) & (v0 >= 1) & (v0 <= h - 3)
    iu = np.where(interior, u0, 1) if w > 3 else np.ones_like(u0)
    iv = np.where(interior, v0, 1) if h > 3 else np.ones_like(v0)
    interior = interior & (w > 3) & (h > 3)
    taps = np.arange(-1, 3)
    patch = values[
        (iv[..., None, None] + taps[:, None]).clip(0, h - 1),
        (iu[..., None, None] + taps[None, :]).clip(0, w - 1),
    ]  # (..., 4, 4, C)
    wx, dwx = _catmull_rom_weights(uc - u0)
    wy, dwy = _catmull_rom_weights(vc - v0)
    return valid, interior, patch, (wx, dwx), (wy, dwy)


def cubic_sample(values: np.ndarray, uv: np.ndarray):
    """Catmull-Rom interpolation with a validity mask.

    Same contract as bilinear_sample but C1-smooth and far more accurate on
    band-limited images; the outermost pixel ring uses the bilinear value.
    """
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[..., None]
    lin, valid = bilinear_sample(values, uv)
    valid_c, interior, patch, (wx, _), (wy, _) = _cubic_parts(values, uv)
    cub = np.einsum("...ijc,...i,...j->...c", patch, wy, wx)
    s = np.where((valid_c & interior)[..., None], cub, lin)
    if squeeze:
        s = s[..., 0]
    return s, valid


def cubic_sample_with_grad(values: np.ndarray, uv: np.ndarray):
    """Like cubic_sample but also returns d(sample)/d(u, v), shape (..., C, 2)."""
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[..., None]
    lin, lin_grad, valid = bilinear_sample_with_grad(values, uv)
    valid_c, interior, patch, (wx, dwx), (wy, dwy) = _cubic_parts(values, uv)
    cub = np.einsum("...ijc,...i,...j->...c", patch, wy, wx)
    d_du = np.einsum("...ijc,...i,...j->...c", patch, wy, dwx)
    d_dv = np.einsum("...ijc,...i,...j->...c", patch, dwy, wx)
    use = (valid_c & interior)[..., None]
    s = np.where(use, cub, lin)
    grad = np.where(
        use[..., None], np.stack([d_du, d_dv], axis=-1), lin_grad
    )
    if squeeze:
        s = s[..., 0]
        grad = grad[..., 0, :]
    return s, grad, valid


def sample_feature(pyr: FeaturePyramid, level: int, x) -> np.ndarray:
    """Feature vector(s) at subpixel coordinates; raises OutOfBounds."""
    x = np.asarray(x, dtype=np.float64)
    samples, valid = bilinear_sample(pyr.levels[level], x)
    if not np.all(valid):
        raise OutOfBounds("sample coordinate outside the feature level")
    return samples


def _pool(a: np.ndarray, grid: int = _POOL_GRID) -> np.ndarray:
    h, w = a.shape[:2]
    ys = np.linspace(0, h, grid + 1).astype(int)
    xs = np.linspace(0, w, grid + 1).astype(int)
    cells = [
        a[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean(axis=(0, 1))
        for i in range(grid)
        for j in range(grid)
    ]
    return np.asarray(cells).ravel()


def global_descriptor(pyr: FeaturePyramid) -> np.ndarray:
    """Pooled descriptor used for nearest-view ranking."""
    desc = np.concatenate([_pool(pyr.levels[-1]), _pool(pyr.contextual)])
    norm = np.linalg.norm(desc)
    return desc / norm if norm > 0 else desc


def neighbor_select(descriptors, target: int, k: int) -> list:
    """Indices of the k views nearest to the target by cosine distance.

    Ties break toward ascending image id.  The target itself is excluded.
    """
    desc = np.asarray(descriptors, dtype=np.float64)
    n = desc.shape[0]
    if k >= n or k < 1:
        raise NotEnoughViews(f"need 1 <= k < {n}, got k={k}")
    norms = np.linalg.norm(desc, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    unit = desc / norms[:, None]
    dist = 1.0 - unit @ unit[target]
    ids = np.array([i for i in range(n) if i != target])
    order = np.lexsort((ids, dist[ids]))
    return [int(ids[i]) for i in order[:k]]


def _normalized_coords(cam, uv: np.ndarray) -> np.ndarray:
    """Pixel coordinates to z=1 homogeneous camera coordinates."""
    from .cameras import FisheyeCamera, fisheye_camera_dirs

    uv = np.asarray(uv, dtype=np.float64)
    if isinstance(cam, FisheyeCamera):
        dirs = fisheye_camera_dirs(cam, uv[:, 0], uv[:, 1])
        return dirs / dirs[:, 2:3]
    x = (uv[:, 0] - cam.cx) / cam.fx
    y = (uv[:, 1] - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def epipolar_residual(pose: PoseSE3, matches, cams) -> float:
    """Mean Sampson distance of pixel matches under a relative pose.

    pose maps first-camera coordinates into second-camera coordinates;
    matches is a sequence of ((u1, v1), (u2, v2)) pixel pairs; cams is the
    (first, second) camera pair.  Debug/eval only, never part of a loss.
    """
    matches = np.asarray(matches, dtype=np.float64)
    if matches.shape[0] < 8:
        raise DegenerateConfiguration("need at least 8 matches")
    if np.linalg.norm(pose.t) < 1e-12:
        raise DegenerateConfiguration("zero baseline: essential matrix undefined")
    x1 = _normalized_coords(cams[0], matches[:, 0, :])
    x2 = _normalized_coords(cams[1], matches[:, 1, :])
    E = skew(pose.t) @ pose.rotation()
    Ex1 = x1 @ E.T
    Etx2 = x2 @ E
    num = np.einsum("ni,ni->n", x2, Ex1) ** 2
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return float(np.mean(num / np.maximum(den, 1e-300)))
