"""Feature-metric warp costs for pinhole and fisheye rigs.

Both costs share the same shape: every target pixel is lifted to 3D, moved
into a neighbor camera, projected, and compared in feature space by the L2
distance.  Per-pixel costs average over the neighbors whose warp landed in
bounds; the scalar value averages the per-pixel costs over the valid mask.

Relative transforms map target-camera coordinates into neighbor-camera
coordinates.  For the fisheye cost they are derived from the absolute poses:
``T_i = inverse(pose_i) o pose_target``.

Gradients are analytic.  ``grad_pose`` rows are tangent gradients in the
left-multiplicative convention: for the pinhole cost with respect to the
relative transform itself, for the fisheye cost with respect to the absolute
neighbor pose.  When ``grad_stride > 1`` the gradients differentiate the
subsampled cost recorded in ``strided_value``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cameras import (
    FisheyeCamera,
    PinholeCamera,
    fisheye_dirs_k_jacobian,
    fisheye_project_cam_masked,
    fisheye_project_jacobians,
)
from .errors import NoValidPixels, NonPositiveDepth
from .features import FeaturePyramid, cubic_sample, cubic_sample_with_grad
from .geometry import compose, inverse

log = logging.getLogger(__name__)

DEPTH_SOURCES = ("ground_truth", "estimate", "hypotheses")

# Feature distances below this floor are treated as converged when forming
# unit direction vectors for the gradient, so the L2 norm's kink at zero does
# not turn round-off noise into unit-magnitude gradient terms.
_DIST_FLOOR = 1e-8


@dataclass(frozen=True)
class CostEvaluation:
    """Cost value, per-pixel map, and gradients for one target view."""

    value: float
    per_pixel: np.ndarray
    valid_mask: np.ndarray
    grad_pose: np.ndarray | None = None  # (num_neighbors, 6)
    grad_depth: np.ndarray | None = None  # level-resolution map
    grad_distortion: np.ndarray | None = None  # (3,) shared k1..k3
    strided_value: float | None = None
    selected_depth: np.ndarray | None = None  # hypothesis search result


def _finalize(cost_sum: np.ndarray, count: np.ndarray):
    valid = count > 0
    if not np.any(valid):
        raise NoValidPixels("every warped pixel fell outside all neighbors")
    per_pixel = np.zeros_like(cost_sum)
    per_pixel[valid] = cost_sum[valid] / count[valid]
    return float(per_pixel[valid].mean()), per_pixel, valid


def _level_grid(h: int, w: int, level: int, stride: int = 1):
    """Full-resolution pixel coordinates of a (strided) level-ell grid."""
    scale = 2**level
    vs, us = np.meshgrid(
        np.arange(0, h, stride) * scale, np.arange(0, w, stride) * scale, indexing="ij"
    )
    return us.ravel().astype(np.float64), vs.ravel().astype(np.float64)


def _norm_cams(cams, n: int):
    if isinstance(cams, (list, tuple)):
        if len(cams) != n + 1:
            raise ValueError(f"expected {n + 1} cameras (target first), got {len(cams)}")
        return cams[0], list(cams[1:])
    return cams, [cams] * n


def _pinhole_dirs(cam: PinholeCamera, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Homogeneous directions so that point = dir * depth."""
    return np.stack(
        [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1
    )


def _pinhole_project_masked(cam: PinholeCamera, q: np.ndarray):
    z = q[..., 2]
    valid = z > 1e-12
    zs = np.where(valid, z, 1.0)
    uv = np.stack(
        [cam.fx * q[..., 0] / zs + cam.cx, cam.fy * q[..., 1] / zs + cam.cy], axis=-1
    )
    return np.where(valid[..., None], uv, 0.0), valid


def _pinhole_proj_jacobian(cam: PinholeCamera, q: np.ndarray) -> np.ndarray:
    """d(u, v)/d(camera point) for points with positive z, shape (n, 2, 3)."""
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    J = np.zeros((q.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    return J


def _weighted_levels(target, neighbors, level, channel_weights):
    """Target and neighbor feature volumes, optionally scaled per channel.

    Because sampling is linear, scaling the volumes up front weights the
    residual L2 norm and every downstream gradient consistently.  Weights
    emphasize channels that stay comparable across viewpoint changes.
    """
    feats_t = target.levels[level]
    lvl_ns = [pyr.levels[level] for pyr in neighbors]
    if channel_weights is None:
        return feats_t, lvl_ns
    cw = np.asarray(channel_weights, dtype=np.float64)
    if cw.shape != (feats_t.shape[2],):
        raise ValueError(
            f"need one weight per channel ({feats_t.shape[2]}), got {cw.shape}"
        )
    return feats_t * cw, [lvl * cw for lvl in lvl_ns]


def pinhole_cost(
    target: FeaturePyramid,
    neighbors,
    poses,
    depth: np.ndarray,
    cams,
    *,
    level: int = 0,
    grad_stride: int = 1,
    compute_gradients: bool = True,
    channel_weights=None,
) -> CostEvaluation:
    """Feature cost of warping the target into pinhole neighbors.

    poses[i] is the relative transform taking target-camera coordinates into
    neighbor-camera coordinates; depth is the full-resolution target depth
    along the optical axis.  grad_depth matches the level resolution.
    """
    if np.any(np.asarray(depth) <= 0):
        raise NonPositiveDepth("target depth must be positive everywhere")
    cam_t, cam_ns = _norm_cams(cams, len(neighbors))
    feats_t, lvl_ns = _weighted_levels(target, neighbors, level, channel_weights)
    h, w = feats_t.shape[:2]
    scale = 2**level
    depth_l = np.asarray(depth, dtype=np.float64)[::scale, ::scale]
    if depth_l.shape != (h, w):
        raise ValueError("depth does not match the target resolution")

    u, v = _level_grid(h, w, level)
    dirs = _pinhole_dirs(cam_t, u, v)
    p = dirs * depth_l.ravel()[:, None]
    f_o = feats_t.reshape(-1, feats_t.shape[2])

    cost_sum = np.zeros(h * w)
    count = np.zeros(h * w)
    for lvl_n, rel, cam_n in zip(lvl_ns, poses, cam_ns):
        q = p @ rel.rotation().T + rel.t
        uv_n, valid = _pinhole_project_masked(cam_n, q)
        samp, ok = cubic_sample(lvl_n, uv_n / scale)
        valid &= ok
        dist = np.linalg.norm(samp - f_o, axis=-1)
        cost_sum += np.where(valid, dist, 0.0)
        count += valid
    value, per_pixel, valid_mask = _finalize(cost_sum, count)
    per_pixel = per_pixel.reshape(h, w)
    valid_mask = valid_mask.reshape(h, w)
    if not compute_gradients:
        return CostEvaluation(value, per_pixel, valid_mask)

    su, sv = _level_grid(h, w, level, grad_stride)
    sdirs = _pinhole_dirs(cam_t, su, sv)
    sdepth = depth_l[::grad_stride, ::grad_stride].ravel()
    sp = sdirs * sdepth[:, None]
    sf_o = feats_t[::grad_stride, ::grad_stride].reshape(-1, feats_t.shape[2])
    n_pix = sp.shape[0]

    per_neighbor = []
    count_s = np.zeros(n_pix)
    for lvl_n, rel, cam_n in zip(lvl_ns, poses, cam_ns):
        R = rel.rotation()
        q = sp @ R.T + rel.t
        uv_n, valid = _pinhole_project_masked(cam_n, q)
        samp, J_feat, ok = cubic_sample_with_grad(lvl_n, uv_n / scale)
        valid &= ok
        diff = samp - sf_o
        dist = np.linalg.norm(diff, axis=-1)
        per_neighbor.append((R, q, valid, diff, dist, J_feat, cam_n))
        count_s += valid
    svalid = count_s > 0
    if not np.any(svalid):
        raise NoValidPixels("no valid pixels on the gradient stride")
    cost_s = np.zeros(n_pix)
    for _, _, valid, _, dist, _, _ in per_neighbor:
        cost_s += np.where(valid, dist, 0.0)
    strided_value = float((cost_s[svalid] / count_s[svalid]).mean())

    inv_count = np.where(svalid, 1.0 / np.maximum(count_s, 1.0), 0.0) / svalid.sum()
    grad_pose = np.zeros((len(neighbors), 6))
    grad_depth_flat = np.zeros(n_pix)
    for i, (R, q, valid, diff, dist, J_feat, cam_n) in enumerate(per_neighbor):
        weight = inv_count * valid
        # The floor on dist smooths the norm's kink at zero: ulp-level feature
        # noise at an exact minimum then yields ~zero gradient instead of a
        # unit-length direction with arbitrary sign.
        unit = diff / np.maximum(dist, _DIST_FLOOR)[:, None]
        # d(value)/d(uv at full resolution); feature grid lives at level scale
        dval_duv = np.einsum("nc,nck->nk", unit, J_feat) / scale
        dval_dq = np.einsum("nk,nkj->nj", dval_duv, _pinhole_proj_jacobian(cam_n, q))
        dval_dq *= weight[:, None]
        grad_pose[i, :3] = np.cross(q, dval_dq).sum(axis=0)
        grad_pose[i, 3:] = dval_dq.sum(axis=0)
        grad_depth_flat += np.einsum("nj,nj->n", dval_dq, sdirs @ R.T)
    grad_depth = np.zeros((h, w))
    grad_depth[::grad_stride, ::grad_stride] = grad_depth_flat.reshape(
        depth_l[::grad_stride, ::grad_stride].shape
    )
    return CostEvaluation(
        value,
        per_pixel,
        valid_mask,
        grad_pose=grad_pose,
        grad_depth=grad_depth,
        strided_value=strided_value,
    )


def _fisheye_dist(cam_i, rel, dirs, depths, feats_n, f_o, level_scale):
    """Per-pixel feature distance for one neighbor at given ray depths."""
    p = dirs * depths[:, None]
    q = p @ rel.rotation().T + rel.t
    uv_n, valid = fisheye_project_cam_masked(cam_i, q)
    samp, ok = cubic_sample(feats_n, uv_n / level_scale)
    valid &= ok
    dist = np.linalg.norm(samp - f_o, axis=-1)
    return np.where(valid, dist, 0.0), valid


def fisheye_cost(
    target: FeaturePyramid,
    neighbors,
    params,
    target_cam: FisheyeCamera,
    *,
    depth: np.ndarray | None = None,
    depth_source: str = "hypotheses",
    depth_range: tuple = (0.5, 8.0),
    num_hypotheses: int = 32,
    level: int = 0,
    grad_stride: int = 1,
    compute_gradients: bool = True,
    optimize_distortion: bool = False,
    channel_weights=None,
) -> CostEvaluation:
    """Feature cost of warping a fisheye target into fisheye neighbors.

    params[i] is the full neighbor camera (pose plus distortion); relative
    transforms are inverse(pose_i) o pose_target.  Depth is measured along
    the target ray.  With depth_source="hypotheses" each pixel searches an
    inverse-depth grid and keeps the minimum-cost depth (returned in
    selected_depth); "ground_truth"/"estimate" use the supplied map.
    """
    if depth_source not in DEPTH_SOURCES:
        raise ValueError(f"unknown depth source {depth_source!r}")
    feats_t, lvl_ns = _weighted_levels(target, neighbors, level, channel_weights)
    h, w = feats_t.shape[:2]
    scale = 2**level
    rels = [compose(inverse(cam_i.pose), target_cam.pose) for cam_i in params]

    u, v = _level_grid(h, w, level)
    dirs, ddir_dk = fisheye_dirs_k_jacobian(target_cam, u, v)
    f_o = feats_t.reshape(-1, feats_t.shape[2])

    if depth_source == "hypotheses":
        inv = np.linspace(1.0 / depth_range[1], 1.0 / depth_range[0], num_hypotheses)
        best_cost = np.full(h * w, np.inf)
        best_depth = np.full(h * w, 1.0 / inv[0])
        for d in 1.0 / inv:
            depths = np.full(h * w, d)
            cost_sum = np.zeros(h * w)
            cnt = np.zeros(h * w)
            for cam_i, rel, lvl_n in zip(params, rels, lvl_ns):
                dist, valid = _fisheye_dist(
                    cam_i, rel, dirs, depths, lvl_n, f_o, scale
                )
                cost_sum += dist
                cnt += valid
            cost = np.where(cnt > 0, cost_sum / np.maximum(cnt, 1.0), np.inf)
            better = cost < best_cost
            best_cost = np.where(better, cost, best_cost)
            best_depth = np.where(better, d, best_depth)
        depth_l = best_depth.reshape(h, w)
    else:
        if depth is None:
            raise ValueError(f"depth_source={depth_source!r} requires a depth map")
        depth_l = np.asarray(depth, dtype=np.float64)[::scale, ::scale]
        if depth_l.shape != (h, w):
            raise ValueError("depth does not match the target resolution")
        if np.any(depth_l <= 0):
            raise NonPositiveDepth("ray depth must be positive everywhere")

    depths = depth_l.ravel()
    cost_sum = np.zeros(h * w)
    count = np.zeros(h * w)
    for cam_i, rel, lvl_n in zip(params, rels, lvl_ns):
        dist, valid = _fisheye_dist(
            cam_i, rel, dirs, depths, lvl_n, f_o, scale
        )
        cost_sum += dist
        count += valid
    value, per_pixel, valid_mask = _finalize(cost_sum, count)
    per_pixel = per_pixel.reshape(h, w)
    valid_mask = valid_mask.reshape(h, w)
    if not compute_gradients:
        return CostEvaluation(
            value, per_pixel, valid_mask, selected_depth=depth_l.copy()
        )

    su, sv = _level_grid(h, w, level, grad_stride)
    sdirs, sddir_dk = fisheye_dirs_k_jacobian(target_cam, su, sv)
    sdepth = depth_l[::grad_stride, ::grad_stride].ravel()
    sp = sdirs * sdepth[:, None]
    sf_o = feats_t[::grad_stride, ::grad_stride].reshape(-1, feats_t.shape[2])
    n_pix = sp.shape[0]
    p_world = sp @ target_cam.pose.rotation().T + target_cam.pose.t

    per_neighbor = []
    count_s = np.zeros(n_pix)
    for cam_i, rel, lvl_n in zip(params, rels, lvl_ns):
        q = sp @ rel.rotation().T + rel.t
        uv_n, valid = fisheye_project_cam_masked(cam_i, q)
        samp, J_feat, ok = cubic_sample_with_grad(lvl_n, uv_n / scale)
        valid &= ok
        diff = samp - sf_o
        dist = np.linalg.norm(diff, axis=-1)
        per_neighbor.append((cam_i, rel, q, valid, diff, dist, J_feat))
        count_s += valid
    svalid = count_s > 0
    if not np.any(svalid):
        raise NoValidPixels("no valid pixels on the gradient stride")
    cost_s = np.zeros(n_pix)
    for _, _, _, valid, _, dist, _ in per_neighbor:
        cost_s += np.where(valid, dist, 0.0)
    strided_value = float((cost_s[svalid] / count_s[svalid]).mean())

    inv_count = np.where(svalid, 1.0 / np.maximum(count_s, 1.0), 0.0) / svalid.sum()
    grad_pose = np.zeros((len(params), 6))
    grad_k = np.zeros(3)
    for i, (cam_i, rel, q, valid, diff, dist, J_feat) in enumerate(per_neighbor):
        weight = inv_count * valid
        unit = diff / np.maximum(dist, _DIST_FLOOR)[:, None]
        ok = q[:, 2] > 1e-12
        q_safe = np.where(ok[:, None], q, [0.0, 0.0, 1.0])
        _, J_point, J_kproj = fisheye_project_jacobians(cam_i, q_safe)
        dval_duv = np.einsum("nc,nck->nk", unit, J_feat) / scale
        dval_dq = np.einsum("nk,nkj->nj", dval_duv, J_point)
        dval_dq *= weight[:, None]
        R_i = cam_i.pose.rotation()
        back = dval_dq @ R_i.T  # R_i dval_dq per row
        grad_pose[i, :3] = -np.cross(p_world, back).sum(axis=0)
        grad_pose[i, 3:] = -back.sum(axis=0)
        if optimize_distortion:
            # projection path at fixed q
            grad_k += np.einsum("nk,nkj,n->j", dval_duv, J_kproj, weight)
            # unprojection path through the target ray direction
            R_rel = rel.rotation()
            dq_dk = np.einsum("jl,nlm->njm", R_rel, sddir_dk) * sdepth[:, None, None]
            grad_k += np.einsum("nj,njm->m", dval_dq, dq_dk)
    return CostEvaluation(
        value,
        per_pixel,
        valid_mask,
        grad_pose=grad_pose,
        grad_distortion=grad_k if optimize_distortion else None,
        strided_value=strided_value,
        selected_depth=depth_l.copy(),
    )


def cost_gradient_check(cost_fn, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between cost_fn's gradient and central differences.

    cost_fn maps a parameter vector to (value, gradient).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    point = np.asarray(point, dtype=np.float64)
    _, grad = cost_fn(point)
    grad = np.asarray(grad, dtype=np.float64)
    fd = np.empty_like(point)
    for i in range(point.size):
        step = np.zeros_like(point)
        step[i] = eps
        fp, _ = cost_fn(point + step)
        fm, _ = cost_fn(point - step)
        fd[i] = (fp - fm) / (2 * eps)
    floor = 1e-8 + 1e-6 * float(np.max(np.abs(fd), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), floor)
    return float(np.max(np.abs(grad - fd) / denom))
