"""Evaluation metrics: image quality, pose recovery error, depth accuracy.

Pose error is gauge-aware: estimated trajectories are first aligned to the
ground truth with the best global similarity transform (rotation, translation
and uniform scale over camera centers, solved in closed form via SVD), then
per-camera rotation and center errors are reported.  This makes the metric
invariant to the arbitrary global frame a refinement run settles in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAlignment
from .geometry import PoseSE3, geodesic_angle
from .losses import ssim

log = logging.getLogger(__name__)


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for an exact match."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def depth_abs_rel(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean |D - D*| / D* over pixels with finite positive reference depth."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    valid = np.isfinite(target) & (target > 0) & np.isfinite(pred)
    if not np.any(valid):
        raise ValueError("no valid reference depth pixels")
    return float(np.mean(np.abs(pred[valid] - target[valid]) / target[valid]))


def _as_poses(cameras) -> list:
    return [c if isinstance(c, PoseSE3) else c.pose for c in cameras]


def umeyama_alignment(source: np.ndarray, target: np.ndarray):
    """Least-squares similarity `target ~ s R source + t` over point sets.

    Returns (s, R, t).  Raises DegenerateAlignment when the source points
    carry no spread (all coincident), which leaves scale and rotation free.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (N, 3)")
    n = src.shape[0]
    if n < 2:
        raise DegenerateAlignment("need at least two points to align")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    var_s = float(np.mean(np.sum(sc**2, axis=1)))
    if var_s < 1e-24:
        raise DegenerateAlignment("camera centers coincide; similarity is undefined")
    cov = dc.T @ sc / n
    U, D, Vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        sign[2] = -1.0
    R = U @ np.diag(sign) @ Vt
    s = float(np.sum(D * sign) / var_s)
    t = mu_d - s * (R @ mu_s)
    return s, R, t


def relative_pose_error(estimated, reference):
    """Per-camera pose error after global similarity alignment.

    Accepts lists of poses or camera objects with a `.pose`.  Returns
    (rot_err_deg, trans_err) arrays; trans_err is the aligned center
    distance as a fraction of the reference trajectory diameter.
    """
    est = _as_poses(estimated)
    ref = _as_poses(reference)
    if len(est) != len(ref):
        raise ValueError("trajectories differ in length")
    est_centers = np.stack([p.t for p in est])
    ref_centers = np.stack([p.t for p in ref])
    s, R_align, t_align = umeyama_alignment(est_centers, ref_centers)
    aligned = est_centers @ (s * R_align).T + t_align

    diff = ref_centers[:, None, :] - ref_centers[None, :, :]
    diameter = float(np.sqrt((diff**2).sum(axis=-1)).max())
    if diameter <= 0:
        raise DegenerateAlignment("reference cameras coincide; no distance scale")

    rot_err = np.array(
        [
            np.degrees(geodesic_angle(R_align @ e.rotation(), r.rotation()))
            for e, r in zip(est, ref)
        ]
    )
    trans_err = np.linalg.norm(aligned - ref_centers, axis=1) / diameter
    return rot_err, trans_err


@dataclass(frozen=True)
class EvalReport:
    """Aggregate quality numbers for one evaluation run."""

    psnr: float
    ssim: float
    rot_err_deg: np.ndarray | None = None
    trans_err: np.ndarray | None = None
    depth_abs_rel: float | None = None

    def summary(self) -> str:
        parts = [f"psnr={self.psnr:.2f}dB", f"ssim={self.ssim:.4f}"]
        if self.rot_err_deg is not None:
            parts.append(f"rot_err={np.mean(self.rot_err_deg):.4f}deg")
        if self.trans_err is not None:
            parts.append(f"trans_err={np.mean(self.trans_err):.4%}")
        if self.depth_abs_rel is not None:
            parts.append(f"depth_abs_rel={self.depth_abs_rel:.4%}")
        return " ".join(parts)


def evaluate(
    pred_images,
    gt_images,
    estimated_cameras=None,
    reference_cameras=None,
    pred_depths=None,
    gt_depths=None,
    peak: float = 1.0,
) -> EvalReport:
    """Build an EvalReport from paired frames and optional poses/depths.

    Image metrics are averaged over frames; an exact match reports +inf
    PSNR (kept as +inf in the mean only if every frame matches exactly).
    """
    if len(pred_images) == 0 or len(pred_images) != len(gt_images):
        raise ValueError("need matching non-empty image lists")
    psnrs = [psnr(p, g, peak) for p, g in zip(pred_images, gt_images)]
    ssims = [ssim(p, g) for p, g in zip(pred_images, gt_images)]
    rot = trans = None
    if estimated_cameras is not None and reference_cameras is not None:
        rot, trans = relative_pose_error(estimated_cameras, reference_cameras)
    dar = None
    if pred_depths is not None and gt_depths is not None:
        vals = [depth_abs_rel(p, g) for p, g in zip(pred_depths, gt_depths)]
        dar = float(np.mean(vals))
    return EvalReport(
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        rot_err_deg=rot,
        trans_err=trans,
        depth_abs_rel=dar,
    )
