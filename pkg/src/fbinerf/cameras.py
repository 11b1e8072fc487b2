"""Pinhole and fisheye camera models.

The fisheye model follows the polynomial radial-distortion form:

- distorted radius on the sensor: ``r_d = sqrt((u - cx)^2 + (v - cy)^2)``
- distorted angle: ``theta_d = arctan(r_d / f)`` with ``f = (fx + fy) / 2``
- incoming angle: ``theta = theta_d + k1 theta_d^3 + k2 theta_d^5 + k3 theta_d^7``
- camera-frame ray: ``[sin(theta) (u - cx), sin(theta) (v - cy), cos(theta)]``
  normalized to unit length.

Projection inverts the ray model with a safeguarded Newton solve.  The
equisolid relation ``r_d = 2 f sin(theta / 2)`` is available as an
alternative radius model but the polynomial model is the default everywhere.

Pixel coordinates are continuous, with integer coordinates at pixel centers.
Camera poses are camera-to-world: ``world = R(phi) @ cam + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonMonotoneDomain, NonPositiveDepth
from .geometry import PoseSE3, Ray

_MONOTONE_SAMPLES = 256
_NEWTON_TOL = 1e-12
_NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def f(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def contains(self, u, v):
        """True where (u, v) lies within the pixel grid (centers at integers)."""
        return (u >= -0.5) & (u <= self.width - 0.5) & (v >= -0.5) & (v <= self.height - 0.5)


def pinhole_project(cam: PinholeCamera, p):
    """Camera-frame points (..., 3) to pixel coordinates (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point has non-positive camera-frame depth")
    u = cam.fx * p[..., 0] / z + cam.cx
    v = cam.fy * p[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def pinhole_unproject(cam: PinholeCamera, u, v, depth):
    """Pixels plus depth (distance along the optical axis) to camera-frame points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


def radial_distance_equisolid(f: float, theta):
    """Sensor radius of the equisolid mapping, r_d = 2 f sin(theta / 2)."""
    return 2.0 * f * np.sin(0.5 * np.asarray(theta, dtype=np.float64))


def _poly(theta_d, k1, k2, k3):
    t2 = theta_d * theta_d
    return theta_d * (1.0 + t2 * (k1 + t2 * (k2 + t2 * k3)))


def _poly_deriv(theta_d, k1, k2, k3):
    t2 = theta_d * theta_d
    return 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3)))


def _invert_increasing(fn, dfn, target, lo, hi, x0=None):
    """Solve fn(x) = target for increasing fn with Newton plus bisection.

    All arguments broadcast; callers must guarantee fn(lo) <= target <= fn(hi).
    """
    target = np.asarray(target, dtype=np.float64)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), target.shape).copy()
    if x0 is None:
        x = 0.5 * (lo + hi)
    else:
        x = np.clip(np.broadcast_to(np.asarray(x0, dtype=np.float64), target.shape), lo, hi)
    x = np.array(x, dtype=np.float64)
    for _ in range(_NEWTON_MAX_ITER):
        r = fn(x) - target
        lo = np.where(r <= 0, x, lo)
        hi = np.where(r >= 0, x, hi)
        step = r / np.maximum(dfn(x), 1e-300)
        xn = x - step
        outside = ~np.isfinite(xn) | (xn < lo) | (xn > hi)
        xn = np.where(outside, 0.5 * (lo + hi), xn)
        if np.all(np.abs(xn - x) <= _NEWTON_TOL * np.maximum(1.0, np.abs(x))):
            x = xn
            break
        x = xn
    return x


@dataclass(frozen=True)
class FisheyeCamera:
    """Fisheye camera: pinhole intrinsics, distortion polynomial, and pose.

    Construction validates that theta(theta_d) is strictly increasing on
    [0, theta_d_max], where theta_d_max corresponds to the image corner.
    """

    intrinsics: PinholeCamera
    pose: PoseSE3 = field(default_factory=PoseSE3.identity)
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        intr = self.intrinsics
        corners = np.array(
            [[0.0, 0.0], [intr.width - 1.0, 0.0], [0.0, intr.height - 1.0],
             [intr.width - 1.0, intr.height - 1.0]]
        )
        r_corner = float(np.max(np.hypot(corners[:, 0] - intr.cx, corners[:, 1] - intr.cy)))
        theta_d_max = float(np.arctan2(r_corner, intr.f))
        samples = np.linspace(0.0, theta_d_max, _MONOTONE_SAMPLES)
        if np.any(_poly_deriv(samples, self.k1, self.k2, self.k3) <= 0):
            raise NonMonotoneDomain(
                "distortion polynomial is not strictly increasing on the image domain"
            )
        theta_max = float(_poly(theta_d_max, self.k1, self.k2, self.k3))
        object.__setattr__(self, "theta_d_max", theta_d_max)
        object.__setattr__(self, "theta_max", theta_max)
        # cap the projection solve where theta approaches pi/2 (ray parallel
        # to the image plane) or at the validated domain edge, whichever is hit first
        if theta_max < 0.5 * np.pi - 1e-9:
            r_cap = float(intr.f * np.tan(theta_d_max))
        else:
            theta_d_cap = float(
                _invert_increasing(
                    lambda x: _poly(x, self.k1, self.k2, self.k3),
                    lambda x: _poly_deriv(x, self.k1, self.k2, self.k3),
                    0.5 * np.pi - 1e-9,
                    0.0,
                    theta_d_max,
                )
            )
            r_cap = float(intr.f * np.tan(theta_d_cap))
        theta_cap = float(_poly(np.arctan2(r_cap, intr.f), self.k1, self.k2, self.k3))
        object.__setattr__(self, "_r_cap", r_cap)
        object.__setattr__(self, "_g_cap", r_cap * float(np.tan(theta_cap)))

    @property
    def f(self) -> float:
        return self.intrinsics.f

    @property
    def ks(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3])

    def with_pose(self, pose: PoseSE3) -> "FisheyeCamera":
        return FisheyeCamera(self.intrinsics, pose, self.k1, self.k2, self.k3)

    def with_distortion(self, k1: float, k2: float, k3: float) -> "FisheyeCamera":
        return FisheyeCamera(self.intrinsics, self.pose, k1, k2, k3)


def pixel_radial_distance(cam, u, v):
    """Distance from the principal point in pixels."""
    intr = cam.intrinsics if isinstance(cam, FisheyeCamera) else cam
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.hypot(u - intr.cx, v - intr.cy)


def undistort_angle(cam: FisheyeCamera, r_d):
    """Incoming angle theta for a sensor radius r_d (polynomial model)."""
    theta_d = np.arctan2(np.asarray(r_d, dtype=np.float64), cam.f)
    return _poly(theta_d, cam.k1, cam.k2, cam.k3)


def distort_angle(cam: FisheyeCamera, theta):
    """Inverse of the distortion polynomial: theta_d with poly(theta_d) = theta."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta > cam.theta_max + 1e-9):
        raise NonMonotoneDomain("angle outside the validated monotone range")
    out = _invert_increasing(
        lambda x: _poly(x, cam.k1, cam.k2, cam.k3),
        lambda x: _poly_deriv(x, cam.k1, cam.k2, cam.k3),
        np.clip(theta, 0.0, cam.theta_max),
        0.0,
        cam.theta_d_max,
        x0=theta,
    )
    return out if out.ndim else float(out)


def fisheye_camera_dirs(cam: FisheyeCamera, u, v) -> np.ndarray:
    """Unit camera-frame ray directions for pixels (u, v); broadcasts."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    du = u - cam.intrinsics.cx
    dv = v - cam.intrinsics.cy
    theta = undistort_angle(cam, np.hypot(du, dv))
    raw = np.stack(
        np.broadcast_arrays(np.sin(theta) * du, np.sin(theta) * dv, np.cos(theta)),
        axis=-1,
    )
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True)


def fisheye_pixel_to_ray(cam: FisheyeCamera, u: float, v: float) -> Ray:
    """World-space ray through a pixel; origin is the camera center."""
    d_cam = fisheye_camera_dirs(cam, u, v)
    R = cam.pose.rotation()
    return Ray(cam.pose.t, R @ d_cam)


def fisheye_rays(cam: FisheyeCamera, u, v):
    """Batched version of fisheye_pixel_to_ray: (origins, unit world dirs)."""
    d_cam = fisheye_camera_dirs(cam, u, v)
    dirs = d_cam @ cam.pose.rotation().T
    origins = np.broadcast_to(cam.pose.t, dirs.shape)
    return origins, dirs


def _g_value(cam: FisheyeCamera, r_d):
    theta = _poly(np.arctan2(r_d, cam.f), cam.k1, cam.k2, cam.k3)
    return r_d * np.tan(theta)


def _g_deriv(cam: FisheyeCamera, r_d):
    f = cam.f
    theta_d = np.arctan2(r_d, f)
    theta = _poly(theta_d, cam.k1, cam.k2, cam.k3)
    T = np.tan(theta)
    S2 = 1.0 + T * T
    return T + r_d * S2 * _poly_deriv(theta_d, cam.k1, cam.k2, cam.k3) * (f / (f * f + r_d * r_d))


def _solve_radial(cam: FisheyeCamera, g):
    """Sensor radius r_d with r_d * tan(theta(r_d)) = g, g >= 0."""
    return _invert_increasing(
        lambda r: _g_value(cam, r),
        lambda r: _g_deriv(cam, r),
        g,
        0.0,
        cam._r_cap,
        x0=np.sqrt(np.asarray(g, dtype=np.float64) * cam.f),
    )


def fisheye_project(cam: FisheyeCamera, p_world):
    """World points (..., 3) to pixels (..., 2).

    Raises BehindCamera for non-positive camera-frame z and NonMonotoneDomain
    for rays steeper than the validated distortion range.
    """
    p = np.asarray(p_world, dtype=np.float64)
    R = cam.pose.rotation()
    p_cam = (p - cam.pose.t) @ R
    z = p_cam[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point behind the camera")
    rho = np.hypot(p_cam[..., 0], p_cam[..., 1])
    g = rho / z
    if np.any(g > cam._g_cap * (1.0 + 1e-9)):
        raise NonMonotoneDomain("ray falls outside the validated distortion domain")
    r_d = _solve_radial(cam, np.minimum(g, cam._g_cap))
    scale = np.where(rho > 0.0, r_d / np.maximum(rho, 1e-300), 0.0)
    u = cam.intrinsics.cx + scale * p_cam[..., 0]
    v = cam.intrinsics.cy + scale * p_cam[..., 1]
    return np.stack([u, v], axis=-1)


def fisheye_project_cam_masked(cam: FisheyeCamera, p_cam):
    """Camera-frame points to pixels with a validity mask (no exceptions)."""
    p_cam = np.asarray(p_cam, dtype=np.float64)
    z = p_cam[..., 2]
    rho = np.hypot(p_cam[..., 0], p_cam[..., 1])
    valid = z > 1e-12
    g = np.where(valid, rho / np.where(valid, z, 1.0), 0.0)
    valid &= g <= cam._g_cap
    g = np.where(valid, g, 0.0)
    r_d = _solve_radial(cam, g)
    scale = np.where(rho > 0.0, r_d / np.maximum(rho, 1e-300), 0.0)
    uv = np.stack(
        [cam.intrinsics.cx + scale * p_cam[..., 0], cam.intrinsics.cy + scale * p_cam[..., 1]],
        axis=-1,
    )
    uv = np.where(valid[..., None], uv, 0.0)
    return uv, valid


def fisheye_project_masked(cam: FisheyeCamera, p_world):
    """Like fisheye_project but flags invalid points instead of raising.

    Returns (uv, valid); uv rows for invalid points are zero.
    """
    p = np.asarray(p_world, dtype=np.float64)
    R = cam.pose.rotation()
    return fisheye_project_cam_masked(cam, (p - cam.pose.t) @ R)


def fisheye_project_jacobians(cam: FisheyeCamera, p_cam):
    """Pixels plus derivatives for camera-frame points (N, 3), all valid.

    Returns (uv, J_point, J_k) with J_point (N, 2, 3) the derivative with
    respect to the camera-frame point and J_k (N, 2, 3) with respect to
    (k1, k2, k3).  Points on the optical axis get zero Jacobians.
    """
    p = np.asarray(p_cam, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    rho = np.hypot(x, y)
    on_axis = rho < 1e-12
    rho_safe = np.where(on_axis, 1.0, rho)
    g = rho / z
    r_d = _solve_radial(cam, np.minimum(g, cam._g_cap))
    f = cam.f
    theta_d = np.arctan2(r_d, f)
    theta = _poly(theta_d, cam.k1, cam.k2, cam.k3)
    T = np.tan(theta)
    S2 = 1.0 + T * T
    G_r = T + r_d * S2 * _poly_deriv(theta_d, cam.k1, cam.k2, cam.k3) * (f / (f * f + r_d * r_d))
    G_r = np.maximum(G_r, 1e-300)

    # dg/d(point) through g = rho / z
    dg_dx = x / (rho_safe * z)
    dg_dy = y / (rho_safe * z)
    dg_dz = -rho / (z * z)
    dr_dx, dr_dy, dr_dz = dg_dx / G_r, dg_dy / G_r, dg_dz / G_r
    # dG/dk_j at fixed r_d is r_d * S2 * theta_d^(2j+1)
    odd = theta_d[:, None] ** np.array([3.0, 5.0, 7.0])
    dr_dk = -(r_d * S2)[:, None] * odd / G_r[:, None]

    s = r_d / rho_safe
    # u = cx + (r_d / rho) x, v = cy + (r_d / rho) y
    drho_dx, drho_dy = x / rho_safe, y / rho_safe
    ds_dx = (dr_dx * rho_safe - r_d * drho_dx) / rho_safe**2
    ds_dy = (dr_dy * rho_safe - r_d * drho_dy) / rho_safe**2
    ds_dz = dr_dz / rho_safe
    n = p.shape[0]
    J_point = np.empty((n, 2, 3))
    J_point[:, 0, 0] = s + x * ds_dx
    J_point[:, 0, 1] = x * ds_dy
    J_point[:, 0, 2] = x * ds_dz
    J_point[:, 1, 0] = y * ds_dx
    J_point[:, 1, 1] = s + y * ds_dy
    J_point[:, 1, 2] = y * ds_dz
    J_k = np.empty((n, 2, 3))
    J_k[:, 0, :] = (x / rho_safe)[:, None] * dr_dk
    J_k[:, 1, :] = (y / rho_safe)[:, None] * dr_dk

    uv = np.stack([cam.intrinsics.cx + s * x, cam.intrinsics.cy + s * y], axis=-1)
    uv[on_axis] = [cam.intrinsics.cx, cam.intrinsics.cy]
    J_point[on_axis] = 0.0
    J_k[on_axis] = 0.0
    return uv, J_point, J_k


def fisheye_dirs_k_jacobian(cam: FisheyeCamera, u, v):
    """Camera-frame unit directions and their (N, 3, 3) derivative in (k1, k2, k3)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    du = u - cam.intrinsics.cx
    dv = v - cam.intrinsics.cy
    theta_d = np.arctan2(np.hypot(du, dv), cam.f)
    theta = _poly(theta_d, cam.k1, cam.k2, cam.k3)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    raw = np.stack([sin_t * du, sin_t * dv, cos_t], axis=-1)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    dirs = raw / norm
    draw_dtheta = np.stack([cos_t * du, cos_t * dv, -sin_t], axis=-1)
    # normalize through the projector (I - dir dir^T) / norm
    proj = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    ddir_dtheta = np.einsum("nij,nj->ni", proj, draw_dtheta) / norm
    odd = theta_d[:, None] ** np.array([3.0, 5.0, 7.0])
    ddir_dk = ddir_dtheta[:, :, None] * odd[:, None, :]
    return dirs, ddir_dk
