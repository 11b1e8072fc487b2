"""Synthetic scenes with analytic geometry and seeded procedural textures.

Everything here is a verification oracle: camera poses, depth maps, and
distortion coefficients are known exactly, so recovery experiments can be
scored against ground truth.  Surfaces are textured by a hash-lattice value
noise mixed with a checkerboard, which keeps photometric costs
well-conditioned without any stored assets.

Depth conventions match the rest of the package: pinhole depth maps store
the camera-frame z coordinate, fisheye depth maps store distance along the
ray.  Rays that miss every primitive get background color and depth +inf.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cameras import FisheyeCamera, PinholeCamera
from .errors import InvalidSpec
from .geometry import PoseSE3, axis_angle_from_rotation, rotation_from_axis_angle

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# procedural texture


def _hash01(ix, iy, iz, seed: int):
    """Deterministic lattice hash to [0, 1); pure integer mixing."""
    ix = np.asarray(ix).astype(np.uint64)
    iy = np.asarray(iy).astype(np.uint64)
    iz = np.asarray(iz).astype(np.uint64)
    seed_mix = (int(seed) * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF
    h = (
        ix * np.uint64(0x9E3779B185EBCA87)
        ^ iy * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(seed_mix)
    )
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(0xFF51AFD7ED558CCD)
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(0xC4CEB9FE1A85EC53)
    h = h ^ (h >> np.uint64(33))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _lattice_noise(pts: np.ndarray, seed: int) -> np.ndarray:
    base = np.floor(pts)
    f = pts - base
    u = f * f * (3.0 - 2.0 * f)  # smoothstep fade
    i0 = base.astype(np.int64)
    out = np.zeros(pts.shape[:-1])
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                corner = _hash01(i0[..., 0] + cx, i0[..., 1] + cy, i0[..., 2] + cz, seed)
                wx = u[..., 0] if cx else 1.0 - u[..., 0]
                wy = u[..., 1] if cy else 1.0 - u[..., 1]
                wz = u[..., 2] if cz else 1.0 - u[..., 2]
                out += corner * wx * wy * wz
    return out


def value_noise(pts: np.ndarray, seed: int, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise in [0, 1] over 3D points (..., 3)."""
    pts = np.asarray(pts, dtype=np.float64)
    total = np.zeros(pts.shape[:-1])
    amp, freq, norm = 1.0, 1.0, 0.0
    for o in range(octaves):
        total += amp * _lattice_noise(pts * freq, seed + 1000 * o)
        norm += amp
        amp *= 0.5
        freq *= 2.0
    return total / norm


def _palette(seed: int):
    vals = _hash01(np.arange(6), np.zeros(6), np.zeros(6), seed ^ 0x5A5A5A)
    c = 0.25 + 0.65 * vals
    return c[:3], c[3:]


def surface_color(pts: np.ndarray, seed: int, textureless: bool = False) -> np.ndarray:
    """View-independent procedural RGB for surface points (..., 3).

    The pattern is kept smooth and band limited: rendered at typical working
    distances it stays well below the pixel Nyquist rate, so different views
    of the same surface resample to mutually consistent images.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if textureless:
        return np.full(pts.shape[:-1] + (3,), 0.5)
    c0, c1 = _palette(seed)
    # low-frequency two-color mix, smoothstepped for C1 continuity
    mix = value_noise(pts * 0.35, seed, octaves=1)
    t = np.clip((mix - 0.25) / 0.5, 0.0, 1.0)
    t = t * t * (3.0 - 2.0 * t)
    base = c0 + (c1 - c0) * t[..., None]
    # mid-frequency shading detail; two octaves keep it discriminative
    # without pushing energy past the render resolution
    detail = value_noise(pts * 0.8, seed + 7, octaves=2)
    shade = 0.4 + 0.6 * (0.5 * t + 0.5 * detail)
    rgb = base * shade[..., None]
    return np.clip(rgb, 0.0, 1.0)


# --------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Plane:
    anchor: tuple
    normal: tuple
    seed: int = 0


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    seed: int = 0


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    seed: int = 0


_EPS = 1e-9


def _intersect_plane(prim: Plane, origins, dirs):
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    a = np.asarray(prim.anchor, dtype=np.float64)
    denom = dirs @ n
    t = np.where(np.abs(denom) > _EPS, ((a - origins) @ n) / np.where(
        np.abs(denom) > _EPS, denom, 1.0), np.inf)
    return np.where(t > _EPS, t, np.inf)


def _intersect_sphere(prim: Sphere, origins, dirs):
    c = np.asarray(prim.center, dtype=np.float64)
    oc = origins - c
    b = np.einsum("nj,nj->n", oc, dirs)
    disc = b * b - (np.einsum("nj,nj->n", oc, oc) - prim.radius**2)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    t = np.where(t1 > _EPS, t1, np.where(t2 > _EPS, t2, np.inf))
    return np.where(disc >= 0.0, t, np.inf)


def _intersect_box(prim: Box, origins, dirs):
    c = np.asarray(prim.center, dtype=np.float64)
    h = np.asarray(prim.half_extents, dtype=np.float64)
    safe = np.where(np.abs(dirs) > _EPS, dirs, _EPS)
    t1 = (c - h - origins) / safe
    t2 = (c + h - origins) / safe
    t_lo = np.minimum(t1, t2).max(axis=-1)
    t_hi = np.maximum(t1, t2).min(axis=-1)
    hit = (t_hi > np.maximum(t_lo, _EPS))
    t = np.where(t_lo > _EPS, t_lo, t_hi)
    return np.where(hit & (t > _EPS), t, np.inf)


_INTERSECTORS = {Plane: _intersect_plane, Sphere: _intersect_sphere, Box: _intersect_box}


def intersect_primitive(prim, origins, dirs):
    """Nearest positive ray parameter for each ray, +inf on miss."""
    return _INTERSECTORS[type(prim)](prim, origins, dirs)


# --------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class PosedPinhole:
    """Pinhole intrinsics with an explicit camera-to-world pose."""

    camera: PinholeCamera
    pose: PoseSE3


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "fisheye"  # or "pinhole"
    n_cameras: int = 8
    image_size: int = 64
    focal: float = 40.0
    distortion: tuple = (0.0, 0.0, 0.0)
    layout: str = "ring"  # or "arc"
    radius: float = 3.0
    height: float = 0.0
    arc_degrees: float = 120.0
    look_at: tuple = (0.0, 0.0, 0.0)
    face_outward: bool = False
    primitives: tuple = ()
    background: tuple = (0.0, 0.0, 0.0)
    textureless: bool = False
    seed: int = 0
    min_visible_fraction: float = 0.5


@dataclass(frozen=True)
class SyntheticScene:
    spec: SceneSpec
    primitives: tuple
    cameras: tuple  # FisheyeCamera, or PosedPinhole for pinhole scenes

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def poses(self):
        return tuple(c.pose for c in self.cameras)


def look_at_pose(center, target, up=(0.0, -1.0, 0.0)) -> PoseSE3:
    """Camera-to-world pose with +z toward the target and +y along -up."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("camera center coincides with the look-at target")
    z = z / nz
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return PoseSE3(axis_angle_from_rotation(R), center)


def _ring_centers(spec: SceneSpec) -> np.ndarray:
    if spec.layout == "ring":
        phis = 2.0 * np.pi * np.arange(spec.n_cameras) / spec.n_cameras
    elif spec.layout == "arc":
        span = np.deg2rad(spec.arc_degrees)
        phis = np.linspace(-span / 2.0, span / 2.0, spec.n_cameras)
    else:
        raise InvalidSpec(f"unknown camera layout {spec.layout!r}")
    target = np.asarray(spec.look_at, dtype=np.float64)
    return target + np.stack(
        [
            spec.radius * np.sin(phis),
            np.full_like(phis, spec.height),
            spec.radius * np.cos(phis),
        ],
        axis=1,
    )


def scene_rays(scene: SyntheticScene, index: int):
    """World rays through every pixel of camera `index`: (origins, dirs)."""
    from .field import camera_rays  # local import to avoid a cycle

    cam = scene.cameras[index]
    if isinstance(cam, PosedPinhole):
        return camera_rays(cam.camera, cam.pose)
    return camera_rays(cam)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Deterministic scene construction; validates visibility per camera."""
    if len(spec.primitives) < 1:
        raise InvalidSpec("need at least one primitive")
    if spec.n_cameras < 2:
        raise InvalidSpec("need at least two cameras")
    if spec.kind not in ("pinhole", "fisheye"):
        raise InvalidSpec(f"unknown camera kind {spec.kind!r}")
    s = spec.image_size
    intr = PinholeCamera(spec.focal, spec.focal, (s - 1) / 2.0, (s - 1) / 2.0, s, s)
    centers = _ring_centers(spec)
    target = np.asarray(spec.look_at, dtype=np.float64)
    cameras = []
    for center in centers:
        aim = 2.0 * center - target if spec.face_outward else target
        pose = look_at_pose(center, aim)
        if spec.kind == "fisheye":
            cameras.append(FisheyeCamera(intr, pose, *spec.distortion))
        else:
            cameras.append(PosedPinhole(intr, pose))
    scene = SyntheticScene(spec, tuple(spec.primitives), tuple(cameras))
    for i in range(len(cameras)):
        origins, dirs = scene_rays(scene, i)
        stride = max(1, s // 16)
        sub = slice(None, None, stride)
        o = origins.reshape(s, s, 3)[sub, sub].reshape(-1, 3)
        d = dirs.reshape(s, s, 3)[sub, sub].reshape(-1, 3)
        ts = np.stack([intersect_primitive(p, o, d) for p in scene.primitives])
        nearest = np.argmin(ts, axis=0)
        hit = np.isfinite(ts.min(axis=0))
        best = 0.0
        for p in range(len(scene.primitives)):
            best = max(best, float(np.mean(hit & (nearest == p))))
        if best < spec.min_visible_fraction:
            raise InvalidSpec(
                f"camera {i} sees at most {best:.0%} of any primitive "
                f"(needs {spec.min_visible_fraction:.0%})"
            )
    return scene


def render_ground_truth(scene: SyntheticScene, cam) -> tuple:
    """Analytic render of one camera: (image, depth).

    `cam` is an index or a camera object from the scene (matched by
    identity).  Depth is +inf where the ray escapes; pinhole depth is
    camera-frame z, fisheye depth is distance along the ray.
    """
    if not isinstance(cam, (int, np.integer)):
        matches = [i for i, c in enumerate(scene.cameras) if c is cam]
        if not matches:
            raise ValueError("camera does not belong to this scene")
        cam = matches[0]
    index = int(cam)
    origins, dirs = scene_rays(scene, index)
    ts = np.stack([intersect_primitive(p, origins, dirs) for p in scene.primitives])
    nearest = np.argmin(ts, axis=0)
    t_hit = ts[nearest, np.arange(ts.shape[1])]
    hit = np.isfinite(t_hit)

    s = scene.spec.image_size
    image = np.tile(np.asarray(scene.spec.background, dtype=np.float64), (s * s, 1))
    for p, prim in enumerate(scene.primitives):
        sel = hit & (nearest == p)
        if not np.any(sel):
            continue
        pts = origins[sel] + t_hit[sel, None] * dirs[sel]
        # scene seed perturbs every texture; primitive seeds differentiate them
        seed = (int(scene.spec.seed) * 0x100000001B3) ^ int(prim.seed)
        image[sel] = surface_color(pts, seed, scene.spec.textureless)

    depth = np.where(hit, t_hit, np.inf)
    if scene.kind == "pinhole":
        z_axis = scene.cameras[index].pose.rotation()[:, 2]
        depth = np.where(hit, t_hit * (dirs @ z_axis), np.inf)
    return image.reshape(s, s, 3), depth.reshape(s, s)


def render_all(scene: SyntheticScene):
    """(images, depths) for every camera in order."""
    pairs = [render_ground_truth(scene, i) for i in range(len(scene.cameras))]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def scene_diameter(cameras) -> float:
    """Max pairwise camera-center distance; the scale for trans_frac."""
    centers = np.stack([c.t if isinstance(c, PoseSE3) else c.pose.t for c in cameras])
    diff = centers[:, None, :] - centers[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=-1)).max())


def _with_pose(cam, pose: PoseSE3):
    if isinstance(cam, FisheyeCamera):
        return cam.with_pose(pose)
    if isinstance(cam, PosedPinhole):
        return PosedPinhole(cam.camera, pose)
    if isinstance(cam, PoseSE3):
        return pose
    raise TypeError(f"cannot reposition {type(cam).__name__}")


def perturb_poses(cameras, rot_deg: float, trans_frac: float, seed: int = 0):
    """Compose each pose with an exact-magnitude random perturbation.

    Rotation: exactly rot_deg about a random axis (left-applied).
    Translation: camera center moves by exactly trans_frac * scene_diameter
    in a random direction.  Deterministic per seed.
    """
    if rot_deg < 0 or trans_frac < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    diameter = scene_diameter(cameras) if trans_frac > 0 else 0.0
    out = []
    for cam in cameras:
        pose = cam if isinstance(cam, PoseSE3) else cam.pose
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        if rot_deg == 0.0:
            phi = pose.phi
        else:
            R = rotation_from_axis_angle(axis * np.deg2rad(rot_deg)) @ pose.rotation()
            phi = axis_angle_from_rotation(R)
        t = pose.t if trans_frac == 0.0 else pose.t + trans_frac * diameter * direction
        out.append(_with_pose(cam, PoseSE3(phi, t)))
    return out
