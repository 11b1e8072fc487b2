"""Voxel radiance field with differentiable volume rendering and mesh export.

Density and color live on grid nodes spanning the bounds inclusively;
queries interpolate trilinearly and return zero outside the box.  Rendering
follows the usual emission-absorption quadrature: bins between ray-box entry
and exit, alpha_k = 1 - exp(-sigma_k delta_k), transmittance as the running
product of (1 - alpha).  Fitting runs adaptive-moment descent on the mean
squared rendering error with analytic gradients through the compositing
chain and the trilinear weights.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes

from .cameras import FisheyeCamera, PinholeCamera, fisheye_rays
from .errors import Diverged, EmptySurface
from .geometry import PoseSE3, Ray
from .optimizer import OptimizerConfig, OptimizerState, _RunTracker, arg_step

log = logging.getLogger(__name__)

_MAGIC = b"VXF1"


@dataclass
class VoxelField:
    """Node-centered density + RGB color grid over an axis-aligned box."""

    resolution: tuple
    bounds: np.ndarray  # (2, 3): lower and upper corners
    density: np.ndarray  # (nx, ny, nz), >= 0
    color: np.ndarray  # (nx, ny, nz, 3) in [0, 1]

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        self.density = np.asarray(self.density, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if any(n < 2 for n in self.resolution):
            raise ValueError("resolution must be at least 2 nodes per axis")
        if not np.all(self.bounds[1] > self.bounds[0]):
            raise ValueError("bounds must be a non-degenerate box")
        if self.density.shape != self.resolution:
            raise ValueError("density shape does not match resolution")
        if self.color.shape != self.resolution + (3,):
            raise ValueError("color shape does not match resolution")
        if np.any(self.density < 0):
            raise ValueError("density must be non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("colors must lie in [0, 1]")

    @classmethod
    def zeros(cls, resolution, bounds) -> "VoxelField":
        resolution = tuple(int(n) for n in resolution)
        return cls(
            resolution,
            np.asarray(bounds, dtype=np.float64),
            np.zeros(resolution),
            np.zeros(resolution + (3,)),
        )

    def copy(self) -> "VoxelField":
        return VoxelField(
            self.resolution, self.bounds.copy(), self.density.copy(), self.color.copy()
        )

    @property
    def spacing(self) -> np.ndarray:
        n = np.array(self.resolution, dtype=np.float64)
        return (self.bounds[1] - self.bounds[0]) / (n - 1)


def _grid_coords(field: VoxelField, pts: np.ndarray):
    """Corner indices, fractional offsets, and inside mask for points."""
    n = np.array(field.resolution)
    g = (pts - field.bounds[0]) / (field.bounds[1] - field.bounds[0]) * (n - 1)
    inside = np.all((g >= 0.0) & (g <= n - 1), axis=-1)
    g = np.clip(g, 0.0, n - 1)
    idx0 = np.minimum(g.astype(np.int64), n - 2)
    frac = g - idx0
    return idx0, frac, inside


_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


def _corner_weights(frac: np.ndarray) -> np.ndarray:
    """(N, 8) trilinear weights in _CORNERS order."""
    w = np.ones(frac.shape[:-1] + (8,))
    for axis in range(3):
        f = frac[..., axis]
        for c in range(8):
            w[..., c] = w[..., c] * (f if _CORNERS[c, axis] else 1.0 - f)
    return w


def _flat_corner_index(field: VoxelField, idx0: np.ndarray) -> np.ndarray:
    """(N, 8) raveled node indices for the cell corners."""
    nx, ny, nz = field.resolution
    corners = idx0[..., None, :] + _CORNERS  # (N, 8, 3)
    return (corners[..., 0] * ny + corners[..., 1]) * nz + corners[..., 2]


def sample_field(field: VoxelField, pts: np.ndarray):
    """Trilinear (sigma, rgb) at points (..., 3); zero outside the bounds."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    idx0, frac, inside = _grid_coords(field, flat)
    weights = _corner_weights(frac) * inside[:, None]
    flat_idx = _flat_corner_index(field, idx0)
    sigma = np.einsum("nc,nc->n", weights, field.density.ravel()[flat_idx])
    color = np.einsum(
        "nc,nck->nk", weights, field.color.reshape(-1, 3)[flat_idx]
    )
    return sigma.reshape(pts.shape[:-1]), color.reshape(pts.shape[:-1] + (3,))


def composite_samples(sigmas, colors, deltas, ts, background=None):
    """Alpha-composite per-ray samples.

    sigmas, deltas, ts: (R, S); colors: (R, S, 3).  Returns (rgb, opacity,
    expected_depth, cache) where cache feeds the backward pass.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    bg = np.zeros(3) if background is None else np.asarray(background, np.float64)
    alphas = 1.0 - np.exp(-sigmas * deltas)
    trans = np.cumprod(1.0 - alphas, axis=1)
    t_before = np.concatenate([np.ones((alphas.shape[0], 1)), trans[:, :-1]], axis=1)
    weights = t_before * alphas
    opacity = weights.sum(axis=1)
    t_final = trans[:, -1]
    rgb = np.einsum("rs,rsk->rk", weights, colors) + t_final[:, None] * bg
    depth = np.einsum("rs,rs->r", weights, ts) / np.maximum(opacity, 1e-12)
    cache = {
        "alphas": alphas,
        "t_before": t_before,
        "weights": weights,
        "t_final": t_final,
        "deltas": deltas,
        "colors": colors,
        "bg": bg,
    }
    return rgb, opacity, depth, cache


def composite_backward(cache, g_rgb):
    """Gradients of sum(g_rgb * rgb) w.r.t. per-sample sigma and color."""
    weights = cache["weights"]
    colors = cache["colors"]
    dot_c = np.einsum("rk,rsk->rs", g_rgb, colors)
    dot_bg = g_rgb @ cache["bg"]
    contrib = weights * dot_c
    # suffix sum over samples strictly after k, plus the background term
    rev = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]
    suffix = rev - contrib + (cache["t_final"] * dot_bg)[:, None]
    g_sigma = cache["deltas"] * (
        (1.0 - cache["alphas"]) * cache["t_before"] * dot_c - suffix
    )
    g_color = weights[:, :, None] * g_rgb[:, None, :]
    return g_sigma, g_color


def _ray_box_spans(field: VoxelField, origins, dirs):
    """Slab-method entry/exit distances; hit mask for rays crossing the box."""
    safe = np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
    t1 = (field.bounds[0] - origins) / safe
    t2 = (field.bounds[1] - origins) / safe
    t_lo = np.minimum(t1, t2).max(axis=-1)
    t_hi = np.maximum(t1, t2).min(axis=-1)
    t_lo = np.maximum(t_lo, 1e-9)
    hit = t_hi > t_lo
    return t_lo, t_hi, hit


def _sample_bins(t_lo, t_hi, n_samples, rng):
    """Bin edges and sample points (midpoint, or stratified when rng given)."""
    r = t_lo.shape[0]
    edges = t_lo[:, None] + (t_hi - t_lo)[:, None] * np.linspace(0.0, 1.0, n_samples + 1)
    offsets = 0.5 if rng is None else rng.uniform(size=(r, n_samples))
    ts = edges[:, :-1] + offsets * np.diff(edges, axis=1)
    deltas = np.diff(edges, axis=1)
    return ts, deltas


def render_rays(field, origins, dirs, n_samples=64, background=None, rng=None):
    """Batch render; returns (rgb, opacity, depth, cache or None per miss)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    bg = np.zeros(3) if background is None else np.asarray(background, np.float64)
    t_lo, t_hi, hit = _ray_box_spans(field, origins, dirs)
    r = origins.shape[0]
    rgb = np.tile(bg, (r, 1))
    opacity = np.zeros(r)
    depth = np.zeros(r)
    cache = None
    if np.any(hit):
        ts, deltas = _sample_bins(t_lo[hit], t_hi[hit], n_samples, rng)
        pts = origins[hit, None, :] + ts[:, :, None] * dirs[hit, None, :]
        sigma, color = sample_field(field, pts)
        h_rgb, h_op, h_depth, comp = composite_samples(sigma, color, deltas, ts, bg)
        rgb[hit] = h_rgb
        opacity[hit] = h_op
        depth[hit] = h_depth
        cache = {"comp": comp, "pts": pts, "hit": hit}
    return rgb, opacity, depth, cache


def render_ray(field, ray: Ray, n_samples=64, t_near=None, t_far=None, background=None, rng=None):
    """Render one ray; defaults clip the sampling span to the field bounds."""
    if n_samples < 2:
        raise ValueError("need at least two samples")
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    if t_near is None or t_far is None:
        rgb, opacity, depth, _ = render_rays(field, o, d, n_samples, background, rng)
        return rgb[0], float(opacity[0]), float(depth[0])
    if not t_near < t_far:
        raise ValueError("t_near must be smaller than t_far")
    ts, deltas = _sample_bins(np.array([t_near]), np.array([t_far]), n_samples, rng)
    pts = o[:, None, :] + ts[:, :, None] * d[:, None, :]
    sigma, color = sample_field(field, pts)
    rgb, opacity, depth, _ = composite_samples(sigma, color, deltas, ts, background)
    return rgb[0], float(opacity[0]), float(depth[0])


def camera_rays(cam, pose: PoseSE3 | None = None):
    """World rays through every pixel center; returns (origins, dirs) (H*W, 3)."""
    if isinstance(cam, FisheyeCamera):
        h, w = cam.intrinsics.height, cam.intrinsics.width
        vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        origins, dirs = fisheye_rays(cam, us.ravel().astype(float), vs.ravel().astype(float))
        return origins.reshape(-1, 3), dirs.reshape(-1, 3)
    if pose is None:
        raise ValueError("pinhole cameras need an explicit pose")
    h, w = cam.height, cam.width
    vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d_cam = np.stack(
        [
            (us.ravel() - cam.cx) / cam.fx,
            (vs.ravel() - cam.cy) / cam.fy,
            np.ones(h * w),
        ],
        axis=-1,
    )
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = d_cam @ pose.rotation().T
    origins = np.broadcast_to(pose.t, dirs.shape)
    return origins, dirs


def render_image(field, cam, pose: PoseSE3 | None = None, n_samples=64, background=None, rng=None):
    """Full-frame render through either camera model: (image, depth map)."""
    origins, dirs = camera_rays(cam, pose)
    rgb, _, depth, _ = render_rays(field, origins, dirs, n_samples, background, rng)
    if isinstance(cam, FisheyeCamera):
        h, w = cam.intrinsics.height, cam.intrinsics.width
    else:
        h, w = cam.height, cam.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w)


@dataclass(frozen=True)
class Frame:
    """A posed training image. Fisheye cameras carry their own pose."""

    image: np.ndarray
    camera: object
    pose: PoseSE3 | None = None


def _frame_rays(frame: Frame):
    origins, dirs = camera_rays(frame.camera, frame.pose)
    gt = np.asarray(frame.image, dtype=np.float64).reshape(-1, 3)
    return origins, dirs, gt


def field_gradients(field, origins, dirs, gt, n_samples=64, background=None, rng=None):
    """Mean-squared rendering error and its grid gradients for a ray batch."""
    rgb, _, _, cache = render_rays(field, origins, dirs, n_samples, background, rng)
    diff = rgb - gt
    loss = float((diff * diff).mean())
    grad_density = np.zeros_like(field.density)
    grad_color = np.zeros_like(field.color)
    if cache is None:
        return loss, grad_density, grad_color
    g_rgb = 2.0 * diff / diff.size
    hit = cache["hit"]
    g_sigma, g_color = composite_backward(cache["comp"], g_rgb[hit])
    pts = cache["pts"].reshape(-1, 3)
    idx0, frac, inside = _grid_coords(field, pts)
    weights = _corner_weights(frac) * inside[:, None]
    flat_idx = _flat_corner_index(field, idx0)
    nvox = field.density.size
    upd = (weights * g_sigma.reshape(-1, 1)).ravel()
    grad_density = np.bincount(flat_idx.ravel(), upd, minlength=nvox).reshape(
        field.density.shape
    )
    gc = g_color.reshape(-1, 3)
    for ch in range(3):
        upd_c = (weights * gc[:, ch : ch + 1]).ravel()
        grad_color[..., ch] = np.bincount(
            flat_idx.ravel(), upd_c, minlength=nvox
        ).reshape(field.density.shape)
    return loss, grad_density, grad_color


def fit_field(
    field: VoxelField,
    frames,
    iterations: int = 400,
    lr: float = 0.1,
    *,
    n_samples: int = 64,
    rays_per_batch: int = 8192,
    background=None,
    seed: int = 0,
    eval_every: int = 25,
    patience: int = 20,
    callback=None,
) -> VoxelField:
    """Fit density and color to posed frames by minimizing the MSE.

    Minibatches of rays are drawn each iteration; the returned field is the
    best full-training-loss snapshot.  Raises Diverged when the evaluated
    loss keeps increasing.
    """
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    rays = [_frame_rays(f) for f in frames]
    origins = np.concatenate([r[0] for r in rays])
    dirs = np.concatenate([r[1] for r in rays])
    gt = np.concatenate([r[2] for r in rays])
    total = origins.shape[0]
    rng = np.random.default_rng(seed)
    out = field.copy()
    opt_cfg = OptimizerConfig()
    d_state = OptimizerState.fresh(out.density.size)
    c_state = OptimizerState.fresh(out.color.size)
    tracker = _RunTracker(OptimizerConfig(patience=patience))

    def full_loss():
        loss = 0.0
        for start in range(0, total, 16384):
            sl = slice(start, start + 16384)
            rgb, _, _, _ = render_rays(out, origins[sl], dirs[sl], n_samples, background)
            loss += float(((rgb - gt[sl]) ** 2).sum())
        return loss / gt.size

    for it in range(iterations):
        batch = rng.choice(total, size=min(rays_per_batch, total), replace=False)
        _, g_density, g_color = field_gradients(
            out, origins[batch], dirs[batch], gt[batch], n_samples, background, rng
        )
        d_state, d_delta = arg_step(
            d_state, g_density.ravel(), None, opt_cfg, lr=lr, trust=1e9
        )
        c_state, c_delta = arg_step(
            c_state, g_color.ravel(), None, opt_cfg, lr=lr, trust=1e9
        )
        out.density = np.maximum(out.density + d_delta.reshape(out.density.shape), 0.0)
        out.color = np.clip(out.color + c_delta.reshape(out.color.shape), 0.0, 1.0)
        if it % eval_every == eval_every - 1 or it == iterations - 1:
            loss = full_loss()
            tracker.observe(loss, out.copy())
            if callback is not None:
                callback(it, loss, out)
            log.debug("fit_field iter %d loss %.6g", it, loss)
    return tracker.best if tracker.best is not None else out


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray  # (V, 3) in [0, 1]


def export_mesh(field: VoxelField, iso_level: float) -> Mesh:
    """Marching-cubes surface of the density grid with sampled vertex colors."""
    if iso_level <= 0:
        raise ValueError("iso level must be positive")
    if iso_level >= float(field.density.max()):
        raise EmptySurface("iso level at or above the maximum density")
    verts, faces, _, _ = marching_cubes(
        field.density, level=iso_level, spacing=tuple(field.spacing)
    )
    if len(verts) == 0:
        raise EmptySurface("no surface crossings at this iso level")
    verts = verts + field.bounds[0]
    _, colors = sample_field(field, verts)
    return Mesh(verts, faces.astype(np.int64), np.clip(colors, 0.0, 1.0))


def write_obj(mesh: Mesh, path) -> None:
    """OBJ with the common vertex-color extension: v x y z r g b."""
    with open(path, "w") as fh:
        fh.write("# exported voxel-field surface\n")
        for p, c in zip(mesh.vertices, mesh.colors):
            fh.write(
                f"v {p[0]:.10g} {p[1]:.10g} {p[2]:.10g} "
                f"{c[0]:.10g} {c[1]:.10g} {c[2]:.10g}\n"
            )
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path) -> Mesh:
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:7]]
                verts.append(vals[:3])
                colors.append(vals[3:6] if len(vals) >= 6 else [0.0, 0.0, 0.0])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64), np.array(colors))


def write_ply(mesh: Mesh, path) -> None:
    """Binary little-endian PLY; double positions, uchar colors."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    quant = np.clip(np.rint(mesh.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for p, c in zip(mesh.vertices, quant):
            fh.write(struct.pack("<3d3B", *p, *c))
        for f in mesh.faces:
            fh.write(struct.pack("<B3i", 3, *f))


def read_ply(path) -> Mesh:
    with open(path, "rb") as fh:
        n_verts = n_faces = 0
        while True:
            line = fh.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n_verts = int(line.split()[-1])
            elif line.startswith("element face"):
                n_faces = int(line.split()[-1])
            elif line == "end_header":
                break
        verts = np.empty((n_verts, 3))
        colors = np.empty((n_verts, 3))
        for i in range(n_verts):
            x, y, z, r, g, b = struct.unpack("<3d3B", fh.read(27))
            verts[i] = (x, y, z)
            colors[i] = (r / 255.0, g / 255.0, b / 255.0)
        faces = np.empty((n_faces, 3), dtype=np.int64)
        for i in range(n_faces):
            count = struct.unpack("<B", fh.read(1))[0]
            faces[i] = struct.unpack(f"<{count}i", fh.read(4 * count))
    return Mesh(verts, faces, colors)


def save_field(field: VoxelField, path) -> None:
    """Checkpoint: magic, int32 resolution, float64 bounds, density, color."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array(field.resolution, dtype="<i4").tobytes())
        fh.write(field.bounds.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(field.density, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field.color, dtype="<f8").tobytes())


def load_field(path) -> VoxelField:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a voxel field checkpoint")
        resolution = tuple(np.frombuffer(fh.read(12), dtype="<i4"))
        bounds = np.frombuffer(fh.read(48), dtype="<f8").reshape(2, 3)
        nvox = int(np.prod(resolution))
        density = np.frombuffer(fh.read(8 * nvox), dtype="<f8").reshape(resolution)
        color = np.frombuffer(fh.read(24 * nvox), dtype="<f8").reshape(resolution + (3,))
    return VoxelField(resolution, bounds.copy(), density.copy(), color.copy())
