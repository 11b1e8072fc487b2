"""Recurrent momentum-state optimizer and refinement loops.

The update keeps running first/second-moment estimates per parameter and a
context-dependent step gate:

    h <- beta1 h + (1 - beta1) g
    v <- beta2 v + (1 - beta2) g^2
    gate = g_min + (1 - g_min) sigmoid(<context, w>)
    delta = -lr * gate * h_hat / (sqrt(v_hat) + eps)

with bias correction and trust-region clipping per parameter group.  The
gate weights w default to zero (gate 0.55 everywhere) and can be replaced by
learned weights through the config.

Two refinement drivers are provided: refine_pinhole alternates depth and
relative-pose steps for a single target view; refine_fisheye runs a
round-robin sweep over targets, updating absolute neighbor poses (camera 0
is the gauge anchor) under the combined objective C + lambda R_S, where R_S
penalizes pose differences between consecutive iteration snapshots inside a
rolling window.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .costmap import fisheye_cost, pinhole_cost
from .errors import Diverged, NonFiniteGradient, NotEnoughViews, WindowTooShort
from .features import (
    FeatureConfig,
    extract_features,
    global_descriptor,
    neighbor_select,
)
from .geometry import (
    PoseSE3,
    compose,
    inverse,
    retract,
    so3_left_jacobian_inv,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    lr_pose: float = 1e-2
    lr_depth: float = 1e-3
    lr_distortion: float = 1e-3
    lr_decay: float = 1.0  # per-step multiplicative learning-rate decay
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gate_min: float = 0.1
    gate_weights: np.ndarray | None = None
    trust_rot: float = 0.05  # radians per step
    trust_trans: float = 0.05  # scene units per step
    lam: float = 0.5  # weight of the pose-smoothness term
    window: int = 8  # iteration snapshots kept for R_S
    iterations: int = 100
    patience: int = 20  # consecutive objective increases before Diverged
    plateau: int = 0  # stop after this many non-improving iterations (0 = off)
    grad_tol: float = 0.0  # stop when the total gradient norm drops below
    alternation: int = 1  # depth steps per pose step in the pinhole loop
    neighbors_k: int = 2
    grad_stride: int = 1
    level: int = 0
    depth_source: str = "hypotheses"
    depth_range: tuple = (0.5, 8.0)
    num_hypotheses: int = 32
    optimize_distortion: bool = False
    min_depth: float = 1e-3
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    # Cost weight per feature channel.  Raw and blurred intensity transfer
    # between viewpoints far better than fixed-scale derivative filters, so
    # they carry most of the alignment signal; None means uniform weights.
    channel_weights: tuple | None = (1.0, 1.0, 0.15, 0.15, 0.15, 0.15, 0.15, 0.15)
    # "pose" picks each view's neighbors by camera-center proximity of the
    # initial estimates; "appearance" ranks by global feature descriptors,
    # which can confuse opposite sides of a symmetric scene.
    neighbor_mode: str = "pose"


def load_gate_weights(path) -> np.ndarray:
    """Hook for slotting learned gate weights into the optimizer config."""
    return np.load(path)


@dataclass(frozen=True)
class OptimizerState:
    """Per-parameter moment estimates plus the wrapped summary tensor m."""

    h: np.ndarray
    v: np.ndarray
    m: dict
    step: int = 0

    @classmethod
    def fresh(cls, dim: int) -> "OptimizerState":
        return cls(np.zeros(dim), np.zeros(dim), {}, 0)

    def reset(self) -> "OptimizerState":
        return OptimizerState.fresh(self.h.size)


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def _gate(context, config: OptimizerConfig) -> float:
    z = 0.0
    if context is not None and config.gate_weights is not None:
        c = np.asarray(context, dtype=np.float64).ravel()
        w = np.asarray(config.gate_weights, dtype=np.float64).ravel()
        z = float(c[: w.size] @ w[: c.size])
    return config.gate_min + (1.0 - config.gate_min) * _sigmoid(z)


def _clip_trust(delta: np.ndarray, trust, config: OptimizerConfig) -> np.ndarray:
    if trust is None:
        if delta.size == 6:
            trust = [(slice(0, 3), config.trust_rot), (slice(3, 6), config.trust_trans)]
        else:
            return np.clip(delta, -config.trust_trans, config.trust_trans)
    if isinstance(trust, (int, float)):
        norm = float(np.linalg.norm(delta))
        return delta * (trust / norm) if norm > trust else delta
    out = delta.copy()
    for sl, radius in trust:
        norm = float(np.linalg.norm(out[sl]))
        if norm > radius:
            out[sl] *= radius / norm
    return out


def arg_step(
    state: OptimizerState,
    grad: np.ndarray,
    context,
    config: OptimizerConfig,
    *,
    lr: float | None = None,
    trust=None,
):
    """One gated adaptive-moment update; returns (new state, delta)."""
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.size != state.h.size:
        raise ValueError("gradient size does not match optimizer state")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    lr = config.lr_pose if lr is None else lr
    lr = lr * config.lr_decay**state.step
    t = state.step + 1
    h = config.beta1 * state.h + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    h_hat = h / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    delta = -lr * _gate(context, config) * h_hat / (np.sqrt(v_hat) + config.eps)
    delta = _clip_trust(delta, trust, config)
    m = dict(state.m)
    m["context"] = None if context is None else np.array(context, dtype=np.float64)
    return OptimizerState(h, v, m, t), delta


@dataclass(frozen=True)
class TrajectoryWindow:
    """Pose snapshots over optimizer iterations, shape (T, N, 6)."""

    snapshots: np.ndarray

    def __post_init__(self):
        snaps = np.asarray(self.snapshots, dtype=np.float64)
        if snaps.ndim == 2:
            snaps = snaps[:, None, :]
        object.__setattr__(self, "snapshots", snaps)


def smoothness_regularizer(window: TrajectoryWindow):
    """Mean pose-difference energy over the window plus its gradient.

    value = (1/N) sum_i sum_j ||phi_i^{j+1} - phi_i^j||^2 + ||t_i^{j+1} - t_i^j||^2
    The gradient has the same (T, N, 6) shape as the snapshots.
    """
    snaps = window.snapshots
    if snaps.shape[0] < 2:
        raise WindowTooShort("need at least two snapshots")
    n = snaps.shape[1]
    d = snaps[1:] - snaps[:-1]
    value = float(np.sum(d * d) / n)
    grad = np.zeros_like(snaps)
    grad[1:] += 2.0 * d / n
    grad[:-1] -= 2.0 * d / n
    return value, grad


def pose_coordinate_grad_to_tangent(pose: PoseSE3, g: np.ndarray) -> np.ndarray:
    """Convert a gradient in (phi, t) coordinates to a left-tangent gradient.

    For P' = exp(delta) o P: phi' ~= phi + J_l(phi)^{-1} delta_phi and
    t' ~= t - [t]x delta_phi + delta_rho.
    """
    g = np.asarray(g, dtype=np.float64).reshape(6)
    out = np.empty(6)
    out[:3] = so3_left_jacobian_inv(pose.phi).T @ g[:3] + np.cross(pose.t, g[3:])
    out[3:] = g[3:]
    return out


def _context_vector(pyr) -> np.ndarray:
    ctx = pyr.contextual.reshape(-1, pyr.contextual.shape[2])
    return np.concatenate([np.abs(ctx).mean(axis=0), ctx.std(axis=0)])


def _neighbors_by_center(centers: np.ndarray, target: int, k: int) -> list:
    """Indices of the k nearest other cameras; ties break on lower index."""
    d = np.linalg.norm(centers - centers[target], axis=1)
    order = np.lexsort((np.arange(len(centers)), d))
    return [int(i) for i in order if i != target][:k]


def _pick_neighbors(config: OptimizerConfig, pyrs, poses, target: int, k: int) -> list:
    if config.neighbor_mode == "pose":
        centers = np.stack([p.t for p in poses])
        return _neighbors_by_center(centers, target, k)
    if config.neighbor_mode == "appearance":
        desc = [global_descriptor(p) for p in pyrs]
        return neighbor_select(desc, target, k)
    raise ValueError(f"unknown neighbor mode {config.neighbor_mode!r}")


class _RunTracker:
    """Best-iterate snapshots, divergence and plateau accounting."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.best_obj = np.inf
        self.best = None
        self.prev_obj = np.inf
        self.rise_streak = 0
        self.flat_streak = 0

    def observe(self, obj: float, snapshot) -> bool:
        """Record an iterate; returns True when the loop should stop."""
        if obj < self.best_obj - 1e-15:
            self.best_obj = obj
            self.best = snapshot
            self.flat_streak = 0
        else:
            self.flat_streak += 1
        if obj > self.prev_obj:
            self.rise_streak += 1
        else:
            self.rise_streak = 0
        self.prev_obj = obj
        if self.rise_streak >= self.config.patience:
            raise Diverged(
                f"objective increased for {self.config.patience} consecutive iterations"
            )
        return bool(self.config.plateau and self.flat_streak >= self.config.plateau)


def refine_pinhole(
    scene,
    init_depth: np.ndarray,
    init_poses,
    config: OptimizerConfig | None = None,
    *,
    target: int = 0,
    callback=None,
):
    """Alternating depth / relative-pose refinement for a pinhole rig.

    scene provides .images (list of H x W x 3 arrays in [0, 1]) and .camera
    (shared PinholeCamera); init_poses are absolute camera-to-world poses.
    The target view's pose stays fixed; neighbor poses are optimized through
    the relative transforms and reconstructed at the end.  Returns
    (poses, depth, history).
    """
    config = config or OptimizerConfig()
    if config.level != 0:
        raise ValueError("depth refinement operates at pyramid level 0")
    images = scene.images
    n = len(images)
    if n < 2:
        raise NotEnoughViews("need at least two views")
    pyrs = [extract_features(im, config.feature) for im in images]
    ids = _pick_neighbors(
        config, pyrs, list(init_poses), target, min(config.neighbors_k, n - 1)
    )
    cam = scene.camera
    pose_t = init_poses[target]
    rels = [compose(inverse(init_poses[i]), pose_t) for i in ids]
    depth = np.maximum(np.asarray(init_depth, dtype=np.float64).copy(), config.min_depth)
    ctx = _context_vector(pyrs[target])

    pose_states = [OptimizerState.fresh(6) for _ in ids]
    depth_state = OptimizerState.fresh(depth.size)
    tracker = _RunTracker(config)
    history = []
    cycle = 1 + max(config.alternation, 0)
    for it in range(config.iterations):
        ev = pinhole_cost(
            pyrs[target],
            [pyrs[i] for i in ids],
            rels,
            depth,
            cam,
            level=config.level,
            grad_stride=config.grad_stride,
            channel_weights=config.channel_weights,
        )
        grad_norm = float(
            np.sqrt(np.sum(ev.grad_pose**2) + np.sum(ev.grad_depth**2))
        )
        stop = tracker.observe(ev.value, (list(rels), depth.copy()))
        step_norm = 0.0
        if config.grad_tol and grad_norm < config.grad_tol:
            history.append(_row(it, ev.value, 0.0, grad_norm, 0.0))
            break
        pose_phase = it % cycle == 0
        if pose_phase:
            sq = 0.0
            for j in range(len(ids)):
                pose_states[j], delta = arg_step(
                    pose_states[j], ev.grad_pose[j], ctx, config, lr=config.lr_pose
                )
                rels[j] = retract(rels[j], delta)
                sq += float(delta @ delta)
            step_norm = float(np.sqrt(sq))
        else:
            depth_state, delta = arg_step(
                depth_state, ev.grad_depth.ravel(), ctx, config, lr=config.lr_depth
            )
            depth = np.maximum(depth + delta.reshape(depth.shape), config.min_depth)
            step_norm = float(np.linalg.norm(delta))
        history.append(_row(it, ev.value, 0.0, grad_norm, step_norm))
        if callback is not None:
            callback(it, (list(rels), depth.copy()), history[-1])
        if stop:
            break
    if tracker.best is None:
        return list(init_poses), depth, history
    best_rels, best_depth = tracker.best
    poses = list(init_poses)
    for j, i in enumerate(ids):
        poses[i] = compose(pose_t, inverse(best_rels[j]))
    return poses, best_depth, history


def _row(it, cost, r_s, grad_norm, step_norm):
    return {
        "iteration": it,
        "cost": cost,
        "r_s": r_s,
        "grad_norm": grad_norm,
        "step_norm": step_norm,
    }


def refine_fisheye(
    scene,
    init_params,
    config: OptimizerConfig | None = None,
    *,
    callback=None,
):
    """Round-robin flexible bundle adjustment over fisheye cameras.

    init_params are full FisheyeCamera descriptions (known intrinsics, free
    poses, optionally free shared distortion).  Each sweep evaluates every
    view as target; gradients flow to the neighbor poses.  Camera 0 anchors
    the gauge.  The objective is cost + lam * R_S over a rolling window of
    iteration snapshots.  Returns (params, history).
    """
    config = config or OptimizerConfig()
    images = scene.images
    n = len(images)
    if n < 2:
        raise NotEnoughViews("need at least two views")
    pyrs = [extract_features(im, config.feature) for im in images]
    k = min(config.neighbors_k, n - 1)
    init_poses = [c.pose for c in init_params]
    neighbor_ids = [_pick_neighbors(config, pyrs, init_poses, o, k) for o in range(n)]
    contexts = [_context_vector(p) for p in pyrs]
    params = list(init_params)

    def gt_depth(o):
        d = np.asarray(scene.depths[o], dtype=np.float64)
        return np.where(np.isfinite(d) & (d > 0), d, config.depth_range[1])

    pose_states = [OptimizerState.fresh(6) for _ in range(n)]
    k_state = OptimizerState.fresh(3)
    # The smoothness window tracks cumulative tangent-space displacement per
    # camera, not raw pose coordinates: consecutive differences then equal the
    # applied update steps, and near-pi axis-angle representation flips cannot
    # masquerade as huge motions.
    displacement = np.zeros((n, 6))
    snapshots = deque(maxlen=max(config.window, 2))
    snapshots.append(displacement.copy())
    tracker = _RunTracker(config)
    history = []
    for it in range(config.iterations):
        total_cost = 0.0
        grads = np.zeros((n, 6))
        grad_k = np.zeros(3)
        for o in range(n):
            ids = neighbor_ids[o]
            kwargs = dict(
                level=config.level,
                grad_stride=config.grad_stride,
                optimize_distortion=config.optimize_distortion,
                depth_source=config.depth_source,
                depth_range=config.depth_range,
                num_hypotheses=config.num_hypotheses,
                channel_weights=config.channel_weights,
            )
            if config.depth_source in ("ground_truth", "estimate"):
                kwargs["depth"] = gt_depth(o)
            ev = fisheye_cost(
                pyrs[o], [pyrs[i] for i in ids], [params[i] for i in ids],
                params[o], **kwargs,
            )
            total_cost += ev.value
            for slot, i in enumerate(ids):
                grads[i] += ev.grad_pose[slot]
            if config.optimize_distortion:
                grad_k += ev.grad_distortion
        total_cost /= n

        snaps = np.stack(list(snapshots))
        if snaps.shape[0] >= 2:
            r_value, r_grad = smoothness_regularizer(TrajectoryWindow(snaps))
            # window entries already live in tangent coordinates
            grads += config.lam * r_grad[-1]
        else:
            r_value = 0.0
        obj = total_cost + config.lam * r_value
        grad_norm = float(np.sqrt(np.sum(grads[1:] ** 2) + np.sum(grad_k**2)))
        stop = tracker.observe(obj, (list(params),))
        if config.grad_tol and grad_norm < config.grad_tol:
            history.append(_row(it, total_cost, r_value, grad_norm, 0.0))
            break
        sq = 0.0
        for i in range(1, n):  # camera 0 anchors the gauge
            pose_states[i], delta = arg_step(
                pose_states[i], grads[i], contexts[i], config, lr=config.lr_pose
            )
            params[i] = params[i].with_pose(retract(params[i].pose, delta))
            displacement[i] += delta
            sq += float(delta @ delta)
        if config.optimize_distortion:
            k_state, dk = arg_step(
                k_state, grad_k, contexts[0], config, lr=config.lr_distortion,
                trust=config.trust_trans,
            )
            new_k = np.array([params[0].k1, params[0].k2, params[0].k3]) + dk
            params = [c.with_distortion(*new_k) for c in params]
            sq += float(dk @ dk)
        step_norm = float(np.sqrt(sq))
        history.append(_row(it, total_cost, r_value, grad_norm, step_norm))
        snapshots.append(displacement.copy())
        if callback is not None:
            callback(it, list(params), history[-1])
        if stop:
            break
    if tracker.best is None:
        return list(init_params), history
    return list(tracker.best[0]), history
