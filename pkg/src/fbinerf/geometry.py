"""SE(3) poses with an axis-angle rotation parameterization.

Conventions used throughout the toolkit:

- A pose ``P = (phi, t)`` acts on points as ``R(phi) @ p + t``.
- Camera poses are camera-to-world, so ``t`` is the camera center.
- Tangent increments are 6-vectors ``(phi_x, phi_y, phi_z, t_x, t_y, t_z)``
  applied by left multiplication: ``retract(P, delta) = exp(delta) o P``.
- ``||phi||`` is kept in ``[0, pi]`` by canonicalization.

Poses serialize as flat JSON arrays ``[phi_x, phi_y, phi_z, t_x, t_y, t_z]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula. phi = 0 yields the identity.

    Uses the series expansion for small angles so the result stays
    orthonormal to machine precision everywhere.
    """
    phi = np.asarray(phi, dtype=np.float64)
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        # second-order series in the un-normalized K
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / angle
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_from_axis_angle`, result with norm in [0, pi]."""
    trace = float(np.trace(R))
    cos_angle = np.clip(0.5 * (trace - 1.0), -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < _SMALL_ANGLE:
        return w  # w ~= phi to first order
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; recover the axis from the
        # symmetric part, where (R + I)/2 ~= axis @ axis.T
        A = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(max(A[k, k], 1e-18))
        norm = float(np.linalg.norm(axis))
        axis = axis / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
        # the skew part fixes the sign; exactly at pi both signs agree
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * angle
    return w * (angle / np.sin(angle))


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian J_l of SO(3): exp(phi + d) ~= exp(J_l d) exp(phi)."""
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        + (1.0 - np.cos(angle)) / a2 * K
        + (angle - np.sin(angle)) / (a2 * angle) * (K @ K)
    )


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    a2 = angle * angle
    coeff = (1.0 - 0.5 * angle * np.sin(angle) / (1.0 - np.cos(angle))) / a2
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


def _canonical_phi(phi: np.ndarray) -> np.ndarray:
    """Wrap the rotation vector so its norm lies in [0, pi]."""
    angle = float(np.linalg.norm(phi))
    if angle <= np.pi:
        return phi
    wrapped = np.remainder(angle, 2.0 * np.pi)
    if wrapped > np.pi:
        wrapped -= 2.0 * np.pi  # negative: flips the axis below
    return phi * (wrapped / angle)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform, rotation as an axis-angle vector plus translation."""

    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        phi = _canonical_phi(np.asarray(self.phi, dtype=np.float64).reshape(3))
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        phi.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(axis_angle_from_rotation(T[:3, :3]), T[:3, 3])

    def rotation(self) -> np.ndarray:
        return rotation_from_axis_angle(self.phi)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.t
        return T

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.t])

    @classmethod
    def from_vector(cls, v) -> "PoseSE3":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])


def transform_point(T: PoseSE3, p: np.ndarray) -> np.ndarray:
    """R(phi) @ p + t.  Accepts a single point or an (N, 3) array."""
    p = np.asarray(p, dtype=np.float64)
    return p @ T.rotation().T + T.t


def compose(A: PoseSE3, B: PoseSE3) -> PoseSE3:
    """Pose such that transform(compose(A, B), p) == transform(A, transform(B, p))."""
    Ra = A.rotation()
    R = Ra @ B.rotation()
    return PoseSE3(axis_angle_from_rotation(R), Ra @ B.t + A.t)


def inverse(P: PoseSE3) -> PoseSE3:
    R = P.rotation()
    return PoseSE3(_canonical_phi(-P.phi), -R.T @ P.t)


def se3_exp(delta: np.ndarray) -> PoseSE3:
    """Exponential map of a 6-vector tangent (phi, rho)."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    phi, rho = delta[:3], delta[3:]
    return PoseSE3(phi, so3_left_jacobian(phi) @ rho)


def se3_log(P: PoseSE3) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotations below pi."""
    phi = P.phi
    rho = so3_left_jacobian_inv(phi) @ P.t
    return np.concatenate([phi, rho])


def retract(P: PoseSE3, delta: np.ndarray) -> PoseSE3:
    """Left-multiplicative increment: exp(delta) o P."""
    return compose(se3_exp(delta), P)


def local_difference(A: PoseSE3, B: PoseSE3) -> np.ndarray:
    """Tangent delta with retract(B, delta) == A, valid for ||delta|| < pi."""
    return se3_log(compose(A, inverse(B)))


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle in radians of the relative rotation between two matrices.

    Uses atan2 of the axial part against the trace, which stays accurate
    for tiny angles where arccos loses half the significant digits.
    """
    R = Ra.T @ Rb
    axial = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_angle = np.linalg.norm(axial)
    cos_angle = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(sin_angle, cos_angle))


@dataclass(frozen=True)
class Ray:
    """Origin plus unit direction, both in world coordinates."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(direction))
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("ray direction must be a nonzero finite vector")
        direction = direction / norm
        origin.flags.writeable = False
        direction.flags.writeable = False
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def point_at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction
