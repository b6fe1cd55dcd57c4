"""SO(3)/SE(3) primitives: exp/log maps, geodesics, composition, pose sampling.

Conventions used throughout the package:

* rotations are 3x3 float64 matrices, axis-angle vectors are 3-vectors
  whose norm is the angle in radians (principal branch, angle <= pi);
* the relative logarithm between rotations is taken in the frame of the
  start rotation, ``relative_log(r0, r1) = so3_log(r0.T @ r1)``, and is
  transported back by left multiplication: ``r0 @ so3_exp(v)`` reaches
  ``r1`` when ``v`` is the relative log.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

# Orthonormality / determinant tolerance for inputs claiming to be rotations.
ROTATION_TOL = 1e-6
# Below this angle (rad) the sinc-style coefficients switch to their series.
SMALL_ANGLE = 1e-8
# Within this distance of pi the log switches to the eigen-axis branch.
PI_BRANCH = 1e-6


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat(w) @ x == cross(w, x)."""
    wx, wy, wz = omega
    return np.array(
        [
            [0.0, -wz, wy],
            [wz, 0.0, -wx],
            [-wy, wx, 0.0],
        ]
    )


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of hat for skew-symmetric input."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _check_finite(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {omega.shape}")
    if not np.all(np.isfinite(omega)):
        raise ValueError("non-finite axis-angle input")
    return omega


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation by angle ``|omega|`` about ``omega/|omega|`` (Rodrigues).

    Uses the series expansion of the sinc coefficients below SMALL_ANGLE
    so the map is smooth through zero.
    """
    omega = _check_finite(omega)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    k = hat(omega)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def check_rotation(r: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    """Validate the rotation invariants; returns the array as float64."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {r.shape}")
    ortho = float(np.max(np.abs(r.T @ r - np.eye(3))))
    if ortho > tol:
        raise ValueError(f"matrix is not orthonormal: |R^T R - I|_inf = {ortho:.3e}")
    det = float(np.linalg.det(r))
    if abs(det - 1.0) > tol:
        raise ValueError(f"matrix is not a proper rotation: det = {det:.9f}")
    return r


def so3_log(r: np.ndarray) -> np.ndarray:
    """Principal-branch logarithm of a rotation (angle <= pi).

    The angle comes from atan2 of the antisymmetric part against the
    trace, which is well conditioned at both ends of the branch; within
    PI_BRANCH of pi the axis is recovered from the dominant eigenvector
    of (R + I)/2 instead of the vanishing antisymmetric part.
    """
    r = check_rotation(r)
    w = vee(r - r.T) / 2.0  # sin(theta) * axis
    s = float(np.linalg.norm(w))
    c = (float(np.trace(r)) - 1.0) / 2.0
    theta = np.arctan2(s, min(max(c, -1.0), 1.0))

    if theta < SMALL_ANGLE:
        # w already equals theta*axis to within O(theta^3) < eps here.
        return w
    if np.pi - theta < PI_BRANCH:
        # Near pi: (R + I)/2 approaches the outer product axis*axis^T.
        evals, evecs = np.linalg.eigh((r + r.T) / 2.0 + np.eye(3))
        axis = evecs[:, np.argmax(evals)]
        axis = axis / np.linalg.norm(axis)
        if s > 0:
            # Align with the antisymmetric part while it still has a sign.
            if float(w @ axis) < 0.0:
                axis = -axis
        elif axis[np.argmax(np.abs(axis))] < 0.0:
            # theta == pi exactly: both signs are valid; fix one.
            axis = -axis
        return theta * axis
    return (theta / s) * w


def relative_log(r_from: np.ndarray, r_to: np.ndarray) -> np.ndarray:
    """Axis-angle of the rotation carrying r_from to r_to, in r_from's frame."""
    r_from = check_rotation(r_from)
    r_to = check_rotation(r_to)
    return so3_log(r_from.T @ r_to)


def geodesic_rotation(r0: np.ndarray, r1: np.ndarray, t: float) -> np.ndarray:
    """Constant-speed geodesic between rotations, r0 at t=0, r1 at t=1."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter t={t} outside [0, 1]")
    return check_rotation(r0) @ so3_exp(t * relative_log(r0, r1))


def lerp_translation(b0: np.ndarray, b1: np.ndarray, t: float) -> np.ndarray:
    """Affine interpolation (1-t)*b0 + t*b1."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter t={t} outside [0, 1]")
    b0 = np.asarray(b0, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    return (1.0 - t) * b0 + t * b1


def project_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm via polar decomposition."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """n Haar-uniform rotations from normalized 4-component Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rr = np.empty((n, 3, 3))
    rr[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rr[:, 0, 1] = 2.0 * (x * y - z * w)
    rr[:, 0, 2] = 2.0 * (x * z + y * w)
    rr[:, 1, 0] = 2.0 * (x * y + z * w)
    rr[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rr[:, 1, 2] = 2.0 * (y * z - x * w)
    rr[:, 2, 0] = 2.0 * (x * z - y * w)
    rr[:, 2, 1] = 2.0 * (y * z + x * w)
    rr[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rr


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return random_rotations(rng, 1)[0]


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3): x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (R1,t1)(R2,t2) = (R1 R2, R1 t2 + t1)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))


@dataclass
class TangentVector:
    """se(3) element: rotational (so(3)) and translational velocity parts.

    Fields are plain arrays in geometry code and engine arrays inside
    training graphs; this container does not care which.
    """

    rotational: Any
    translational: Any


def sample_initial_pose(rng: np.random.Generator) -> RigidTransform:
    """Draw from the flow's initial distribution: Haar rotation, N(0, I) shift."""
    return RigidTransform(random_rotation(rng), rng.standard_normal(3))


def apply_transform(
    g: RigidTransform, points: np.ndarray, vectors: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply a rigid motion: positions affinely, direction channels linearly."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {points.shape}")
    moved = points @ g.rotation.T + g.translation
    if vectors is None:
        return moved, None
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape != points.shape:
        raise ValueError(
            f"vectors shape {vectors.shape} does not match points shape {points.shape}"
        )
    return moved, vectors @ g.rotation.T
