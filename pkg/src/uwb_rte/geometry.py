"""Small-matrix geometry for 4-DOF (translation + yaw) transforms.

Conventions:
    - Yaw angles are radians, normalized to [0, 2*pi).
    - ``vec`` stacks columns (column-major), so that
      ``vec(A @ B @ C) == kron(C.T, A) @ vec(B)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
SVD_DEGENERATE_TOL = 1e-12


class DegenerateInputError(ValueError):
    """Raised when a geometric quantity is undefined for the given input."""


def normalize_angle(theta: float) -> float:
    """Wrap ``theta`` into [0, 2*pi)."""
    wrapped = math.fmod(float(theta), TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


@dataclass(frozen=True)
class YawAngle:
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def __float__(self) -> float:
        return self.theta


@dataclass(frozen=True)
class RotationZ:
    """Rotation about the z-axis; ``block`` is the top-left 2x2 of ``matrix``."""

    matrix: np.ndarray
    block: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        m.setflags(write=False)
        blk = m[:2, :2].copy()
        blk.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "block", blk)

    @property
    def theta(self) -> float:
        return normalize_angle(math.atan2(self.matrix[1, 0], self.matrix[0, 0]))


def rotation_block(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def yaw_matrix(theta: float) -> np.ndarray:
    """3x3 rotation about z by ``theta`` as a plain array."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_rotation(theta: float | YawAngle) -> RotationZ:
    return RotationZ(yaw_matrix(float(theta)))


@dataclass(frozen=True)
class FrameTransform:
    """Maps a point ``p`` expressed in robot 2's odometry frame into robot 1's: R p + t."""

    theta: float
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @property
    def rotation(self) -> RotationZ:
        return yaw_rotation(self.theta)

    def to_dict(self) -> dict:
        return {"theta_rad": self.theta, "t_m": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, data: dict) -> "FrameTransform":
        return cls(float(data["theta_rad"]), np.asarray(data["t_m"], dtype=float))


def apply_transform(tf: FrameTransform, p) -> np.ndarray:
    """Return ``R p + t``. ``p`` may be a single 3-vector or an (m, 3) stack."""
    p = np.asarray(p, dtype=float)
    return p @ tf.rotation.matrix.T + tf.translation


def project_to_so2(m) -> np.ndarray:
    """Nearest 2x2 rotation to ``m`` in Frobenius norm.

    Computed as ``U diag(1, det(U V^T)) V^T`` from the SVD ``m = U S V^T``.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (2, 2) or not np.all(np.isfinite(m)):
        raise DegenerateInputError(f"expected a finite 2x2 matrix, got {m!r}")
    u, s, vt = np.linalg.svd(m)
    if s[0] < SVD_DEGENERATE_TOL:
        raise DegenerateInputError("both singular values vanish; projection direction undefined")
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, d]) @ vt


def vec_column_major(m) -> np.ndarray:
    return np.asarray(m, dtype=float).reshape(-1, order="F")


def unvec_column_major(v, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((rows, cols), order="F")


def kronecker(a, b) -> np.ndarray:
    return np.kron(np.atleast_2d(np.asarray(a, dtype=float)), np.atleast_2d(np.asarray(b, dtype=float)))


# Maps x = [sin(theta), cos(theta)] to vec(gamma1 @ Rblock(theta) @ gamma1.T).
SELECTOR_T = np.array(
    [
        [0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    ]
).T
# Embeds the planar block into the xy-plane of a 3x3 matrix.
GAMMA1 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
GAMMA2 = np.array([0.0, 0.0, 1.0])
# d/dtheta vec(R(theta)) at theta = 0. The R33 entry is constant, so its derivative is 0.
PSI = np.array([0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
# mat(PSI): the generator of z-rotations.
PSI_MATRIX = unvec_column_major(PSI, 3, 3)

for _arr in (SELECTOR_T, GAMMA1, GAMMA2, PSI, PSI_MATRIX):
    _arr.setflags(write=False)


@dataclass(frozen=True)
class EstimatorConstants:
    selector_T: np.ndarray = SELECTOR_T
    gamma1: np.ndarray = GAMMA1
    gamma2: np.ndarray = GAMMA2
    psi: np.ndarray = PSI


CONSTANTS = EstimatorConstants()


def block_from_x(x) -> np.ndarray:
    """Assemble the (unconstrained) 2x2 rotation block from ``[sin, cos]`` via the selector."""
    full = unvec_column_major(SELECTOR_T @ np.asarray(x, dtype=float), 3, 3)
    return full[:2, :2]


def matrix_rank(a, rel_tol: float = 1e-9) -> int:
    """Column rank counting singular values below ``rel_tol * s_max`` as zero."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
