"""Poses, quaternion helpers, the pose-regression loss and error metrics.

Quaternions are plain length-4 arrays in (w, x, y, z) order. A pose vector
is the 7-array ``[x, y, z, qw, qx, qy, qz]`` the network regresses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BETA = 250.0
UNIT_TOL = 1e-9


class DegenerateQuaternionError(ValueError):
    """Raised when a quaternion with zero norm has to be normalized."""


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    n = np.linalg.norm(q)
    if not n > 0.0 or not np.isfinite(n):
        raise DegenerateQuaternionError("degenerate quaternion")
    return q / n


def is_unit(q, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.linalg.norm(q)) - 1.0) <= tol


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b``."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class Pose:
    """Camera pose: position in meters and a unit orientation quaternion.

    The orientation is normalized on construction, so any nonzero
    quaternion is accepted.
    """

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float).reshape(-1)
        if position.shape != (3,):
            raise ValueError(f"position must have 3 components, got {position.shape}")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "orientation", quat_normalize(self.orientation))
        position.setflags(write=False)
        self.orientation.setflags(write=False)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    @classmethod
    def from_vector(cls, p) -> "Pose":
        p = check_pose_vector(p)
        return cls(p[:3], p[3:])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.to_vector(), other.to_vector()))

    def __hash__(self):
        return hash(self.to_vector().tobytes())


def check_pose_vector(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (7,):
        raise ValueError(f"pose vector must have 7 components, got shape {p.shape}")
    return p


def split_pose_vector(p) -> tuple[np.ndarray, np.ndarray]:
    p = check_pose_vector(p)
    return p[:3], p[3:]


def position_error(x, x_hat) -> float:
    """Euclidean distance between two positions, in the positions' unit."""
    return float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(x_hat, dtype=float)))


def angular_error(q, q_hat, raw: bool = False) -> float:
    """Angle in degrees between two orientation quaternions.

    Equals ``arccos(|<q, q_hat>|)`` on the normalized inputs, which is
    invariant to the q / -q sign ambiguity and lies in [0, 90]. With
    ``raw=True`` the absolute value is dropped (range [0, 180]); use it
    to reproduce numbers computed with the sign-sensitive formula.

    Note this is half the geodesic rotation angle between the two
    orientations.
    """
    q = quat_normalize(q)
    q_hat = quat_normalize(q_hat)
    return float(angular_errors(q[None], q_hat[None], raw=raw)[0])


def angular_errors(q, q_hat, raw: bool = False) -> np.ndarray:
    """Row-wise :func:`angular_error` for (N, 4) arrays.

    Uses ``arccos(<a, b>) = 2 atan2(|a - b|, |a + b|)`` for unit a, b,
    which stays accurate near 0 where ``arccos`` loses half the digits.
    """
    q = np.asarray(q, dtype=float)
    q_hat = np.asarray(q_hat, dtype=float)
    nq = np.linalg.norm(q, axis=1, keepdims=True)
    nh = np.linalg.norm(q_hat, axis=1, keepdims=True)
    if np.any(nq == 0) or np.any(nh == 0):
        raise DegenerateQuaternionError("degenerate quaternion")
    a, b = q / nq, q_hat / nh
    if not raw:
        # compare against whichever of b, -b lies on a's hemisphere
        s = np.where(np.einsum("ij,ij->i", a, b) < 0, -1.0, 1.0)[:, None]
        b = b * s
    return np.degrees(2.0 * np.arctan2(np.linalg.norm(a - b, axis=1), np.linalg.norm(a + b, axis=1)))


def pose_vector_error(p, p_hat) -> float:
    """Plain Euclidean norm of the 7-component difference."""
    return float(np.linalg.norm(check_pose_vector(p) - check_pose_vector(p_hat)))


def _loss_terms(p_hat, p_true):
    x_hat, q_hat = split_pose_vector(p_hat)
    x, q = split_pose_vector(p_true)
    return x_hat - x, q_hat - quat_normalize(q)


def posenet_loss(p_hat, p_true, beta: float = DEFAULT_BETA) -> float:
    """``||x_hat - x|| + beta * ||q_hat - q / ||q||||`` for one sample."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    dx, dq = _loss_terms(p_hat, p_true)
    return float(np.linalg.norm(dx) + beta * np.linalg.norm(dq))


def loss_gradient(p_hat, p_true, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Gradient of :func:`posenet_loss` with respect to ``p_hat``.

    Each L2 term contributes its unit direction; at a zero residual the
    subgradient 0 is used.
    """
    dx, dq = _loss_terms(p_hat, p_true)
    g = np.zeros(7)
    nx = np.linalg.norm(dx)
    nq = np.linalg.norm(dq)
    if nx > 0:
        g[:3] = dx / nx
    if nq > 0:
        g[3:] = beta * dq / nq
    return g


def batch_loss(p_hat, p_true, beta: float = DEFAULT_BETA):
    """Mean loss over a batch of (N, 7) predictions and its gradient.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``p_hat``; the
    gradient already includes the 1/N of the mean.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    n = p_hat.shape[0]
    qn = np.linalg.norm(p_true[:, 3:], axis=1, keepdims=True)
    if np.any(qn == 0):
        raise DegenerateQuaternionError("degenerate quaternion")
    dx = p_hat[:, :3] - p_true[:, :3]
    dq = p_hat[:, 3:] - p_true[:, 3:] / qn
    nx = np.linalg.norm(dx, axis=1, keepdims=True)
    nq = np.linalg.norm(dq, axis=1, keepdims=True)
    loss = float(np.mean(nx[:, 0] + beta * nq[:, 0]))
    grad = np.zeros_like(p_hat)
    np.divide(dx, nx, out=grad[:, :3], where=nx > 0)
    np.divide(beta * dq, nq, out=grad[:, 3:], where=nq > 0)
    return loss, grad / n


def align_hemisphere(q_target, q_ref) -> np.ndarray:
    """Flip each target quaternion row onto the hemisphere of ``q_ref``."""
    q_target = np.asarray(q_target, dtype=float)
    s = np.sign(np.einsum("ij,ij->i", q_target, np.asarray(q_ref, dtype=float)))
    s[s == 0] = 1.0
    return q_target * s[:, None]


def pose_errors(pred, truth, raw: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-row position error (meters) and angular error (degrees) for (N, 7) arrays.

    Predicted quaternions are normalized before the angle is taken.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, 7)
    truth = np.asarray(truth, dtype=float).reshape(-1, 7)
    e_p = np.linalg.norm(pred[:, :3] - truth[:, :3], axis=1)
    return e_p, angular_errors(truth[:, 3:], pred[:, 3:], raw=raw)
