"""Quaternion, direction-cosine and skew-matrix algebra.

Quaternions are stored scalar-last, ``q = [q1, q2, q3, q4]`` with vector part
``q[:3]`` and scalar part ``q[3]``.  The product ``quat_multiply(q, p)`` is the
cross-product-minus form

    q (x) p = [q4 p_v + p4 q_v - q_v x p_v ; q4 p4 - q_v . p_v]

which composes attitude matrices in the same order:
``quat_to_dcm(q (x) p) == quat_to_dcm(q) @ quat_to_dcm(p)``.  ``quat_to_dcm``
returns the matrix that maps a vector's components from the reference frame
into the frame the quaternion describes.
"""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def _as_finite(x, size: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have shape ({size},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def normalize(q) -> np.ndarray:
    q = _as_finite(q, 4, "quaternion")
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / norm


def quat_multiply(q, p) -> np.ndarray:
    """Quaternion product ``q (x) p``, renormalized."""
    q = _as_finite(q, 4, "q")
    p = _as_finite(p, 4, "p")
    qv, q4 = q[:3], q[3]
    pv, p4 = p[:3], p[3]
    vec = q4 * pv + p4 * qv - np.cross(qv, pv)
    scalar = q4 * p4 - qv @ pv
    return normalize(np.append(vec, scalar))


def quat_inverse(q) -> np.ndarray:
    q = _as_finite(q, 4, "q")
    return np.array([-q[0], -q[1], -q[2], q[3]])


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    v = _as_finite(v, 3, "v")
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_to_dcm(q) -> np.ndarray:
    """Attitude matrix ``A(q) = (q4^2 - |q_v|^2) I + 2 q_v q_v^T - 2 q4 [q_v]x``."""
    q = _as_finite(q, 4, "q")
    qv, q4 = q[:3], q[3]
    return (q4**2 - qv @ qv) * np.eye(3) + 2.0 * np.outer(qv, qv) - 2.0 * q4 * skew(qv)


def dcm_to_quat(A) -> np.ndarray:
    """Inverse of :func:`quat_to_dcm` (Shepperd's method), scalar part >= 0."""
    A = np.asarray(A, dtype=float)
    tr = np.trace(A)
    # candidates for 4*q_i^2 - 1 style pivots
    diag = np.array([A[0, 0], A[1, 1], A[2, 2], tr])
    i = int(np.argmax(diag))
    if i == 3:
        q4 = 0.5 * np.sqrt(1.0 + tr)
        q = np.array([
            (A[1, 2] - A[2, 1]) / (4 * q4),
            (A[2, 0] - A[0, 2]) / (4 * q4),
            (A[0, 1] - A[1, 0]) / (4 * q4),
            q4,
        ])
    else:
        j, k = (i + 1) % 3, (i + 2) % 3
        qi = 0.5 * np.sqrt(1.0 + 2 * A[i, i] - tr)
        q = np.empty(4)
        q[i] = qi
        q[j] = (A[i, j] + A[j, i]) / (4 * qi)
        q[k] = (A[i, k] + A[k, i]) / (4 * qi)
        q[3] = (A[j, k] - A[k, j]) / (4 * qi)
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def omega_matrix(omega) -> np.ndarray:
    """4x4 rate matrix such that ``q_dot = 0.5 * omega_matrix(w) @ q``."""
    wx, wy, wz = _as_finite(omega, 3, "omega")
    return np.array([
        [0.0, wz, -wy, wx],
        [-wz, 0.0, wx, wy],
        [wy, -wx, 0.0, wz],
        [-wx, -wy, -wz, 0.0],
    ])


def quat_rate(q, omega) -> np.ndarray:
    return 0.5 * omega_matrix(omega) @ _as_finite(q, 4, "q")


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    """Quaternion for a frame rotated by ``angle`` about ``axis``."""
    axis = _as_finite(axis, 3, "axis")
    n = np.linalg.norm(axis)
    if n == 0.0:
        return IDENTITY_QUAT.copy()
    axis = axis / n
    return np.append(np.sin(angle / 2) * axis, np.cos(angle / 2))


def quat_angle(q_hat, q) -> float:
    """Rotation angle between two attitudes, blind to the q/-q double cover."""
    dot = abs(float(np.dot(q_hat, q)))
    return 2.0 * float(np.arccos(min(1.0, dot)))
