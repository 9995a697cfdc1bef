"""SO(3) / quaternion kernel shared by all estimators.

Conventions used throughout the package:

* quaternions are scalar-last ``[x, y, z, w]`` with Hamilton multiplication;
* ``quat_to_rot(q)`` is the body-to-world rotation matrix, so a body vector
  ``v_b`` maps to the world frame as ``R @ v_b``;
* rotation increments are applied on the right, ``R @ exp_so3(theta)``,
  i.e. expressed in the body frame.

All functions are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

import numpy as np

_EXP_TAYLOR_EPS = 1e-8
_LOG_TAYLOR_EPS = 1e-10
_LOG_PI_BRANCH = 1e-4


def skew(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    x, y, z = omega
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def unskew(m: np.ndarray) -> np.ndarray:
    """Inverse of skew for an antisymmetric matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(theta: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of a rotation increment."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    k = skew(theta)
    if angle < _EXP_TAYLOR_EPS:
        # Second-order Taylor keeps the result finite and orthonormal
        # to machine precision for vanishing angles.
        return np.eye(3) + k + 0.5 * (k @ k)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * k + c * (k @ k)


def log_so3(rot: np.ndarray) -> np.ndarray:
    """Rotation-vector logarithm, inverse of exp_so3 for angles below pi."""
    trace = np.clip(np.trace(rot), -1.0, 3.0)
    cos_angle = np.clip(0.5 * (trace - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    vee = 0.5 * np.array([
        rot[2, 1] - rot[1, 2],
        rot[0, 2] - rot[2, 0],
        rot[1, 0] - rot[0, 1],
    ])
    if 3.0 - trace < _LOG_TAYLOR_EPS or angle < 1e-7:
        # Near identity sin(angle) ~ angle; series for angle/sin(angle).
        return vee * (1.0 + angle * angle / 6.0)
    if np.pi - angle < _LOG_PI_BRANCH:
        # Near pi the vee part cancels; recover the axis from R + I whose
        # columns are all parallel to it.
        m = rot + np.eye(3)
        col = m[:, int(np.argmax(np.diag(m)))]
        axis = col / np.linalg.norm(col)
        # Sign of vee still carries the (tiny) off-pi component; fall back
        # to a fixed canonical sign at exactly pi.
        if np.dot(axis, vee) < 0.0:
            axis = -axis
        elif np.allclose(vee, 0.0):
            idx = int(np.argmax(np.abs(axis)))
            if axis[idx] < 0.0:
                axis = -axis
        return angle * axis
    return vee * (angle / np.sin(angle))


def right_jacobian_so3(theta: np.ndarray) -> np.ndarray:
    """Right Jacobian of exp_so3: exp(theta + d) ~ exp(theta) exp(J_r d)."""
    angle = np.linalg.norm(theta)
    k = skew(theta)
    if angle < _EXP_TAYLOR_EPS:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) - c1 * k + c2 * (k @ k)


def right_jacobian_inv_so3(theta: np.ndarray) -> np.ndarray:
    """Inverse of right_jacobian_so3."""
    angle = np.linalg.norm(theta)
    k = skew(theta)
    if angle < _EXP_TAYLOR_EPS:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    a2 = angle * angle
    c = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * k + c * (k @ k)


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a (x) b, renormalized."""
    av, aw = a[:3], a[3]
    bv, bw = b[:3], b[3]
    v = aw * bv + bw * av + np.cross(av, bv)
    w = aw * bw - np.dot(av, bv)
    return quat_normalize(np.array([v[0], v[1], v[2], w]))


def quat_from_small_angle(theta: np.ndarray) -> np.ndarray:
    """First-order error quaternion (theta/2, 1), renormalized."""
    q = np.array([0.5 * theta[0], 0.5 * theta[1], 0.5 * theta[2], 1.0])
    return quat_normalize(q)


def quat_exp(theta: np.ndarray) -> np.ndarray:
    """Exact exponential quaternion of a rotation vector."""
    angle = np.linalg.norm(theta)
    if angle < _EXP_TAYLOR_EPS:
        return quat_from_small_angle(theta)
    axis = theta / angle
    half = 0.5 * angle
    s = np.sin(half)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(half)])


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Body-to-world rotation matrix of a unit quaternion."""
    x, y, z, w = q
    n = x * x + y * y + z * z + w * w
    s = 2.0 / n
    xx, yy, zz = x * x * s, y * y * s, z * z * s
    xy, xz, yz = x * y * s, x * z * s, y * z * s
    wx, wy, wz = w * x * s, w * y * s, w * z * s
    return np.array([
        [1.0 - (yy + zz), xy - wz, xz + wy],
        [xy + wz, 1.0 - (xx + zz), yz - wx],
        [xz - wy, yz + wx, 1.0 - (xx + yy)],
    ])


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix, canonicalized to w >= 0."""
    m = rot
    if m[2, 2] < 0.0:
        if m[0, 0] > m[1, 1]:
            t = 1.0 + m[0, 0] - m[1, 1] - m[2, 2]
            q = np.array([t, m[1, 0] + m[0, 1], m[0, 2] + m[2, 0], m[2, 1] - m[1, 2]])
        else:
            t = 1.0 - m[0, 0] + m[1, 1] - m[2, 2]
            q = np.array([m[1, 0] + m[0, 1], t, m[2, 1] + m[1, 2], m[0, 2] - m[2, 0]])
    else:
        if m[0, 0] < -m[1, 1]:
            t = 1.0 - m[0, 0] - m[1, 1] + m[2, 2]
            q = np.array([m[0, 2] + m[2, 0], m[2, 1] + m[1, 2], t, m[1, 0] - m[0, 1]])
        else:
            t = 1.0 + m[0, 0] + m[1, 1] + m[2, 2]
            q = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1], t])
    q = q * (0.5 / np.sqrt(t))
    if q[3] < 0.0:
        q = -q
    return quat_normalize(q)


def is_rotation(rot: np.ndarray, tol: float = 1e-9) -> bool:
    """Check orthonormality and unit determinant entrywise within tol."""
    if rot.shape != (3, 3):
        return False
    if not np.all(np.abs(rot @ rot.T - np.eye(3)) < tol):
        return False
    return abs(np.linalg.det(rot) - 1.0) < tol


def skew_batch(omega: np.ndarray) -> np.ndarray:
    """skew for an (N, 3) stack, returning (N, 3, 3)."""
    n = omega.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -omega[:, 2]
    out[:, 0, 2] = omega[:, 1]
    out[:, 1, 0] = omega[:, 2]
    out[:, 1, 2] = -omega[:, 0]
    out[:, 2, 0] = -omega[:, 1]
    out[:, 2, 1] = omega[:, 0]
    return out


def exp_so3_batch(theta: np.ndarray) -> np.ndarray:
    """exp_so3 for an (N, 3) stack, returning (N, 3, 3)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=1)
    k = skew_batch(theta)
    k2 = k @ k
    small = angle < _EXP_TAYLOR_EPS
    safe = np.where(small, 1.0, angle)
    s = np.where(small, 1.0, np.sin(safe) / safe)
    c = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    out = np.eye(3)[None] + s[:, None, None] * k + c[:, None, None] * k2
    if np.any(small):
        out[small] = np.eye(3)[None] + k[small] + 0.5 * k2[small]
    return out


def log_so3_batch(rot: np.ndarray) -> np.ndarray:
    """log_so3 for an (N, 3, 3) stack; near-pi rows fall back to the scalar path."""
    trace = np.clip(np.trace(rot, axis1=1, axis2=2), -1.0, 3.0)
    angle = np.arccos(np.clip(0.5 * (trace - 1.0), -1.0, 1.0))
    vee = 0.5 * np.stack([rot[:, 2, 1] - rot[:, 1, 2],
                          rot[:, 0, 2] - rot[:, 2, 0],
                          rot[:, 1, 0] - rot[:, 0, 1]], axis=1)
    small = angle < 1e-7
    near_pi = np.pi - angle < _LOG_PI_BRANCH
    safe = np.where(small | near_pi, 1.0, angle)
    scale = np.where(small, 1.0 + angle * angle / 6.0, safe / np.sin(safe))
    out = vee * scale[:, None]
    if np.any(near_pi):
        for i in np.flatnonzero(near_pi):
            out[i] = log_so3(rot[i])
    return out


def right_jacobian_inv_batch(theta: np.ndarray) -> np.ndarray:
    """right_jacobian_inv_so3 for an (N, 3) stack."""
    angle = np.linalg.norm(theta, axis=1)
    k = skew_batch(theta)
    k2 = k @ k
    small = angle < _EXP_TAYLOR_EPS
    safe = np.where(small, 1.0, angle)
    c = np.where(small, 1.0 / 12.0,
                 1.0 / (safe * safe)
                 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)))
    return np.eye(3)[None] + 0.5 * k + c[:, None, None] * k2


def right_jacobian_batch(theta: np.ndarray) -> np.ndarray:
    """right_jacobian_so3 for an (N, 3) stack."""
    angle = np.linalg.norm(theta, axis=1)
    k = skew_batch(theta)
    k2 = k @ k
    small = angle < _EXP_TAYLOR_EPS
    safe = np.where(small, 1.0, angle)
    a2 = safe * safe
    c1 = np.where(small, 0.5, (1.0 - np.cos(safe)) / a2)
    c2 = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / (a2 * safe))
    return np.eye(3)[None] - c1[:, None, None] * k + c2[:, None, None] * k2
