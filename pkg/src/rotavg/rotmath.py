"""Rotation arithmetic on quaternions, matrices, rotation vectors, and MRPs.

Conventions used throughout the package:

- Quaternions are ndarrays of shape (..., 4) ordered [w, x, y, z], i.e.
  scalar part first.  ``w`` is the real part (rho), ``xyz`` the imaginary
  vector part (nu).  ``q`` and ``-q`` encode the same rotation; no global
  sign is enforced (``matrix_to_quat`` returns the w >= 0 antipode, the
  other is reachable by negation).
- Rotation matrices are (..., 3, 3) arrays acting on column vectors.
- Rotation vectors (tangent vectors) are (..., 3) arrays whose norm is the
  rotation angle in radians; ``log_so3`` always returns norms in [0, pi].
- Modified Rodrigues Parameters (MRP) are (..., 3) arrays obtained by
  stereographic projection of the quaternion 3-sphere from its south pole
  [-1, 0, 0, 0]: psi = nu / (1 + rho).

All functions are pure, broadcast over leading dimensions, and compute in
float64.
"""

from __future__ import annotations

import numpy as np

# Rotations with rho at or below this offset from the south pole cannot be
# stereographically projected.
SOUTH_POLE_TOL = 1e-9

_EXP_TAYLOR_EPS = 1e-8  # small-angle switch for exp_so3

# Near-pi switch for log_so3.  arccos of a rounded trace cannot resolve
# angles closer to pi than ~1.5e-8, and the antisymmetric-part formula
# loses accuracy as 1/sin^2; the symmetric-part extraction is accurate to
# ~2e-8 across this whole window.
_LOG_PI_EPS = 1e-4


class SouthPoleSingularity(ValueError):
    """Raised when projecting a quaternion too close to [-1, 0, 0, 0]."""


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a * b, renormalized to unit length."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=float)
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle
    out = np.empty(np.broadcast_shapes(axis.shape[:-1], angle.shape) + (4,))
    out[..., 0] = np.cos(half)
    out[..., 1:] = np.sin(half)[..., None] * axis
    return out


def quat_to_matrix(q) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix to unit quaternion, canonicalized to w >= 0.

    Shepperd's method: branch on the largest of the trace and the diagonal
    entries so the divisor is always well away from zero.
    """
    m = np.asarray(m, dtype=float)
    m00, m11, m22 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    tr = m00 + m11 + m22

    # Pick the pivot with the largest of trace / diagonal entries.
    cand = np.stack([tr, m00, m11, m22], axis=-1)
    pivot = np.asarray(np.argmax(cand, axis=-1))

    # w pivot
    s = np.sqrt(np.maximum(1.0 + tr, 0.0)) * 2.0
    s = np.where(s == 0.0, 1.0, s)
    qw = np.stack(
        [
            0.25 * s,
            (m[..., 2, 1] - m[..., 1, 2]) / s,
            (m[..., 0, 2] - m[..., 2, 0]) / s,
            (m[..., 1, 0] - m[..., 0, 1]) / s,
        ],
        axis=-1,
    )
    # x pivot
    s = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
    s = np.where(s == 0.0, 1.0, s)
    qx = np.stack(
        [
            (m[..., 2, 1] - m[..., 1, 2]) / s,
            0.25 * s,
            (m[..., 0, 1] + m[..., 1, 0]) / s,
            (m[..., 0, 2] + m[..., 2, 0]) / s,
        ],
        axis=-1,
    )
    # y pivot
    s = np.sqrt(np.maximum(1.0 - m00 + m11 - m22, 0.0)) * 2.0
    s = np.where(s == 0.0, 1.0, s)
    qy = np.stack(
        [
            (m[..., 0, 2] - m[..., 2, 0]) / s,
            (m[..., 0, 1] + m[..., 1, 0]) / s,
            0.25 * s,
            (m[..., 1, 2] + m[..., 2, 1]) / s,
        ],
        axis=-1,
    )
    # z pivot
    s = np.sqrt(np.maximum(1.0 - m00 - m11 + m22, 0.0)) * 2.0
    s = np.where(s == 0.0, 1.0, s)
    qz = np.stack(
        [
            (m[..., 1, 0] - m[..., 0, 1]) / s,
            (m[..., 0, 2] + m[..., 2, 0]) / s,
            (m[..., 1, 2] + m[..., 2, 1]) / s,
            0.25 * s,
        ],
        axis=-1,
    )

    choices = np.stack([qw, qx, qy, qz], axis=0)
    q = np.take_along_axis(
        choices, pivot[None, ..., None], axis=0
    )[0]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return q * np.where(q[..., :1] < 0.0, -1.0, 1.0)


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (cross-product operator)."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    return np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(v.shape[:-1] + (3, 3))


def vee(m) -> np.ndarray:
    """Inverse of `hat` on the antisymmetric part of a matrix."""
    m = np.asarray(m, dtype=float)
    return np.stack(
        [m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1
    )


def exp_so3(v) -> np.ndarray:
    """Rodrigues formula: rotation vector to rotation matrix."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    theta2 = x * x + y * y + z * z
    theta = np.sqrt(theta2)
    small = theta < _EXP_TAYLOR_EPS
    # sin(t)/t and (1-cos(t))/t^2 with second-order Taylor fallback
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))

    bxy, byz, bxz = b * x * y, b * y * z, b * x * z
    ax, ay, az = a * x, a * y, a * z
    m = np.empty(v.shape[:-1] + (3, 3), dtype=float)
    m[..., 0, 0] = 1.0 - b * (y * y + z * z)
    m[..., 0, 1] = bxy - az
    m[..., 0, 2] = bxz + ay
    m[..., 1, 0] = bxy + az
    m[..., 1, 1] = 1.0 - b * (x * x + z * z)
    m[..., 1, 2] = byz - ax
    m[..., 2, 0] = bxz - ay
    m[..., 2, 1] = byz + ax
    m[..., 2, 2] = 1.0 - b * (x * x + y * y)
    return m


def rotation_angle(m) -> np.ndarray:
    """Rotation angle in [0, pi] of a rotation matrix (radians)."""
    m = np.asarray(m, dtype=float)
    tr = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def log_so3(m) -> np.ndarray:
    """Principal matrix logarithm of SO(3), norm in [0, pi].

    The generic branch uses the antisymmetric part; near pi the axis is
    recovered from the symmetric part to avoid catastrophic cancellation,
    and near zero a Taylor expansion of theta/sin(theta) is used.
    """
    m = np.asarray(m, dtype=float)
    theta = rotation_angle(m)
    # antisymmetric part, = sin(theta) * axis
    a = np.empty(m.shape[:-2] + (3,), dtype=float)
    a[..., 0] = 0.5 * (m[..., 2, 1] - m[..., 1, 2])
    a[..., 1] = 0.5 * (m[..., 0, 2] - m[..., 2, 0])
    a[..., 2] = 0.5 * (m[..., 1, 0] - m[..., 0, 1])

    small = theta < 1e-4
    near_pi = theta > np.pi - _LOG_PI_EPS
    theta2 = theta * theta

    sin_theta = np.sin(theta)
    safe_sin = np.where(sin_theta < 1e-12, 1.0, sin_theta)
    factor = np.where(
        small,
        1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0,
        theta / safe_sin,
    )
    out = a * factor[..., None]

    if np.any(near_pi):
        flat = out.reshape(-1, 3)
        mats = m.reshape(-1, 3, 3)
        angs = theta.reshape(-1)
        asym = a.reshape(-1, 3)
        for idx in np.nonzero(near_pi.reshape(-1))[0]:
            flat[idx] = _log_near_pi(mats[idx], angs[idx], asym[idx])
        out = flat.reshape(out.shape)
    return out


def _log_near_pi(m, theta, asym):
    # outer(w, w) = (S - cos(theta) I) / (1 - cos(theta)) for S the symmetric part
    c = np.cos(theta)
    ww = ((m + m.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(ww)))
    w = ww[:, k] / np.sqrt(max(ww[k, k], 1e-300))
    w = w / np.linalg.norm(w)
    if np.dot(asym, w) < 0.0:
        w = -w
    elif np.dot(asym, w) == 0.0 and w[np.argmax(np.abs(w))] < 0.0:
        # exactly pi: either sign is valid, pick a deterministic one
        w = -w
    return theta * w


def geodesic_distance(a, b) -> np.ndarray:
    """Angle in [0, pi] of the relative rotation a^T b (radians)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.linalg.norm(log_so3(np.swapaxes(a, -1, -2) @ b), axis=-1)


def mrp_project(q) -> np.ndarray:
    """Stereographic projection psi = nu / (1 + rho).

    Raises SouthPoleSingularity if any input quaternion has
    rho <= -1 + SOUTH_POLE_TOL; the caller should project the other
    antipode instead.
    """
    q = np.asarray(q, dtype=float)
    w = q[..., 0]
    if np.any(w <= -1.0 + SOUTH_POLE_TOL):
        raise SouthPoleSingularity(
            "quaternion too close to the south pole [-1, 0, 0, 0]; "
            "project the negated antipode instead"
        )
    return q[..., 1:] / (1.0 + w[..., None])


def mrp_unproject(psi) -> np.ndarray:
    """Inverse stereographic projection; exact unit quaternion."""
    psi = np.asarray(psi, dtype=float)
    n2 = np.sum(psi * psi, axis=-1)
    out = np.empty(psi.shape[:-1] + (4,), dtype=float)
    denom = 1.0 + n2
    out[..., 0] = (1.0 - n2) / denom
    out[..., 1:] = 2.0 * psi / denom[..., None]
    return out


def sample_uniform_rotation(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Haar-uniform unit quaternion(s): normalized 4D Gaussian draws.

    Returns shape (4,) when n is None, else (n, 4).  Deterministic given
    the generator state.
    """
    size = (4,) if n is None else (n, 4)
    g = rng.standard_normal(size)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    # a zero draw has probability zero but would poison the normalization
    while np.any(norm == 0.0):
        bad = np.nonzero(norm[..., 0] == 0.0)
        g[bad] = rng.standard_normal(g[bad].shape)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norm
