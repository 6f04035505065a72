"""Quaternion, dual-quaternion and SE(3) algebra.

Conventions used throughout the package:

- quaternions are numpy arrays shaped (..., 4), component order (w, x, y, z)
- rotation matrices are (..., 3, 3) and act on column vectors
- a dual quaternion is a pair of (..., 4) arrays (real, dual); a unit dual
  quaternion has |real| = 1 and dot(real, dual) = 0, and its dual part
  carries half the translation: dual = 0.5 * (0, t) * real
- everything is float64; all functions broadcast over leading dimensions

Functions with a ``_bwd`` twin are differentiable stages of the warp
pipeline: the forward returns a cache tuple and the backward consumes it
together with upstream gradients, returning gradients w.r.t. the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput

REAL_NORM_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# plain quaternions


def quat_normalize(q: np.ndarray, eps: float = REAL_NORM_FLOOR) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(n, eps)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b (no normalization)."""
    w1, x1, y1, z1 = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion; normalizes defensively."""
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
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


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation matrix, canonical sign w >= 0.

    Branches on the largest of (trace, diagonal entries) per element, so it
    stays stable for rotations near pi.
    """
    m = np.asarray(m, dtype=np.float64)
    t = np.einsum("...ii->...i", m)  # diagonal (..., 3)
    trace = t.sum(axis=-1)

    q = np.empty(m.shape[:-2] + (4,), dtype=np.float64)

    # candidate 0: trace-dominant
    s0 = np.sqrt(np.maximum(trace + 1.0, 0.0)) * 2.0
    c0 = np.stack(
        [
            0.25 * s0,
            (m[..., 2, 1] - m[..., 1, 2]) / np.maximum(s0, REAL_NORM_FLOOR),
            (m[..., 0, 2] - m[..., 2, 0]) / np.maximum(s0, REAL_NORM_FLOOR),
            (m[..., 1, 0] - m[..., 0, 1]) / np.maximum(s0, REAL_NORM_FLOOR),
        ],
        axis=-1,
    )
    # candidate i (i = 1..3): diagonal i-1 dominant
    cands = [c0]
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        si = np.sqrt(np.maximum(1.0 + t[..., i] - t[..., j] - t[..., k], 0.0)) * 2.0
        d = np.maximum(si, REAL_NORM_FLOOR)
        ci = np.empty_like(c0)
        ci[..., 0] = (m[..., k, j] - m[..., j, k]) / d
        ci[..., 1 + i] = 0.25 * si
        ci[..., 1 + j] = (m[..., j, i] + m[..., i, j]) / d
        ci[..., 1 + k] = (m[..., k, i] + m[..., i, k]) / d
        cands.append(ci)

    scores = np.stack([trace, t[..., 0], t[..., 1], t[..., 2]], axis=-1)
    best = np.argmax(scores, axis=-1)
    stacked = np.stack(cands, axis=0)
    q = np.take_along_axis(
        stacked, best[None, ..., None].repeat(4, axis=-1), axis=0
    )[0]
    q = quat_normalize(q)
    # canonical sign
    flip = q[..., 0:1] < 0.0
    return np.where(flip, -q, q)


def _rotmat_jacobian_contract(q: np.ndarray, d_m: np.ndarray) -> np.ndarray:
    """Contract dL/dR with dR/dq for a unit quaternion q; returns dL/dq."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = d_m

    def e(i, j):
        return g[..., i, j]

    # each block is sum(dL/dR * dR/dq_c) with the dR/dq_c tables below
    dw = 2.0 * (
        -z * e(0, 1) + y * e(0, 2) + z * e(1, 0) - x * e(1, 2) - y * e(2, 0) + x * e(2, 1)
    )
    dx = 2.0 * (
        y * e(0, 1) + z * e(0, 2) + y * e(1, 0) - 2.0 * x * e(1, 1) - w * e(1, 2)
        + z * e(2, 0) + w * e(2, 1) - 2.0 * x * e(2, 2)
    )
    dy = 2.0 * (
        -2.0 * y * e(0, 0) + x * e(0, 1) + w * e(0, 2) + x * e(1, 0) + z * e(1, 2)
        - w * e(2, 0) + z * e(2, 1) - 2.0 * y * e(2, 2)
    )
    dz = 2.0 * (
        -2.0 * z * e(0, 0) - w * e(0, 1) + x * e(0, 2) + w * e(1, 0)
        - 2.0 * z * e(1, 1) + y * e(1, 2) + x * e(2, 0) + y * e(2, 1)
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def quat_to_rotmat_bwd(q_raw: np.ndarray, d_m: np.ndarray) -> np.ndarray:
    """Gradient of quat_to_rotmat w.r.t. the (possibly unnormalized) input."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    n = np.maximum(n, REAL_NORM_FLOOR)
    q = q_raw / n
    d_q = _rotmat_jacobian_contract(q, d_m)
    # through the normalization: (I - q q^T) / n
    return (d_q - q * np.sum(d_q * q, axis=-1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# SE(3) / dual quaternion carriers


@dataclass
class SE3Transform:
    """Rigid transform y = rotation @ x + translation (batched)."""

    rotation: np.ndarray  # (..., 3, 3)
    translation: np.ndarray  # (..., 3)

    @staticmethod
    def identity(shape: tuple = ()) -> "SE3Transform":
        r = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
        t = np.zeros(shape + (3,))
        return SE3Transform(r, t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (
            np.einsum("...ij,...j->...i", self.rotation, points) + self.translation
        )


@dataclass
class DualQuaternion:
    real: np.ndarray  # (..., 4)
    dual: np.ndarray  # (..., 4)

    @staticmethod
    def identity(shape: tuple = ()) -> "DualQuaternion":
        r = np.zeros(shape + (4,))
        r[..., 0] = 1.0
        return DualQuaternion(r, np.zeros(shape + (4,)))


def se3_to_dualquat(transform: SE3Transform) -> DualQuaternion:
    """The quaternion process: SE(3) -> unit dual quaternion."""
    real = rotmat_to_quat(transform.rotation)
    t = np.asarray(transform.translation, dtype=np.float64)
    tq = np.concatenate([np.zeros_like(t[..., :1]), t], axis=-1)
    dual = 0.5 * quat_multiply(tq, real)
    return DualQuaternion(real, dual)


def dualquat_normalize(real: np.ndarray, dual: np.ndarray):
    """Unit-normalize: real to unit norm, dual projected orthogonal to real.

    Raises DegenerateInput if any real part has norm below the floor.
    """
    real = np.asarray(real, dtype=np.float64)
    dual = np.asarray(dual, dtype=np.float64)
    n = np.linalg.norm(real, axis=-1, keepdims=True)
    if np.any(n < REAL_NORM_FLOOR):
        raise DegenerateInput(
            f"dual quaternion real part collapsed (|real| min {n.min():.3e})"
        )
    r = real / n
    e = dual / n
    e = e - np.sum(e * r, axis=-1, keepdims=True) * r
    return r, e


def dualquat_to_se3(d: DualQuaternion) -> SE3Transform:
    """The inverse quaternion process: normalize then decode to SE(3)."""
    r, e = dualquat_normalize(d.real, d.dual)
    rot = quat_to_rotmat(r)
    t = 2.0 * quat_multiply(e, quat_conjugate(r))[..., 1:]
    return SE3Transform(rot, t)


def dq_normalize_fwd(raw: np.ndarray):
    """Normalize raw (..., 8) to a unit dual quaternion; returns (r, e, cache)."""
    raw = np.asarray(raw, dtype=np.float64)
    real = raw[..., :4]
    dual = raw[..., 4:]
    n = np.linalg.norm(real, axis=-1, keepdims=True)
    if np.any(n < REAL_NORM_FLOOR):
        raise DegenerateInput("raw dual quaternion real part has ~zero norm")
    r = real / n
    e1 = dual / n
    s = np.sum(e1 * r, axis=-1, keepdims=True)
    e = e1 - s * r
    return r, e, (r, e1, s, n)


def dq_normalize_bwd(cache, d_r: np.ndarray, d_e: np.ndarray) -> np.ndarray:
    """Backward of dq_normalize_fwd; returns gradient on the raw 8-vector."""
    r, e1, s, n = cache
    g_e1 = d_e - np.sum(d_e * r, axis=-1, keepdims=True) * r
    d_r_tot = d_r - np.sum(d_e * r, axis=-1, keepdims=True) * e1 - s * d_e
    g_dual = g_e1 / n
    g_n = -np.sum(g_e1 * e1, axis=-1, keepdims=True) / n
    g_real = (d_r_tot - np.sum(d_r_tot * r, axis=-1, keepdims=True) * r) / n
    g_real = g_real + g_n * r
    return np.concatenate([g_real, g_dual], axis=-1)


def raw8_to_se3_fwd(raw: np.ndarray):
    """Decode raw (..., 8) = (real, dual) into SE(3); returns (R, t, cache).

    This is the differentiable form of dualquat_to_se3 used for MLP outputs.
    """
    raw = np.asarray(raw, dtype=np.float64)
    real = raw[..., :4]
    dual = raw[..., 4:]
    n = np.linalg.norm(real, axis=-1, keepdims=True)
    if np.any(n < REAL_NORM_FLOOR):
        raise DegenerateInput("raw dual quaternion real part has ~zero norm")
    r = real / n
    e1 = dual / n
    s = np.sum(e1 * r, axis=-1, keepdims=True)
    e = e1 - s * r
    rot = quat_to_rotmat(r)
    t = 2.0 * quat_multiply(e, quat_conjugate(r))[..., 1:]
    cache = (r, e1, e, s, n)
    return rot, t, cache


def raw8_to_se3_bwd(cache, d_rot: np.ndarray, d_t: np.ndarray) -> np.ndarray:
    """Backward of raw8_to_se3_fwd; returns gradient on the raw 8-vector."""
    r, e1, e, s, n = cache
    rw, rv = r[..., 0:1], r[..., 1:]
    ev_w, ev = e[..., 0:1], e[..., 1:]

    # t = 2 (-e_w r_v + r_w e_v - e_v x r_v); bilinear in (e, r)
    d_e = np.empty_like(e)
    d_e[..., 0] = -2.0 * np.sum(d_t * rv, axis=-1)
    d_e[..., 1:] = 2.0 * (rw * d_t + np.cross(d_t, rv))

    d_r = np.empty_like(r)
    d_r[..., 0] = 2.0 * np.sum(d_t * ev, axis=-1)
    d_r[..., 1:] = 2.0 * (-ev_w * d_t - np.cross(d_t, ev))

    # rotation path (includes a redundant unit-normalization projection)
    d_r = d_r + quat_to_rotmat_bwd(r, d_rot)

    # e = e1 - s r, s = e1 . r
    g_e1 = d_e - np.sum(d_e * r, axis=-1, keepdims=True) * r
    d_r = d_r - np.sum(d_e * r, axis=-1, keepdims=True) * e1 - s * d_e

    # e1 = dual / n
    g_dual = g_e1 / n
    g_n_from_e1 = -np.sum(g_e1 * e1, axis=-1, keepdims=True) / n

    # r = real / n
    g_real = (d_r - np.sum(d_r * r, axis=-1, keepdims=True) * r) / n
    g_n_from_r = 0.0  # handled by the projection above
    g_real = g_real + (g_n_from_e1 + g_n_from_r) * r

    return np.concatenate([g_real, g_dual], axis=-1)


# ---------------------------------------------------------------------------
# dual quaternion blend skinning


def _dqb_signs(weights: np.ndarray, real: np.ndarray) -> np.ndarray:
    """Antipodality fix: flip every bone into the hemisphere of the
    highest-weight bone before summation."""
    pivot = np.argmax(weights, axis=-1)
    pivot_real = np.take_along_axis(
        real, pivot[..., None, None].repeat(4, axis=-1), axis=-2
    )
    dots = np.sum(real * pivot_real, axis=-1)
    return np.where(dots < 0.0, -1.0, 1.0)


def dqb_blend_fwd(weights: np.ndarray, real: np.ndarray, dual: np.ndarray):
    """Dual quaternion blend skinning.

    weights: (..., B) convex weights; real/dual: (..., B, 4) unit dual
    quaternions. Returns (rotation, translation, cache).
    """
    weights = np.asarray(weights, dtype=np.float64)
    signs = _dqb_signs(weights, np.asarray(real, dtype=np.float64))
    ws = weights * signs
    q_r = np.sum(ws[..., None] * real, axis=-2)
    q_d = np.sum(ws[..., None] * dual, axis=-2)
    raw = np.concatenate([q_r, q_d], axis=-1)
    rot, t, dec_cache = raw8_to_se3_fwd(raw)
    cache = (signs, weights, real, dual, dec_cache)
    return rot, t, cache


def dqb_blend_bwd(cache, d_rot: np.ndarray, d_t: np.ndarray):
    """Backward of dqb_blend_fwd: gradients on (weights, real, dual)."""
    signs, weights, real, dual, dec_cache = cache
    d_raw = raw8_to_se3_bwd(dec_cache, d_rot, d_t)
    g_qr = d_raw[..., :4]
    g_qd = d_raw[..., 4:]
    ws = (weights * signs)[..., None]
    d_real = ws * g_qr[..., None, :]
    d_dual = ws * g_qd[..., None, :]
    d_w = signs * (
        np.sum(real * g_qr[..., None, :], axis=-1)
        + np.sum(dual * g_qd[..., None, :], axis=-1)
    )
    return d_w, d_real, d_dual


def dqb_blend(weights: np.ndarray, transforms: DualQuaternion) -> SE3Transform:
    """Contract-level DQB: weights (..., B), transforms batched (..., B, 4)."""
    rot, t, _ = dqb_blend_fwd(weights, transforms.real, transforms.dual)
    return SE3Transform(rot, t)
