"""Continuous non-rigid warp field.

Per bone, a shared-trunk MLP conditioned on a per-(bone, frame) latent code,
a world point and the normalized time emits a raw 8-vector that normalizes
into a unit dual quaternion. Per-point rigid transforms come from blending
the per-bone transforms with dual quaternion blend skinning, weighted by
softmaxed negative Mahalanobis distances to the warped bones.

The final MLP layer starts at zero with a constant offset decoding to the
identity dual quaternion, so a fresh field warps nothing, exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    dq_normalize_bwd,
    dq_normalize_fwd,
    dqb_blend_bwd,
    dqb_blend_fwd,
    quat_to_rotmat,
    quat_to_rotmat_bwd,
    raw8_to_se3_bwd,
    raw8_to_se3_fwd,
)

IDENTITY_RAW = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# positional encoding


def encoding_dim(n_freq_x: int, n_freq_t: int) -> int:
    return 3 + 6 * n_freq_x + 1 + 2 * n_freq_t


def encode_inputs(x: np.ndarray, t: float, n_freq_x: int, n_freq_t: int) -> np.ndarray:
    """[x, sin/cos(2^k x) ..., t, sin/cos(2^k t) ...] for k = 0..F-1."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    parts = [x]
    for k in range(n_freq_x):
        f = float(2**k)
        parts.append(np.sin(f * x))
        parts.append(np.cos(f * x))
    parts.append(np.full((n, 1), float(t)))
    for k in range(n_freq_t):
        f = float(2**k)
        parts.append(np.full((n, 1), np.sin(f * t)))
        parts.append(np.full((n, 1), np.cos(f * t)))
    return np.concatenate(parts, axis=1)


def encode_inputs_bwd(
    x: np.ndarray, d_enc: np.ndarray, n_freq_x: int, n_freq_t: int
) -> np.ndarray:
    """Gradient of the encoding w.r.t. the spatial input only."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d_x = d_enc[:, :3].copy()
    col = 3
    for k in range(n_freq_x):
        f = float(2**k)
        d_x += f * np.cos(f * x) * d_enc[:, col : col + 3]
        col += 3
        d_x -= f * np.sin(f * x) * d_enc[:, col : col + 3]
        col += 3
    return d_x


def softplus(z):
    return np.logaddexp(0.0, z)


# ---------------------------------------------------------------------------
# warp providers


@dataclass
class WarpFieldMLP:
    """Shared-trunk MLP; the latent code is injected at the first layer."""

    n_freq_x: int
    n_freq_t: int
    latent_dim: int
    hidden: int
    n_hidden: int
    weights: dict

    @staticmethod
    def create(
        n_freq_x: int = 4,
        n_freq_t: int = 2,
        latent_dim: int = 128,
        hidden: int = 128,
        n_hidden: int = 5,
        seed: int = 0,
    ) -> "WarpFieldMLP":
        rng = np.random.default_rng(seed)
        e = encoding_dim(n_freq_x, n_freq_t)
        w = {}

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_in, n_out))

        w["w0"] = glorot(e, hidden)
        w["u0"] = glorot(latent_dim, hidden)
        w["b0"] = np.zeros(hidden)
        for i in range(1, n_hidden):
            w[f"w{i}"] = glorot(hidden, hidden)
            w[f"b{i}"] = np.zeros(hidden)
        # zero final layer: raw output equals the identity offset exactly
        w["wout"] = np.zeros((hidden, 8))
        w["bout"] = np.zeros(8)
        return WarpFieldMLP(n_freq_x, n_freq_t, latent_dim, hidden, n_hidden, w)

    def copy(self) -> "WarpFieldMLP":
        return WarpFieldMLP(
            self.n_freq_x,
            self.n_freq_t,
            self.latent_dim,
            self.hidden,
            self.n_hidden,
            {k: v.copy() for k, v in self.weights.items()},
        )

    # -- forward ------------------------------------------------------------

    def forward_pairs(self, x: np.ndarray, t: float, latents: np.ndarray):
        """All (point, bone) combinations: x (N, 3), latents (B, D) -> (N, B, 8)."""
        w = self.weights
        enc = encode_inputs(x, t, self.n_freq_x, self.n_freq_t)  # (N, E)
        pre = enc @ w["w0"]  # (N, H)
        lat = latents @ w["u0"]  # (B, H)
        h = softplus(pre[:, None, :] + lat[None, :, :] + w["b0"])  # (N, B, H)
        hs = [h]
        for i in range(1, self.n_hidden):
            h = softplus(h @ w[f"w{i}"] + w[f"b{i}"])
            hs.append(h)
        raw = h @ w["wout"] + w["bout"] + IDENTITY_RAW
        cache = (x, enc, latents, hs)
        return raw, cache

    def forward_rows(self, x: np.ndarray, t: float, latents: np.ndarray):
        """Row-aligned evaluation: x (B, 3) with latents (B, D) -> (B, 8)."""
        w = self.weights
        enc = encode_inputs(x, t, self.n_freq_x, self.n_freq_t)
        h = softplus(enc @ w["w0"] + latents @ w["u0"] + w["b0"])
        hs = [h]
        for i in range(1, self.n_hidden):
            h = softplus(h @ w[f"w{i}"] + w[f"b{i}"])
            hs.append(h)
        raw = h @ w["wout"] + w["bout"] + IDENTITY_RAW
        cache = (x, enc, latents, hs)
        return raw, cache

    # -- backward -----------------------------------------------------------

    def backward_pairs(self, cache, d_raw: np.ndarray, grads: dict, prefix="mlp_"):
        """Accumulate weight grads; returns (d_latents (B, D), d_x (N, 3))."""
        x, enc, latents, hs = cache
        w = self.weights
        h_last = hs[-1]
        grads[prefix + "wout"] += np.einsum("nbh,nbo->ho", h_last, d_raw)
        grads[prefix + "bout"] += d_raw.sum(axis=(0, 1))
        delta = d_raw @ w["wout"].T
        delta *= 1.0 - np.exp(-h_last)  # softplus' recovered from the output
        for i in range(self.n_hidden - 1, 0, -1):
            h_prev = hs[i - 1]
            grads[prefix + f"w{i}"] += np.einsum("nbh,nbo->ho", h_prev, delta)
            grads[prefix + f"b{i}"] += delta.sum(axis=(0, 1))
            delta = delta @ w[f"w{i}"].T
            delta *= 1.0 - np.exp(-h_prev)
        d_over_b = delta.sum(axis=1)  # (N, H)
        d_over_n = delta.sum(axis=0)  # (B, H)
        grads[prefix + "w0"] += enc.T @ d_over_b
        grads[prefix + "u0"] += latents.T @ d_over_n
        grads[prefix + "b0"] += delta.sum(axis=(0, 1))
        d_latents = d_over_n @ w["u0"].T
        d_enc = d_over_b @ w["w0"].T
        d_x = encode_inputs_bwd(x, d_enc, self.n_freq_x, self.n_freq_t)
        return d_latents, d_x

    def backward_rows(self, cache, d_raw: np.ndarray, grads: dict, prefix="mlp_"):
        x, enc, latents, hs = cache
        w = self.weights
        h_last = hs[-1]
        grads[prefix + "wout"] += h_last.T @ d_raw
        grads[prefix + "bout"] += d_raw.sum(axis=0)
        delta = d_raw @ w["wout"].T
        delta *= 1.0 - np.exp(-h_last)
        for i in range(self.n_hidden - 1, 0, -1):
            h_prev = hs[i - 1]
            grads[prefix + f"w{i}"] += h_prev.T @ delta
            grads[prefix + f"b{i}"] += delta.sum(axis=0)
            delta = delta @ w[f"w{i}"].T
            delta *= 1.0 - np.exp(-h_prev)
        grads[prefix + "w0"] += enc.T @ delta
        grads[prefix + "u0"] += latents.T @ delta
        grads[prefix + "b0"] += delta.sum(axis=0)
        d_latents = delta @ w["u0"].T
        d_enc = delta @ w["w0"].T
        d_x = encode_inputs_bwd(x, d_enc, self.n_freq_x, self.n_freq_t)
        return d_latents, d_x


@dataclass
class WarpTable:
    """Tabulated per-frame, per-bone rigid motions (ground-truth scenes).

    Spatially constant, linearly interpolated between frames, and not
    differentiable; fitting always uses WarpFieldMLP.
    """

    raw: np.ndarray  # (T, B, 8)

    def copy(self) -> "WarpTable":
        return WarpTable(self.raw.copy())

    def raw_at(self, t: float) -> np.ndarray:
        T = self.raw.shape[0]
        pos = np.clip(float(t), 0.0, 1.0) * max(T - 1, 1)
        i0 = int(np.floor(pos))
        i1 = min(i0 + 1, T - 1)
        frac = pos - i0
        return (1.0 - frac) * self.raw[i0] + frac * self.raw[i1]


# ---------------------------------------------------------------------------
# warp-field evaluation


@dataclass
class WarpEval:
    """Per-point rigid transforms plus the bone state at one time."""

    rot: np.ndarray  # (K, 3, 3)
    trans: np.ndarray  # (K, 3)
    weights: np.ndarray  # (K, B)
    bone_centers: np.ndarray  # (B, 3) warped
    bone_orients: np.ndarray  # (B, 3, 3) warped
    frame_idx: int
    cache: tuple | None = None


def identity_warp(n_points: int, bones) -> WarpEval:
    b = bones.count
    rot = np.broadcast_to(np.eye(3), (n_points, 3, 3)).copy()
    trans = np.zeros((n_points, 3))
    w = np.full((n_points, b), 1.0 / b)
    return WarpEval(
        rot,
        trans,
        w,
        bones.centers.copy(),
        bones.orientations(),
        frame_idx=0,
        cache=None,
    )


def skinning_weights(points: np.ndarray, bone_centers, bone_orients, precisions):
    """Softmax(-mahalanobis/2) over bones; returns (w, cache)."""
    delta = points[:, None, :] - bone_centers[None, :, :]  # (K, B, 3)
    y = np.einsum("bij,kbj->kbi", bone_orients, delta)
    m = np.einsum("bi,kbi->kb", precisions, y * y)
    logits = -0.5 * m
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    w = e / e.sum(axis=1, keepdims=True)
    return w, (delta, y, w)


def skinning_weights_bwd(cache, precisions, bone_orients, d_w):
    """Backward of skinning_weights.

    Returns (d_points, d_bone_centers, d_bone_orients, d_precisions).
    """
    delta, y, w = cache
    s = np.sum(d_w * w, axis=1, keepdims=True)
    d_logits = w * (d_w - s)
    d_m = -0.5 * d_logits  # (K, B)
    d_y = 2.0 * d_m[:, :, None] * precisions[None, :, :] * y
    d_prec = np.einsum("kb,kbi->bi", d_m, y * y)
    d_delta = np.einsum("bij,kbi->kbj", bone_orients, d_y)
    d_orients = np.einsum("kbi,kbj->bij", d_y, delta)
    d_points = d_delta.sum(axis=1)
    d_centers = -d_delta.sum(axis=0)
    return d_points, d_centers, d_orients, d_prec


def evaluate_warp(
    bones, warp, points: np.ndarray, t: float, frame_idx: int, need_cache=False
) -> WarpEval:
    """Warp-field evaluation at surfel centers for one time.

    Per-bone transforms are queried at the bone's own static center for the
    warped bone state, and at every point for the blended per-point warp.
    """
    K = points.shape[0]
    B = bones.count
    v_static = bones.orientations()
    precisions = bones.precisions()

    is_mlp = isinstance(warp, WarpFieldMLP)
    if is_mlp:
        latents = bones.latents[:, frame_idx, :]
        raw_rows, rows_cache = warp.forward_rows(bones.centers, t, latents)
        raw_pairs, pairs_cache = warp.forward_pairs(points, t, latents)
    else:
        raw_b = warp.raw_at(t)  # (B, 8)
        raw_rows, rows_cache = raw_b, None
        raw_pairs, pairs_cache = np.broadcast_to(raw_b, (K, B, 8)).copy(), None

    bone_rot, bone_t, rows_dec_cache = raw8_to_se3_fwd(raw_rows)
    c_t = np.einsum("bij,bj->bi", bone_rot, bones.centers) + bone_t
    v_t = bone_rot @ v_static

    w, skin_cache = skinning_weights(points, c_t, v_t, precisions)

    dq_real, dq_dual, norm_cache = dq_normalize_fwd(raw_pairs)
    rot, trans, blend_cache = dqb_blend_fwd(w, dq_real, dq_dual)

    cache = None
    if need_cache:
        cache = (
            points,
            v_static,
            precisions,
            rows_cache,
            pairs_cache,
            rows_dec_cache,
            bone_rot,
            skin_cache,
            norm_cache,
            blend_cache,
            is_mlp,
        )
    return WarpEval(rot, trans, w, c_t, v_t, frame_idx, cache)


def warp_backward(we: WarpEval, warp, bones, d_rot, d_trans, grads: dict):
    """Backward through the whole warp stage.

    Accumulates bone/latent/MLP gradients into `grads` and returns the
    gradient w.r.t. the query points (the surfel static centers).
    """
    if we.cache is None:
        return np.zeros((we.rot.shape[0], 3))
    (
        points,
        v_static,
        precisions,
        rows_cache,
        pairs_cache,
        rows_dec_cache,
        bone_rot,
        skin_cache,
        norm_cache,
        blend_cache,
        is_mlp,
    ) = we.cache
    if not is_mlp:
        raise NotImplementedError("tabulated warps are not differentiable")

    d_w, d_real, d_dual = dqb_blend_bwd(blend_cache, d_rot, d_trans)
    d_raw_pairs = dq_normalize_bwd(norm_cache, d_real, d_dual)
    d_latents_p, d_points = warp.backward_pairs(pairs_cache, d_raw_pairs, grads)

    d_pts_skin, d_ct, d_vt, d_prec = skinning_weights_bwd(
        skin_cache, precisions, we.bone_orients, d_w
    )
    d_points = d_points + d_pts_skin
    grads["bone_log_prec"] += precisions * d_prec

    # bone state: c_t = R_b c* + t_b ; V_t = R_b V*
    d_bone_rot = d_ct[:, :, None] * bones.centers[:, None, :]
    d_bone_rot += d_vt @ np.swapaxes(v_static, -1, -2)
    d_bone_t = d_ct
    grads["bone_centers"] += np.einsum("bij,bi->bj", bone_rot, d_ct)
    d_vstatic = np.einsum("bij,bik->bjk", bone_rot, d_vt)
    grads["bone_quats"] += quat_to_rotmat_bwd(bones.quats, d_vstatic)

    d_raw_rows = raw8_to_se3_bwd(rows_dec_cache, d_bone_rot, d_bone_t)
    d_latents_r, d_bc = warp.backward_rows(rows_cache, d_raw_rows, grads)
    grads["bone_centers"] += d_bc
    grads["bone_latents"][:, we.frame_idx, :] += d_latents_p + d_latents_r
    return d_points


# ---------------------------------------------------------------------------
# applying a warp to surfels


def warp_surfels_fwd(surfels, rot, trans, branch: str, scale_floor: float):
    """Warped primitives for one branch.

    base:    center = R~ p + T~, rotation = R~ R*, scales = (s_u, s_v, 0)
    refined: same center/warp, rotation = R~ (dR R*), scales clamped
             elementwise at scale_floor with a possibly nonzero third axis.
    """
    R_static = quat_to_rotmat(surfels.quats)
    s2 = np.exp(surfels.log_scales)
    centers = np.einsum("kij,kj->ki", rot, surfels.centers) + trans
    if branch == "base":
        R_eff = R_static
        scales = np.concatenate([s2, np.zeros((surfels.count, 1))], axis=1)
        clamp_mask = None
        dR = None
    elif branch == "refined":
        dR = quat_to_rotmat(surfels.refine_quats)
        R_eff = dR @ R_static
        raw_scales = (
            np.concatenate([s2, np.zeros((surfels.count, 1))], axis=1)
            + surfels.refine_dscales
        )
        scales = np.maximum(raw_scales, scale_floor)
        clamp_mask = (raw_scales > scale_floor).astype(np.float64)
    else:
        raise ValueError(f"unknown branch {branch!r}")
    rotations = rot @ R_eff
    cache = (surfels, rot, R_static, R_eff, dR, s2, clamp_mask, branch)
    return centers, rotations, scales, cache


def warp_surfels_bwd(cache, d_centers, d_rotations, d_scales, grads: dict):
    """Backward of warp_surfels_fwd.

    Accumulates surfel-parameter gradients and returns (d_rot, d_trans) for
    the warp stage.
    """
    surfels, rot, R_static, R_eff, dR, s2, clamp_mask, branch = cache

    d_trans = d_centers
    d_rot = d_centers[:, :, None] * surfels.centers[:, None, :]
    grads["surfel_centers"] += np.einsum("kij,ki->kj", rot, d_centers)

    # rotations = rot @ R_eff
    d_rot += d_rotations @ np.swapaxes(R_eff, -1, -2)
    d_Reff = np.swapaxes(rot, -1, -2) @ d_rotations
    if branch == "base":
        grads["surfel_quats"] += quat_to_rotmat_bwd(surfels.quats, d_Reff)
        d_s2 = d_scales[:, :2]
    else:
        # R_eff = dR @ R_static
        grads["surfel_refine_quats"] += quat_to_rotmat_bwd(
            surfels.refine_quats, d_Reff @ np.swapaxes(R_static, -1, -2)
        )
        grads["surfel_quats"] += quat_to_rotmat_bwd(
            surfels.quats, np.swapaxes(dR, -1, -2) @ d_Reff
        )
        d_raw_scales = d_scales * clamp_mask
        grads["surfel_refine_dscales"] += d_raw_scales
        d_s2 = d_raw_scales[:, :2]
    grads["surfel_log_scales"] += s2 * d_s2
    return d_rot, d_trans
