"""Differentiable software rasterizer for warped Gaussian surfels.

Per frame: warp every surfel rigidly by its blended per-point transform,
intersect pixel rays with the warped primitives (exact ray-plane hits for
flat surfels, the max-density point along the ray once a refined third axis
leaves the flat regime), filter with a screen-space low-pass Gaussian, sort
per pixel by camera depth and alpha-composite front to back.

Every stage has a hand-derived backward; `rasterize_backward` returns
gradients w.r.t. the warped primitives, which `warp_surfels_bwd` and
`warp_backward` then chain to the raw parameters.

Conventions: camera depth is the camera-space z of the hit point (ray
directions keep z_cam = 1, so the ray parameter is the depth), a primitive
participates only if its warped center has depth > Z_NEAR, and intersections
behind the camera or with filtered weight below the cutoff produce no record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .model import ModelState, sigmoid
from .warp import WarpEval, warp_surfels_fwd

Z_NEAR = 1e-6
TAU_MIN = 1e-9
DENOM_EPS = 1e-9
A_MAX = 1.0 - 1e-12  # keeps the compositing recurrence away from 1/0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W) alpha-normalized mean camera depth
    rendered_normal: np.ndarray  # (H, W, 3) camera-space, unit where alpha>thr
    surface_normal: np.ndarray  # (H, W, 3) from depth finite differences


# ---------------------------------------------------------------------------
# spherical harmonics colors


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_dir_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """(..., n_sh, 3) derivative of each basis value w.r.t. the direction."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if degree >= 1:
        rows += [
            np.stack([zero, -SH_C1 * one, zero], axis=-1),
            np.stack([zero, zero, SH_C1 * one], axis=-1),
            np.stack([-SH_C1 * one, zero, zero], axis=-1),
        ]
    if degree >= 2:
        rows += [
            np.stack([SH_C2[0] * y, SH_C2[0] * x, zero], axis=-1),
            np.stack([zero, SH_C2[1] * z, SH_C2[1] * y], axis=-1),
            np.stack([-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z], axis=-1),
            np.stack([SH_C2[3] * z, zero, SH_C2[3] * x], axis=-1),
            np.stack([2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero], axis=-1),
        ]
    return np.stack(rows, axis=-2)


def sh_colors_fwd(sh: np.ndarray, view_dirs: np.ndarray, degree: int):
    """View-dependent color per surfel: clip(0.5 + basis . sh, 0, 1)."""
    basis = sh_basis(view_dirs, degree)  # (K, S)
    raw = 0.5 + np.einsum("ks,kcs->kc", basis, sh)
    colors = np.clip(raw, 0.0, 1.0)
    inside = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
    return colors, (basis, sh, view_dirs, inside, degree)


def sh_colors_bwd(cache, d_colors: np.ndarray):
    basis, sh, view_dirs, inside, degree = cache
    d_raw = d_colors * inside
    d_sh = d_raw[:, :, None] * basis[:, None, :]
    bg = sh_basis_dir_grad(view_dirs, degree)  # (K, S, 3)
    d_basis = np.einsum("kc,kcs->ks", d_raw, sh)
    d_dirs = np.einsum("ks,ksd->kd", d_basis, bg)
    return d_sh, d_dirs


# ---------------------------------------------------------------------------
# contract-level single-intersection operations


def gaussian_weight(u) -> float:
    u = np.asarray(u, dtype=np.float64)
    return float(np.exp(-0.5 * np.sum(u * u)))


def low_pass(g_object: float, delta_px, sigma: float = 0.7) -> float:
    d = np.asarray(delta_px, dtype=np.float64)
    g_screen = np.exp(-np.sum(d * d) / (2.0 * sigma * sigma))
    return float(np.maximum(g_object, g_screen))


@dataclass
class IntersectionRecord:
    surfel: int
    u: np.ndarray  # (2,) local tangent coordinates
    depth: float  # camera-space depth, > 0
    weight: float  # filtered Gaussian weight in (0, 1]
    blend_weight: float  # set by compositing
    normal: np.ndarray  # unit normal oriented toward the camera


def ray_surfel_intersect(
    origin,
    direction,
    center,
    rotation,
    scales,
    pixel_offset=None,
    lowpass_sigma: float = 0.7,
    cutoff: float = 1e-4,
    scale_floor: float = 1e-6,
    surfel: int = 0,
):
    """Intersect one ray with one warped primitive; None when it misses.

    `direction` should carry the camera-depth normalization (unit z in
    camera space) so the ray parameter doubles as the depth. For a flat
    primitive (third scale at the floor) this is an exact ray-plane hit;
    otherwise the point of maximal Gaussian density along the ray.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    mu = np.asarray(center, dtype=np.float64)
    R = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)

    if s[2] <= scale_floor:  # flat path
        n = R[:, 2]
        denom = float(d @ n)
        if abs(denom) < DENOM_EPS:
            return None
        tau = float((mu - o) @ n) / denom
        if tau <= TAU_MIN:
            return None
        delta = o + tau * d - mu
        u = np.array([delta @ R[:, 0] / s[0], delta @ R[:, 1] / s[1]])
        g_obj = float(np.exp(-0.5 * (u[0] ** 2 + u[1] ** 2)))
        normal = R[:, 2] if denom < 0 else -R[:, 2]
    else:  # volumetric path: max density along the ray
        prec = 1.0 / (s * s)
        A = (R * prec) @ R.T
        r0 = o - mu
        a_dd = float(d @ A @ d)
        a_rd = float(r0 @ A @ d)
        a_rr = float(r0 @ A @ r0)
        tau = -a_rd / a_dd
        if tau <= TAU_MIN:
            return None
        q = max(a_rr - a_rd * a_rd / a_dd, 0.0)
        g_obj = float(np.exp(-0.5 * q))
        u = ((R.T @ (o + tau * d - mu)) / s)[:2]
        n = R[:, 2]
        normal = n if d @ n < 0 else -n

    g = low_pass(g_obj, pixel_offset, lowpass_sigma) if pixel_offset is not None else g_obj
    if g < cutoff:
        return None
    return IntersectionRecord(surfel, u, tau, g, 0.0, normal)


def composite(records, background):
    """Front-to-back compositing of depth-sorted records.

    Records expose (weight, opacity, color, depth, normal) as attributes or
    dict keys; blend weights are written back. Includes the transmittance
    floor and the background fill.
    """
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros(3)
    alpha = 0.0
    depth_blend = 0.0
    normal_blend = np.zeros(3)
    transmittance = 1.0
    for rec in records:
        if transmittance < 1e-4:
            break
        if isinstance(rec, dict):
            get = rec.get
        else:
            get = lambda k: getattr(rec, k)  # noqa: E731
        a = float(get("opacity")) * float(get("weight"))
        w = a * transmittance
        if isinstance(rec, dict):
            rec["blend_weight"] = w
        else:
            rec.blend_weight = w
        color += w * np.asarray(get("color"), dtype=np.float64)
        depth_blend += w * float(get("depth"))
        normal_blend += w * np.asarray(get("normal"), dtype=np.float64)
        alpha += w
        transmittance *= 1.0 - a
    color += (1.0 - alpha) * bg
    depth = depth_blend / alpha if alpha > 1e-12 else 0.0
    normal = normal_blend / alpha if alpha > 1e-12 else np.zeros(3)
    return color, alpha, depth, normal


# ---------------------------------------------------------------------------
# vectorized rasterization


@dataclass
class RasterCache:
    camera: Camera
    branch: str
    cfg: object  # ModelConfig
    warp_cache: tuple  # cache of warp_surfels_fwd
    sh_cache: tuple
    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    view_len: np.ndarray
    view_dirs: np.ndarray
    xc: np.ndarray  # (K, 3) camera-space centers
    pairs: dict
    pixel_sums: dict
    is3d: np.ndarray


def _pair_candidates(camera: Camera, px, xc, radius, margin):
    """Conservative per-surfel pixel boxes -> flat (surfel, pixel) pairs."""
    W, H = camera.width, camera.height
    K = px.shape[0]
    z = xc[:, 2]
    safe = z - radius > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        du = camera.fx * radius * (z + np.abs(xc[:, 0])) / (z * (z - radius))
        dv = camera.fy * radius * (z + np.abs(xc[:, 1])) / (z * (z - radius))
    big = float(W + H + 2)
    du = np.where(safe, np.minimum(du, big), big)
    dv = np.where(safe, np.minimum(dv, big), big)
    x0 = np.clip(np.ceil(px[:, 0] - du - margin - 1.5), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(px[:, 0] + du + margin + 0.5), -1, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(px[:, 1] - dv - margin - 1.5), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(px[:, 1] + dv + margin + 0.5), -1, H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    surf = np.repeat(np.arange(K), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_p = np.maximum(nx[surf], 1)
    pix_y = y0[surf] + offs // nx_p
    pix_x = x0[surf] + offs % nx_p
    return surf, pix_y * W + pix_x


def rasterize(
    model: ModelState,
    camera: Camera,
    warp_eval: WarpEval,
    branch: str,
    need_cache: bool = False,
):
    """Rasterize one branch of the warped model through one camera."""
    cfg = model.config
    surf_set = model.surfels
    centers, rotations, scales, wcache = warp_surfels_fwd(
        surf_set, warp_eval.rot, warp_eval.trans, branch, cfg.scale_floor
    )
    bg = np.asarray(cfg.background, dtype=np.float64)

    eye = camera.center
    view = centers - eye
    view_len = np.linalg.norm(view, axis=1)
    view_dirs = view / np.maximum(view_len, 1e-12)[:, None]
    colors, sh_cache = sh_colors_fwd(surf_set.sh, view_dirs, cfg.sh_degree)
    opacities = sigmoid(surf_set.opacity_raw)
    n_cam = rotations[:, :, 2] @ camera.rotation.T

    xc = camera.to_cam(centers)
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack(
            [
                camera.fx * xc[:, 0] / z + camera.cx,
                camera.fy * xc[:, 1] / z + camera.cy,
            ],
            axis=1,
        )

    cut_radius = np.sqrt(-2.0 * np.log(cfg.gaussian_cutoff))
    is3d = scales[:, 2] > cfg.scale_floor
    s_max = np.where(is3d, scales.max(axis=1), scales[:, :2].max(axis=1))
    radius = cut_radius * s_max
    margin = cut_radius * cfg.lowpass_sigma

    keep = np.where(z > Z_NEAR)[0]
    surf_k, pix = _pair_candidates(camera, px[keep], xc[keep], radius[keep], margin)
    surf = keep[surf_k]

    pixel_sums, pairs = _intersect_and_composite(
        camera, cfg, surf, pix, centers, rotations, scales, colors,
        opacities, n_cam, px, is3d,
    )

    out = _maps_from_sums(camera, cfg, pixel_sums, bg)
    cache = None
    if need_cache:
        cache = RasterCache(
            camera, branch, cfg, wcache, sh_cache,
            centers, rotations, scales, colors, opacities, view_len,
            view_dirs, xc, pairs, pixel_sums, is3d,
        )
    return out, cache


def _intersect_and_composite(
    camera, cfg, surf, pix, centers, rotations, scales, colors,
    opacities, n_cam, px, is3d,
):
    W, H = camera.width, camera.height
    dirs_w = camera.pixel_dirs_world().reshape(-1, 3)
    grid = camera.pixel_grid().reshape(-1, 2)
    eye = camera.center

    d = dirs_w[pix]
    mu = centers[surf]
    R = rotations[surf]
    s = scales[surf]
    vol = is3d[surf]

    n_pairs = len(surf)
    tau = np.full(n_pairs, -1.0)
    g_obj = np.zeros(n_pairs)
    uloc = np.zeros((n_pairs, 2))
    ok = np.zeros(n_pairs, dtype=bool)
    denom = np.ones(n_pairs)

    flat = ~vol
    if np.any(flat):
        nf = R[flat, :, 2]
        df = d[flat]
        den = np.einsum("pi,pi->p", df, nf)
        safe_den = np.where(np.abs(den) >= DENOM_EPS, den, 1.0)
        good = np.abs(den) >= DENOM_EPS
        t = np.einsum("pi,pi->p", mu[flat] - eye, nf) / safe_den
        good &= t > TAU_MIN
        delta = eye + t[:, None] * df - mu[flat]
        uu = np.einsum("pi,pi->p", delta, R[flat, :, 0]) / s[flat, 0]
        vv = np.einsum("pi,pi->p", delta, R[flat, :, 1]) / s[flat, 1]
        g = np.exp(-0.5 * (uu * uu + vv * vv))
        tau[flat] = t
        g_obj[flat] = np.where(good, g, 0.0)
        uloc[flat, 0] = uu
        uloc[flat, 1] = vv
        ok[flat] = good
        denom[flat] = den

    if np.any(vol):
        prec = 1.0 / (s[vol] ** 2)
        A = (R[vol] * prec[:, None, :]) @ np.swapaxes(R[vol], 1, 2)
        r0 = eye - mu[vol]
        dv = d[vol]
        Ad = np.einsum("pij,pj->pi", A, dv)
        a_dd = np.einsum("pi,pi->p", dv, Ad)
        a_rd = np.einsum("pi,pi->p", r0, Ad)
        a_rr = np.einsum("pi,pij,pj->p", r0, A, r0)
        t = -a_rd / a_dd
        good = t > TAU_MIN
        q = np.maximum(a_rr - a_rd * a_rd / a_dd, 0.0)
        g = np.exp(-0.5 * q)
        hit_local = np.einsum(
            "pji,pj->pi", R[vol], eye + t[:, None] * dv - mu[vol]
        ) / s[vol]
        tau[vol] = t
        g_obj[vol] = np.where(good, g, 0.0)
        uloc[vol] = hit_local[:, :2]
        ok[vol] = good

    # screen-space low pass on the filtered weight
    dpx = px[surf] - grid[pix]
    sig2 = cfg.lowpass_sigma**2
    g_scr = np.exp(-np.einsum("pi,pi->p", dpx, dpx) / (2.0 * sig2))
    use_scr = g_scr > g_obj
    g_all = np.where(use_scr, g_scr, g_obj)
    valid = ok & (g_all >= cfg.gaussian_cutoff)

    flip = np.where(
        vol,
        -np.sign(np.einsum("pi,pi->p", d, R[:, :, 2])),
        -np.sign(denom),
    )
    flip = np.where(flip == 0.0, 1.0, flip)
    n_rec = flip[:, None] * n_cam[surf]

    idx = np.where(valid)[0]
    p_pix = pix[idx]
    p_surf = surf[idx]
    p_tau = tau[idx]
    order = np.lexsort((p_surf, p_tau, p_pix))
    idx = idx[order]
    p_pix = p_pix[order]
    p_surf = p_surf[order]
    p_tau = p_tau[order]
    p_g = g_all[idx]
    a = np.minimum(opacities[p_surf] * p_g, A_MAX)
    n_rec_s = n_rec[idx]
    c_rec = colors[p_surf]

    m = len(p_pix)
    if m:
        lf = np.log1p(-a)
        cs = np.cumsum(lf)
        pref = cs - lf  # prefix strictly before each pair
        new_seg = np.empty(m, dtype=bool)
        new_seg[0] = True
        new_seg[1:] = p_pix[1:] != p_pix[:-1]
        seg_id = np.cumsum(new_seg) - 1
        seg_first = np.where(new_seg)[0]
        base = pref[seg_first][seg_id]
        T = np.exp(pref - base)
        include = T >= cfg.transmittance_floor
        w = np.where(include, a * T, 0.0)
    else:
        T = np.zeros(0)
        include = np.zeros(0, dtype=bool)
        w = np.zeros(0)

    npx = W * H
    alpha = np.bincount(p_pix, weights=w, minlength=npx)
    color_fg = np.stack(
        [np.bincount(p_pix, weights=w * c_rec[:, c], minlength=npx) for c in range(3)],
        axis=1,
    )
    depth_blend = np.bincount(p_pix, weights=w * p_tau, minlength=npx)
    normal_blend = np.stack(
        [np.bincount(p_pix, weights=w * n_rec_s[:, c], minlength=npx) for c in range(3)],
        axis=1,
    )

    pixel_sums = {
        "alpha": alpha,
        "color_fg": color_fg,
        "depth_blend": depth_blend,
        "normal_blend": normal_blend,
    }
    pairs = {
        "pix": p_pix,
        "surf": p_surf,
        "tau": p_tau,
        "g": p_g,
        "a": a,
        "T": T,
        "include": include,
        "w": w,
        "n_rec": n_rec_s,
        "flip": flip[idx],
        "use_scr": use_scr[idx],
        "g_obj": g_obj[idx],
        "g_scr": g_scr[idx],
        "dpx": dpx[idx],
        "uloc": uloc[idx],
        "denom": denom[idx],
        "vol": vol[idx],
        "d": d[idx],
    }
    return pixel_sums, pairs


def _maps_from_sums(camera, cfg, sums, bg):
    W, H = camera.width, camera.height
    alpha = sums["alpha"].reshape(H, W)
    color = (
        sums["color_fg"].reshape(H, W, 3) + (1.0 - alpha)[:, :, None] * bg[None, None]
    )
    depth_blend = sums["depth_blend"].reshape(H, W)
    normal_blend = sums["normal_blend"].reshape(H, W, 3)
    safe = alpha > 1e-12
    depth = np.where(safe, depth_blend / np.where(safe, alpha, 1.0), 0.0)
    nb_norm = np.linalg.norm(normal_blend, axis=-1)
    visible = (alpha > cfg.normal_alpha_threshold) & (nb_norm > 1e-12)
    rendered_normal = np.where(
        visible[:, :, None],
        normal_blend / np.where(visible, nb_norm, 1.0)[:, :, None],
        0.0,
    )
    surface_normal, _ = surface_normal_from_depth(
        depth, alpha, camera, cfg.normal_alpha_threshold
    )
    return RenderOutput(color, alpha, depth, rendered_normal, surface_normal)


# ---------------------------------------------------------------------------
# depth-derived surface normals


def surface_normal_from_depth(depth, alpha, camera: Camera, alpha_threshold=0.5):
    """Camera-space normals from central differences of back-projections.

    Pixels below the alpha threshold or missing a valid neighbor get a zero
    normal; normals are flipped toward the camera.
    """
    H, W = depth.shape
    x = (np.arange(W) + 0.5 - camera.cx) / camera.fx
    y = (np.arange(H) + 0.5 - camera.cy) / camera.fy
    gx_, gy_ = np.meshgrid(x, y)
    dirs = np.stack([gx_, gy_, np.ones_like(gx_)], axis=-1)
    p = depth[:, :, None] * dirs

    validp = alpha >= alpha_threshold
    gx = np.zeros((H, W, 3))
    gy = np.zeros((H, W, 3))
    vx = np.zeros((H, W), dtype=bool)
    vy = np.zeros((H, W), dtype=bool)
    if W >= 3:
        gx[:, 1:-1] = 0.5 * (p[:, 2:] - p[:, :-2])
        vx[:, 1:-1] = validp[:, 2:] & validp[:, :-2]
    if H >= 3:
        gy[1:-1, :] = 0.5 * (p[2:, :] - p[:-2, :])
        vy[1:-1, :] = validp[2:, :] & validp[:-2, :]

    raw = np.cross(gx, gy)
    nrm = np.linalg.norm(raw, axis=-1)
    valid = validp & vx & vy & (nrm > 1e-12)
    n0 = np.where(valid[:, :, None], raw / np.where(valid, nrm, 1.0)[:, :, None], 0.0)
    s = np.where(np.einsum("hwc,hwc->hw", n0, dirs) > 0.0, -1.0, 1.0)
    normal = s[:, :, None] * n0
    cache = (dirs, gx, gy, raw, nrm, n0, s, valid)
    return normal, cache


def surface_normal_bwd(cache, d_normal):
    """Backward of surface_normal_from_depth; returns d_depth (H, W)."""
    dirs, gx, gy, raw, nrm, n0, s, valid = cache
    d_n0 = s[:, :, None] * d_normal
    d_n0 = np.where(valid[:, :, None], d_n0, 0.0)
    safe_nrm = np.where(valid, nrm, 1.0)
    d_raw = (
        d_n0 - n0 * np.sum(n0 * d_n0, axis=-1, keepdims=True)
    ) / safe_nrm[:, :, None]
    d_raw = np.where(valid[:, :, None], d_raw, 0.0)
    d_gx = np.cross(gy, d_raw)
    d_gy = np.cross(d_raw, gx)
    H, W, _ = d_raw.shape
    d_p = np.zeros((H, W, 3))
    if W >= 3:
        d_p[:, 2:] += 0.5 * d_gx[:, 1:-1]
        d_p[:, :-2] -= 0.5 * d_gx[:, 1:-1]
    if H >= 3:
        d_p[2:, :] += 0.5 * d_gy[1:-1, :]
        d_p[:-2, :] -= 0.5 * d_gy[1:-1, :]
    return np.sum(d_p * dirs, axis=-1)


# ---------------------------------------------------------------------------
# warped-state normal consistency loss


def normal_loss_fwd(cache: RasterCache, out: RenderOutput):
    """Mean over valid pixels of sum_k w_k (1 - n_k . N)."""
    camera = cache.camera
    normal, sn_cache = surface_normal_from_depth(
        out.depth, out.alpha, camera, cache.cfg.normal_alpha_threshold
    )
    valid = np.linalg.norm(normal, axis=-1) > 0.5  # unit or zero by construction
    n_valid = int(valid.sum())
    pairs = cache.pairs
    pix = pairs["pix"]
    w = pairs["w"]
    n_rec = pairs["n_rec"]
    N_at = normal.reshape(-1, 3)[pix]
    rec_valid = valid.reshape(-1)[pix].astype(np.float64)
    dots = np.einsum("pi,pi->p", n_rec, N_at)
    terms = w * (1.0 - dots) * rec_valid
    denom = max(n_valid, 1)
    loss = float(terms.sum()) / denom
    ln_cache = (sn_cache, normal, N_at, rec_valid, denom)
    return loss, ln_cache


def normal_loss_bwd(ln_cache, cache: RasterCache, d_loss: float = 1.0):
    """Returns (d_w per record, d_n per record, d_depth map)."""
    sn_cache, normal, N_at, rec_valid, denom = ln_cache
    pairs = cache.pairs
    pix = pairs["pix"]
    w = pairs["w"]
    n_rec = pairs["n_rec"]
    scale = d_loss / denom
    dots = np.einsum("pi,pi->p", n_rec, N_at)
    d_w = scale * (1.0 - dots) * rec_valid
    coeff = (-scale) * (w * rec_valid)
    d_n = coeff[:, None] * N_at
    H, W = normal.shape[:2]
    d_N = np.zeros((H * W, 3))
    for c in range(3):
        d_N[:, c] = np.bincount(pix, weights=coeff * n_rec[:, c], minlength=H * W)
    d_depth = surface_normal_bwd(sn_cache, d_N.reshape(H, W, 3))
    return d_w, d_n, d_depth


# ---------------------------------------------------------------------------
# rasterization backward


def rasterize_backward(
    cache: RasterCache,
    grads: dict,
    d_color=None,
    d_alpha=None,
    d_depth=None,
    d_w_rec=None,
    d_n_rec=None,
):
    """Backward through compositing + intersection + colors.

    Accumulates `surfel_sh` and `surfel_opacity` gradients into `grads` and
    returns (d_centers, d_rotations, d_scales) on the *warped* primitives,
    to be chained through warp_surfels_bwd.
    """
    camera = cache.camera
    W, H = camera.width, camera.height
    npx = W * H
    K = cache.centers.shape[0]
    pairs = cache.pairs

    dC = np.zeros((npx, 3)) if d_color is None else d_color.reshape(npx, 3)
    dA_map = np.zeros(npx) if d_alpha is None else d_alpha.reshape(npx).astype(float).copy()
    dD_map = np.zeros(npx) if d_depth is None else d_depth.reshape(npx)

    # depth map = depth_blend / alpha where alpha > 1e-12
    alpha = cache.pixel_sums["alpha"]
    depth_blend = cache.pixel_sums["depth_blend"]
    safe = alpha > 1e-12
    inv_a = np.where(safe, 1.0 / np.where(safe, alpha, 1.0), 0.0)
    dDB_map = dD_map * inv_a
    dA_map = dA_map - dD_map * depth_blend * inv_a * inv_a

    pix = pairs["pix"]
    surf = pairs["surf"]
    include = pairs["include"]
    w = pairs["w"]
    a = pairs["a"]
    T = pairs["T"]
    tau = pairs["tau"]
    m = len(pix)

    d_centers = np.zeros((K, 3))
    d_rotations = np.zeros((K, 3, 3))
    d_scales = np.zeros((K, 3))
    d_colors_s = np.zeros((K, 3))
    d_opac = np.zeros(K)

    if m:
        colors_rec = cache.colors[surf]
        bg = np.asarray(cache.cfg.background, dtype=np.float64)
        payload = (
            np.einsum("pc,pc->p", dC[pix], colors_rec - bg[None, :])
            + dDB_map[pix] * tau
            + dA_map[pix]
        )
        if d_w_rec is not None:
            payload = payload + d_w_rec
        V = w * payload
        new_seg = np.empty(m, dtype=bool)
        new_seg[0] = True
        new_seg[1:] = pix[1:] != pix[:-1]
        seg_id = np.cumsum(new_seg) - 1
        seg_total = np.bincount(seg_id, weights=V)
        inc_sum = np.cumsum(V)
        seg_first = np.where(new_seg)[0]
        base = (inc_sum - V)[seg_first][seg_id]
        suffix = seg_total[seg_id] - (inc_sum - base)  # sum over j > i
        da = np.where(include, T * payload - suffix / (1.0 - a), 0.0)

        d_c_rec = w[:, None] * dC[pix]
        d_tau = w * dDB_map[pix]
        d_n = d_n_rec if d_n_rec is not None else np.zeros((m, 3))

        op = cache.opacities[surf]
        g = pairs["g"]
        d_op_rec = da * g
        d_g = da * op

        for c in range(3):
            d_colors_s[:, c] = np.bincount(surf, weights=d_c_rec[:, c], minlength=K)
        d_opac = np.bincount(surf, weights=d_op_rec, minlength=K)

        _intersection_backward(cache, d_g, d_tau, d_n, d_centers, d_rotations, d_scales)

    op_all = cache.opacities
    grads["surfel_opacity"] += d_opac * op_all * (1.0 - op_all)

    d_sh, d_dirs = sh_colors_bwd(cache.sh_cache, d_colors_s)
    grads["surfel_sh"] += d_sh
    vl = np.maximum(cache.view_len, 1e-12)[:, None]
    vd = cache.view_dirs
    d_view = (d_dirs - vd * np.sum(vd * d_dirs, axis=1, keepdims=True)) / vl
    d_centers += d_view

    return d_centers, d_rotations, d_scales


def _bin3(idx, vals, K):
    out = np.zeros((K, 3))
    for c in range(3):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=K)
    return out


def _intersection_backward(cache, d_g, d_tau, d_n, d_centers, d_rotations, d_scales):
    """Chain per-record grads to warped primitive parameters."""
    camera = cache.camera
    pairs = cache.pairs
    surf = pairs["surf"]
    use_scr = pairs["use_scr"]
    vol = pairs["vol"]
    d = pairs["d"]
    flip = pairs["flip"]
    g_scr = pairs["g_scr"]
    eye = camera.center
    K = cache.centers.shape[0]

    d_g_obj = np.where(use_scr, 0.0, d_g)
    d_g_scr = np.where(use_scr, d_g, 0.0)

    # record normal: n_rec = flip * (R_wc n_world)
    d_nw = (flip[:, None] * d_n) @ camera.rotation
    d_rotations[:, :, 2] += _bin3(surf, d_nw, K)

    # screen-space branch
    dpx = pairs["dpx"]
    coeff = -(d_g_scr * g_scr) / (cache.cfg.lowpass_sigma ** 2)
    d_px_pair = coeff[:, None] * dpx
    xc = cache.xc[surf]
    z = xc[:, 2]
    d_xc = np.zeros((len(surf), 3))
    d_xc[:, 0] = d_px_pair[:, 0] * camera.fx / z
    d_xc[:, 1] = d_px_pair[:, 1] * camera.fy / z
    d_xc[:, 2] = -(
        d_px_pair[:, 0] * camera.fx * xc[:, 0] + d_px_pair[:, 1] * camera.fy * xc[:, 1]
    ) / (z * z)
    d_centers += _bin3(surf, d_xc @ camera.rotation, K)

    flat = ~vol
    if np.any(flat):
        fsel = np.where(flat)[0]
        sU = surf[fsel]
        R = cache.rotations[sU]
        s = cache.scales[sU]
        df = d[fsel]
        mu = cache.centers[sU]
        n = R[:, :, 2]
        den = pairs["denom"][fsel]
        t = pairs["tau"][fsel]
        delta = eye + t[:, None] * df - mu
        uu = pairs["uloc"][fsel, 0]
        vv = pairs["uloc"][fsel, 1]
        gof = pairs["g_obj"][fsel]

        dgo = d_g_obj[fsel]
        d_uu = -gof * uu * dgo
        d_vv = -gof * vv * dgo

        d_delta = (
            d_uu[:, None] * R[:, :, 0] / s[:, 0:1]
            + d_vv[:, None] * R[:, :, 1] / s[:, 1:2]
        )
        d_tu = d_uu[:, None] * delta / s[:, 0:1]
        d_tv = d_vv[:, None] * delta / s[:, 1:2]
        d_su = -d_uu * uu / s[:, 0]
        d_sv = -d_vv * vv / s[:, 1]

        d_tau_tot = d_tau[fsel] + np.einsum("pi,pi->p", d_delta, df)
        d_mu = -d_delta + d_tau_tot[:, None] * n / den[:, None]
        d_nvec = d_tau_tot[:, None] * (-delta) / den[:, None]

        d_centers += _bin3(sU, d_mu, K)
        d_rotations[:, :, 0] += _bin3(sU, d_tu, K)
        d_rotations[:, :, 1] += _bin3(sU, d_tv, K)
        d_rotations[:, :, 2] += _bin3(sU, d_nvec, K)
        d_scales[:, 0] += np.bincount(sU, weights=d_su, minlength=K)
        d_scales[:, 1] += np.bincount(sU, weights=d_sv, minlength=K)

    if np.any(vol):
        vsel = np.where(vol)[0]
        sU = surf[vsel]
        R = cache.rotations[sU]
        s = cache.scales[sU]
        dv = d[vsel]
        mu = cache.centers[sU]
        prec = 1.0 / (s * s)
        A = (R * prec[:, None, :]) @ np.swapaxes(R, 1, 2)
        r0 = eye - mu
        Ad = np.einsum("pij,pj->pi", A, dv)
        Ar = np.einsum("pij,pj->pi", A, r0)
        a_dd = np.einsum("pi,pi->p", dv, Ad)
        a_rd = np.einsum("pi,pi->p", r0, Ad)
        gof = pairs["g_obj"][vsel]

        dq = -0.5 * gof * d_g_obj[vsel]
        dtau = d_tau[vsel]
        d_arr = dq
        d_ard = dq * (-2.0 * a_rd / a_dd) + dtau * (-1.0 / a_dd)
        d_add = dq * (a_rd * a_rd / (a_dd * a_dd)) + dtau * (a_rd / (a_dd * a_dd))

        dA = (
            d_arr[:, None, None] * r0[:, :, None] * r0[:, None, :]
            + d_ard[:, None, None] * r0[:, :, None] * dv[:, None, :]
            + d_add[:, None, None] * dv[:, :, None] * dv[:, None, :]
        )
        d_r0 = 2.0 * d_arr[:, None] * Ar + d_ard[:, None] * Ad
        d_centers += _bin3(sU, -d_r0, K)

        dA_s = np.zeros((K, 3, 3))
        for i in range(3):
            for j in range(3):
                dA_s[:, i, j] = np.bincount(sU, weights=dA[:, i, j], minlength=K)
        scales_all = cache.scales
        prec_all = 1.0 / (scales_all**2)
        R_all = cache.rotations
        sym = dA_s + np.swapaxes(dA_s, 1, 2)
        mask3d = cache.is3d.astype(np.float64)
        d_rotations += (sym @ R_all) * prec_all[:, None, :] * mask3d[:, None, None]
        d_prec = np.einsum("kia,kij,kja->ka", R_all, dA_s, R_all)
        d_scales += (-2.0 * d_prec / (scales_all**3)) * mask3d[:, None]


# ---------------------------------------------------------------------------
# public rendering entry points


def _resolve_time(model: ModelState, time=None, frame=None):
    if frame is not None:
        return model.frame_time(frame), int(frame)
    if time is None:
        raise ValueError("need a time or a frame index")
    t = float(time)
    n = model.n_frames
    frame_idx = int(round(np.clip(t, 0.0, 1.0) * max(n - 1, 1)))
    return t, frame_idx


def render(
    model: ModelState,
    camera: Camera,
    time=None,
    frame=None,
    branch: str = "refined",
    static: bool = False,
) -> RenderOutput:
    """Render one view of the model at one time.

    `frame` selects the per-frame latent codes directly; a fractional `time`
    uses the nearest frame's latents while conditioning the field on the
    exact time value. `static=True` bypasses the warp entirely.
    """
    from .warp import evaluate_warp, identity_warp

    if static:
        we = identity_warp(model.surfels.count, model.bones)
    else:
        t, frame_idx = _resolve_time(model, time, frame)
        we = evaluate_warp(
            model.bones, model.warp, model.surfels.centers, t, frame_idx
        )
    out, _ = rasterize(model, camera, we, branch)
    return out


def render_for_training(model: ModelState, camera: Camera, frame: int, branches):
    """Shared-warp render of one or both branches, with caches."""
    from .warp import evaluate_warp

    t = model.frame_time(frame)
    we = evaluate_warp(
        model.bones, model.warp, model.surfels.centers, t, frame, need_cache=True
    )
    outs = {}
    caches = {}
    for branch in branches:
        outs[branch], caches[branch] = rasterize(
            model, camera, we, branch, need_cache=True
        )
    return outs, caches, we
