"""Loss assembly, dual-branch training loop, and gradient checking.

One training step renders both branches with a shared warp evaluation,
combines per-branch photometric losses (L1 + SSIM) with the warped-state
normal consistency loss on the surfel branch, backpropagates by hand through
every stage and applies one bias-corrected first-order-with-momentum update
per parameter class. Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch
from .metrics import psnr, ssim_bwd, ssim_fwd
from .model import ModelState
from .render import (
    normal_loss_bwd,
    normal_loss_fwd,
    rasterize,
    rasterize_backward,
)
from .warp import evaluate_warp, identity_warp, warp_backward, warp_surfels_bwd


def default_learning_rates() -> dict:
    return {
        "surfel_centers": 2e-4,
        "surfel_quats": 1.5e-3,
        "surfel_log_scales": 4e-3,
        "surfel_opacity": 4e-2,
        "surfel_sh": 3e-3,
        "surfel_refine_quats": 1e-3,
        "surfel_refine_dscales": 1.5e-3,
        "bone_centers": 1e-3,
        "bone_quats": 1e-3,
        "bone_log_prec": 2e-3,
        "bone_latents": 2e-3,
        "mlp": 6e-4,
    }


@dataclass
class TrainConfig:
    iterations: int = 2000
    lambda_normal: float = 0.05
    lambda_ssim: float = 0.2
    normal_warmup_frac: float = 0.1
    prune_interval: int = 500
    prune_opacity: float = 0.005
    val_interval: int = 250
    seed: int = 0
    use_refined: bool = True
    use_normal_reg: bool = True
    supervise_base: bool = True
    freeze_warp: bool = False
    learning_rates: dict = field(default_factory=default_learning_rates)

    def __post_init__(self):
        if self.lambda_normal < 0 or self.lambda_ssim < 0:
            raise ValueError("loss weights must be nonnegative")
        for k, v in self.learning_rates.items():
            if v <= 0:
                raise ValueError(f"learning rate {k} must be positive")

    def lr_for(self, name: str) -> float:
        if name.startswith("mlp_"):
            return self.learning_rates["mlp"]
        return self.learning_rates[name]

    def lambda_normal_at(self, iteration: int) -> float:
        if not self.use_normal_reg:
            return 0.0
        warm = max(int(self.normal_warmup_frac * self.iterations), 1)
        return self.lambda_normal * min(1.0, iteration / warm)


@dataclass
class LossReport:
    photo_base: float
    photo_refined: float
    normal: float
    lambda_normal: float
    total: float

    @property
    def photometric(self) -> float:
        return self.photo_base + self.photo_refined


# ---------------------------------------------------------------------------
# photometric loss


def photometric_fwd(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float):
    if rendered.shape != target.shape:
        raise ShapeMismatch(
            f"render {rendered.shape} vs target {target.shape}"
        )
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    if lambda_ssim > 0.0:
        s_val, s_cache = ssim_fwd(rendered, target)
    else:
        s_val, s_cache = 1.0, None
    loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s_val)
    return loss, (diff, s_cache, lambda_ssim)


def photometric_bwd(cache) -> np.ndarray:
    diff, s_cache, lambda_ssim = cache
    d = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if s_cache is not None:
        d = d - lambda_ssim * ssim_bwd(s_cache)
    return d


def photometric_loss(rendered, target, lambda_ssim: float = 0.2) -> float:
    loss, _ = photometric_fwd(
        np.asarray(rendered, dtype=np.float64),
        np.asarray(target, dtype=np.float64),
        lambda_ssim,
    )
    return loss


# ---------------------------------------------------------------------------
# full loss with hand-chained backward


def compute_loss(
    model: ModelState,
    camera,
    frame_idx: int,
    target: np.ndarray,
    config: TrainConfig,
    lambda_n: float,
    want_grads: bool = True,
):
    """Returns (LossReport, grads-or-None)."""
    t = model.frame_time(frame_idx)
    if config.freeze_warp:
        we = identity_warp(model.surfels.count, model.bones)
    else:
        we = evaluate_warp(
            model.bones, model.warp, model.surfels.centers, t, frame_idx,
            need_cache=want_grads,
        )

    out_base, cache_base = rasterize(model, camera, we, "base", need_cache=True)
    base_w = 1.0 if config.supervise_base else 0.0
    photo_base, pcache_base = photometric_fwd(
        out_base.color, target, config.lambda_ssim
    )

    if config.use_refined:
        out_ref, cache_ref = rasterize(
            model, camera, we, "refined", need_cache=want_grads
        )
        photo_ref, pcache_ref = photometric_fwd(
            out_ref.color, target, config.lambda_ssim
        )
    else:
        photo_ref, pcache_ref, cache_ref = 0.0, None, None

    l_n, ln_cache = normal_loss_fwd(cache_base, out_base)

    total = base_w * photo_base + photo_ref + lambda_n * l_n
    report = LossReport(photo_base, photo_ref, l_n, lambda_n, total)
    if not np.isfinite(total):
        raise NonFiniteLoss(f"loss diverged: {report}")
    if not want_grads:
        return report, None

    grads = model.zero_grads()

    d_color_base = base_w * photometric_bwd(pcache_base)
    d_w_rec = d_n_rec = d_depth = None
    if lambda_n != 0.0:
        d_w_rec, d_n_rec, d_depth = normal_loss_bwd(ln_cache, cache_base, lambda_n)
    d_c_b, d_rot_b, d_s_b = rasterize_backward(
        cache_base, grads,
        d_color=d_color_base, d_depth=d_depth,
        d_w_rec=d_w_rec, d_n_rec=d_n_rec,
    )
    d_Jrot, d_Jtrans = warp_surfels_bwd(
        cache_base.warp_cache, d_c_b, d_rot_b, d_s_b, grads
    )

    if config.use_refined:
        d_color_ref = photometric_bwd(pcache_ref)
        d_c_r, d_rot_r, d_s_r = rasterize_backward(
            cache_ref, grads, d_color=d_color_ref
        )
        d_Jrot_r, d_Jtrans_r = warp_surfels_bwd(
            cache_ref.warp_cache, d_c_r, d_rot_r, d_s_r, grads
        )
        d_Jrot = d_Jrot + d_Jrot_r
        d_Jtrans = d_Jtrans + d_Jtrans_r

    if not config.freeze_warp:
        d_pts = warp_backward(we, model.warp, model.bones, d_Jrot, d_Jtrans, grads)
        grads["surfel_centers"] += d_pts
    return report, grads


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected first-order-with-momentum updates, one state per class."""

    def __init__(self, model: ModelState, config: TrainConfig,
                 betas=(0.9, 0.999), eps=1e-8):
        self.config = config
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        params = model.params()
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, model: ModelState, grads: dict) -> None:
        self.t += 1
        params = model.params()
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.config.lr_for(name) * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def select_surfels(self, mask: np.ndarray) -> None:
        for name in list(self.m):
            if name.startswith("surfel_"):
                self.m[name] = self.m[name][mask]
                self.v[name] = self.v[name][mask]


def prune_surfels(model: ModelState, optimizer: Adam | None, threshold: float) -> int:
    """Remove surfels with opacity below the threshold; returns the count."""
    keep = model.surfels.opacities() >= threshold
    removed = int((~keep).sum())
    if removed and keep.sum() > 0:
        model.surfels = model.surfels.select(keep)
        if optimizer is not None:
            optimizer.select_surfels(keep)
    return removed


def train_step(
    model: ModelState,
    camera,
    frame_idx: int,
    target: np.ndarray,
    config: TrainConfig,
    optimizer: Adam,
    iteration: int = 0,
) -> LossReport:
    lambda_n = config.lambda_normal_at(iteration)
    report, grads = compute_loss(
        model, camera, frame_idx, target, config, lambda_n, want_grads=True
    )
    optimizer.step(model, grads)
    return report


# ---------------------------------------------------------------------------
# fit loop


def evaluate_psnr(model: ModelState, frames, branch: str) -> float:
    from .render import render

    vals = []
    for fr in frames:
        out = render(model, fr.camera, frame=fr.index, branch=branch)
        vals.append(psnr(out.color, fr.image))
    return float(np.mean(vals))  # +inf propagates through the mean


def fit(model: ModelState, dataset, config: TrainConfig):
    """Optimize the model on the dataset's training frames.

    Returns (best-validation model, log rows). Log rows are dicts with keys
    iteration, photometric, normal, total, val_psnr (None off-schedule).
    """
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model, config)
    train_frames = dataset.train_frames()
    val_frames = dataset.val_frames()
    eval_branch = "refined" if config.use_refined else "base"

    log = []
    best_psnr = -np.inf
    best_model = model.copy()
    order = []
    for it in range(config.iterations):
        if not order:
            order = list(rng.permutation(len(train_frames)))
        fr = train_frames[order.pop()]
        report = train_step(
            model, fr.camera, fr.index, fr.image, config, optimizer, it
        )

        val_psnr = None
        last = it == config.iterations - 1
        if val_frames and (last or (it + 1) % config.val_interval == 0):
            val_psnr = evaluate_psnr(model, val_frames, eval_branch)
            if val_psnr >= best_psnr:
                best_psnr = val_psnr
                best_model = model.copy()
        log.append(
            {
                "iteration": it,
                "photometric": report.photometric,
                "normal": report.normal,
                "total": report.total,
                "val_psnr": val_psnr,
            }
        )
        if (
            config.prune_interval
            and (it + 1) % config.prune_interval == 0
            and it + 1 < config.iterations
        ):
            prune_surfels(model, optimizer, config.prune_opacity)

    if not val_frames:
        best_model = model.copy()
    return best_model, log


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(ga: np.ndarray, gf: np.ndarray) -> np.ndarray:
    return np.abs(ga - gf) / np.maximum(1e-8, np.abs(ga) + np.abs(gf))


def gradcheck(
    model: ModelState,
    camera,
    frame_idx: int,
    target: np.ndarray,
    config: TrainConfig,
    lambda_n: float | None = None,
    h: float = 1e-4,
    classes=None,
    max_per_class: int | None = None,
    rng_seed: int = 0,
) -> dict:
    """Per-parameter-class max relative error of analytic vs central FD."""
    lambda_n = config.lambda_normal if lambda_n is None else lambda_n
    _, grads = compute_loss(
        model, camera, frame_idx, target, config, lambda_n, want_grads=True
    )

    def loss_only():
        report, _ = compute_loss(
            model, camera, frame_idx, target, config, lambda_n, want_grads=False
        )
        return report.total

    params = model.params()
    rng = np.random.default_rng(rng_seed)
    out = {}
    for name, arr in params.items():
        cls = "mlp" if name.startswith("mlp_") else name
        if classes is not None and cls not in classes:
            continue
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_per_class is not None and flat.size > max_per_class:
            idx = rng.choice(flat.size, size=max_per_class, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss_only()
            flat[i] = old - h
            fm = loss_only()
            flat[i] = old
            fd = (fp - fm) / (2.0 * h)
            err = float(relative_error(np.array(g[i]), np.array(fd)))
            if abs(g[i]) < 1e-12 and abs(fd) < 1e-12:
                err = 0.0  # both below the FD noise floor: agreement
            worst = max(worst, err)
        out[cls] = max(out.get(cls, 0.0), worst)
    return out
