"""Model state: Gaussian surfels, ellipsoid bones, and their initializers.

Surfels and bones are stored struct-of-arrays. All angle-like quantities are
raw quaternions normalized on use, scales and precisions are stored in log
space, and opacity is stored pre-sigmoid, so every parameter array can be
optimized unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from sklearn.cluster import KMeans

from .errors import InsufficientPoints
from .geometry import quat_to_rotmat, rotmat_to_quat
from .warp import WarpFieldMLP, WarpTable

SH_C0 = 0.28209479177387814


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class ModelConfig:
    """Rendering-time constants; serialized with checkpoints."""

    sh_degree: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    lowpass_sigma: float = 0.7  # screen-space sigma in pixels
    gaussian_cutoff: float = 1e-4  # drop intersections below this weight
    transmittance_floor: float = 1e-4  # stop compositing below this
    normal_alpha_threshold: float = 0.5
    scale_floor: float = 1e-6  # refined-scale clamp and rank-2 dispatch


def n_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class SurfelCloud:
    """K static-state surfels plus their refinement terms."""

    centers: np.ndarray  # (K, 3) p*
    quats: np.ndarray  # (K, 4) frame rotation, columns (t_u, t_v, t_u x t_v)
    log_scales: np.ndarray  # (K, 2) log(s_u), log(s_v)
    opacity_raw: np.ndarray  # (K,) pre-sigmoid opacity
    sh: np.ndarray  # (K, 3, n_sh) per-channel SH coefficients
    refine_quats: np.ndarray  # (K, 4) delta rotation
    refine_dscales: np.ndarray  # (K, 3) delta scales, 3rd axis may leave zero

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    def frames(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def select(self, mask: np.ndarray) -> "SurfelCloud":
        return SurfelCloud(
            self.centers[mask].copy(),
            self.quats[mask].copy(),
            self.log_scales[mask].copy(),
            self.opacity_raw[mask].copy(),
            self.sh[mask].copy(),
            self.refine_quats[mask].copy(),
            self.refine_dscales[mask].copy(),
        )

    def copy(self) -> "SurfelCloud":
        return self.select(slice(None))


@dataclass
class BoneSet:
    """B Gaussian-ellipsoid bones with per-frame latent codes."""

    centers: np.ndarray  # (B, 3) c*
    quats: np.ndarray  # (B, 4) V*
    log_precision: np.ndarray  # (B, 3) log of the diagonal precision
    latents: np.ndarray  # (B, T, D)

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def n_frames(self) -> int:
        return self.latents.shape[1]

    def precisions(self) -> np.ndarray:
        return np.exp(self.log_precision)

    def orientations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def copy(self) -> "BoneSet":
        return BoneSet(
            self.centers.copy(),
            self.quats.copy(),
            self.log_precision.copy(),
            self.latents.copy(),
        )


@dataclass
class ModelState:
    surfels: SurfelCloud
    bones: BoneSet
    warp: object  # WarpFieldMLP or WarpTable
    config: ModelConfig = field(default_factory=ModelConfig)

    @property
    def n_frames(self) -> int:
        return self.bones.n_frames

    def frame_time(self, frame_idx: int) -> float:
        t_count = max(self.n_frames - 1, 1)
        return float(frame_idx) / t_count

    def params(self) -> dict:
        """Live references to every trainable array, in a fixed order."""
        s, b = self.surfels, self.bones
        out = {
            "surfel_centers": s.centers,
            "surfel_quats": s.quats,
            "surfel_log_scales": s.log_scales,
            "surfel_opacity": s.opacity_raw,
            "surfel_sh": s.sh,
            "surfel_refine_quats": s.refine_quats,
            "surfel_refine_dscales": s.refine_dscales,
            "bone_centers": b.centers,
            "bone_quats": b.quats,
            "bone_log_prec": b.log_precision,
            "bone_latents": b.latents,
        }
        if isinstance(self.warp, WarpFieldMLP):
            for k, v in self.warp.weights.items():
                out[f"mlp_{k}"] = v
        return out

    def set_params(self, values: dict) -> None:
        live = self.params()
        for k, v in values.items():
            live[k][...] = v

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def copy(self) -> "ModelState":
        warp = self.warp.copy()
        return ModelState(
            self.surfels.copy(), self.bones.copy(), warp, replace(self.config)
        )


# ---------------------------------------------------------------------------
# operations


def surfel_point(surfels: SurfelCloud, k: int, u) -> np.ndarray:
    """World point of local tangent coordinates u = (u, v) on surfel k."""
    u = np.asarray(u, dtype=np.float64)
    R = quat_to_rotmat(surfels.quats[k])
    s = np.exp(surfels.log_scales[k])
    return surfels.centers[k] + s[0] * R[:, 0] * u[..., 0:1].squeeze(-1) + s[1] * R[
        :, 1
    ] * u[..., 1:2].squeeze(-1)


def frame_from_normal(normals: np.ndarray) -> np.ndarray:
    """Rotation matrices whose third column equals the given unit normals.

    Chosen so that n = (0, 0, 1) maps to the identity rotation.
    """
    n = np.asarray(normals, dtype=np.float64)
    single = n.ndim == 1
    n = np.atleast_2d(n)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    # helper axis: y unless the normal is nearly parallel to y
    helper = np.tile(np.array([0.0, 1.0, 0.0]), (n.shape[0], 1))
    near_y = np.abs(n[:, 1]) > 0.9
    helper[near_y] = np.array([1.0, 0.0, 0.0])
    t_u = np.cross(helper, n)
    t_u /= np.linalg.norm(t_u, axis=-1, keepdims=True)
    t_v = np.cross(n, t_u)
    R = np.stack([t_u, t_v, n], axis=-1)
    return R[0] if single else R


def init_surfels_from_points(
    points: np.ndarray,
    normals: np.ndarray,
    colors: np.ndarray,
    sh_degree: int = 2,
    opacity: float = 0.5,
) -> SurfelCloud:
    """Seed surfels on surface samples.

    Centers come from the points, frames from the normals, scales from the
    mean distance to the 3 nearest neighbors; refinements start at identity.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if points.shape[0] < 4:
        raise InsufficientPoints("need at least 4 points for neighbor scales")
    if points.shape != normals.shape:
        raise InsufficientPoints("points and normals must align")

    k = points.shape[0]
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=4)  # self + 3 neighbors
    scale = dist[:, 1:].mean(axis=1)

    quats = rotmat_to_quat(frame_from_normal(normals))
    n_sh = n_sh_coeffs(sh_degree)
    sh = np.zeros((k, 3, n_sh))
    sh[:, :, 0] = (colors - 0.5) / SH_C0

    refine_quats = np.zeros((k, 4))
    refine_quats[:, 0] = 1.0
    return SurfelCloud(
        centers=points.copy(),
        quats=quats,
        log_scales=np.log(np.maximum(scale, 1e-12))[:, None].repeat(2, axis=1),
        opacity_raw=np.full(k, float(logit(opacity))),
        sh=sh,
        refine_quats=refine_quats,
        refine_dscales=np.zeros((k, 3)),
    )


def init_bones_kmeans(
    points: np.ndarray,
    n_bones: int,
    seed: int,
    n_frames: int = 1,
    latent_dim: int = 128,
    latent_scale: float = 1e-2,
) -> BoneSet:
    """Seed bones at k-means centroids of the surface samples.

    Precision per axis is 1 / (cluster variance + 1e-4); orientation starts
    at identity. Deterministic for a fixed seed.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < n_bones:
        raise InsufficientPoints(
            f"{points.shape[0]} points cannot seed {n_bones} bones"
        )
    if n_bones == 1:
        centers = points.mean(axis=0, keepdims=True)
        labels = np.zeros(points.shape[0], dtype=int)
    else:
        km = KMeans(n_clusters=n_bones, n_init=10, random_state=seed)
        labels = km.fit_predict(points)
        centers = km.cluster_centers_.astype(np.float64)

    var = np.empty((n_bones, 3))
    for b in range(n_bones):
        members = points[labels == b]
        if members.shape[0] == 0:
            var[b] = 0.0
        else:
            var[b] = ((members - centers[b]) ** 2).mean(axis=0)
    precision = 1.0 / (var + 1e-4)

    quats = np.zeros((n_bones, 4))
    quats[:, 0] = 1.0
    rng = np.random.default_rng(seed)
    latents = latent_scale * rng.standard_normal((n_bones, n_frames, latent_dim))
    return BoneSet(
        centers=centers,
        quats=quats,
        log_precision=np.log(precision),
        latents=latents,
    )


def init_bones_random(
    points: np.ndarray,
    n_bones: int,
    seed: int,
    n_frames: int = 1,
    latent_dim: int = 128,
    latent_scale: float = 1e-2,
) -> BoneSet:
    """Degraded initializer: bones uniform in the point-cloud bounding box."""
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    centers = lo + (hi - lo) * rng.random((n_bones, 3))
    var = np.full((n_bones, 3), ((hi - lo) / 4.0) ** 2 + 1e-4)
    quats = np.zeros((n_bones, 4))
    quats[:, 0] = 1.0
    latents = latent_scale * rng.standard_normal((n_bones, n_frames, latent_dim))
    return BoneSet(centers, quats, np.log(1.0 / var), latents)
