import numpy as np
import pytest

from dgsurfels.errors import InsufficientPoints
from dgsurfels.geometry import quat_to_rotmat
from dgsurfels.model import (
    BoneSet,
    ModelConfig,
    ModelState,
    init_bones_kmeans,
    init_bones_random,
    init_surfels_from_points,
    surfel_point,
)
from dgsurfels.warp import WarpFieldMLP


def lloyd_kmeans(points, k, seed, iters=200):
    # independent reference: plain Lloyd iteration from k-means++-free seeding
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(len(points), size=k, replace=False)].copy()
    for _ in range(iters):
        d = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        new = np.stack(
            [points[lab == j].mean(0) if np.any(lab == j) else centers[j] for j in range(k)]
        )
        if np.abs(new - centers).max() < 1e-12:
            break
        centers = new
    return centers, lab


def test_surfel_point_center_and_example():
    pts = np.array([[0.0, 0, 0], [1.0, 1, 1], [2.0, 0, 1], [0, 2, 2.0]])
    normals = np.tile([0.0, 0, 1.0], (4, 1))
    colors = np.full((4, 3), 0.5)
    s = init_surfels_from_points(pts, normals, colors)
    # u = (0,0) -> center exactly
    assert np.array_equal(surfel_point(s, 1, np.zeros(2)), pts[1])

    # p*=0, t_u = x, t_v = y, s_u = 2, s_v = 3, u = (1,1) -> (2, 3, 0)
    s.log_scales[0] = np.log([2.0, 3.0])
    out = surfel_point(s, 0, np.array([1.0, 1.0]))
    assert np.abs(out - np.array([2.0, 3.0, 0.0])).max() < 1e-12


def test_surfel_point_planarity_and_affinity():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((8, 3))
    normals = rng.standard_normal((8, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    s = init_surfels_from_points(pts, normals, rng.random((8, 3)))
    for k in range(8):
        n = quat_to_rotmat(s.quats[k])[:, 2]
        for _ in range(20):
            u = rng.standard_normal(2)
            p = surfel_point(s, k, u)
            assert abs(np.dot(p - s.centers[k], n)) < 1e-12
        u1, u2 = rng.standard_normal(2), rng.standard_normal(2)
        lhs = surfel_point(s, k, u1) + surfel_point(s, k, u2) - surfel_point(s, k, np.zeros(2))
        rhs = surfel_point(s, k, u1 + u2)
        assert np.abs(lhs - rhs).max() < 1e-12


def test_init_surfels_contract():
    rng = np.random.default_rng(1)
    # uniform 3D grid with spacing h: every point (corners included) has
    # at least 3 axis neighbors at distance exactly h, so every scale is h
    h = 0.25
    ax = np.arange(3) * h
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    normals = np.tile([0.0, 0, 1.0], (len(pts), 1))
    colors = rng.random((len(pts), 3))
    s = init_surfels_from_points(pts, normals, colors)
    assert np.abs(np.exp(s.log_scales) - h).max() < 1e-9

    # aligned normal (0,0,1) -> identity frame
    assert np.abs(quat_to_rotmat(s.quats[0]) - np.eye(3)).max() < 1e-12

    # refinement terms start at identity / zero, opacity at 0.5
    assert np.allclose(s.refine_quats[:, 0], 1.0)
    assert np.allclose(s.refine_quats[:, 1:], 0.0)
    assert np.allclose(s.refine_dscales, 0.0)
    assert np.allclose(s.opacities(), 0.5)

    # degree-0 SH reproduces the seed color
    from dgsurfels.model import SH_C0

    assert np.abs(0.5 + SH_C0 * s.sh[:, :, 0] - colors).max() < 1e-12
    assert np.abs(s.sh[:, :, 1:]).max() == 0.0


def test_init_surfels_errors():
    with pytest.raises(InsufficientPoints):
        init_surfels_from_points(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))


def test_init_bones_single_cluster_is_centroid():
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((40, 3))
    bones = init_bones_kmeans(pts, 1, seed=0, n_frames=2, latent_dim=4)
    assert np.abs(bones.centers[0] - pts.mean(0)).max() < 1e-12
    assert bones.latents.shape == (1, 2, 4)
    assert np.allclose(bones.orientations()[0], np.eye(3))


def test_init_bones_two_blobs_match_lloyd_reference():
    rng = np.random.default_rng(3)
    blob_a = rng.standard_normal((60, 3)) * 0.05 + np.array([3.0, 0, 0])
    blob_b = rng.standard_normal((60, 3)) * 0.05 + np.array([-3.0, 0, 0])
    pts = np.concatenate([blob_a, blob_b])
    bones = init_bones_kmeans(pts, 2, seed=0, n_frames=1, latent_dim=2)
    ref_centers, ref_lab = lloyd_kmeans(pts, 2, seed=0)
    got = sorted(map(tuple, bones.centers))
    want = sorted(map(tuple, ref_centers))
    assert np.abs(np.array(got) - np.array(want)).max() < 1e-6
    # precision = 1 / (per-axis cluster variance + 1e-4)
    means = {tuple(np.round(c, 6)): c for c in ref_centers}
    for b in range(2):
        members = pts[((pts[:, 0] > 0) == (bones.centers[b][0] > 0))]
        var = ((members - bones.centers[b]) ** 2).mean(0)
        assert np.abs(bones.precisions()[b] - 1.0 / (var + 1e-4)).max() < 1e-6


def test_init_bones_deterministic():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((100, 3))
    a = init_bones_kmeans(pts, 5, seed=9, n_frames=3, latent_dim=6)
    b = init_bones_kmeans(pts, 5, seed=9, n_frames=3, latent_dim=6)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.log_precision, b.log_precision)
    assert np.array_equal(a.latents, b.latents)


def test_init_bones_insufficient():
    with pytest.raises(InsufficientPoints):
        init_bones_kmeans(np.zeros((3, 3)), 4, seed=0)


def test_init_bones_random_stays_in_bbox():
    rng = np.random.default_rng(5)
    pts = rng.random((50, 3)) * np.array([2.0, 1.0, 3.0])
    bones = init_bones_random(pts, 6, seed=1, n_frames=2, latent_dim=4)
    assert np.all(bones.centers >= pts.min(0) - 1e-12)
    assert np.all(bones.centers <= pts.max(0) + 1e-12)


def test_model_params_roundtrip_and_copy():
    rng = np.random.default_rng(6)
    pts = rng.standard_normal((10, 3))
    normals = rng.standard_normal((10, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    surf = init_surfels_from_points(pts, normals, rng.random((10, 3)))
    bones = init_bones_kmeans(pts, 2, seed=0, n_frames=4, latent_dim=3)
    mlp = WarpFieldMLP.create(latent_dim=3, hidden=8, n_hidden=2, seed=0)
    model = ModelState(surf, bones, mlp, ModelConfig())

    params = model.params()
    assert params["surfel_centers"] is surf.centers  # live references
    before = model.surfels.centers.copy()
    clone = model.copy()
    clone.surfels.centers += 1.0
    clone.warp.weights["w0"] += 1.0
    assert np.array_equal(model.surfels.centers, before)
    assert np.array_equal(model.warp.weights["w0"], mlp.weights["w0"])

    grads = model.zero_grads()
    assert set(grads) == set(params)
    assert model.frame_time(0) == 0.0
    assert model.frame_time(3) == 1.0
