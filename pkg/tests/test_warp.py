import numpy as np

from dgsurfels.geometry import quat_to_rotmat
from dgsurfels.model import BoneSet, SurfelCloud, init_surfels_from_points
from dgsurfels.warp import (
    WarpFieldMLP,
    WarpTable,
    encode_inputs,
    encode_inputs_bwd,
    encoding_dim,
    evaluate_warp,
    identity_warp,
    skinning_weights,
    skinning_weights_bwd,
    warp_backward,
    warp_surfels_bwd,
    warp_surfels_fwd,
)


def make_bones(rng, B, T=3, D=5):
    centers = rng.standard_normal((B, 3))
    quats = rng.standard_normal((B, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return BoneSet(
        centers=centers,
        quats=quats,
        log_precision=0.3 * rng.standard_normal((B, 3)),
        latents=0.5 * rng.standard_normal((B, T, D)),
    )


def make_mlp(rng, D=5):
    mlp = WarpFieldMLP.create(
        n_freq_x=2, n_freq_t=1, latent_dim=D, hidden=8, n_hidden=2, seed=3
    )
    # random (nonzero) final layer so gradients flow everywhere
    mlp.weights["wout"] = 0.3 * rng.standard_normal((8, 8))
    mlp.weights["bout"] = 0.05 * rng.standard_normal(8)
    return mlp


def test_encoding_zero_input():
    enc = encode_inputs(np.zeros((1, 3)), 0.0, 3, 2)[0]
    assert enc.shape[0] == encoding_dim(3, 2) == 3 + 18 + 1 + 4
    # layout: x(3), then per-octave sin(3), cos(3)
    col = 3
    for _ in range(3):
        assert np.all(enc[col : col + 3] == 0.0)
        assert np.all(enc[col + 3 : col + 6] == 1.0)
        col += 6
    assert enc[col] == 0.0  # raw t
    assert enc[col + 1] == 0.0 and enc[col + 2] == 1.0  # sin/cos t octave 0


def test_encoding_lipschitz_per_octave():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 3))
    dx = 1e-6 * rng.standard_normal((50, 3))
    e0 = encode_inputs(x, 0.3, 4, 2)
    e1 = encode_inputs(x + dx, 0.3, 4, 2)
    col = 3
    for k in range(4):
        block = np.abs(e1 - e0)[:, col : col + 6]
        bound = (2.0**k) * np.abs(dx).max() * (1 + 1e-6)
        assert block.max() <= bound + 1e-12
        col += 6


def test_encoding_backward_fd():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, encoding_dim(3, 2)))

    def loss(xx):
        return np.sum(w * encode_inputs(xx, 0.7, 3, 2))

    g = encode_inputs_bwd(x, w, 3, 2)
    h = 1e-6
    for i in range(4):
        for j in range(3):
            xp = x.copy()
            xp[i, j] += h
            xm = x.copy()
            xm[i, j] -= h
            fd = (loss(xp) - loss(xm)) / (2 * h)
            assert abs(g[i, j] - fd) < 1e-6


def test_fresh_mlp_decodes_identity_everywhere():
    mlp = WarpFieldMLP.create(latent_dim=16, hidden=32, n_hidden=3, seed=7)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((10, 3))
    lat = rng.standard_normal((4, 16))
    raw, _ = mlp.forward_pairs(x, 0.37, lat)
    assert np.all(raw[..., 0] == 1.0)
    assert np.all(raw[..., 1:] == 0.0)


def test_identity_field_warps_nothing():
    rng = np.random.default_rng(3)
    bones = make_bones(rng, 3)
    mlp = WarpFieldMLP.create(latent_dim=5, hidden=8, n_hidden=2, seed=1)
    pts = rng.standard_normal((6, 3))
    we = evaluate_warp(bones, mlp, pts, 0.5, 1)
    assert np.abs(we.rot - np.eye(3)).max() == 0.0
    assert np.abs(we.trans).max() == 0.0
    assert np.abs(we.bone_centers - bones.centers).max() == 0.0
    assert np.abs(we.bone_orients - bones.orientations()).max() == 0.0


def test_bones_at_time_pure_translation_and_rotation():
    rng = np.random.default_rng(4)
    bones = make_bones(rng, 2)
    bones.centers[0] = [1.0, 0.0, 0.0]
    # table: bone 0 rotates 90 deg about z, bone 1 translates by tau
    c = np.cos(np.pi / 4)
    s = np.sin(np.pi / 4)
    tau = np.array([0.1, -0.2, 0.3])
    rot_raw = np.array([c, 0, 0, s, 0, 0, 0, 0])
    # dual = 0.5*(0,tau)*real for real = identity
    tr_raw = np.array([1, 0, 0, 0, 0, *(0.5 * tau)])
    table = WarpTable(np.stack([np.stack([rot_raw, tr_raw])] * 2))
    pts = rng.standard_normal((3, 3))
    we = evaluate_warp(bones, table, pts, 0.0, 0)
    assert np.abs(we.bone_centers[0] - np.array([0.0, 1.0, 0.0])).max() < 1e-12
    assert np.abs(we.bone_centers[1] - (bones.centers[1] + tau)).max() < 1e-12
    assert np.abs(we.bone_orients[1] - bones.orientations()[1]).max() < 1e-12


def test_skinning_weights_uniform_and_pairwise():
    # all bones equidistant -> uniform
    pts = np.zeros((1, 3))
    centers = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    orients = np.broadcast_to(np.eye(3), (3, 3, 3)).copy()
    prec = np.ones((3, 3))
    w, _ = skinning_weights(pts, centers, orients, prec)
    assert np.abs(w - 1.0 / 3).max() < 1e-12

    # B=2 with m = (0, 2): w = (1, e^-1)/(1+e^-1)
    centers = np.array([[0.0, 0, 0], [0.0, np.sqrt(2.0), 0]])
    orients = np.broadcast_to(np.eye(3), (2, 3, 3)).copy()
    prec = np.ones((2, 3))
    w, _ = skinning_weights(pts, centers, orients, prec)
    expected = np.array([1.0, np.exp(-1.0)])
    expected /= expected.sum()
    assert np.abs(w[0] - expected).max() < 1e-12


def test_skinning_weights_shift_invariance():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((4, 3))
    centers = rng.standard_normal((3, 3))
    orients = quat_to_rotmat(
        rng.standard_normal((3, 4)) / np.linalg.norm(rng.standard_normal((3, 4)))
    )
    prec = np.exp(rng.standard_normal((3, 3)))
    w1, _ = skinning_weights(pts, centers, orients, prec)
    # adding a common constant to every m leaves softmax unchanged; emulate
    # by feeding logits directly through the same code path via precisions=0
    # plus explicit check of normalization
    assert np.abs(w1.sum(axis=1) - 1.0).max() < 1e-12
    assert np.all(w1 >= 0.0)


def test_skinning_permutation_equivariance():
    rng = np.random.default_rng(6)
    pts = rng.standard_normal((5, 3))
    centers = rng.standard_normal((4, 3))
    orients = np.broadcast_to(np.eye(3), (4, 3, 3)).copy()
    prec = np.exp(rng.standard_normal((4, 3)))
    w, _ = skinning_weights(pts, centers, orients, prec)
    perm = np.array([2, 0, 3, 1])
    w2, _ = skinning_weights(pts, centers[perm], orients[perm], prec[perm])
    assert np.abs(w2 - w[:, perm]).max() < 1e-12


def test_point_warp_single_bone_equals_bone_transform():
    rng = np.random.default_rng(7)
    bones = make_bones(rng, 1)
    mlp = make_mlp(rng)
    pts = rng.standard_normal((4, 3))
    we = evaluate_warp(bones, mlp, pts, 0.4, 1)
    assert np.abs(we.weights - 1.0).max() < 1e-15
    # with one bone the blend must reproduce the bone transform at each point
    raw, _ = mlp.forward_pairs(pts, 0.4, bones.latents[:, 1, :])
    from dgsurfels.geometry import raw8_to_se3_fwd

    R, t, _ = raw8_to_se3_fwd(raw[:, 0, :])
    assert np.abs(we.rot - R).max() < 1e-12
    assert np.abs(we.trans - t).max() < 1e-12


def test_point_warp_shared_rigid_motion():
    rng = np.random.default_rng(8)
    bones = make_bones(rng, 4)
    c, s = np.cos(0.3), np.sin(0.3)
    tau = np.array([0.2, 0.1, -0.3])
    real = np.array([c, 0, 0, s])
    # dual quaternion for (R, tau): dual = 0.5 (0, tau) * real
    from dgsurfels.geometry import quat_multiply

    dual = 0.5 * quat_multiply(np.array([0.0, *tau]), real)
    raw = np.concatenate([real, dual])
    table = WarpTable(np.stack([np.stack([raw] * 4)] * 2))
    pts = rng.standard_normal((5, 3))
    we = evaluate_warp(bones, table, pts, 0.0, 0)
    R_expected = quat_to_rotmat(real)
    assert np.abs(we.rot - R_expected).max() < 1e-9
    assert np.abs(we.trans - tau).max() < 1e-9


def grad_dict_for(bones, mlp):
    g = {
        "bone_centers": np.zeros_like(bones.centers),
        "bone_quats": np.zeros_like(bones.quats),
        "bone_log_prec": np.zeros_like(bones.log_precision),
        "bone_latents": np.zeros_like(bones.latents),
    }
    for k, v in mlp.weights.items():
        g["mlp_" + k] = np.zeros_like(v)
    return g


def test_full_warp_backward_matches_fd():
    rng = np.random.default_rng(9)
    bones = make_bones(rng, 3)
    mlp = make_mlp(rng)
    pts = 0.5 * rng.standard_normal((4, 3))
    WR = rng.standard_normal((4, 3, 3))
    WT = rng.standard_normal((4, 3))
    t, fidx = 0.6, 1

    def loss():
        we = evaluate_warp(bones, mlp, pts, t, fidx)
        return np.sum(WR * we.rot) + np.sum(WT * we.trans)

    we = evaluate_warp(bones, mlp, pts, t, fidx, need_cache=True)
    grads = grad_dict_for(bones, mlp)
    d_pts = warp_backward(we, mlp, bones, WR, WT, grads)

    def fd_check(arr, g, name, h=1e-6, tol=2e-5):
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        idx = rng.choice(flat.size, size=min(20, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            flat[i] = old - h
            fm = loss()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            assert abs(gf[i] - fd) < tol, f"{name}[{i}]: {gf[i]} vs {fd}"

    fd_check(pts, d_pts, "points")
    fd_check(bones.centers, grads["bone_centers"], "bone_centers")
    fd_check(bones.quats, grads["bone_quats"], "bone_quats")
    fd_check(bones.log_precision, grads["bone_log_prec"], "bone_log_prec")
    fd_check(bones.latents, grads["bone_latents"], "bone_latents")
    for k in mlp.weights:
        fd_check(mlp.weights[k], grads["mlp_" + k], "mlp_" + k)


def test_warp_surfels_fwd_examples_and_bwd_fd():
    rng = np.random.default_rng(10)
    pts = rng.standard_normal((5, 3))
    normals = rng.standard_normal((5, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    colors = rng.random((5, 3))
    surf = init_surfels_from_points(pts, normals, colors)
    surf.refine_quats = rng.standard_normal((5, 4))
    surf.refine_dscales = 0.05 * rng.standard_normal((5, 3)) + np.array([0, 0, 0.05])

    # identity warp, identity refinement: refined equals base equals static
    plain = init_surfels_from_points(pts, normals, colors)
    eye = np.broadcast_to(np.eye(3), (5, 3, 3)).copy()
    zero = np.zeros((5, 3))
    cb, rb, sb, _ = warp_surfels_fwd(plain, eye, zero, "base", 1e-6)
    cr, rr, sr, _ = warp_surfels_fwd(plain, eye, zero, "refined", 1e-6)
    assert np.array_equal(cb, cr)
    assert np.array_equal(rb, rr)
    assert np.array_equal(sb[:, :2], sr[:, :2])
    assert np.all(sr[:, 2] == 1e-6)  # clamp floor; dispatches to the flat path

    # pure translation shifts centers only
    tau = np.array([1.0, 2.0, 3.0])
    cb2, rb2, sb2, _ = warp_surfels_fwd(plain, eye, np.tile(tau, (5, 1)), "base", 1e-6)
    assert np.abs(cb2 - (cb + tau)).max() < 1e-15
    assert np.array_equal(rb2, rb)
    assert np.array_equal(sb2, sb)

    # shared-center contract under random warps
    rot = quat_to_rotmat(rng.standard_normal((5, 4)))
    tr = rng.standard_normal((5, 3))
    cb3, _, _, _ = warp_surfels_fwd(surf, rot, tr, "base", 1e-6)
    cr3, _, _, _ = warp_surfels_fwd(surf, rot, tr, "refined", 1e-6)
    assert np.array_equal(cb3, cr3)

    # FD check of the backward for both branches
    WC = rng.standard_normal((5, 3))
    WRot = rng.standard_normal((5, 3, 3))
    WS = rng.standard_normal((5, 3))

    for branch in ("base", "refined"):

        def loss():
            c, r, s, _ = warp_surfels_fwd(surf, rot, tr, branch, 1e-6)
            return np.sum(WC * c) + np.sum(WRot * r) + np.sum(WS * s)

        _, _, _, cache = warp_surfels_fwd(surf, rot, tr, branch, 1e-6)
        grads = {
            "surfel_centers": np.zeros((5, 3)),
            "surfel_quats": np.zeros((5, 4)),
            "surfel_log_scales": np.zeros((5, 2)),
            "surfel_refine_quats": np.zeros((5, 4)),
            "surfel_refine_dscales": np.zeros((5, 3)),
        }
        d_rot, d_tr = warp_surfels_bwd(cache, WC, WRot, WS, grads)

        h = 1e-6
        for arr, g in [
            (surf.centers, grads["surfel_centers"]),
            (surf.quats, grads["surfel_quats"]),
            (surf.log_scales, grads["surfel_log_scales"]),
            (surf.refine_quats, grads["surfel_refine_quats"]),
            (surf.refine_dscales, grads["surfel_refine_dscales"]),
            (rot, d_rot),
            (tr, d_tr),
        ]:
            flat = arr.reshape(-1)
            gf = g.reshape(-1)
            idx = rng.choice(flat.size, size=min(12, flat.size), replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp = loss()
                flat[i] = old - h
                fm = loss()
                flat[i] = old
                fd = (fp - fm) / (2 * h)
                if branch == "base" and arr is surf.refine_quats:
                    assert gf[i] == 0.0
                    continue
                if branch == "base" and arr is surf.refine_dscales:
                    assert gf[i] == 0.0
                    continue
                assert abs(gf[i] - fd) < 2e-5
