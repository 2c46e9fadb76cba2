import numpy as np
import pytest

from panoalign import geometry, graphopt, oracle
from panoalign.errors import NonFiniteGradient
from panoalign.graphopt import NeighborGraph, OptConfig, OptState


def naive_planar_loss(state, graph, cfg):
    """Independent double-loop reference for the planar loss."""
    h, w = state.depth.shape
    rays = geometry.erp_ray_grid(h, w)
    eff = state.effective_depth()
    pts = eff[..., None] * rays
    eps = cfg.charbonnier_eps
    total = 0.0
    for k, (dy, dx) in enumerate(graph.offsets):
        for y in range(h):
            for x in range(w):
                wgt = graph.weights[k][y, x]
                if wgt == 0.0:
                    continue
                yj, xj = y + dy, (x + dx) % w
                r = float(np.dot(state.normals[y, x], pts[yj, xj] - pts[y, x]))
                dn = np.linalg.norm(state.normals[yj, xj] - state.normals[y, x])
                total += wgt * (np.sqrt(r * r + eps * eps)
                                + cfg.alpha * np.sqrt(dn * dn + eps * eps))
    return total


def small_state(h=4, w=8, seed=0, depth=None, normals=None, lam=None):
    rng = np.random.default_rng(seed)
    depth_in = rng.uniform(1.0, 3.0, (h, w)) if depth is None else depth
    if normals is None:
        normals = rng.normal(size=(h, w, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    face_id = np.argmax(geometry.erp_ray_grid(h, w)
                        @ geometry.CameraModel.cube(4).forwards.T, axis=-1)
    return OptState.init(depth_in, normals, face_id, depth_in, lam)


class TestBuildGraph:
    def test_uniform_image_distance_one_weight(self):
        cfg = OptConfig()
        g = graphopt.build_graph(np.full((8, 16), 0.4), cfg)
        k = g.offsets.index((0, 1))
        assert np.isclose(g.weights[k][3, 5], np.exp(-1.0 / 18.0), atol=1e-12)

    def test_patch_factor_at_sigma_distance(self):
        cfg = OptConfig()
        # two flat half-images differing so that ||Q_i - Q_j||_F = sigma_int
        # for the straddling horizontal edge at distance 1 (3 of 9 patch
        # entries differ by the step height)
        img = np.zeros((6, 12))
        img[:, 6:] = cfg.sigma_int / np.sqrt(3.0)
        g = graphopt.build_graph(img, cfg)
        k = g.offsets.index((0, 1))
        expected = np.exp(-0.5) * np.exp(-1.0 / 18.0)
        assert np.isclose(g.weights[k][3, 5], expected, atol=1e-12)

    def test_wrap_connects_column_zero_to_last(self):
        cfg = OptConfig()
        g = graphopt.build_graph(np.full((8, 16), 0.5), cfg)
        k = g.offsets.index((0, -1))
        assert g.weights[k][4, 0] > 0  # neighbor is column 15 via modulo

    def test_vertical_edges_leave_grid_excluded(self):
        cfg = OptConfig()
        g = graphopt.build_graph(np.full((8, 16), 0.5), cfg)
        k = g.offsets.index((-2, 0))
        assert (g.weights[k][:2] == 0).all()
        assert (g.weights[k][2:] > 0).all()

    def test_weights_in_unit_interval(self):
        rng = np.random.default_rng(0)
        g = graphopt.build_graph(rng.uniform(0, 1, (8, 16)), OptConfig())
        assert g.weights.max() <= 1.0
        assert g.weights.min() >= 0.0

    def test_weight_symmetry(self):
        rng = np.random.default_rng(1)
        g = graphopt.build_graph(rng.uniform(0, 1, (8, 16)), OptConfig())
        for k, (dy, dx) in enumerate(g.offsets):
            kr = g.offsets.index((-dy, -dx))
            back = graphopt._gather(g.weights[kr], dy, dx)
            live = g.weights[k] > 0
            assert np.abs(g.weights[k][live] - back[live]).max() < 1e-9

    def test_rejects_unnormalized_intensity(self):
        with pytest.raises(ValueError):
            graphopt.build_graph(np.full((4, 8), 2.0), OptConfig())


class TestComputeMask:
    def test_matching_normals_all_ones(self):
        rng = np.random.default_rng(2)
        depth = rng.uniform(1, 3, (16, 32))
        derived, _ = geometry.normals_from_depth(depth)
        assert graphopt.compute_mask(depth, derived, OptConfig()).all()

    def test_flipped_normals_all_zero(self):
        rng = np.random.default_rng(3)
        depth = rng.uniform(1, 3, (16, 32))
        derived, _ = geometry.normals_from_depth(depth)
        assert not graphopt.compute_mask(depth, -derived, OptConfig()).any()

    def test_corrupted_normals_rejected(self, box_scene):
        # rotate 5% of the true normals by 60..180 degrees; at threshold 0.7
        # the cosine test must reject at least 90% of them
        rng = np.random.default_rng(4)
        normals = box_scene.normals.copy()
        h, w = box_scene.depth.shape
        hit = rng.random((h, w)) < 0.05
        idx = np.argwhere(hit)
        for y, x in idx:
            n = normals[y, x]
            t = rng.normal(size=3)
            t -= t.dot(n) * n
            t /= np.linalg.norm(t)
            a = np.deg2rad(rng.uniform(60.0, 180.0))
            normals[y, x] = np.cos(a) * n + np.sin(a) * t
        mask = graphopt.compute_mask(box_scene.depth, normals, OptConfig())
        rejected = (~mask)[hit].mean()
        assert rejected >= 0.9


class TestPlanarLoss:
    def test_matches_naive_reference(self):
        st = small_state(seed=5)
        g = graphopt.build_graph(np.random.default_rng(6).uniform(0, 1, (4, 8)),
                                 OptConfig(window_radius=1))
        cfg = OptConfig(window_radius=1)
        got = graphopt.loss_planar(st, g, cfg)
        want = naive_planar_loss(st, g, cfg)
        assert np.isclose(got, want, rtol=1e-12)

    def test_planar_fixture_hits_epsilon_floor(self):
        # points on the plane z = 2 with the correct shared normal; edges
        # restricted to rays that actually hit the plane
        h, w = 8, 16
        rays = geometry.erp_ray_grid(h, w)
        ok = rays[..., 2] > 0.3
        depth = np.where(ok, 2.0 / np.where(ok, rays[..., 2], 1.0), 1.0)
        normals = np.broadcast_to([0.0, 0.0, -1.0], (h, w, 3)).copy()
        st = small_state(h, w, depth=depth, normals=normals)
        cfg = OptConfig()
        offsets = graphopt.window_offsets(cfg.window_radius, h, w)
        weights = np.zeros((len(offsets), h, w))
        for k, (dy, dx) in enumerate(offsets):
            inside = ok & graphopt._gather(ok, dy, dx)
            rows = np.arange(h)
            inside &= ((rows + dy >= 0) & (rows + dy < h))[:, None]
            weights[k][inside] = 1.0
        g = NeighborGraph(offsets=offsets, weights=weights)
        edges = int((weights > 0).sum())
        loss = graphopt.loss_planar(st, g, cfg)
        assert loss <= cfg.charbonnier_eps * edges * (1 + cfg.alpha) * (1 + 1e-9)

    def test_two_pixel_residual_formula(self):
        # neighboring equatorial pixels with unit depth and camera-facing
        # normals: the plane residual is 1 - cos(delta) per edge
        h, w = 2, 4
        rays = geometry.erp_ray_grid(h, w)
        st = small_state(h, w, depth=np.ones((h, w)), normals=-rays.copy())
        cfg = OptConfig(window_radius=1, alpha=0.0)
        offsets = graphopt.window_offsets(1, h, w)
        weights = np.zeros((len(offsets), h, w))
        k = offsets.index((0, 1))
        weights[k][0, 0] = 1.0  # single edge (0,0) -> (0,1)
        g = NeighborGraph(offsets=offsets, weights=weights)
        delta = np.arccos(np.clip(rays[0, 0] @ rays[0, 1], -1, 1))
        expected = np.hypot(1.0 - np.cos(delta), cfg.charbonnier_eps)
        assert np.isclose(graphopt.loss_planar(st, g, cfg), expected, rtol=1e-12)

    def test_doubling_depth_doubles_first_term(self):
        st = small_state(seed=7)
        cfg = OptConfig(alpha=0.0, charbonnier_eps=0.0)
        g = graphopt.build_graph(np.random.default_rng(8).uniform(0, 1, (4, 8)), cfg)
        l1 = graphopt.loss_planar(st, g, cfg)
        st.depth *= 2.0
        st.depth_ref = st.depth_ref * 2.0
        l2 = graphopt.loss_planar(st, g, cfg)
        assert np.isclose(l2, 2.0 * l1, rtol=1e-12)

    def test_scale_gauge_leaves_smoothness_term_unchanged(self):
        # scaling all depths by s scales the plane half by s and leaves the
        # normal-smoothness half untouched (eps -> 0)
        st = small_state(seed=27)
        cfg0 = OptConfig(alpha=0.0, charbonnier_eps=0.0)
        cfg1 = OptConfig(alpha=0.7, charbonnier_eps=0.0)
        g = graphopt.build_graph(np.random.default_rng(28).uniform(0, 1, (4, 8)), cfg1)
        plane = graphopt.loss_planar(st, g, cfg0)
        smooth = graphopt.loss_planar(st, g, cfg1) - plane
        st.depth *= 3.0
        st.depth_ref = st.depth_ref * 3.0
        assert np.isclose(graphopt.loss_planar(st, g, cfg1), 3.0 * plane + smooth,
                          rtol=1e-12)


class TestFidelityLoss:
    def test_exact_fit_hits_epsilon_floor(self):
        st = small_state(seed=9)
        cfg = OptConfig()
        mask = np.ones(st.depth.shape, dtype=bool)
        ld, ln = graphopt.loss_fidelity(st, st.depth_ref, st.normals, mask, cfg)
        npix = st.depth.size
        assert ld <= cfg.charbonnier_eps * npix * (1 + 1e-12)
        assert ln <= cfg.charbonnier_eps * 3 * npix * (1 + 1e-12)

    def test_scaled_face_contributes_its_depth(self, merged_identity):
        depth, normals, face_id, _ = merged_identity
        cfg = OptConfig(charbonnier_eps=0.0)
        lam = np.array([2.0, 1, 1, 1, 1, 1])
        # effective depth equals the input, scale map says face 0 doubled:
        # shape must absorb the difference, |D - lam*Dbar| = Dbar on face 0
        shape = depth - (lam[face_id] - 1.0) * depth
        st = OptState.init(shape, normals, face_id, depth, lam)
        mask = np.ones(depth.shape, dtype=bool)
        ld, _ = graphopt.loss_fidelity(st, depth, normals, mask, cfg)
        assert np.isclose(ld, depth[face_id == 0].sum(), rtol=1e-12)

    def test_zero_mask_zeroes_losses(self):
        st = small_state(seed=10)
        rng = np.random.default_rng(11)
        other = rng.uniform(1, 3, st.depth.shape)
        mask = np.zeros(st.depth.shape, dtype=bool)
        ld, ln = graphopt.loss_fidelity(st, other, -st.normals, mask, OptConfig())
        assert ld == 0.0 and ln == 0.0

    def test_per_face_homogeneity_handoff(self):
        # scaling face c's input depth by s while dividing lambda_c by s
        # leaves the fidelity value unchanged at fixed effective depth
        rng = np.random.default_rng(30)
        h, w = 4, 8
        face_id = np.argmax(geometry.erp_ray_grid(h, w)
                            @ geometry.CameraModel.cube(4).forwards.T, axis=-1)
        d_in = rng.uniform(1, 3, (h, w))
        shape = rng.uniform(1, 3, (h, w))
        normals = rng.normal(size=(h, w, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        lam = rng.uniform(0.9, 1.1, 6)
        mask = np.ones((h, w), dtype=bool)
        cfg = OptConfig()
        st1 = OptState.init(shape, normals, face_id, d_in, lam)
        eff = st1.effective_depth()

        s = 1.7
        c = 1
        d_in2 = d_in.copy()
        d_in2[face_id == c] *= s
        lam2 = lam.copy()
        lam2[c] /= s
        # shape in the new chart that realizes the same effective depth
        shape2 = eff - (lam2[face_id] - 1.0) * d_in2
        st2 = OptState.init(shape2, normals, face_id, d_in2, lam2)
        assert np.allclose(st2.effective_depth(), eff, rtol=1e-12)
        ld1, _ = graphopt.loss_fidelity(st1, d_in, normals, mask, cfg)
        ld2, _ = graphopt.loss_fidelity(st2, d_in2, normals, mask, cfg)
        assert np.isclose(ld1, ld2, rtol=1e-12)


class TestTotalLoss:
    def test_weight_arithmetic(self):
        cfg = OptConfig()
        assert cfg.eta_p * 1 + cfg.eta_d * 2 + cfg.eta_n * 3 == 81.0

    def test_matches_weighted_parts_bitwise(self):
        st = small_state(seed=12)
        cfg = OptConfig()
        g = graphopt.build_graph(np.random.default_rng(13).uniform(0, 1, (4, 8)), cfg)
        rng = np.random.default_rng(14)
        d_in = rng.uniform(1, 3, st.depth.shape)
        n_in = rng.normal(size=st.normals.shape)
        n_in /= np.linalg.norm(n_in, axis=-1, keepdims=True)
        mask = rng.random(st.depth.shape) < 0.8
        lp = graphopt.loss_planar(st, g, cfg)
        ld, ln = graphopt.loss_fidelity(st, d_in, n_in, mask, cfg)
        total = graphopt.total_loss(st, g, d_in, n_in, mask, cfg)
        assert total == cfg.eta_p * lp + cfg.eta_d * ld + cfg.eta_n * ln


class TestGradients:
    def test_zero_residual_state_is_stationary(self):
        # exact zero fidelity residuals: gradients identically zero
        st = small_state(seed=40)
        cfg = OptConfig(eta_p=0.0)
        g = graphopt.build_graph(np.random.default_rng(41).uniform(0, 1, (4, 8)), cfg)
        mask = np.ones(st.depth.shape, dtype=bool)
        dd, dn, dl = graphopt.gradients(st, g, st.depth_ref, st.normals, mask, cfg)
        assert np.abs(dd).max() <= 1e-8
        assert np.abs(dn).max() <= 1e-8
        assert np.abs(dl).max() <= 1e-8

    def test_planar_fixture_is_stationary_to_rounding(self):
        # points on the plane z = 2 with the correct shared normal; residuals
        # are zero up to 1-ulp rounding of depth * ray_z, so the gradients
        # shrink with residual/eps
        h, w = 8, 16
        rays = geometry.erp_ray_grid(h, w)
        ok = rays[..., 2] > 0.3
        depth = np.where(ok, 2.0 / np.where(ok, rays[..., 2], 1.0), 1.0)
        normals = np.broadcast_to([0.0, 0.0, -1.0], (h, w, 3)).copy()
        st = small_state(h, w, depth=depth, normals=normals)
        cfg = OptConfig()
        offsets = graphopt.window_offsets(cfg.window_radius, h, w)
        weights = np.zeros((len(offsets), h, w))
        for k, (dy, dx) in enumerate(offsets):
            inside = ok & graphopt._gather(ok, dy, dx)
            rows = np.arange(h)
            inside &= ((rows + dy >= 0) & (rows + dy < h))[:, None]
            weights[k][inside] = 1.0
        g = NeighborGraph(offsets=offsets, weights=weights)
        dd, dn, dl = graphopt.gradients(st, g, depth, normals, ok, cfg)
        assert np.abs(dd).max() < 1e-6
        assert np.abs(dn).max() < 1e-6
        assert np.abs(dl).max() < 1e-5

    def test_matches_finite_differences(self):
        inst = oracle.make_random_instance(height=8, width=16, seed=42)
        assert oracle.finite_diff_gradcheck(inst) < 1e-4

    def test_nonfinite_gradient_raises(self):
        # eps = 0 with an exact zero fidelity residual -> 0/0 in phi'
        st = small_state(seed=15)
        cfg = OptConfig(charbonnier_eps=0.0)
        g = graphopt.build_graph(np.random.default_rng(16).uniform(0, 1, (4, 8)), cfg)
        mask = np.ones(st.depth.shape, dtype=bool)
        with pytest.raises(NonFiniteGradient):
            graphopt.gradients(st, g, st.depth_ref.copy(), st.normals, mask, cfg)


class TestAdamStep:
    def test_zero_gradient_is_noop(self):
        normals = np.zeros((4, 8, 3))
        normals[..., 2] = -1.0  # exactly unit so renormalization is identity
        st = small_state(depth=np.full((4, 8), 2.0), normals=normals)
        before = st.snapshot()
        zero = (np.zeros((4, 8)), np.zeros((4, 8, 3)), np.zeros(6))
        graphopt.adam_step(st, zero, lr=0.5, cfg=OptConfig())
        after = st.snapshot()
        for a, b in zip(before, after):
            assert np.array_equal(a, b)

    def test_first_step_moves_by_lr_sign(self):
        st = small_state(depth=np.full((4, 8), 2.0), seed=17)
        before = st.depth.copy()
        g = np.zeros((4, 8))
        g[1, 1] = 5.0
        g[2, 2] = -3.0
        lr = 1e-5  # below every trust radius
        graphopt.adam_step(st, (g, np.zeros((4, 8, 3)), np.zeros(6)), lr, OptConfig())
        assert np.isclose(st.depth[1, 1] - before[1, 1], -lr, rtol=1e-3)
        assert np.isclose(st.depth[2, 2] - before[2, 2], lr, rtol=1e-3)

    def test_step_respects_trust_radius(self):
        cfg = OptConfig()
        st = small_state(depth=np.full((4, 8), 2.0), seed=18)
        g = np.full((4, 8), 7.0)
        graphopt.adam_step(st, (g, np.zeros((4, 8, 3)), np.zeros(6)), lr=0.5, cfg=cfg)
        moved = np.abs(st.depth - st.depth_ref).max()
        assert moved <= cfg.step_clamp_depth * 2.0 + 1e-12

    def test_normals_unit_after_step(self):
        st = small_state(seed=19)
        rng = np.random.default_rng(20)
        grads = (rng.normal(size=(4, 8)), rng.normal(size=(4, 8, 3)), rng.normal(size=6))
        graphopt.adam_step(st, grads, lr=0.01, cfg=OptConfig())
        assert np.abs(np.linalg.norm(st.normals, axis=-1) - 1.0).max() < 1e-12

    def test_lambda_gauge_and_positivity(self):
        st = small_state(seed=21)
        grads = (np.zeros((4, 8)), np.zeros((4, 8, 3)), np.array([1e9, -1e9, 0, 0, 0, 0.0]))
        graphopt.adam_step(st, grads, lr=0.5, cfg=OptConfig())
        assert (st.lambda_c > 0).all()
        assert np.isclose(np.exp(np.mean(np.log(st.lambda_c))), 1.0)

    def test_identical_runs_bitwise(self):
        def run():
            st = small_state(seed=22)
            cfg = OptConfig()
            g = graphopt.build_graph(np.random.default_rng(23).uniform(0, 1, (4, 8)), cfg)
            mask = np.ones(st.depth.shape, dtype=bool)
            rng = np.random.default_rng(24)
            n_in = rng.normal(size=st.normals.shape)
            n_in /= np.linalg.norm(n_in, axis=-1, keepdims=True)
            for _ in range(25):
                grads = graphopt.gradients(st, g, st.depth_ref, n_in, mask, cfg)
                graphopt.adam_step(st, grads, 0.05, cfg)
            return st.snapshot()
        a, b = run(), run()
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestOptimize:
    def test_returns_full_resolution_and_stats(self, box_scene, merged_corrupted):
        depth, normals, face_id, _ = merged_corrupted
        cfg = OptConfig(levels=2, iters=(20, 5))
        res = graphopt.optimize(depth, normals, box_scene.intensity, face_id, cfg)
        assert res.depth.shape == depth.shape
        assert res.lambda_c.shape == (6,)
        assert [s.level for s in res.levels] == [1, 0]
        assert res.levels[0].height == 64 and res.levels[0].width == 128
        assert res.levels[1].lr == cfg.learning_rate(0)

    def test_level_plan_for_1024x512_config(self):
        cfg = OptConfig()
        assert cfg.levels == 3
        assert cfg.iters == (300, 150, 30)
        assert [cfg.learning_rate(l) for l in (2, 1, 0)] == [
            pytest.approx(0.5), pytest.approx(0.05), pytest.approx(0.005)]
        # sizes implied for a 1024x512 input
        sizes = [(512 // 2**l, 1024 // 2**l) for l in (2, 1, 0)]
        assert sizes == [(128, 256), (256, 512), (512, 1024)]

    def test_validity_mask_excludes_pixels(self, box_scene, merged_corrupted):
        depth, normals, face_id, _ = merged_corrupted
        valid = np.ones(depth.shape, dtype=bool)
        valid[40:50, 100:120] = False
        cfg = OptConfig(levels=1, iters=(5,))
        res = graphopt.optimize(depth, normals, box_scene.intensity, face_id, cfg,
                                valid=valid)
        assert np.isfinite(res.depth).all()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            graphopt.optimize(np.ones((4, 9)), np.ones((4, 9, 3)),
                              np.ones((4, 9)), np.zeros((4, 9), dtype=int))


class TestConfigValidation:
    def test_iters_must_match_levels(self):
        with pytest.raises(ValueError):
            OptConfig(levels=2, iters=(10, 5, 2))

    def test_defaults_are_published_values(self):
        cfg = OptConfig()
        assert (cfg.alpha, cfg.sigma_int, cfg.sigma_spa) == (0.5, 0.07, 3.0)
        assert (cfg.eta_p, cfg.eta_d, cfg.eta_n) == (50.0, 0.5, 10.0)
        assert cfg.levels == 3 and cfg.iters == (300, 150, 30)
        assert cfg.lr_scale == 5.0
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
        assert cfg.window_radius == 2 and cfg.patch_size == 3
        assert cfg.mask_threshold == 0.7
