import numpy as np
import pytest

from epimatch import errors
from epimatch.matcher import (
    MatcherConfig,
    MatcherGrads,
    MatcherParams,
    SgdState,
    backward,
    confidence_matrix,
    extract_features,
    forward,
    init_params,
    load_checkpoint,
    refine_fine,
    save_checkpoint,
    select_coarse,
    sgd_step,
    zero_grads,
)

SMALL = MatcherConfig(patch_width=8, fine_patch=4, fine_stride=2, d=8, d_fine=6,
                      window_radius=2, match_threshold=0.2)


def random_image(rng, h=32, w=32):
    return rng.uniform(0.0, 1.0, (h, w))


class TestExtractFeatures:
    def test_constant_image_all_textureless(self):
        feats = extract_features(np.full((32, 32), 0.5), SMALL)
        assert feats.textureless.all()
        assert np.allclose(feats.coarse, 0.0)

    def test_grid_arithmetic(self, rng):
        feats = extract_features(random_image(rng, 64, 64), MatcherConfig())
        assert (feats.grid.rows, feats.grid.cols) == (8, 8)
        assert feats.coarse.shape == (64, 64)

    def test_unit_norm_rows(self, rng):
        feats = extract_features(random_image(rng), SMALL)
        norms = np.linalg.norm(feats.coarse, axis=1)
        assert np.allclose(norms[~feats.textureless], 1.0)

    def test_shift_by_patch_width_shifts_grid(self, rng):
        img = random_image(rng, 40, 40)
        shifted = np.roll(img, (8, 8), axis=(0, 1))
        f = extract_features(img, SMALL)
        g = extract_features(shifted, SMALL)
        # interior cell (r, c) of img equals cell (r+1, c+1) of shifted
        for r in range(3):
            for c in range(3):
                a = f.coarse[r * 5 + c]
                b = g.coarse[(r + 1) * 5 + (c + 1)]
                assert np.allclose(a, b)

    def test_bad_dimensions(self):
        with pytest.raises(errors.BadDimensions):
            extract_features(np.zeros((30, 32)), SMALL)


class TestConfidenceMatrix:
    def test_identical_images_sharp_diagonal(self, rng):
        img = random_image(rng)
        f = extract_features(img, SMALL)
        params = init_params(SMALL, seed=3)
        params.tau_coarse = 0.01
        C, _ = confidence_matrix(f, f, params)
        assert np.mean(np.diag(C.values)) > 0.99

    def test_textureless_grids_uniform(self):
        f = extract_features(np.zeros((32, 32)), SMALL)
        params = init_params(SMALL, seed=0)
        C, _ = confidence_matrix(f, f, params)
        m = f.grid.m
        assert np.allclose(C.values, 1.0 / m ** 2)

    def test_entries_in_unit_interval_and_factors_normalized(self, rng):
        f1 = extract_features(random_image(rng), SMALL)
        f2 = extract_features(random_image(rng), SMALL)
        params = init_params(SMALL, seed=1)
        C, cache = confidence_matrix(f1, f2, params)
        assert np.all(C.values >= 0.0) and np.all(C.values <= 1.0)
        assert np.allclose(cache["RS"].sum(axis=1), 1.0)
        assert np.allclose(cache["CS"].sum(axis=0), 1.0)

    def test_column_permutation_equivariance(self, rng):
        f1 = extract_features(random_image(rng), SMALL)
        f2 = extract_features(random_image(rng), SMALL)
        params = init_params(SMALL, seed=2)
        C, _ = confidence_matrix(f1, f2, params)
        perm = rng.permutation(f2.grid.m)
        import copy

        f2p = copy.deepcopy(f2)
        f2p.coarse = f2.coarse[perm]
        Cp, _ = confidence_matrix(f1, f2p, params)
        assert np.allclose(Cp.values, C.values[:, perm])


class TestSelectCoarse:
    def test_identity_confidence(self):
        C = np.eye(5) * 0.9 + 0.01
        i, j, conf = select_coarse(C, 0.2)
        assert np.array_equal(i, np.arange(5))
        assert np.array_equal(j, np.arange(5))

    def test_uniform_below_threshold_empty(self):
        C = np.full((4, 4), 0.05)
        i, j, _ = select_coarse(C, 0.2)
        assert i.size == 0

    def test_threshold_zero_identity_gives_all(self):
        C = np.eye(6)
        i, j, _ = select_coarse(C, 0.0)
        assert i.size == 6


class TestRefineFine:
    def test_flat_window_gives_window_centre(self, rng):
        # textureless image 2: uniform heatmap, soft-argmax = window centre
        img1 = random_image(rng)
        img2 = np.zeros((32, 32))
        f1 = extract_features(img1, SMALL)
        f2 = extract_features(img2, SMALL)
        params = init_params(SMALL, seed=0)
        i_idx = np.array([5])  # cell (1,1): centre (12,12), interior
        j_idx = np.array([5])
        x1s, x2s, conf, cache, dropped = refine_fine(f1, f2, params, SMALL, i_idx, j_idx, np.ones(1))
        assert dropped == 0
        assert np.allclose(x2s[0], [12.0, 12.0])

    def test_shifted_copy_recovers_offset(self, rng):
        # content moves right 2 and up 2: a one-hot heatmap at offset (+2, -2)
        img1 = random_image(rng, 48, 48)
        img2 = np.roll(img1, (-2, 2), axis=(0, 1))
        params = init_params(SMALL, seed=1)
        params.tau_fine = 0.01
        f1 = extract_features(img1, SMALL)
        f2 = extract_features(img2, SMALL)
        # interior coarse cells refined at their own index (offset < one cell)
        interior = [r * 6 + c for r in range(2, 4) for c in range(2, 4)]
        i_idx = np.array(interior)
        x1s, x2s, conf, cache, dropped = refine_fine(
            f1, f2, params, SMALL, i_idx, i_idx, np.ones(len(interior)))
        assert dropped == 0
        err = x2s - (x1s + np.array([2.0, -2.0]))
        assert np.max(np.abs(err)) < 0.5

    def test_refined_point_inside_window_hull(self, rng):
        img1, img2 = random_image(rng), random_image(rng)
        f1 = extract_features(img1, SMALL)
        f2 = extract_features(img2, SMALL)
        params = init_params(SMALL, seed=4)
        i_idx = np.array([5, 6, 9, 10])
        x1s, x2s, conf, cache, dropped = refine_fine(f1, f2, params, SMALL, i_idx, i_idx, np.ones(4))
        for k in range(x2s.shape[0]):
            lo = cache["coords"][k].min(axis=0)
            hi = cache["coords"][k].max(axis=0)
            assert np.all(x2s[k] >= lo - 1e-12) and np.all(x2s[k] <= hi + 1e-12)

    def test_border_windows_dropped_with_counter(self, rng):
        f1 = extract_features(random_image(rng), SMALL)
        f2 = extract_features(random_image(rng), SMALL)
        params = init_params(SMALL, seed=4)
        i_idx = np.array([0])  # corner cell: window leaves the fine grid
        *_, dropped = refine_fine(f1, f2, params, SMALL, i_idx, i_idx, np.ones(1))
        assert dropped == 1


class TestForward:
    def test_deterministic(self, rng):
        img1, img2 = random_image(rng), random_image(rng)
        params = init_params(SMALL, seed=7)
        a, _ = forward(img1, img2, params, SMALL)
        b, _ = forward(img1, img2, params, SMALL)
        assert a.C.values.tobytes() == b.C.values.tobytes()
        assert np.array_equal(a.coarse_i, b.coarse_i)
        assert a.fine_x2.tobytes() == b.fine_x2.tobytes()

    def test_identical_images_match_diagonally(self, rng):
        img = random_image(rng, 48, 48)
        params = init_params(SMALL, seed=7)
        params.tau_coarse = 0.02
        pred, _ = forward(img, img, params, SMALL)
        assert pred.coarse_i.size >= 0.9 * 36
        assert np.array_equal(pred.coarse_i, pred.coarse_j)

    def test_translation_equivariance(self, rng):
        img1 = random_image(rng, 48, 48)
        img2 = random_image(rng, 48, 48)
        params = init_params(SMALL, seed=8)
        pred, _ = forward(img1, img2, params, SMALL)
        t1 = np.roll(img1, (8, 8), axis=(0, 1))
        t2 = np.roll(img2, (8, 8), axis=(0, 1))
        pred_t, _ = forward(t1, t2, params, SMALL)
        cols = 6
        shifted = set()
        for i, j in zip(pred.coarse_i, pred.coarse_j):
            ri, ci = divmod(int(i), cols)
            rj, cj = divmod(int(j), cols)
            if ri < cols - 1 and ci < cols - 1 and rj < cols - 1 and cj < cols - 1:
                shifted.add(((ri + 1) * cols + ci + 1, (rj + 1) * cols + cj + 1))
        got = set(zip(pred_t.coarse_i.tolist(), pred_t.coarse_j.tolist()))
        assert shifted <= got


def linear_probe_loss(pred, G, g):
    """Smooth scalar functional of the forward outputs for gradient checks."""
    loss = float(np.sum(G * pred.C.values))
    if pred.fine_x2.shape[0]:
        loss += float(np.sum(g[: pred.fine_x2.shape[0]] * pred.fine_x2))
    return loss


class TestBackward:
    def _fd_check(self, seed, h=1e-5):
        rng = np.random.default_rng(seed)
        img1, img2 = random_image(rng), random_image(rng)
        params = init_params(SMALL, seed=seed)
        pins = (np.array([5, 6, 9, 10]), np.array([10, 9, 6, 5]))
        G = rng.normal(size=(16, 16))
        g = rng.normal(size=(4, 2))

        pred, cache = forward(img1, img2, params, SMALL, coarse_override=pins)
        M = pred.fine_x2.shape[0]
        grads = backward(cache, dC=G, dfine=g[:M])

        def loss_with(p):
            pr, _ = forward(img1, img2, p, SMALL, coarse_override=pins)
            return linear_probe_loss(pr, G, g)

        max_rel = 0.0
        for arr, garr in ((params.W_coarse, grads.dW_coarse), (params.W_fine, grads.dW_fine)):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                lp = loss_with(params)
                arr[idx] = orig - h
                lm = loss_with(params)
                arr[idx] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(garr[idx]), 1e-6)
                max_rel = max(max_rel, abs(garr[idx] - fd) / denom)
                it.iternext()
        for attr, ganalytic in (("tau_coarse", grads.dtau_coarse), ("tau_fine", grads.dtau_fine)):
            orig = getattr(params, attr)
            setattr(params, attr, orig + h)
            lp = loss_with(params)
            setattr(params, attr, orig - h)
            lm = loss_with(params)
            setattr(params, attr, orig)
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(ganalytic), 1e-6)
            max_rel = max(max_rel, abs(ganalytic - fd) / denom)
        return max_rel

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_jacobian_finite_differences(self, seed):
        assert self._fd_check(seed) < 1e-4

    def test_zero_upstream_gives_zero_grads(self, rng):
        img1, img2 = random_image(rng), random_image(rng)
        params = init_params(SMALL, seed=11)
        pred, cache = forward(img1, img2, params, SMALL,
                              coarse_override=(np.array([5]), np.array([5])))
        grads = backward(cache, dC=np.zeros((16, 16)), dfine=np.zeros((1, 2)))
        assert np.allclose(grads.dW_coarse, 0.0)
        assert np.allclose(grads.dW_fine, 0.0)
        assert grads.dtau_coarse == 0.0 and grads.dtau_fine == 0.0

    def test_upstream_linearity(self, rng):
        img1, img2 = random_image(rng), random_image(rng)
        params = init_params(SMALL, seed=12)
        pred, cache = forward(img1, img2, params, SMALL,
                              coarse_override=(np.array([5, 6]), np.array([6, 5])))
        G = rng.normal(size=(16, 16))
        g = rng.normal(size=(pred.fine_x2.shape[0], 2))
        g1 = backward(cache, dC=G, dfine=g)
        g3 = backward(cache, dC=3.0 * G, dfine=3.0 * g)
        assert np.allclose(g3.dW_coarse, 3.0 * g1.dW_coarse)
        assert np.allclose(g3.dW_fine, 3.0 * g1.dW_fine)
        assert g3.dtau_coarse == pytest.approx(3.0 * g1.dtau_coarse)
        assert g3.dtau_fine == pytest.approx(3.0 * g1.dtau_fine)


class TestSgdStep:
    def test_zero_lr_is_identity(self, rng):
        params = init_params(SMALL, seed=0)
        before = params.copy()
        grads = zero_grads(params)
        grads.dW_coarse += rng.normal(size=grads.dW_coarse.shape)
        sgd_step(params, grads, SgdState.zeros(params), lr=0.0)
        assert np.array_equal(params.W_coarse, before.W_coarse)

    def test_weight_decay_shrinks(self):
        params = init_params(SMALL, seed=0)
        before = params.copy()
        sgd_step(params, zero_grads(params), SgdState.zeros(params), lr=0.1, weight_decay=0.5)
        assert np.allclose(params.W_coarse, before.W_coarse * (1 - 0.1 * 0.5))

    def test_step_decreases_quadratic_toy_loss(self):
        # L = 0.5 * |W_coarse|^2, gradient = W_coarse
        params = init_params(SMALL, seed=1)
        state = SgdState.zeros(params)
        loss0 = 0.5 * np.sum(params.W_coarse ** 2)
        grads = zero_grads(params)
        grads.dW_coarse += params.W_coarse
        sgd_step(params, grads, state, lr=0.1)
        assert 0.5 * np.sum(params.W_coarse ** 2) < loss0

    def test_non_finite_gradient_rejected(self):
        params = init_params(SMALL, seed=2)
        grads = zero_grads(params)
        grads.dW_fine[0, 0] = np.nan
        with pytest.raises(errors.NonFiniteGradient):
            sgd_step(params, grads, SgdState.zeros(params), lr=0.1)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(MatcherConfig(), seed=5)
        params.tau_coarse = 0.07
        params.tau_fine = 0.21
        path = tmp_path / "params.bin"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.W_coarse, params.W_coarse)
        assert np.array_equal(loaded.W_fine, params.W_fine)
        assert loaded.tau_coarse == params.tau_coarse
        assert loaded.tau_fine == params.tau_fine

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)
