"""Codebook learning, loss terms, gradients, the fit loop, training I/O."""

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import (
    drifting_cluster_corpus,
    ema_vs_lloyd_ratio,
    fd_instance,
    fd_max_rel_err,
    low_rank_positive_map,
    pca_reconstruction_floor,
    rng_of,
    separated_gaussians,
)
from rvqcodec.codec import (
    Codebook,
    CodebookStack,
    CodecConfig,
    decompress,
    encode,
    init_model,
    quantize,
    random_stack,
    reduce,
)
from rvqcodec.datagen import SceneSpec, generate_scene
from rvqcodec.errors import ConfigError, FormatError, StateError, TrainingError
from rvqcodec.tensors import FeatureMap, ProjectionWeights
from rvqcodec.training import (
    Adam,
    EmaHook,
    LossReport,
    TrainingConfig,
    _params_from_model,
    _TRAINABLE_PARAMS,
    commitment_loss,
    ema_batch_update,
    ema_update,
    fit,
    forward_backward,
    kmeans_reference,
    load_checkpoint,
    one_cycle_lr,
    ortho_loss,
    ortho_loss_gradient,
    read_training_manifest,
    save_checkpoint,
    seed_codebooks,
    write_training_manifest,
)


def normal_map(seed, h, w, c, scale=1.0):
    return FeatureMap(rng_of(seed).normal(0.0, scale, size=(h, w, c)))


def unfrozen_stack(num_stages, k, dim, seed=0):
    rng = rng_of(seed)
    return CodebookStack(
        [Codebook(rng.normal(size=(k, dim)), stage=s) for s in range(num_stages)]
    )


class TestTrainingConfig:
    def test_defaults(self):
        cfg = TrainingConfig()
        assert (cfg.ema_alpha, cfg.beta_commit, cfg.lambda_ortho) == (0.8, 0.05, 1e-4)
        assert (cfg.epochs, cfg.learning_rate, cfg.batch_size) == (30, 1e-3, 8)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"ema_alpha": 0.0},
            {"ema_alpha": 1.0},
            {"beta_commit": -0.1},
            {"lambda_ortho": -1e-6},
            {"learning_rate": 0.0},
            {"epochs": 0},
            {"batch_size": 0},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainingConfig(**kwargs)


class TestEmaUpdate:
    def test_from_zero_entry(self):
        cb = Codebook(np.zeros((2, 3)), stage=0)
        v = np.array([1.0, -2.0, 0.5])
        ema_update(cb, 1, v, alpha=0.8)
        assert np.array_equal(cb.entries[1], 0.8 * v)
        assert np.array_equal(cb.entries[0], np.zeros(3))

    def test_zero_alpha_is_identity(self):
        cb = Codebook(rng_of(0).normal(size=(4, 3)), stage=0)
        before = cb.entries.copy()
        ema_update(cb, 2, np.ones(3), alpha=0.0)
        assert np.array_equal(cb.entries, before)

    @pytest.mark.parametrize("alpha", [0.2, 0.8, 0.99])
    def test_geometric_convergence(self, alpha):
        rng = rng_of(1)
        cb = Codebook(rng.normal(size=(2, 5)), stage=0)
        r = rng.normal(size=5)
        gap0 = np.linalg.norm(cb.entries[0] - r)
        for t in range(1, 101):
            ema_update(cb, 0, r, alpha)
            gap = np.linalg.norm(cb.entries[0] - r)
            assert abs(gap - (1.0 - alpha) ** t * gap0) < 1e-10

    @given(st.floats(0.001, 0.999), st.integers(1, 100), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_recurrence_any_alpha(self, alpha, t, seed):
        rng = rng_of(seed)
        cb = Codebook(rng.normal(size=(2, 4)), stage=0)
        r = rng.normal(size=4)
        gap0 = np.linalg.norm(cb.entries[0] - r)
        for _ in range(t):
            ema_update(cb, 0, r, alpha)
        gap = np.linalg.norm(cb.entries[0] - r)
        assert abs(gap - (1.0 - alpha) ** t * gap0) < 1e-10

    def test_bookkeeping(self):
        stack = unfrozen_stack(1, 4, 3, seed=2)
        h0 = stack.content_hash
        ema_update(stack.stages[0], 3, np.ones(3), alpha=0.5)
        assert stack.stages[0].usage_counts[3] == 1
        assert stack.stages[0].version == 1
        assert stack.content_hash != h0

    def test_frozen_refused(self):
        stack = random_stack(1, 4, 3, seed=0)
        with pytest.raises(StateError):
            ema_update(stack.stages[0], 0, np.zeros(3), alpha=0.5)

    def test_bad_code_or_shape(self):
        cb = Codebook(np.zeros((4, 3)), stage=0)
        with pytest.raises(ConfigError):
            ema_update(cb, 4, np.zeros(3), alpha=0.5)
        with pytest.raises(ConfigError):
            ema_update(cb, 0, np.zeros(2), alpha=0.5)


class TestEmaBatchUpdate:
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95), st.integers(1, 60))
    @settings(max_examples=40, deadline=None)
    def test_matches_sequential_replay(self, seed, alpha, n):
        rng = rng_of(seed)
        entries = rng.normal(size=(8, 3))
        codes = rng.integers(0, 8, size=n)
        residuals = rng.normal(size=(n, 3))
        new, counts = ema_batch_update(entries, codes, residuals, alpha)
        cb = Codebook(entries.copy(), stage=0)
        for c, r in zip(codes, residuals):
            ema_update(cb, int(c), r, alpha)
        assert np.abs(new - cb.entries).max() < 1e-10
        assert np.array_equal(counts, np.bincount(codes, minlength=8))

    def test_does_not_modify_input(self):
        entries = rng_of(3).normal(size=(4, 2))
        before = entries.copy()
        ema_batch_update(entries, np.array([1, 1, 3]), np.ones((3, 2)), 0.5)
        assert np.array_equal(entries, before)

    def test_empty_batch(self):
        entries = rng_of(4).normal(size=(4, 2))
        new, counts = ema_batch_update(entries, np.array([], dtype=int),
                                       np.empty((0, 2)), 0.5)
        assert np.array_equal(new, entries)
        assert counts.sum() == 0


class TestEmaHook:
    def test_apply_equals_pixel_order_replay(self):
        stack = unfrozen_stack(3, 8, 4, seed=5)
        reference = stack.copy()
        reference.frozen = False
        maps = [normal_map(50 + i, 3, 4, 4) for i in range(2)]
        alpha = 0.7

        hook = EmaHook(stack.num_stages)
        for fmap in maps:
            quantize(stack, fmap, hook)
        hook.apply(stack, alpha)

        # replay: assignments against the batch-start state, maps in batch
        # order, pixels row-major, stages as encountered
        observed = []
        for fmap in maps:
            idx, _ = quantize(reference, fmap)
            residual = fmap.pixels().copy()
            per_stage = []
            for s, cb in enumerate(reference.stages):
                per_stage.append((idx.flat()[:, s].copy(), residual.copy()))
                residual = residual - cb.entries[idx.flat()[:, s]]
            observed.append(per_stage)
        for s in range(reference.num_stages):
            for per_stage in observed:
                codes, residuals = per_stage[s]
                for c, r in zip(codes, residuals):
                    ema_update(reference.stages[s], int(c), r, alpha)

        for a, b in zip(stack.stages, reference.stages):
            assert np.abs(a.entries - b.entries).max() < 1e-10
            assert np.array_equal(a.usage_counts, b.usage_counts)

    def test_buffers_clear_after_apply(self):
        stack = unfrozen_stack(2, 4, 3, seed=6)
        hook = EmaHook(2)
        quantize(stack, normal_map(7, 2, 2, 3), hook)
        hook.apply(stack, 0.5)
        after_first = [cb.entries.copy() for cb in stack.stages]
        hook.apply(stack, 0.5)  # nothing buffered: must be a no-op
        for cb, prev in zip(stack.stages, after_first):
            assert np.array_equal(cb.entries, prev)

    def test_populates_residual_pools(self):
        stack = unfrozen_stack(2, 4, 3, seed=8)
        hook = EmaHook(2)
        quantize(stack, normal_map(9, 4, 4, 3), hook)
        hook.apply(stack, 0.5)
        assert all(pool is not None and len(pool) for pool in hook.residual_pools)

    def test_frozen_refused(self):
        stack = unfrozen_stack(2, 4, 3, seed=10)
        hook = EmaHook(2)
        quantize(stack, normal_map(11, 2, 2, 3), hook)
        stack.frozen = True
        with pytest.raises(StateError):
            hook.apply(stack, 0.5)


class TestCommitmentLoss:
    def test_identical_inputs(self):
        fmap = normal_map(12, 3, 3, 4)
        assert commitment_loss(fmap, fmap, beta=0.05) == 0.0

    def test_uniform_difference(self):
        z = FeatureMap(np.zeros((2, 2, 4)))
        z_q = FeatureMap(np.full((2, 2, 4), 2.0))
        assert commitment_loss(z, z_q, beta=0.05) == pytest.approx(0.2, rel=1e-15)

    def test_matches_elementwise_oracle(self):
        z = normal_map(13, 4, 5, 6)
        z_q = normal_map(14, 4, 5, 6)
        got = commitment_loss(z, z_q, beta=0.37)
        acc = 0.0
        for i in range(4):
            for j in range(5):
                for c in range(6):
                    acc += (z_q.data[i, j, c] - z.data[i, j, c]) ** 2
        expect = 0.37 * acc / (4 * 5 * 6)
        assert got == pytest.approx(expect, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            commitment_loss(normal_map(15, 2, 2, 4), normal_map(15, 2, 2, 3), 0.05)


class TestOrthoLoss:
    def orthonormal_rows(self, rows, cols, seed):
        q, _ = np.linalg.qr(rng_of(seed).normal(size=(cols, rows)))
        return ProjectionWeights(q.T.copy(), np.zeros(rows))

    def test_orthonormal_rows_zero(self):
        w = self.orthonormal_rows(4, 8, 16)
        assert ortho_loss(w, lam=0.3) < 1e-24
        assert np.abs(ortho_loss_gradient(w, lam=0.3)).max() < 1e-12

    def test_scaled_identity(self):
        w = ProjectionWeights(2.0 * np.eye(4), np.zeros(4))
        # gram is 4I, deviation 3I, squared Frobenius norm 9·4
        assert ortho_loss(w, lam=0.5) == pytest.approx(0.5 * 9 * 4, rel=1e-14)

    def test_matches_direct_oracle(self):
        w = ProjectionWeights(rng_of(17).normal(size=(3, 7)), np.zeros(3))
        gram = w.weights @ w.weights.T
        expect = 1e-4 * float(np.sum((gram - np.eye(3)) ** 2))
        assert ortho_loss(w, lam=1e-4) == pytest.approx(expect, rel=1e-12)

    def test_scalar_gradient(self):
        w = ProjectionWeights(np.array([[2.0]]), np.zeros(1))
        lam = 0.3
        # d/dw lam(w^2-1)^2 = 4 lam (w^2-1) w = 24 lam
        assert ortho_loss_gradient(w, lam)[0, 0] == pytest.approx(24 * lam, rel=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = rng_of(18)
        weights = rng.normal(size=(4, 6))
        lam = 0.01
        grad = ortho_loss_gradient(ProjectionWeights(weights, np.zeros(4)), lam)
        h = 1e-5
        worst = 0.0
        for i in range(4):
            for j in range(6):
                wp, wm = weights.copy(), weights.copy()
                wp[i, j] += h
                wm[i, j] -= h
                fd = (
                    ortho_loss(ProjectionWeights(wp, np.zeros(4)), lam)
                    - ortho_loss(ProjectionWeights(wm, np.zeros(4)), lam)
                ) / (2 * h)
                denom = max(abs(fd), abs(grad[i, j]), 1e-8)
                worst = max(worst, abs(fd - grad[i, j]) / denom)
        assert worst < 1e-4


class TestForwardBackward:
    def test_total_is_sum_of_terms(self):
        cfg, model, params, x = fd_instance(20)
        losses, _ = forward_backward(params, model.codebooks, x, 3, 3,
                                     groups=2, beta_commit=0.05, lambda_ortho=1e-4)
        assert losses["total"] == pytest.approx(
            losses["recon_mse"] + losses["commit_loss"] + losses["ortho_loss"],
            rel=1e-15,
        )
        assert len(losses["per_stage_residual"]) == 2

    def test_bypass_gradients_match_finite_differences(self):
        cfg, model, params, x = fd_instance(21)
        err = fd_max_rel_err(params, model.codebooks, x, pinned=None, seed=21)
        assert err < 1e-4

    def test_pinned_gradients_match_finite_differences(self):
        cfg, model, params, x = fd_instance(22)
        stack = model.codebooks
        # fix the codes at their current values, then perturb parameters
        pinned = []
        for i in range(x.shape[0]):
            fr = reduce(model, FeatureMap(x[i].reshape(3, 3, 8)))
            idx, _ = quantize(stack, fr)
            pinned.append(idx)
        err = fd_max_rel_err(params, stack, x, pinned=pinned, seed=22)
        assert err < 1e-4

    def test_bypass_excludes_hooks_and_pins(self):
        cfg, model, params, x = fd_instance(23)
        with pytest.raises(ConfigError):
            forward_backward(params, model.codebooks, x, 3, 3, groups=2,
                             beta_commit=0.05, lambda_ortho=0.0,
                             bypass_quantizer=True, hook=EmaHook(2))

    def test_want_grads_false(self):
        cfg, model, params, x = fd_instance(24)
        losses, grads = forward_backward(params, model.codebooks, x, 3, 3,
                                         groups=2, beta_commit=0.05,
                                         lambda_ortho=1e-4, want_grads=False)
        assert grads is None

    def test_stage_energies_match_quantizer(self):
        cfg, model, params, x = fd_instance(25)
        losses, _ = forward_backward(params, model.codebooks, x, 3, 3,
                                     groups=2, beta_commit=0.05, lambda_ortho=0.0)
        expect = np.zeros(2)
        for i in range(x.shape[0]):
            fr = reduce(model, FeatureMap(x[i].reshape(3, 3, 8)))
            _, e = quantize(model.codebooks, fr)
            expect += e
        expect /= x.shape[0]
        assert np.abs(losses["per_stage_residual"] - expect).max() < 1e-12


class TestOptimizerAndSchedule:
    def test_adam_minimizes_quadratic(self):
        target = np.array([3.0, -1.0, 0.5])
        params = {"w": np.zeros(3)}
        opt = Adam(params)
        for _ in range(400):
            grads = {"w": 2.0 * (params["w"] - target)}
            opt.step(params, grads, lr=0.05)
        assert np.abs(params["w"] - target).max() < 1e-3

    def test_one_cycle_shape(self):
        peak, total = 1.0, 100
        lrs = [one_cycle_lr(s, total, peak) for s in range(total)]
        assert lrs[0] == pytest.approx(peak / 25.0, rel=1e-12)
        assert max(lrs) == pytest.approx(peak, rel=1e-12)
        assert lrs.index(max(lrs)) == 30  # warmup is 30% of steps
        assert all(b >= a for a, b in zip(lrs[:30], lrs[1:31]))
        assert all(b <= a for a, b in zip(lrs[30:], lrs[31:]))
        assert lrs[-1] < 0.1 * peak

    def test_one_cycle_degenerate(self):
        assert one_cycle_lr(0, 1, 0.5) == 0.5


class TestSeeding:
    def test_seed_codebooks_properties(self):
        stack = unfrozen_stack(3, 8, 4, seed=30)
        stack.seeded = False
        pts = rng_of(31).normal(size=(500, 4))
        seed_codebooks(stack, pts, rng_of(32))
        assert stack.seeded
        for cb in stack.stages:
            assert np.array_equal(cb.entries[0], np.zeros(4))
        # stage-0 non-zero entries are actual population points
        population = {pts[i].tobytes() for i in range(pts.shape[0])}
        for k in range(1, 8):
            assert stack.stages[0].entries[k].tobytes() in population

    def test_seed_codebooks_errors(self):
        frozen = random_stack(2, 4, 3, seed=33)
        with pytest.raises(StateError):
            seed_codebooks(frozen, np.zeros((10, 3)), rng_of(0))
        stack = unfrozen_stack(2, 4, 3, seed=34)
        with pytest.raises(ConfigError):
            seed_codebooks(stack, np.zeros((10, 5)), rng_of(0))


class TestKmeansReference:
    def test_k_equals_point_count(self):
        pts = rng_of(35).normal(size=(6, 3))
        centers = kmeans_reference(pts, 6, iters=10, seed=0)
        got = np.array(sorted(centers.tolist()))
        want = np.array(sorted(pts.tolist()))
        assert np.abs(got - want).max() < 1e-12

    def test_recovers_separated_gaussians(self):
        rng = rng_of(0)
        pts, centers = separated_gaussians(rng, 4, 3, 800, sigma=0.05,
                                           origin_cluster=False)
        got = kmeans_reference(pts, 4, iters=50, seed=0)
        for c in centers:
            assert np.linalg.norm(got - c, axis=1).min() < 0.05

    def test_k_one_is_mean(self):
        pts = rng_of(36).normal(size=(50, 4))
        center = kmeans_reference(pts, 1, iters=5, seed=0)
        assert np.abs(center[0] - pts.mean(axis=0)).max() < 1e-12

    def test_k_larger_than_population(self):
        with pytest.raises(ConfigError):
            kmeans_reference(np.zeros((3, 2)), 4, iters=1)
        with pytest.raises(ConfigError):
            kmeans_reference(np.zeros((3, 2)), 0, iters=1)


def scene_corpus(first_seed, count, h=24, w=24, c=32):
    return [
        generate_scene(SceneSpec(height=h, width=w, channels=c, seed=first_seed + s))
        for s in range(count)
    ]


@pytest.fixture(scope="module")
def scene_fit():
    """One small but real fit on synthetic scenes, shared by the tests below."""
    corpus = scene_corpus(0, 16)
    cfg = CodecConfig(channels=32, reduction_ratio=4, stages=3, codebook_size=8,
                      groups=2)
    model = init_model(cfg, seed=1)
    tcfg = TrainingConfig(epochs=4, batch_size=8, seed=1)
    trained, reports = fit(model, corpus, tcfg)
    return model, trained, reports, corpus, tcfg


class TestFit:
    def test_rejects_empty_corpus(self):
        model = init_model(CodecConfig(channels=8, reduction_ratio=2, stages=2,
                                       codebook_size=4, groups=2))
        with pytest.raises(ConfigError):
            fit(model, [], TrainingConfig())

    def test_rejects_frozen_model(self):
        model = init_model(CodecConfig(channels=8, reduction_ratio=2, stages=2,
                                       codebook_size=4, groups=2))
        model.freeze()
        with pytest.raises(StateError):
            fit(model, [normal_map(0, 4, 4, 8)], TrainingConfig())

    def test_rejects_wrong_channels(self):
        model = init_model(CodecConfig(channels=8, reduction_ratio=2, stages=2,
                                       codebook_size=4, groups=2))
        with pytest.raises(ConfigError):
            fit(model, [normal_map(0, 4, 4, 16)], TrainingConfig())

    def test_rejects_mixed_shapes(self):
        model = init_model(CodecConfig(channels=8, reduction_ratio=2, stages=2,
                                       codebook_size=4, groups=2))
        corpus = [normal_map(0, 4, 4, 8), normal_map(1, 6, 6, 8)]
        with pytest.raises(ConfigError):
            fit(model, corpus, TrainingConfig(epochs=1, batch_size=2))

    def test_diverging_run_aborts(self):
        model = init_model(CodecConfig(channels=8, reduction_ratio=2, stages=2,
                                       codebook_size=4, groups=2), seed=0)
        corpus = [normal_map(s, 6, 6, 8) for s in range(4)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingError):
                fit(model, corpus,
                    TrainingConfig(epochs=3, learning_rate=1e80, batch_size=2))

    def test_returns_frozen_model_and_reports(self, scene_fit):
        model, trained, reports, corpus, tcfg = scene_fit
        assert trained.frozen
        assert trained.codebooks.seeded
        assert len(reports) == tcfg.epochs
        for epoch, r in enumerate(reports):
            assert r.epoch == epoch
            assert r.recon_mse >= 0 and r.commit_loss >= 0 and r.ortho_loss >= 0
            assert r.total == pytest.approx(
                r.recon_mse + r.commit_loss + r.ortho_loss, rel=1e-12
            )
            assert len(r.per_stage_residual) == 3

    def test_input_model_untouched(self, scene_fit):
        model, trained, _, _, _ = scene_fit
        pristine = init_model(model.config, seed=1)
        assert not model.frozen
        assert np.array_equal(model.reduce_proj.weights, pristine.reduce_proj.weights)
        assert np.array_equal(
            model.codebooks.stages[0].entries, pristine.codebooks.stages[0].entries
        )

    def test_zero_code_pinned(self, scene_fit):
        _, trained, _, _, _ = scene_fit
        for cb in trained.codebooks.stages:
            assert np.array_equal(cb.entries[0], np.zeros(cb.dim))

    def test_ortho_loss_decreases(self, scene_fit):
        model, trained, _, _, tcfg = scene_fit
        before = ortho_loss(model.reduce_proj, tcfg.lambda_ortho)
        after = ortho_loss(trained.reduce_proj, tcfg.lambda_ortho)
        assert after < before

    def test_held_out_stage_energy_strictly_decreasing(self, scene_fit):
        _, trained, _, _, _ = scene_fit
        energies = []
        for fmap in scene_corpus(1000, 50):
            _, e = quantize(trained.codebooks, reduce(trained, fmap))
            energies.append(e)
        med = np.median(np.array(energies), axis=0)
        assert np.all(np.diff(med) < 0), f"stage medians {med}"

    def test_deterministic_given_seed(self):
        corpus = scene_corpus(0, 8)
        cfg = CodecConfig(channels=32, reduction_ratio=4, stages=3,
                          codebook_size=8, groups=2)
        runs = []
        for _ in range(2):
            trained, reports = fit(init_model(cfg, seed=1), corpus,
                                   TrainingConfig(epochs=2, batch_size=4, seed=9))
            runs.append((trained, reports))
        a, b = runs
        for cb_a, cb_b in zip(a[0].codebooks.stages, b[0].codebooks.stages):
            assert np.array_equal(cb_a.entries, cb_b.entries)
        assert np.array_equal(a[0].reduce_proj.weights, b[0].reduce_proj.weights)
        assert [r.to_dict() for r in a[1]] == [r.to_dict() for r in b[1]]

    def test_reaches_linear_bottleneck_floor_on_low_rank_corpus(self):
        # few distinct pixel vectors and K above their count: the quantizer
        # can be exact, so training should match the best rank-C_r affine
        # reconstruction (zero here) up to optimization tolerance
        fmap = low_rank_positive_map(100, n_distinct=3)
        corpus = [fmap] * 4
        cfg = CodecConfig(channels=8, reduction_ratio=2, stages=2,
                          codebook_size=8, groups=2)
        floor = pca_reconstruction_floor(fmap, cfg.reduced_channels)
        trained, _ = fit(
            init_model(cfg, seed=5),
            corpus,
            TrainingConfig(lambda_ortho=0.0, epochs=600, learning_rate=3e-2,
                           batch_size=4, seed=5),
        )
        out = decompress(trained, encode(trained, fmap))
        recon = float(np.mean((out.data - fmap.data) ** 2))
        assert recon <= floor + 1e-3

    def test_fast_ema_tracks_drift_better_than_slow(self):
        # drifting cluster corpus: adaptation at 0.8 ends with lower stage-0
        # quantization error than the nearly-frozen 0.99 variant
        corpus = drifting_cluster_corpus(0)
        cfg = CodecConfig(channels=8, reduction_ratio=2, stages=2,
                          codebook_size=8, groups=2)
        final = {}
        for alpha in (0.8, 0.99):
            _, reports = fit(
                init_model(cfg, seed=7), corpus,
                TrainingConfig(ema_alpha=alpha, epochs=4, batch_size=4, seed=7),
            )
            final[alpha] = reports[-1].per_stage_residual[0]
        assert final[0.8] < final[0.99]

    def test_ema_quality_close_to_lloyd(self):
        ratios = [ema_vs_lloyd_ratio(seed, alpha=0.2) for seed in range(5)]
        assert float(np.median(ratios)) <= 1.5


class TestTrainingManifest:
    def test_roundtrip(self, tmp_path):
        cfg = TrainingConfig(ema_alpha=0.3, beta_commit=0.01, lambda_ortho=1e-5,
                             epochs=7, learning_rate=2e-3, batch_size=4, seed=99)
        path = tmp_path / "training.json"
        write_training_manifest(path, cfg)
        assert read_training_manifest(path) == cfg

    def test_reports_included_when_given(self, tmp_path):
        cfg = TrainingConfig()
        reports = [LossReport(0, 1.0, 0.1, 0.01, 1.11, (2.0, 1.0))]
        path = tmp_path / "training.json"
        write_training_manifest(path, cfg, reports)
        doc = json.loads(path.read_text())
        assert len(doc["epochs"]) == 1
        assert doc["epochs"][0]["recon_mse"] == 1.0

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "training.json"
        path.write_text('{"training": {"epochs": 3, "momentum": 0.9}}')
        with pytest.raises(ConfigError):
            read_training_manifest(path)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "training.json"
        path.write_text("{oops")
        with pytest.raises(FormatError):
            read_training_manifest(path)

    def test_missing_training_section(self, tmp_path):
        path = tmp_path / "training.json"
        path.write_text('{"other": {}}')
        with pytest.raises(FormatError):
            read_training_manifest(path)


class TestCheckpoint:
    def build_state(self):
        cfg = CodecConfig(channels=8, reduction_ratio=2, stages=2,
                          codebook_size=4, groups=2)
        model = init_model(cfg, seed=40)
        params = _params_from_model(model)
        opt = Adam(params)
        x = rng_of(41).normal(size=(2, 9, 8))
        for _ in range(3):
            _, grads = forward_backward(params, model.codebooks, x, 3, 3,
                                        groups=2, beta_commit=0.05,
                                        lambda_ortho=1e-4)
            opt.step(params, grads, lr=1e-3)
        return model, opt

    def test_roundtrip(self, tmp_path):
        model, opt = self.build_state()
        path = tmp_path / "state.rvqk"
        save_checkpoint(path, model, opt, epoch=5)
        back, opt2, epoch = load_checkpoint(path)
        assert epoch == 5
        assert not back.frozen
        assert opt2.t == opt.t
        for name in _TRAINABLE_PARAMS:
            assert np.array_equal(opt2.m[name], opt.m[name])
            assert np.array_equal(opt2.v[name], opt.v[name])
        assert back.codebooks.content_hash == model.codebooks.content_hash
        assert np.array_equal(
            back.reduce_proj.weights,
            model.reduce_proj.weights.astype(np.float32).astype(np.float64),
        )

    def test_truncation_detected(self, tmp_path):
        model, opt = self.build_state()
        path = tmp_path / "state.rvqk"
        save_checkpoint(path, model, opt, epoch=1)
        raw = path.read_bytes()
        for cut in (8, len(raw) // 2, len(raw) - 3):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(path)

    def test_trailing_bytes_detected(self, tmp_path):
        model, opt = self.build_state()
        path = tmp_path / "state.rvqk"
        save_checkpoint(path, model, opt, epoch=1)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        model, opt = self.build_state()
        path = tmp_path / "state.rvqk"
        save_checkpoint(path, model, opt, epoch=1)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(path)
