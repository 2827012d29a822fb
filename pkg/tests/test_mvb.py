"""Joint-table machinery, the naive estimator, and the blocked surrogate."""

import math

import numpy as np
import pytest

from hashbound.codes import BitCode, index_to_code, sign_matrix
from hashbound.errors import (
    InvalidInputError,
    TrainingDivergenceError,
    UnsupportedWidthError,
)
from hashbound.mvb import (
    EstimationDemo,
    MvbDistribution,
    SurrogateModel,
    blockwise_dirichlet_mvb,
    dirichlet_mvb,
    estimation_demo,
    kl_divergence,
    mvb_sample,
    naive_estimate,
    surrogate_predict,
    surrogate_train,
)

# Observed two-bit joint and its printed marginals; cell order follows the
# code index (bit 1 is the low bit).
DEMO_JOINT = [0.394, 0.081, 0.079, 0.446]
DEMO_MARGINAL_B1 = (0.473, 0.527)
DEMO_MARGINAL_B2 = (0.475, 0.525)


def demo_product_table() -> list[float]:
    return [
        DEMO_MARGINAL_B1[i & 1] * DEMO_MARGINAL_B2[(i >> 1) & 1]
        for i in range(4)
    ]


def demo_kl_oracle() -> float:
    """Independent four-term summation, plain Python floats."""
    q = demo_product_table()
    return sum(p * math.log(p / qi) for p, qi in zip(DEMO_JOINT, q))


class TestMvbDistribution:
    def test_valid_table(self):
        dist = MvbDistribution(2, np.array([0.1, 0.2, 0.3, 0.4]))
        assert dist.h == 2
        assert dist.probs.sum() == pytest.approx(1.0)

    def test_wrong_cell_count(self):
        with pytest.raises(InvalidInputError):
            MvbDistribution(2, np.array([0.5, 0.5]))

    def test_negative_cell(self):
        with pytest.raises(InvalidInputError):
            MvbDistribution(1, np.array([1.5, -0.5]))

    def test_sum_off(self):
        with pytest.raises(InvalidInputError):
            MvbDistribution(1, np.array([0.5, 0.6]))

    def test_too_wide(self):
        with pytest.raises(UnsupportedWidthError):
            MvbDistribution(17, np.full(1 << 17, 1.0 / (1 << 17)))

    def test_probs_read_only(self):
        dist = MvbDistribution(1, np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            dist.probs[0] = 1.0


class TestKlDivergence:
    def test_identical_is_zero(self):
        p = dirichlet_mvb(3, seed=7)
        assert kl_divergence(p, p) == 0.0

    def test_demo_joint_vs_marginal_product(self):
        joint = MvbDistribution(2, np.array(DEMO_JOINT))
        product = MvbDistribution(2, np.array(demo_product_table()))
        oracle = demo_kl_oracle()
        assert kl_divergence(joint, product) == pytest.approx(oracle, abs=1e-15)
        assert oracle == pytest.approx(0.2524, abs=1e-3)

    def test_non_negative_on_random_pairs(self):
        for seed in range(20):
            p = dirichlet_mvb(4, seed=seed)
            q = dirichlet_mvb(4, seed=seed + 100)
            assert kl_divergence(p, q) >= 0.0

    def test_absolute_continuity_sentinel(self):
        p = MvbDistribution(1, np.array([0.5, 0.5]))
        q = MvbDistribution(1, np.array([1.0, 0.0]))
        assert kl_divergence(p, q) == math.inf
        assert kl_divergence(q, p) < math.inf

    def test_zero_cells_in_p_contribute_nothing(self):
        p = MvbDistribution(1, np.array([1.0, 0.0]))
        q = MvbDistribution(1, np.array([0.25, 0.75]))
        assert kl_divergence(p, q) == pytest.approx(math.log(4.0))

    def test_length_mismatch(self):
        p = MvbDistribution(1, np.array([0.5, 0.5]))
        q = MvbDistribution(2, np.full(4, 0.25))
        with pytest.raises(InvalidInputError):
            kl_divergence(p, q)


class TestMvbSample:
    def test_point_mass(self):
        probs = np.zeros(16)
        probs[5] = 1.0
        dist = MvbDistribution(4, probs)
        samples = mvb_sample(dist, 50, seed=3)
        assert all(s == index_to_code(5, 4) for s in samples)

    def test_sample_type_and_length(self):
        samples = mvb_sample(dirichlet_mvb(6, seed=1), 10, seed=2)
        assert len(samples) == 10
        assert all(isinstance(s, BitCode) and s.length == 6 for s in samples)

    def test_uniform_frequencies_within_three_sigma(self):
        dist = MvbDistribution(2, np.full(4, 0.25))
        samples = mvb_sample(dist, 10_000, seed=9)
        signs = sign_matrix(samples)
        indices = (signs > 0) @ np.array([1, 2])
        freqs = np.bincount(indices, minlength=4) / 10_000
        sigma = math.sqrt(0.25 * 0.75 / 10_000)
        assert np.all(np.abs(freqs - 0.25) < 3 * sigma)

    def test_fixed_seed_reproduces_stream(self):
        dist = dirichlet_mvb(5, seed=4)
        assert mvb_sample(dist, 40, seed=8) == mvb_sample(dist, 40, seed=8)

    def test_empty_draw(self):
        assert mvb_sample(dirichlet_mvb(2, seed=0), 0, seed=0) == []

    def test_negative_count_rejected(self):
        with pytest.raises(InvalidInputError):
            mvb_sample(dirichlet_mvb(2, seed=0), -1, seed=0)


class TestNaiveEstimate:
    def test_all_equal_gives_point_mass(self):
        samples = [index_to_code(6, 3)] * 8
        est = naive_estimate(samples)
        expected = np.zeros(8)
        expected[6] = 1.0
        np.testing.assert_allclose(est.probs, expected, atol=1e-15)

    def test_perfect_correlation_estimated_as_uniform(self):
        samples = [index_to_code(0, 2)] * 50 + [index_to_code(3, 2)] * 50
        est = naive_estimate(samples)
        np.testing.assert_allclose(est.probs, 0.25, atol=1e-15)
        truth = MvbDistribution(2, np.array([0.5, 0.0, 0.0, 0.5]))
        assert kl_divergence(truth, est) == pytest.approx(math.log(2.0))

    def test_demo_counts_reproduce_marginal_product(self):
        # 1,000 codes with the demo joint's exact cell counts; the
        # estimator's product table must equal the printed-marginal product.
        samples = []
        for index, count in enumerate([394, 81, 79, 446]):
            samples.extend([index_to_code(index, 2)] * count)
        est = naive_estimate(samples)
        np.testing.assert_allclose(est.probs, demo_product_table(), atol=1e-15)
        joint = MvbDistribution(2, np.array(DEMO_JOINT))
        assert kl_divergence(joint, est) == pytest.approx(
            demo_kl_oracle(), abs=1e-12
        )

    def test_independent_truth_estimated_well(self):
        truth = blockwise_dirichlet_mvb(8, 1, seed=21)
        samples = mvb_sample(truth, 10_000, seed=22)
        assert kl_divergence(truth, naive_estimate(samples)) < 0.01

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            naive_estimate([])


class TestSurrogateModel:
    def test_default_blocks(self):
        assert SurrogateModel(8).block_sizes == (8,)
        assert SurrogateModel(16).block_sizes == (8, 8)
        assert SurrogateModel(12).block_sizes == (8, 4)

    def test_explicit_block_count(self):
        assert SurrogateModel(16, u=2).block_sizes == (8, 8)
        assert SurrogateModel(16, u=3).block_sizes == (6, 6, 4)
        assert SurrogateModel(4, u=2).block_sizes == (2, 2)

    def test_u_and_block_bits_exclusive(self):
        with pytest.raises(InvalidInputError):
            SurrogateModel(16, u=2, block_bits=8)

    def test_bad_block_count(self):
        with pytest.raises(InvalidInputError):
            SurrogateModel(8, u=0)
        with pytest.raises(InvalidInputError):
            SurrogateModel(8, u=9)

    def test_oversized_block_rejected(self):
        with pytest.raises(UnsupportedWidthError):
            SurrogateModel(20, u=1)

    def test_param_count_analytic(self):
        model = SurrogateModel(16, u=2, hidden=256)
        per_block = (8 * 256 + 256) + (256 * 256 + 256)
        assert model.param_count() == 2 * per_block

    def test_blocked_complexity_scales_with_u(self):
        # u blocks cost u * O(2^(h/u)) outputs, never O(2^h).
        blocked = SurrogateModel(16, u=2, hidden=4)
        per_block = (8 * 4 + 4) + (4 * 256 + 256)
        assert blocked.param_count() == 2 * per_block
        assert blocked.param_count() < (1 << 16)

    def test_block_targets(self):
        model = SurrogateModel(4, u=2)
        rows = np.array(
            [
                [-1.0, 1.0, -1.0, 1.0],
                [1.0, 1.0, 1.0, 1.0],
                [-1.0, -1.0, -1.0, -1.0],
                [0.0, -1.0, 1.0, -1.0],
            ]
        )
        t1, t2 = model.block_targets(rows)
        assert t1.tolist() == [2, 3, 0, 1]
        assert t2.tolist() == [2, 3, 0, 1]

    def test_zero_parameters_predict_uniform(self):
        model = SurrogateModel(4, u=2)
        for net in model.nets:
            net.set_params([np.zeros_like(p) for p in net.params()])
        est = surrogate_predict(model, [index_to_code(9, 4)])
        np.testing.assert_allclose(est.probs, 1.0 / 16, atol=1e-15)

    def test_kron_assembly_matches_manual_product(self):
        model = SurrogateModel(4, u=2, seed=5)
        code = index_to_code(13, 4)
        est = surrogate_predict(model, [code])
        model.eval()
        row = sign_matrix([code]).astype(np.float64)
        tables = []
        for net, sl in zip(model.nets, model.block_slices()):
            logits, _ = net.forward(row[:, sl])
            exp = np.exp(logits[0] - logits[0].max())
            tables.append(exp / exp.sum())
        manual = np.empty(16)
        for i2 in range(4):
            for i1 in range(4):
                manual[i2 * 4 + i1] = tables[1][i2] * tables[0][i1]
        np.testing.assert_allclose(est.probs, manual, rtol=1e-12)


class TestSurrogateTraining:
    def test_point_mass_memorized(self):
        # 200 epochs x 10 batches = 2,000 steps on constant data.
        samples = [index_to_code(9, 4)] * 640
        model = SurrogateModel(4, seed=11)
        history = surrogate_train(
            model,
            samples,
            epochs=200,
            batch=64,
            lr=1e-3,
            seed=12,
            decay_every=10**9,
        )
        assert history[-1] < history[0]
        est = surrogate_predict(model, samples[:4])
        target = np.zeros(16)
        target[9] = 1.0
        assert 0.5 * np.abs(est.probs - target).sum() < 0.05

    def test_training_is_deterministic(self):
        truth = dirichlet_mvb(4, seed=1)
        samples = mvb_sample(truth, 256, seed=2)
        runs = []
        for _ in range(2):
            model = SurrogateModel(4, seed=3)
            history = surrogate_train(model, samples, epochs=2, seed=4)
            est = surrogate_predict(model, samples[:16])
            runs.append((history, est.probs))
        assert runs[0][0] == runs[1][0]
        np.testing.assert_array_equal(runs[0][1], runs[1][1])

    def test_bitcodes_and_sign_rows_agree(self):
        truth = dirichlet_mvb(4, seed=6)
        samples = mvb_sample(truth, 128, seed=7)
        rows = sign_matrix(samples).astype(np.float64)
        m1 = SurrogateModel(4, seed=8)
        m2 = SurrogateModel(4, seed=8)
        h1 = surrogate_train(m1, samples, epochs=1, seed=9)
        h2 = surrogate_train(m2, rows, epochs=1, seed=9)
        assert h1 == h2

    def test_non_finite_input_diverges(self):
        rows = np.ones((64, 4))
        rows[0, 0] = np.inf
        model = SurrogateModel(4, seed=0)
        with np.errstate(invalid="ignore"):
            with pytest.raises(TrainingDivergenceError):
                surrogate_train(model, rows, epochs=1, seed=0)

    def test_length_mismatch_rejected(self):
        model = SurrogateModel(8)
        with pytest.raises(InvalidInputError):
            surrogate_train(model, [index_to_code(1, 4)] * 8, epochs=1)


class TestGenerators:
    def test_dirichlet_is_deterministic(self):
        a = dirichlet_mvb(6, seed=13)
        b = dirichlet_mvb(6, seed=13)
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_blockwise_blocks_are_independent(self):
        dist = blockwise_dirichlet_mvb(4, 2, seed=17)
        table = dist.probs.reshape(4, 4)
        # rows are high-block slices; independence makes them proportional
        marginal_low = table.sum(axis=0)
        marginal_high = table.sum(axis=1)
        np.testing.assert_allclose(
            table, np.outer(marginal_high, marginal_low), atol=1e-15
        )

    def test_single_block_has_cross_bit_dependence(self):
        dist = blockwise_dirichlet_mvb(4, 4, seed=17)
        table = dist.probs.reshape(4, 4)
        marginal_low = table.sum(axis=0)
        marginal_high = table.sum(axis=1)
        assert not np.allclose(table, np.outer(marginal_high, marginal_low))

    def test_bad_block_bits(self):
        with pytest.raises(InvalidInputError):
            blockwise_dirichlet_mvb(4, 5, seed=0)

    def test_too_wide(self):
        with pytest.raises(UnsupportedWidthError):
            dirichlet_mvb(17, seed=0)


class TestEstimationDemo:
    def test_smoke_run_fields(self):
        demo = estimation_demo(4, train_samples=500, eval_samples=20, seed=1)
        assert isinstance(demo, EstimationDemo)
        assert demo.h == 4
        assert math.isfinite(demo.naive_kl)
        assert math.isfinite(demo.surrogate_kl)
        assert demo.truth.probs.shape == (16,)

    def test_surrogate_adds_no_bias_when_independent(self):
        # Product-of-bits ground truth: both estimators should land close
        # together. The surrogate's table is read over the training inputs.
        truth = blockwise_dirichlet_mvb(8, 1, seed=21)
        train = mvb_sample(truth, 10_000, seed=22)
        naive_kl = kl_divergence(truth, naive_estimate(train))
        model = SurrogateModel(8, seed=24)
        surrogate_train(model, train, epochs=4, batch=16, lr=4e-4, seed=25)
        surrogate_kl = kl_divergence(truth, surrogate_predict(model, train))
        assert abs(surrogate_kl - naive_kl) < 0.05

    def test_correlated_truth_favors_surrogate(self):
        demo = estimation_demo(8, seed=0)
        assert demo.surrogate_kl < demo.naive_kl
