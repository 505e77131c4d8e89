import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lmadapt.analysis import oracle_min_loss
from lmadapt.model import ArchSpec, expected_loss, log_probs, random_params, zeros_params
from lmadapt.selection import (
    DegenerateWeightsError,
    SelectionWeights,
    binarize_intsel,
    conditional_weight_identity,
    decile_thresholds,
    effective_sample_size,
    estimated_importance_weights,
    estimation_error_report,
    read_weights_csv,
    selected_count,
    true_importance_weights,
    write_weights_csv,
)
from lmadapt.sources import (
    AbsoluteContinuityError,
    Dataset,
    DistributionTable,
    Vocab,
    derive_seed,
    enumerate_distribution,
    entropy,
    perturbed_source,
    sample,
    sequence_index,
    sequence_space,
    sticky_source,
)
from lmadapt.training import TrainConfig, fine_tune, train

V, N = 3, 4
ARCH = ArchSpec("tabular", N - 1, Vocab(V), N)
SRC_D = sticky_source(V, N, 0.7)
SRC_T = perturbed_source(SRC_D, 0.7, 0)

positive_weights = arrays(np.float64, st.integers(1, 60), elements=st.floats(1e-6, 1e6))


@pytest.fixture(scope="module")
def tables():
    return enumerate_distribution(SRC_T), enumerate_distribution(SRC_D)


class TestWeightsType:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            SelectionWeights([1.0, -0.1], "true_importance")

    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            SelectionWeights([1.0], "classifier")

    def test_binary_values(self):
        with pytest.raises(ValueError):
            SelectionWeights([0.0, 0.5], "intsel_binary")


class TestTrueWeights:
    def test_same_source_all_ones(self, tables):
        _, tD = tables
        d = sample(SRC_D, 50, 1)
        np.testing.assert_array_equal(true_importance_weights(tD, tD, d).values, 1.0)

    def test_direct_ratio(self):
        v = Vocab(2)
        tT = DistributionTable(v, 1, np.array([0.75, 0.25]))
        tD = DistributionTable(v, 1, np.array([0.5, 0.5]))
        w = true_importance_weights(tT, tD, Dataset.from_sequences([(0,), (1,)], v))
        np.testing.assert_allclose(w.values, [1.5, 0.5])

    def test_zero_denominator(self):
        v = Vocab(2)
        tT = DistributionTable(v, 1, np.array([0.5, 0.5]))
        tD = DistributionTable(v, 1, np.array([1.0, 0.0]))
        with pytest.raises(AbsoluteContinuityError):
            true_importance_weights(tT, tD, Dataset.from_sequences([(1,)], v))

    def test_reweighting_identity_on_omega(self, tables):
        tT, tD = tables
        omega = Dataset(sequence_space(V, N), Vocab(V))
        w = true_importance_weights(tT, tD, omega).values
        for seed in range(5):
            f = -log_probs(random_params(ARCH, seed, scale=1.0), omega.tokens)
            assert abs(np.sum(tD.probs * w * f) - np.sum(tT.probs * f)) < 1e-10

    def test_monte_carlo_consistency(self, tables):
        tT, tD = tables
        params = random_params(ARCH, 7, scale=0.5)
        d = sample(SRC_D, 100_000, 3)
        w = true_importance_weights(tT, tD, d).values
        terms = -w * log_probs(params, d.tokens)
        se = terms.std(ddof=1) / math.sqrt(len(d))
        assert abs(terms.mean() - expected_loss(params, tT)) < 3 * se


class TestEstimatedWeights:
    def test_same_model_all_ones(self):
        p = random_params(ARCH, 0)
        d = sample(SRC_D, 20, 0)
        w = estimated_importance_weights(p, p, d, n_ft=0)
        np.testing.assert_array_equal(w.values, 1.0)
        assert w.metadata == {"n_ft": 0}

    def test_log_odds_of_ln2(self):
        a = ArchSpec("tabular", 1, Vocab(2), 1)
        pD = zeros_params(a).replace([0.0, math.log(2)])  # P(0) = 1/3
        pT = zeros_params(a).replace([math.log(2), 0.0])  # P(0) = 2/3
        w = estimated_importance_weights(pT, pD, Dataset.from_sequences([(0,)], Vocab(2)))
        assert w.values[0] == pytest.approx(2.0, abs=1e-15)

    def test_arch_mismatch(self):
        with pytest.raises(ValueError):
            estimated_importance_weights(zeros_params(ARCH), zeros_params(ArchSpec("tabular", 1, Vocab(V), N)),
                                         sample(SRC_D, 2, 0))

    def test_mass_concentrates_on_target_neighbourhood(self):
        D = sample(SRC_D, 2000, 11)
        T = sample(SRC_T, 100, 12)
        theta_D, _ = train(zeros_params(ARCH), D, TrainConfig(2.0, 1000))
        in_T = np.isin(sequence_index(D.tokens, V), sequence_index(T.tokens, V))
        shares = []
        for n_ft in (1, 10, 100):
            theta_ft, _ = fine_tune(theta_D, T, n_ft, 0.5)
            w = estimated_importance_weights(theta_ft, theta_D, D).values
            shares.append(w[in_T].sum() / w.sum())
        assert shares[0] <= shares[1] <= shares[2]


class TestEss:
    def test_uniform(self):
        assert effective_sample_size(np.full(10, 0.3)).n_e == 10

    def test_one_hot(self):
        w = np.zeros(7)
        w[3] = 5.0
        assert effective_sample_size(w).n_e == 1

    def test_hand_value(self):
        assert effective_sample_size(np.array([1.0, 1.0, 2.0])).n_e == pytest.approx(16 / 6)

    def test_all_zero(self):
        with pytest.raises(DegenerateWeightsError):
            effective_sample_size(np.zeros(4))

    def test_huge_weights_do_not_overflow(self):
        assert effective_sample_size(np.array([1e200, 1e200])).n_e == 2

    @given(positive_weights)
    def test_bounds_and_means_form(self, w):
        rep = effective_sample_size(w)
        assert 1 - 1e-12 <= rep.n_e <= len(w) * (1 + 1e-12)
        assert rep.n_e == pytest.approx(rep.n_e_from_means, rel=1e-9)
        assert rep.n_e == pytest.approx(w.sum() ** 2 / np.sum(w**2), rel=1e-9)


class TestBinarize:
    def test_minus_infinity_selects_positive(self):
        w = SelectionWeights([0.0, 0.5, 3.0], "estimated_importance")
        np.testing.assert_array_equal(binarize_intsel(w, -math.inf).values, [0, 1, 1])

    def test_sign_of_log(self):
        w = SelectionWeights([2.0, 0.5], "estimated_importance")
        b = binarize_intsel(w, 0.0)
        np.testing.assert_array_equal(b.values, [1, 0])
        assert b.method == "intsel_binary" and b.metadata["tau"] == 0.0

    @given(positive_weights, st.floats(-10, 10), st.floats(-10, 10))
    def test_monotone_in_tau(self, w, t1, t2):
        sw = SelectionWeights(w, "estimated_importance")
        lo, hi = min(t1, t2), max(t1, t2)
        assert selected_count(sw, hi) <= selected_count(sw, lo)
        assert np.all(binarize_intsel(sw, hi).values <= binarize_intsel(sw, lo).values)

    def test_scale_shift_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            w = np.exp(rng.normal(scale=2, size=50))
            c = math.exp(rng.normal(scale=3))
            tau = rng.normal()
            a = binarize_intsel(SelectionWeights(w, "estimated_importance"), tau).values
            b = binarize_intsel(SelectionWeights(c * w, "estimated_importance"), tau + math.log(c)).values
            np.testing.assert_array_equal(a, b)

    def test_deciles(self):
        w = SelectionWeights(np.exp(np.arange(1, 101, dtype=float)), "estimated_importance")
        taus = decile_thresholds(w)
        assert len(taus) == 9 and np.all(np.diff(taus) > 0)
        assert selected_count(w, taus[4]) == 50


class TestConditionalIdentity:
    def test_matching_marginals(self):
        assert conditional_weight_identity(0.3, 0.3, 1.7) == 1.7

    def test_ratio_product(self):
        assert conditional_weight_identity(0.6, 0.3, 1.0) == pytest.approx(2.0)

    def test_zero_conditional(self):
        assert conditional_weight_identity(0.6, 0.3, 0.0) == 0.0

    def test_zero_marginal(self):
        with pytest.raises(AbsoluteContinuityError):
            conditional_weight_identity(0.3, 0.0, 1.0)

    @given(st.floats(1e-3, 1), st.floats(1e-3, 1), st.floats(0, 10))
    def test_equals_joint_ratio(self, px_T, px_D, w_cond):
        # joint P(x,y) = P(x) P(y|x): ratio of joints = marginal ratio * conditional ratio
        assert conditional_weight_identity(px_T, px_D, w_cond) == pytest.approx(px_T / px_D * w_cond, rel=1e-12)


class TestEstimationError:
    cfg = TrainConfig(2.0, 500)

    def test_same_source_equals_plain_estimation_error(self):
        D, T = sample(SRC_D, 500, 1), sample(SRC_D, 50, 2)
        rep = estimation_error_report(SRC_D, SRC_D, ARCH, D, T, self.cfg, 5, 0.5)
        tD = enumerate_distribution(SRC_D)
        theta_D, _ = train(zeros_params(ARCH), D, self.cfg)
        plain = expected_loss(theta_D, tD) - oracle_min_loss(tD, ARCH).loss
        assert rep.l_est_w == pytest.approx(plain, abs=1e-3)

    def test_zero_fine_tuning_is_pure_bias(self):
        D, T = sample(SRC_D, 500, 1), sample(SRC_T, 50, 2)
        rep = estimation_error_report(SRC_T, SRC_D, ARCH, D, T, self.cfg, 0, 0.5)
        assert rep.l_est_what == pytest.approx(rep.loss_theta_D - rep.loss_true_w, abs=1e-6)
        assert rep.l_est_w >= -1e-3 and "l_est_w_negative" not in rep.flags

    @pytest.mark.slow
    def test_true_weight_error_shrinks_with_data(self):
        tT, tD = enumerate_distribution(SRC_T), enumerate_distribution(SRC_D)
        best = oracle_min_loss(tT, ARCH).loss
        cfg = TrainConfig(2.0, 300)
        medians = []
        for size in (100, 1000, 10000):
            errs = []
            for seed in range(10):
                D = sample(SRC_D, size, derive_seed(seed, size))
                theta, _ = train(zeros_params(ARCH), D, cfg, true_importance_weights(tT, tD, D))
                errs.append(expected_loss(theta, tT) - best)
            medians.append(np.median(errs))
        assert medians[0] >= medians[1] >= medians[2]


class TestCsv:
    def test_round_trip(self, tmp_path):
        d = sample(SRC_D, 30, 0)
        w = SelectionWeights(np.exp(np.random.default_rng(0).normal(size=30)), "estimated_importance",
                             {"n_ft": 3, "learning_rate": 0.25})
        path = write_weights_csv(w, d, tmp_path / "w.csv")
        back, data = read_weights_csv(path, Vocab(V))
        np.testing.assert_array_equal(back.values, w.values)
        np.testing.assert_array_equal(data.tokens, d.tokens)
        assert back.method == "estimated_importance" and back.metadata == {"n_ft": 3, "learning_rate": 0.25}

    def test_binary_round_trip_keeps_tau(self, tmp_path):
        d = sample(SRC_D, 5, 0)
        w = binarize_intsel(SelectionWeights([0.5, 2, 3, 0.1, 1.5], "estimated_importance"), 0.2)
        back, _ = read_weights_csv(write_weights_csv(w, d, tmp_path / "b.csv"), Vocab(V))
        assert back.metadata["tau"] == 0.2 and back.method == "intsel_binary"

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            write_weights_csv(SelectionWeights([1.0], "true_importance"), sample(SRC_D, 2, 0), tmp_path / "x.csv")


def test_entropy_is_lower_bound_of_oracle():
    t = enumerate_distribution(SRC_T)
    assert oracle_min_loss(t, ARCH).loss >= entropy(t) - 1e-10
