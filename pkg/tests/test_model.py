import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lmadapt.model import (
    ArchSpec,
    HessianTooLargeError,
    ModelParams,
    data_stats,
    empirical_loss,
    empirical_loss_grad,
    expected_loss,
    fd_hessian,
    grad_log_prob,
    grad_log_probs,
    hessian,
    load_params,
    log_prob,
    log_probs,
    model_distribution,
    perplexity,
    random_params,
    save_params,
    stats_loss_and_grad,
    zeros_params,
)
from lmadapt.sources import (
    Dataset,
    Vocab,
    enumerate_distribution,
    entropy,
    kl_divergence,
    random_source,
    sample,
    sequence_space,
    sticky_source,
)

from strategies import params_and_sequence


def arch(family="tabular", k=1, V=2, n=3):
    return ArchSpec(family, k, Vocab(V), n)


def fd_grad(params, y, h=1e-5):
    out = np.empty(params.theta.size)
    for j in range(out.size):
        e = np.zeros(out.size)
        e[j] = h
        out[j] = (log_prob(params.replace(params.theta + e), y) - log_prob(params.replace(params.theta - e), y)) / (2 * h)
    return out


def realizing_params(source, a):
    """Tabular params whose conditionals equal the source's (requires k >= 1 and full support)."""
    W = np.zeros((a.n_features, a.V))
    seqs = sequence_space(a.V, a.seq_len)
    ctx = a.context_ids(seqs)
    for i in range(a.seq_len):
        rows = np.log(source.initial)[None, :] if i == 0 else np.log(source.transition[seqs[:, i - 1]])
        W[ctx[:, i]] = rows
    return ModelParams(a, W.ravel())


class TestArch:
    def test_param_counts(self):
        # reachable contexts of length 0..min(k, n-1)
        assert arch("tabular", 4, 4, 5).n_params == (1 + 4 + 16 + 64 + 256) * 4
        assert arch("tabular", 1, 3, 4).n_params == (1 + 3) * 3
        assert arch("loglinear", 2, 4, 5).n_params == (2 * 4 + 1) * 4

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            ArchSpec("transformer", 1, Vocab(2), 2)

    def test_context_len_positive(self):
        with pytest.raises(ValueError):
            arch(k=0)

    def test_params_length_checked(self):
        with pytest.raises(ValueError):
            ModelParams(arch(), np.zeros(3))

    def test_params_must_be_finite(self):
        a = arch()
        with pytest.raises(ValueError):
            ModelParams(a, np.full(a.n_params, np.nan))

    def test_random_init_is_seeded(self):
        a = arch()
        np.testing.assert_array_equal(random_params(a, 3).theta, random_params(a, 3).theta)
        assert np.std(random_params(arch("tabular", 4, 4, 5), 1).theta) == pytest.approx(0.1, rel=0.1)


class TestLogProb:
    def test_uniform_tabular(self):
        assert log_prob(zeros_params(arch()), (0, 1, 1)) == pytest.approx(3 * math.log(0.5), abs=1e-15)
        assert log_prob(zeros_params(arch()), (0, 1, 1)) == pytest.approx(-2.079442, abs=1e-6)

    def test_uniform_loglinear(self):
        assert log_prob(zeros_params(arch("loglinear", 1, 4, 2)), (3, 0)) == pytest.approx(-2.772589, abs=1e-6)

    def test_softmax_hand_value(self):
        a = arch("tabular", 1, 2, 1)
        p = ModelParams(a, [math.log(3), 0.0])
        assert log_prob(p, (0,)) == pytest.approx(math.log(0.75), abs=1e-15)

    def test_token_out_of_range(self):
        with pytest.raises(ValueError):
            log_prob(zeros_params(arch()), (0, 2, 1))

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            log_prob(zeros_params(arch()), (0, 1))

    @given(params_and_sequence())
    def test_nonpositive(self, ps):
        params, y = ps
        assert log_prob(params, y) <= 0


class TestDistribution:
    @given(params_and_sequence())
    def test_normalised(self, ps):
        params, _ = ps
        assert abs(model_distribution(params).probs.sum() - 1) < 1e-8

    def test_zero_params_uniform(self):
        np.testing.assert_allclose(model_distribution(zeros_params(arch())).probs, 1 / 8, rtol=1e-14)

    def test_matches_log_prob(self):
        params = random_params(arch(), 4, scale=1.0)
        t = model_distribution(params)
        for y in sequence_space(2, 3):
            assert t[tuple(y)] == pytest.approx(math.exp(log_prob(params, y)), abs=1e-12)


class TestGradient:
    def test_uniform_hand_value(self):
        a = arch("tabular", 1, 2, 1)
        np.testing.assert_allclose(grad_log_prob(zeros_params(a), (0,)).values, [0.5, -0.5])

    @given(params_and_sequence())
    def test_finite_differences(self, ps):
        params, y = ps
        g = grad_log_prob(params, y).values
        fd = fd_grad(params, y)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)

    @pytest.mark.parametrize("family", ["tabular", "loglinear"])
    def test_expected_score_is_zero(self, family):
        params = random_params(arch(family, 2, 3, 3), 9, scale=1.0)
        seqs = sequence_space(3, 3)
        p = np.exp(log_probs(params, seqs))
        assert np.abs(p @ grad_log_probs(params, seqs)).max() < 1e-8

    def test_batch_matches_single(self):
        params = random_params(arch("loglinear", 2, 3, 4), 1, scale=1.0)
        seqs = sequence_space(3, 4)[::11]
        G = grad_log_probs(params, seqs)
        for y, g in zip(seqs, G):
            np.testing.assert_allclose(g, grad_log_prob(params, y).values, atol=1e-14)


class TestLosses:
    def setup_method(self):
        self.a = arch()
        self.data = Dataset.from_sequences([(0, 1, 1), (1, 1, 1), (0, 0, 0)], Vocab(2))

    def test_uniform_loss(self):
        assert empirical_loss(zeros_params(self.a), self.data) == pytest.approx(3 * math.log(2))

    def test_zero_weights(self):
        params = random_params(self.a, 0)
        assert empirical_loss(params, self.data, np.zeros(3)) == 0.0

    def test_weights_scale_linearly(self):
        params = random_params(self.a, 0)
        assert empirical_loss(params, self.data, np.full(3, 2.0)) == 2 * empirical_loss(params, self.data)

    def test_weighted_definition(self):
        params = random_params(self.a, 2, scale=1.0)
        w = np.array([0.5, 2.0, 0.0])
        direct = -np.sum(w * log_probs(params, self.data.tokens)) / 3
        assert empirical_loss(params, self.data, w) == pytest.approx(direct, abs=1e-14)

    def test_weight_validation(self):
        params = zeros_params(self.a)
        with pytest.raises(ValueError):
            empirical_loss(params, self.data, np.ones(2))
        with pytest.raises(ValueError):
            empirical_loss(params, self.data, np.array([1.0, -1.0, 1.0]))

    def test_stats_gradient_matches_per_example(self):
        params = random_params(arch("loglinear", 2, 3, 4), 5, scale=1.0)
        data = sample(sticky_source(3, 4, 0.5), 50, 1)
        g = empirical_loss_grad(params, data)
        np.testing.assert_allclose(g, -grad_log_probs(params, data.tokens).mean(axis=0), atol=1e-13)

    def test_expected_loss_uniform(self):
        t = enumerate_distribution(sticky_source(2, 3, 0.9))
        assert expected_loss(zeros_params(self.a), t) == pytest.approx(3 * math.log(2), abs=1e-14)

    def test_expected_loss_at_truth_is_entropy(self):
        src = random_source(3, 4, np.random.default_rng(0))
        a = arch("tabular", 3, 3, 4)
        t = enumerate_distribution(src)
        assert expected_loss(realizing_params(src, a), t) == pytest.approx(entropy(t), abs=1e-8)

    def test_expected_loss_monte_carlo(self):
        src = sticky_source(3, 4, 0.6)
        params = random_params(arch("loglinear", 1, 3, 4), 3, scale=1.0)
        d = sample(src, 100_000, 17)
        nll = -log_probs(params, d.tokens)
        se = nll.std(ddof=1) / math.sqrt(len(d))
        assert abs(nll.mean() - expected_loss(params, enumerate_distribution(src))) < 3 * se

    @given(params_and_sequence(), st.integers(0, 2**31 - 1))
    def test_gibbs_identity(self, ps, seed):
        params, _ = ps
        a = params.arch
        t = enumerate_distribution(random_source(a.V, a.seq_len, np.random.default_rng(seed)))
        gap = expected_loss(params, t) - entropy(t)
        assert gap >= -1e-10
        assert gap == pytest.approx(kl_divergence(t, model_distribution(params)), abs=1e-8)


class TestPerplexity:
    @pytest.mark.parametrize("V", [2, 4])
    def test_uniform(self, V):
        d = Dataset.from_sequences([(0, 1), (1, 1)], Vocab(V))
        assert perplexity(zeros_params(arch(V=V, n=2)), d) == pytest.approx(V)

    def test_perfect_model(self):
        a = arch("tabular", 1, 2, 2)
        W = np.zeros((a.n_features, 2))
        W[:, 0] = 60.0  # next token is 0 with probability 1 - 1e-26
        d = Dataset.from_sequences([(0, 0)] * 4, Vocab(2))
        assert perplexity(ModelParams(a, W.ravel()), d) == pytest.approx(1.0, abs=1e-12)


class TestHessian:
    def test_one_dimensional_toy(self):
        # a single free logit against a fixed zero: the loss is a 1-D softplus curve
        data = Dataset.from_sequences([(0,), (0,), (1,)], Vocab(2))
        a = arch("tabular", 1, 2, 1)

        def loss(t):
            return empirical_loss(ModelParams(a, [t, 0.0]), data)

        def grad(theta):
            return empirical_loss_grad(ModelParams(a, [theta[0], 0.0]), data)[:1]

        t0, h = 0.3, 1e-4
        second = (loss(t0 + h) - 2 * loss(t0) + loss(t0 - h)) / h**2
        assert fd_hessian(grad, np.array([t0]))[0, 0] == pytest.approx(second, abs=1e-4)

    def test_symmetric_before_symmetrising(self):
        params = random_params(arch("loglinear", 2, 3, 4), 8, scale=1.0)
        data = sample(sticky_source(3, 4, 0.5), 40, 2)
        H = hessian(params, data, symmetrize=False)
        assert np.abs(H - H.T).max() < 1e-6
        Hs = hessian(params, data)
        np.testing.assert_array_equal(Hs, Hs.T)

    def test_taylor_residual_is_cubic(self):
        params = random_params(arch("loglinear", 1, 3, 3), 4, scale=0.5)
        data = sample(sticky_source(3, 3, 0.5), 30, 3)
        H = hessian(params, data)
        g = empirical_loss_grad(params, data)
        direction = np.random.default_rng(0).normal(size=params.theta.size)
        direction /= np.linalg.norm(direction)
        residuals = []
        for r in (0.2, 0.1, 0.05):
            d = r * direction
            quad = empirical_loss(params, data) + g @ d + 0.5 * d @ H @ d
            residuals.append(abs(empirical_loss(params.replace(params.theta + d), data) - quad))
        slope = np.polyfit(np.log([0.2, 0.1, 0.05]), np.log(residuals), 1)[0]
        assert 2.7 < slope < 3.3

    def test_cap(self):
        params = zeros_params(arch("tabular", 4, 4, 5))
        d = Dataset.from_sequences([(0, 0, 0, 0, 0)], Vocab(4))
        with pytest.raises(HessianTooLargeError):
            hessian(params, d, cap=100)


class TestSerialisation:
    @pytest.mark.parametrize("family", ["tabular", "loglinear"])
    def test_round_trip_bit_exact(self, tmp_path, family):
        params = random_params(arch(family, 2, 3, 4), 1, scale=3.0)
        path = tmp_path / "p.txt"
        save_params(params, path)
        back = load_params(path)
        assert back.arch == params.arch
        np.testing.assert_array_equal(back.theta, params.theta)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("0.0\n")
        with pytest.raises(ValueError):
            load_params(path)


def test_stats_loss_matches_direct():
    params = random_params(arch("tabular", 2, 3, 4), 2, scale=1.0)
    data = sample(sticky_source(3, 4, 0.5), 100, 4)
    loss, _ = stats_loss_and_grad(params, data_stats(params.arch, data))
    assert loss == pytest.approx(-log_probs(params, data.tokens).mean(), abs=1e-12)
