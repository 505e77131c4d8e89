import math

import numpy as np
import pytest

from lmadapt.analysis import (
    VACUOUS_M,
    crossover_experiment,
    decompose_loss,
    median_observed_by_size,
    oracle_min_loss,
    parallel_map,
    theorem1_check,
    theorem1_pass_fraction,
)
from lmadapt.model import ArchSpec
from lmadapt.sources import (
    DistributionTable,
    Vocab,
    enumerate_distribution,
    entropy,
    perturbed_source,
    sample,
    sticky_source,
    uniform_source,
)
from lmadapt.training import TrainConfig

V, N = 3, 4
SRC = sticky_source(V, N, 0.7)
TAB1 = ArchSpec("tabular", 1, Vocab(V), N)
CFG = TrainConfig(2.0, 3000)


class TestOracle:
    def test_full_capacity_reaches_entropy(self):
        t = enumerate_distribution(SRC)
        res = oracle_min_loss(t, ArchSpec("tabular", N - 1, Vocab(V), N))
        assert res.converged and abs(res.loss - entropy(t)) < 1e-6

    @pytest.mark.parametrize("family,k", [("tabular", 1), ("tabular", 3), ("loglinear", 1), ("loglinear", 2)])
    def test_uniform_source(self, family, k):
        res = oracle_min_loss(enumerate_distribution(uniform_source(V, N)), ArchSpec(family, k, Vocab(V), N))
        assert res.loss == pytest.approx(N * math.log(V), abs=1e-9)

    def test_loglinear_gap_on_non_markov_table(self):
        probs = np.random.default_rng(0).dirichlet(np.full(V ** N, 0.5))
        t = DistributionTable(Vocab(V), N, probs)
        res = oracle_min_loss(t, ArchSpec("loglinear", 1, Vocab(V), N))
        assert res.converged and res.loss - entropy(t) > 1e-3

    def test_markov_source_is_realisable_at_k1(self):
        t = enumerate_distribution(SRC)
        for family in ("tabular", "loglinear"):
            assert oracle_min_loss(t, ArchSpec(family, 1, Vocab(V), N)).loss - entropy(t) < 1e-6


class TestDecomposition:
    @pytest.mark.parametrize("arch", [TAB1, ArchSpec("loglinear", 1, Vocab(V), N), ArchSpec("tabular", 2, Vocab(V), N)])
    def test_invariants(self, arch):
        rep = decompose_loss(SRC, arch, sample(SRC, 200, 3), TrainConfig(1.0, 300))
        assert rep.bookkeeping_error < 1e-12
        assert rep.l_H >= 0
        assert rep.l_app >= -rep.optimizer_tolerance and rep.l_est >= -rep.optimizer_tolerance
        assert rep.ball_distance <= rep.ball_radius + 1e-9
        assert len(rep.row()) == 10

    def test_estimation_error_vanishes_with_data(self):
        rep = decompose_loss(SRC, TAB1, sample(SRC, 100_000, 0), CFG)
        assert rep.l_est < 0.02

    def test_median_estimation_error_decreases(self):
        oracle = oracle_min_loss(enumerate_distribution(SRC), TAB1)
        medians = [np.median([decompose_loss(SRC, TAB1, sample(SRC, n, s), CFG, oracle).l_est for s in range(3)])
                   for n in (10, 100, 1000, 10_000)]
        assert all(b < a for a, b in zip(medians, medians[1:]))


class TestTheorem1:
    def test_same_source_has_zero_kl(self):
        reps = theorem1_check(SRC, SRC, TAB1, [2000], [0, 1, 2], CFG, epsilon=0.1)
        assert all(r.kl_TD == 0 and r.bound == pytest.approx(r.h_T + 0.1) for r in reps)
        assert theorem1_pass_fraction(reps) == 1.0

    def test_shifted_source(self):
        T = perturbed_source(SRC, 0.7, 0)
        reps = theorem1_check(T, SRC, TAB1, [100, 5000], [0, 1, 2], CFG)
        assert theorem1_pass_fraction(reps, 5000) == 1.0
        assert all(r.margin == pytest.approx(r.bound - r.observed) for r in reps)
        med = median_observed_by_size(reps)
        assert list(med) == [100, 5000] and med[5000] < med[100]

    def test_vacuous_flag(self):
        rare = sticky_source(V, N, 0.99)
        reps = theorem1_check(rare, rare, TAB1, [50], [0], TrainConfig(1.0, 10))
        assert reps[0].m > VACUOUS_M and reps[0].vacuous
        ok = theorem1_check(SRC, SRC, TAB1, [50], [0], TrainConfig(1.0, 10))
        assert not ok[0].vacuous

    def test_jobs_do_not_change_results(self):
        T = perturbed_source(SRC, 0.7, 0)
        a = theorem1_check(T, SRC, TAB1, [50, 100], [0, 1], TrainConfig(1.0, 100), jobs=1)
        b = theorem1_check(T, SRC, TAB1, [50, 100], [0, 1], TrainConfig(1.0, 100), jobs=2)
        assert a == b


class TestCrossover:
    def test_empty_T_row_is_flagged(self):
        T = perturbed_source(SRC, 0.7, 0)
        res = crossover_experiment(T, SRC, TAB1, [0, 20], 200, [0, 1], TrainConfig(1.0, 200))
        empty = res.rows[0]
        assert empty.flag == "empty_T" and empty.median_loss_T is None and empty.train_on_T_wins is None
        assert 0 not in res.losses_T and len(res.ball_runs) == 4

    def test_large_target_set_wins(self):
        T = perturbed_source(SRC, 0.7, 0)
        res = crossover_experiment(T, SRC, TAB1, [5, 5000], 5000, [0, 1, 2], CFG)
        assert res.rows[-1].train_on_T_wins and res.crossover == 5000
        assert not res.rows[0].train_on_T_wins


def test_parallel_map_preserves_order():
    assert parallel_map(abs, [-3, 2, -1], jobs=2) == [3, 2, 1]
    assert parallel_map(abs, [], jobs=4) == []
