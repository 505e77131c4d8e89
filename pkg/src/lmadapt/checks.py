"""Acceptance checks run by ``lmadapt verify``.

Each check has two halves. ``compute`` produces a CSV table of raw numbers;
``judge`` reads that table back (as strings, the way it sits on disk) and
decides pass or fail. The verify command writes every table first and only
then judges from the written files, so verdicts never depend on in-memory
state that was not persisted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .analysis import crossover_experiment, decompose_loss, oracle_min_loss, theorem1_check
from .config import ExperimentConfig
from .model import (
    ArchSpec,
    zeros_params,
    expected_loss,
    grad_log_prob,
    log_prob,
    model_distribution,
    random_params,
)
from .selection import (
    SelectionWeights,
    binarize_intsel,
    effective_sample_size,
    estimated_importance_weights,
    selected_count,
    true_importance_weights,
)
from .influence import one_step_logodds_check, residual_slope
from .sources import (
    Dataset,
    Vocab,
    enumerate_distribution,
    entropy,
    kl_divergence,
    random_source,
    sample,
    total_variation,
)
from .training import TrainConfig, fine_tune, train

BALL_ATOL = 1e-9


@dataclass(frozen=True)
class Table:
    columns: tuple[str, ...]
    rows: list[list]


@dataclass(frozen=True)
class Verdict:
    passed: bool
    detail: str


@dataclass(frozen=True)
class Check:
    number: int
    name: str
    compute: Callable[["Fixture"], Table]
    judge: Callable[[list[dict[str, str]]], Verdict]

    @property
    def filename(self) -> str:
        return f"c{self.number:02d}_{self.name}.csv"


class Fixture:
    """Lazily built shared state for one verify run.

    Every training run made by any check registers its trace bound here so the
    ball-bound check can audit all of them.
    """

    def __init__(self, cfg: ExperimentConfig, jobs: int = 1):
        self.cfg = cfg
        self.jobs = jobs
        self.ball_runs: list[tuple[str, float, float, float]] = []

    def rng(self, *tags) -> np.random.Generator:
        return np.random.default_rng(self.cfg.derived_seed("check", *tags))

    def record(self, label: str, trace) -> None:
        self.ball_runs.append((label, trace.learning_rate * len(trace.records), trace.max_distance,
                               trace.ball_radius))

    @cached_property
    def tableD(self):
        return enumerate_distribution(self.cfg.source_D)

    @cached_property
    def tableT(self):
        return enumerate_distribution(self.cfg.source_T)

    @cached_property
    def D(self):
        return sample(self.cfg.source_D, self.cfg.size_D, self.cfg.derived_seed("D"))

    @cached_property
    def T(self):
        return sample(self.cfg.source_T, self.cfg.size_T, self.cfg.derived_seed("T"))

    @cached_property
    def theta_D(self):
        params, trace = train(zeros_params(self.cfg.arch), self.D, self.cfg.train)
        self.record("train_D", trace)
        return params


def _f(s: str) -> float:
    return float(s)


# 1 ----------------------------------------------------------------------------

def compute_reweighting(fx: Fixture) -> Table:
    tableT, tableD = fx.tableT, fx.tableD
    omega = Dataset(tableD.sequences(), tableD.vocab)
    w = true_importance_weights(tableT, tableD, omega).values
    rng = fx.rng("reweighting")
    rows = []
    for i in range(20):
        if i % 2 == 0:
            f = rng.normal(size=w.size)
        else:
            params = random_params(fx.cfg.arch, int(rng.integers(2**31)), scale=1.0)
            f = -np.log(model_distribution(params).probs)
        lhs = float(np.sum(tableD.probs * w * f))
        rhs = float(np.sum(tableT.probs * f))
        rows.append([i, "gaussian" if i % 2 == 0 else "neg_log_model", lhs, rhs, abs(lhs - rhs)])
    return Table(("f_index", "f_kind", "weighted_D", "expected_T", "abs_diff"), rows)


def judge_reweighting(rows) -> Verdict:
    worst = max(_f(r["abs_diff"]) for r in rows)
    return Verdict(len(rows) == 20 and worst <= 1e-10, f"{len(rows)} functions, max diff {worst:.3g}")


# 2 ----------------------------------------------------------------------------

def _fd_grad(params, y, h=1e-5):
    theta = params.theta
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (log_prob(params.replace(theta + e), y) - log_prob(params.replace(theta - e), y)) / (2 * h)
    return out


def compute_gradients(fx: Fixture) -> Table:
    V, n = fx.cfg.space
    vocab = Vocab(V)
    k = max(1, min(2, n - 1))
    archs = [ArchSpec("tabular", k, vocab, n), ArchSpec("loglinear", k, vocab, n)]
    rng = fx.rng("gradients")
    rows = []
    for i in range(50):
        arch = archs[i % 2]
        params = random_params(arch, int(rng.integers(2**31)), scale=1.0)
        y = tuple(int(t) for t in rng.integers(0, V, size=n))
        analytic = grad_log_prob(params, y).values
        fd = _fd_grad(params, y)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-300)
        rows.append([i, arch.family, arch.context_len, y, float(np.linalg.norm(analytic - fd) / denom)])
    return Table(("pair", "family", "k", "sequence", "rel_error"), rows)


def judge_gradients(rows) -> Verdict:
    worst = max(_f(r["rel_error"]) for r in rows)
    return Verdict(len(rows) == 50 and worst < 1e-5, f"{len(rows)} pairs, max relative error {worst:.3g}")


# 3 ----------------------------------------------------------------------------

def compute_decomposition(fx: Fixture) -> Table:
    cfg = fx.cfg
    V, n = cfg.space
    rows = []
    rng = fx.rng("gibbs")
    for i in range(10):
        arch = cfg.arch if i % 2 == 0 else ArchSpec("loglinear", max(1, n - 2), Vocab(V), n)
        params = random_params(arch, int(rng.integers(2**31)), scale=1.0)
        table = fx.tableT if i < 5 else fx.tableD
        lhs = expected_loss(params, table) - entropy(table)
        rhs = kl_divergence(table, model_distribution(params))
        rows.append(["gibbs", arch.family, arch.context_len, 0, lhs, rhs, abs(lhs - rhs)])
    small = TrainConfig(cfg.train.learning_rate, min(cfg.train.steps, 500), seed=cfg.train.seed)
    archs = [cfg.arch, ArchSpec("tabular", 1, Vocab(V), n), ArchSpec("loglinear", max(1, n - 2), Vocab(V), n)]
    for arch in archs:
        oracle = oracle_min_loss(fx.tableD, arch)
        for size in (100, 1000):
            data = sample(cfg.source_D, size, cfg.derived_seed("decomposition", size))
            rep = decompose_loss(cfg.source_D, arch, data, small, oracle=oracle)
            fx.ball_runs.append((f"decompose_{arch.family}_k{arch.context_len}_{size}",
                                 small.learning_rate * small.steps, rep.ball_distance, rep.ball_radius))
            rows.append(["decomposition", arch.family, arch.context_len, size, rep.total, rep.direct,
                         rep.bookkeeping_error])
    return Table(("kind", "family", "k", "sample_size", "lhs", "rhs", "abs_diff"), rows)


def judge_decomposition(rows) -> Verdict:
    gibbs = [_f(r["abs_diff"]) for r in rows if r["kind"] == "gibbs"]
    book = [_f(r["abs_diff"]) for r in rows if r["kind"] == "decomposition"]
    ok = bool(gibbs) and bool(book) and max(gibbs) <= 1e-8 and max(book) <= 1e-9
    return Verdict(ok, f"gibbs max {max(gibbs):.3g} ({len(gibbs)}), bookkeeping max {max(book):.3g} ({len(book)})")


# 4 ----------------------------------------------------------------------------

def compute_ess(fx: Fixture) -> Table:
    rng = fx.rng("ess")
    rows = []
    for n in (1, 10, 1000):
        rows.append(["uniform", n, effective_sample_size(np.full(n, 0.37)).n_e])
        onehot = np.zeros(n)
        onehot[n // 2] = 2.5
        rows.append(["one_hot", n, effective_sample_size(onehot).n_e])
    for i in range(1000):
        n = int(rng.integers(1, 200))
        kind = i % 3
        if kind == 0:
            w = rng.random(n)
        elif kind == 1:
            w = np.exp(rng.normal(scale=3.0, size=n))
        else:
            w = rng.random(n) * (rng.random(n) < 0.3)
            w[rng.integers(n)] = 1.0
        rows.append(["random", n, effective_sample_size(w).n_e])
    return Table(("kind", "n", "n_e"), rows)


def judge_ess(rows) -> Verdict:
    bad = []
    for r in rows:
        n, ne = int(r["n"]), _f(r["n_e"])
        if r["kind"] == "uniform" and ne != n:
            bad.append(r)
        elif r["kind"] == "one_hot" and ne != 1.0:
            bad.append(r)
        elif r["kind"] == "random" and not (1.0 <= ne <= n):
            bad.append(r)
    count = sum(r["kind"] == "random" for r in rows)
    return Verdict(not bad and count == 1000, f"{len(rows)} vectors ({count} random), {len(bad)} violations")


# 5 ----------------------------------------------------------------------------

def compute_ball(fx: Fixture) -> Table:
    theta_D = fx.theta_D
    for n_ft in (0, 1, 10, 100):
        for lr in (fx.cfg.selection.learning_rate_ft, fx.cfg.influence.learning_rate):
            _, trace = fine_tune(theta_D, fx.T, n_ft, lr)
            fx.record(f"fine_tune_n{n_ft}_lr{lr:g}", trace)
    rows = [[label, scale, dist, radius, radius - dist] for label, scale, dist, radius in fx.ball_runs]
    return Table(("run", "lr_times_steps", "max_distance", "radius", "slack"), rows)


def judge_ball(rows) -> Verdict:
    bad = [r["run"] for r in rows if _f(r["max_distance"]) > _f(r["radius"]) + BALL_ATOL]
    return Verdict(bool(rows) and not bad, f"{len(rows)} training runs, {len(bad)} outside the ball")


# 6 ----------------------------------------------------------------------------

def compute_logodds(fx: Fixture) -> Table:
    probe = fx.D.head(fx.cfg.influence.probe_size)
    theta_D = fx.theta_D
    ex = fx.cfg.experiment
    limit = one_step_logodds_check(theta_D, fx.T, ex.limit_learning_rate, probe)
    slope, reports = residual_slope(theta_D, fx.T, probe, ex.slope_learning_rates)
    rows = [["limit", limit.learning_rate, limit.max_abs_residual, ""]]
    rows += [["slope_point", r.learning_rate, r.max_abs_residual, ""] for r in reports]
    rows.append(["slope", "", "", slope])
    for lr in (ex.limit_learning_rate, *ex.slope_learning_rates):
        _, trace = fine_tune(theta_D, fx.T, 1, lr)
        fx.record(f"one_step_lr{lr:g}", trace)
    return Table(("kind", "learning_rate", "max_abs_residual", "slope"), rows)


def judge_logodds(rows) -> Verdict:
    limit = next(_f(r["max_abs_residual"]) for r in rows if r["kind"] == "limit")
    slope = next(_f(r["slope"]) for r in rows if r["kind"] == "slope")
    ok = limit < 1e-10 and 1.8 <= slope <= 2.2
    return Verdict(ok, f"limit residual {limit:.3g}, slope {slope:.4f}")


# 7 ----------------------------------------------------------------------------

def compute_theorem1(fx: Fixture) -> Table:
    cfg = fx.cfg
    reports = theorem1_check(cfg.source_T, cfg.source_D, cfg.arch, cfg.experiment.theorem1_sizes,
                             cfg.replicate_seeds, cfg.train, cfg.experiment.epsilon, fx.jobs)
    steps = cfg.train.learning_rate * cfg.train.steps
    for r in reports:
        fx.ball_runs.append((f"theorem1_{r.sample_size}_{r.seed}", steps, r.ball_distance, r.ball_radius))
    rows = [[r.seed, r.sample_size, r.h_T, r.kl_TD, r.epsilon, r.bound, r.observed, r.margin, r.m, r.vacuous]
            for r in reports]
    return Table(("seed", "sample_size", "h_T", "kl_TD", "epsilon", "bound", "observed", "margin", "m", "vacuous"),
                 rows)


def judge_theorem1(rows) -> Verdict:
    largest = max(int(r["sample_size"]) for r in rows)
    chosen = [r for r in rows if int(r["sample_size"]) == largest]
    eps = _f(chosen[0]["epsilon"])
    passed = sum(_f(r["margin"]) >= 0 for r in chosen)
    ok = len(chosen) >= 1 and passed >= math.ceil((1 - eps) * len(chosen) - 1e-12)
    worst = min(_f(r["margin"]) for r in chosen)
    return Verdict(ok, f"|D|={largest}: {passed}/{len(chosen)} margins >= 0 (min margin {worst:.4f})")


# 8 ----------------------------------------------------------------------------

def compute_crossover(fx: Fixture) -> Table:
    cfg = fx.cfg
    rows = []
    steps = cfg.train.learning_rate * cfg.train.steps
    for variant, sourceT in (("standard", cfg.source_T), ("same_source", cfg.source_D)):
        res = crossover_experiment(sourceT, cfg.source_D, cfg.arch, cfg.experiment.crossover_sizes_T, cfg.size_D,
                                   cfg.crossover_seeds, cfg.train, fx.jobs)
        for i, (dist, radius) in enumerate(res.ball_runs):
            fx.ball_runs.append((f"crossover_{variant}_{i}", steps, dist, radius))
        for r in res.rows:
            rows.append([variant, r.size_T, r.size_D, r.median_loss_T, r.median_loss_D, r.train_on_T_wins,
                         res.crossover, r.flag])
    return Table(("variant", "size_T", "size_D", "median_loss_T", "median_loss_D", "train_on_T_wins", "crossover",
                  "flag"), rows)


def judge_crossover(rows) -> Verdict:
    std = [r for r in rows if r["variant"] == "standard" and r["median_loss_T"] != ""]
    same = [r for r in rows if r["variant"] == "same_source"]
    std.sort(key=lambda r: int(r["size_T"]))
    meds = [_f(r["median_loss_T"]) for r in std]
    monotone = all(b <= a for a, b in zip(meds, meds[1:]))
    crosses = std[0]["crossover"] != "" if std else False
    size_D = int(same[0]["size_D"])
    same_cross = same[0]["crossover"]
    no_early = same_cross == "" or int(same_cross) >= size_D / 4
    ok = monotone and crosses and no_early
    return Verdict(ok, f"monotone={monotone}, crossover={std[0]['crossover'] or 'none'}, "
                       f"same-source crossover={same_cross or 'none'} (|D|/4={size_D / 4:g})")


# 9 ----------------------------------------------------------------------------

def compute_binarization(fx: Fixture) -> Table:
    rng = fx.rng("binarization")
    theta_ft, _ = fine_tune(fx.theta_D, fx.T, fx.cfg.selection.n_ft, fx.cfg.selection.learning_rate_ft)
    est = estimated_importance_weights(theta_ft, fx.theta_D, fx.D)
    rows = []
    logw = est.log_values
    for tau in np.quantile(logw, np.linspace(0, 1, 21)):
        rows.append(["sweep", 0, float(tau), "", selected_count(est, float(tau)), ""])
    for i in range(100):
        n = int(rng.integers(1, 300))
        w = np.exp(rng.normal(scale=2.0, size=n)) * (rng.random(n) > 0.1)
        weights = SelectionWeights(w, "estimated_importance")
        tau = float(rng.normal())
        c = float(np.exp(rng.normal(scale=3.0)))
        a = binarize_intsel(weights, tau).values
        b = binarize_intsel(SelectionWeights(c * w, "estimated_importance"), tau + math.log(c)).values
        rows.append(["scale_shift", i, tau, c, int(a.sum()), int(np.sum(a != b))])
    return Table(("kind", "vector", "tau", "scale", "selected", "mismatches"), rows)


def judge_binarization(rows) -> Verdict:
    sweep = sorted((r for r in rows if r["kind"] == "sweep"), key=lambda r: _f(r["tau"]))
    counts = [int(r["selected"]) for r in sweep]
    monotone = all(b <= a for a, b in zip(counts, counts[1:]))
    shifts = [r for r in rows if r["kind"] == "scale_shift"]
    mismatched = sum(int(r["mismatches"]) > 0 for r in shifts)
    ok = monotone and len(shifts) == 100 and mismatched == 0
    return Verdict(ok, f"sweep monotone={monotone} ({counts[0]}->{counts[-1]}), {mismatched}/100 shifted sets differ")


# 10 ---------------------------------------------------------------------------

def compute_pinsker(fx: Fixture) -> Table:
    rng = fx.rng("pinsker")
    rows = []
    for i in range(1000):
        V = int(rng.integers(2, 5))
        n = int(rng.integers(1, 5))
        conc = float(rng.choice([0.2, 1.0, 5.0]))
        p = enumerate_distribution(random_source(V, n, rng, conc))
        q = enumerate_distribution(random_source(V, n, rng, conc))
        kl = kl_divergence(p, q)
        tv = total_variation(p, q)
        rows.append([i, V, n, kl, tv, math.sqrt(kl / 2) - tv])
    return Table(("pair", "V", "n", "kl", "tv", "margin"), rows)


def judge_pinsker(rows) -> Verdict:
    worst = min(_f(r["margin"]) for r in rows)
    return Verdict(len(rows) == 1000 and worst >= -1e-10, f"{len(rows)} pairs, min margin {worst:.3g}")


# ball bound runs last so it sees every other check's training runs
CHECKS = (
    Check(1, "reweighting", compute_reweighting, judge_reweighting),
    Check(2, "gradients", compute_gradients, judge_gradients),
    Check(3, "decomposition", compute_decomposition, judge_decomposition),
    Check(4, "ess", compute_ess, judge_ess),
    Check(6, "logodds", compute_logodds, judge_logodds),
    Check(7, "theorem1", compute_theorem1, judge_theorem1),
    Check(8, "crossover", compute_crossover, judge_crossover),
    Check(9, "binarization", compute_binarization, judge_binarization),
    Check(10, "pinsker", compute_pinsker, judge_pinsker),
    Check(5, "ball_bound", compute_ball, judge_ball),
)
