"""Exact loss bookkeeping for in-domain, out-of-domain and small-set training.

All losses are exact expectations over an enumerated source, so the only
inexact quantity is the family optimum ``min_theta L(theta; source)``, which
comes from an optimiser and carries its own tolerance.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import ArchSpec, ModelParams, expected_loss, table_stats, zeros_params
from .sources import (
    DistributionTable,
    MarkovSource,
    derive_seed,
    enumerate_distribution,
    entropy,
    kl_divergence,
    sample,
)
from .training import TrainConfig, minimize_stats, train

OPTIMIZER_TOLERANCE = 1e-6
VACUOUS_M = 1e6


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Order-preserving map; results do not depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class OracleResult:
    params: ModelParams
    loss: float
    grad_norm: float
    converged: bool


def oracle_min_loss(table: DistributionTable, arch: ArchSpec, gtol: float = 1e-8,
                    max_iter: int = 100_000) -> OracleResult:
    """Best expected loss reachable by ``arch`` on ``table``.

    Convergence is reported, never assumed: check ``converged`` and
    ``grad_norm`` before trusting the value as a minimum.
    """
    res = minimize_stats(zeros_params(arch), table_stats(arch, table), gtol=gtol, max_iter=max_iter)
    return OracleResult(res.params, res.loss, res.grad_norm, res.converged)


@dataclass(frozen=True)
class DecompositionReport:
    l_H: float
    l_app: float
    l_est: float
    total: float
    direct: float
    arch: ArchSpec
    optimizer_tolerance: float
    oracle_grad_norm: float
    sample_size: int
    ball_distance: float = 0.0
    ball_radius: float = 0.0

    @property
    def bookkeeping_error(self) -> float:
        return abs(self.total - self.direct)

    def row(self) -> list:
        return [self.arch.family, self.arch.context_len, self.sample_size, self.l_H, self.l_app, self.l_est,
                self.total, self.direct, self.optimizer_tolerance, self.oracle_grad_norm]


DECOMPOSITION_COLUMNS = ("family", "k", "sample_size", "l_H", "l_app", "l_est", "total", "direct",
                         "optimizer_tolerance", "oracle_grad_norm")


def decompose_loss(source: MarkovSource, arch: ArchSpec, data, cfg: TrainConfig,
                   oracle: OracleResult | None = None, init: ModelParams | None = None) -> DecompositionReport:
    """Split L(theta_D; source) into entropy, approximation and estimation error."""
    table = enumerate_distribution(source)
    if oracle is None:
        oracle = oracle_min_loss(table, arch)
    trained, trace = train(zeros_params(arch) if init is None else init, data, cfg)
    l_H = entropy(table)
    direct = expected_loss(trained, table)
    l_app = oracle.loss - l_H
    l_est = direct - oracle.loss
    tol = max(OPTIMIZER_TOLERANCE, oracle.grad_norm)
    return DecompositionReport(l_H, l_app, l_est, l_H + l_app + l_est, direct, arch, tol,
                               oracle.grad_norm, len(data), trace.max_distance, trace.ball_radius)


@dataclass(frozen=True)
class Theorem1Report:
    seed: int
    sample_size: int
    h_T: float
    kl_TD: float
    epsilon: float
    bound: float
    observed: float
    margin: float
    m: float
    vacuous: bool
    ball_distance: float = 0.0
    ball_radius: float = 0.0

    @property
    def holds(self) -> bool:
        return self.margin >= 0


THEOREM1_COLUMNS = tuple(f.name for f in fields(Theorem1Report))


def _theorem1_cell(args) -> tuple[float, float, float]:
    sourceD, arch, size, seed, cfg, tableT = args
    data = sample(sourceD, size, derive_seed(seed, "D", size))
    theta_D, trace = train(zeros_params(arch), data, cfg)
    return expected_loss(theta_D, tableT), trace.max_distance, trace.ball_radius


def theorem1_check(sourceT: MarkovSource, sourceD: MarkovSource, arch: ArchSpec, sample_sizes: Sequence[int],
                   seeds: Sequence[int], cfg: TrainConfig, epsilon: float = 0.1,
                   jobs: int = 1) -> list[Theorem1Report]:
    """Compare L(theta_D; T) with H(T) + KL(T, D) + epsilon for every (|D|, seed) cell."""
    tableT, tableD = enumerate_distribution(sourceT), enumerate_distribution(sourceD)
    h_T = entropy(tableT)
    kl_TD = kl_divergence(tableT, tableD)
    p_min = float(tableD.probs.min())
    m = math.inf if p_min == 0 else 1.0 / p_min
    cells = [(size, seed) for size in sample_sizes for seed in seeds]
    observed = parallel_map(_theorem1_cell, [(sourceD, arch, size, seed, cfg, tableT) for size, seed in cells], jobs)
    bound = h_T + kl_TD + epsilon
    return [Theorem1Report(seed, size, h_T, kl_TD, epsilon, bound, obs, bound - obs, m, m > VACUOUS_M, dist, radius)
            for (size, seed), (obs, dist, radius) in zip(cells, observed)]


def theorem1_pass_fraction(reports: Iterable[Theorem1Report], sample_size: int | None = None) -> float:
    reports = list(reports)
    if sample_size is None:
        sample_size = max(r.sample_size for r in reports)
    chosen = [r for r in reports if r.sample_size == sample_size]
    return sum(r.holds for r in chosen) / len(chosen)


def median_observed_by_size(reports: Iterable[Theorem1Report]) -> dict[int, float]:
    by_size: dict[int, list[float]] = {}
    for r in reports:
        by_size.setdefault(r.sample_size, []).append(r.observed)
    return {size: float(np.median(v)) for size, v in sorted(by_size.items())}


@dataclass(frozen=True)
class CrossoverRow:
    size_T: int
    size_D: int
    median_loss_T: float | None
    median_loss_D: float
    train_on_T_wins: bool | None
    flag: str


CROSSOVER_COLUMNS = ("size_T", "size_D", "median_loss_T", "median_loss_D", "train_on_T_wins", "flag")


@dataclass(frozen=True)
class CrossoverResult:
    rows: list[CrossoverRow]
    crossover: int | None
    losses_T: dict[int, list[float]]
    losses_D: list[float]
    ball_runs: list[tuple[float, float]] = field(default_factory=list)

    def table(self) -> list[list]:
        return [[r.size_T, r.size_D, r.median_loss_T, r.median_loss_D, r.train_on_T_wins, r.flag]
                for r in self.rows]


def _train_eval_cell(args) -> tuple[float, float, float]:
    source, arch, size, seed_tags, cfg, table = args
    data = sample(source, size, derive_seed(*seed_tags))
    params, trace = train(zeros_params(arch), data, cfg)
    return expected_loss(params, table), trace.max_distance, trace.ball_radius


def crossover_experiment(sourceT: MarkovSource, sourceD: MarkovSource, arch: ArchSpec, sizes_T: Sequence[int],
                         size_D: int, seeds: Sequence[int], cfg: TrainConfig, jobs: int = 1) -> CrossoverResult:
    """Median exact loss on T of training on T (per |T|) versus training on D.

    The reported crossover is the smallest |T| from which training on T keeps
    beating training on D for every larger size in the sweep.
    """
    sizes_T = sorted(sizes_T)
    tableT = enumerate_distribution(sourceT)
    cells_D = parallel_map(_train_eval_cell,
                           [(sourceD, arch, size_D, (s, "D", size_D), cfg, tableT) for s in seeds], jobs)
    losses_D = [c[0] for c in cells_D]
    med_D = float(np.median(losses_D))
    valid = [n for n in sizes_T if n > 0]
    cells_T = parallel_map(_train_eval_cell,
                           [(sourceT, arch, n, (s, "T", n), cfg, tableT) for n in valid for s in seeds], jobs)
    flat = [c[0] for c in cells_T]
    losses_T = {n: flat[i * len(seeds):(i + 1) * len(seeds)] for i, n in enumerate(valid)}
    rows = []
    for n in sizes_T:
        if n <= 0:
            rows.append(CrossoverRow(n, size_D, None, med_D, None, "empty_T"))
            continue
        med_T = float(np.median(losses_T[n]))
        rows.append(CrossoverRow(n, size_D, med_T, med_D, med_T < med_D, ""))
    crossover = None
    for row in reversed([r for r in rows if r.median_loss_T is not None]):
        if not row.train_on_T_wins:
            break
        crossover = row.size_T
    balls = [(c[1], c[2]) for c in cells_D + cells_T]
    return CrossoverResult(rows, crossover, losses_T, losses_D, balls)

