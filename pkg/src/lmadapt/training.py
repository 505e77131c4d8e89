"""Plain (stochastic) gradient descent and the training strategies built on it.

Every run records, per step, the objective at the current parameters, the
norm of the descent direction ``g_t`` and the distance travelled from the
initial parameters. Updates are ``theta <- theta - lr * g_t``, so

    ||theta_T - theta_0|| <= sum_t lr * ||g_t|| <= lr * steps * g_max

holds for every recorded run; :meth:`TrainTrace.ball_bound_holds` checks it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy.optimize import minimize

from .model import (
    ModelParams,
    SuffStats,
    data_stats,
    stats_loss_and_grad,
)
from .csvio import write_csv
from .sources import Dataset

DIVERGENCE_FACTOR = 10.0


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    steps: int
    batch_size: int = 0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 = full batch)")


@dataclass
class StepRecord:
    step: int
    loss: float
    update_norm: float
    dist_from_init: float
    subset_size: int
    tau: float | None = None
    skipped: bool = False


@dataclass
class TrainTrace:
    learning_rate: float
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def g_max(self) -> float:
        return max((r.update_norm for r in self.records), default=0.0)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def final_distance(self) -> float:
        return self.records[-1].dist_from_init if self.records else 0.0

    @property
    def max_distance(self) -> float:
        return max((r.dist_from_init for r in self.records), default=0.0)

    @property
    def ball_radius(self) -> float:
        return self.learning_rate * len(self.records) * self.g_max

    def ball_bound_holds(self, atol: float = 1e-9) -> bool:
        return all(r.dist_from_init <= self.ball_radius + atol for r in self.records)

    def to_csv(self, path: str | Path) -> Path:
        return write_trace_csv(self, path)


TRACE_COLUMNS = ("step", "loss", "update_norm", "dist_from_init", "tau", "subset_size")


def write_trace_csv(trace: TrainTrace, path: str | Path) -> Path:
    rows = ((r.step, r.loss, r.update_norm, r.dist_from_init, r.tau, r.subset_size) for r in trace.records)
    return write_csv(path, TRACE_COLUMNS, rows)


@dataclass(frozen=True)
class TauSchedule:
    """Piecewise-constant selection threshold; -inf before the first breakpoint."""

    breakpoints: tuple[tuple[int, float], ...]

    def __post_init__(self):
        bps = tuple((int(s), float(t)) for s, t in self.breakpoints)
        steps = [s for s, _ in bps]
        taus = [t for _, t in bps]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule steps must be strictly increasing")
        if any(b < a for a, b in zip(taus, taus[1:])):
            raise ValueError("schedule thresholds must be non-decreasing")
        object.__setattr__(self, "breakpoints", bps)

    @classmethod
    def constant(cls, tau: float) -> TauSchedule:
        return cls(((0, tau),))

    def tau_at(self, step: int) -> float:
        tau = -math.inf
        for s, t in self.breakpoints:
            if s > step:
                break
            tau = t
        return tau


class BatchSchedule:
    """Index batches for minibatch SGD; full batch when ``batch_size`` is 0 or >= n."""

    def __init__(self, n: int, batch_size: int, seed, shuffle: bool = True):
        self.n = n
        self.batch_size = batch_size
        self.full = batch_size == 0 or batch_size >= n
        self.shuffle = shuffle
        self._rng = np.random.default_rng(seed)
        self._order = np.arange(n)
        self._pos = n

    def __iter__(self) -> Iterator[np.ndarray | None]:
        return self

    def __next__(self) -> np.ndarray | None:
        if self.full:
            return None
        if self._pos + self.batch_size > self.n:
            self._order = self._rng.permutation(self.n) if self.shuffle else np.arange(self.n)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


# A step objective maps (params, step) to (loss, gradient, subset_size, tau);
# returning None skips the step.
StepObjective = Callable[[ModelParams, int], "tuple[float, np.ndarray, int, float | None] | None"]


def _run(init: ModelParams, cfg: TrainConfig, objective: StepObjective) -> tuple[ModelParams, TrainTrace]:
    lr = cfg.learning_rate
    theta0 = init.theta
    theta = theta0.copy()
    trace = TrainTrace(lr)
    initial_loss = None
    for step in range(cfg.steps):
        params = init.replace(theta)
        out = objective(params, step)
        if out is None:
            trace.records.append(StepRecord(step, math.nan, 0.0, float(np.linalg.norm(theta - theta0)), 0,
                                            _tau_of(objective, step), skipped=True))
            continue
        loss, grad, subset_size, tau = out
        if initial_loss is None:
            initial_loss = loss
        if not math.isfinite(loss) or (initial_loss > 0 and loss > DIVERGENCE_FACTOR * initial_loss):
            raise DivergenceError(
                f"loss {loss:.6g} at step {step} exceeds {DIVERGENCE_FACTOR:g}x the initial loss "
                f"{initial_loss:.6g}; lower the learning rate (currently {lr:g})")
        theta = theta - lr * grad
        trace.records.append(StepRecord(step, loss, float(np.linalg.norm(grad)),
                                        float(np.linalg.norm(theta - theta0)), subset_size, tau))
    return init.replace(theta), trace


def _tau_of(objective, step):
    schedule = getattr(objective, "schedule", None)
    return None if schedule is None else schedule.tau_at(step)


def _weights_array(weights) -> np.ndarray | None:
    if weights is None:
        return None
    return np.asarray(getattr(weights, "values", weights), dtype=np.float64)


def _data_objective(init: ModelParams, data: Dataset, cfg: TrainConfig, weights, seed) -> StepObjective:
    arch = init.arch
    w = _weights_array(weights)
    full = data_stats(arch, data, w)
    batches = BatchSchedule(len(data), cfg.batch_size, seed, cfg.shuffle)

    def objective(params, step):
        idx = next(batches)
        if idx is None:
            stats = full
        else:
            stats = data_stats(arch, data.subset(idx), None if w is None else w[idx])
        loss, grad = stats_loss_and_grad(params, stats)
        return loss, grad, len(data) if idx is None else len(idx), None

    return objective


def train(init: ModelParams, data: Dataset, cfg: TrainConfig, weights=None) -> tuple[ModelParams, TrainTrace]:
    """SGD on the (weighted) empirical loss of ``data`` starting from ``init``."""
    if weights is not None and len(_weights_array(weights)) != len(data):
        raise ValueError("weights must align 1:1 with the dataset")
    if cfg.steps == 0:
        return init, TrainTrace(cfg.learning_rate)
    return _run(init, cfg, _data_objective(init, data, cfg, weights, cfg.seed))


def fine_tune(base: ModelParams, target: Dataset, n_ft: int, learning_rate: float) -> tuple[ModelParams, TrainTrace]:
    """``n_ft`` full-batch gradient steps on ``target`` starting from ``base``."""
    if n_ft < 0:
        raise ValueError("n_ft must be >= 0")
    return train(base, target, TrainConfig(learning_rate, n_ft, batch_size=0))


def train_multitask(init: ModelParams, T: Dataset, D: Dataset, alpha: float,
                    cfg: TrainConfig) -> tuple[ModelParams, TrainTrace]:
    """SGD on L(theta; T) + alpha * L(theta; D)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if cfg.steps == 0:
        return init, TrainTrace(cfg.learning_rate)
    on_T = _data_objective(init, T, cfg, None, cfg.seed)
    on_D = _data_objective(init, D, cfg, None, [cfg.seed, 1])

    def objective(params, step):
        loss_T, grad_T, n_T, _ = on_T(params, step)
        loss_D, grad_D, n_D, _ = on_D(params, step)
        return loss_T + alpha * loss_D, grad_T + alpha * grad_D, n_T + n_D, None

    return _run(init, cfg, objective)


def multitask_loss_and_grad(params: ModelParams, T: Dataset, D: Dataset, alpha: float) -> tuple[float, np.ndarray]:
    loss_T, grad_T = stats_loss_and_grad(params, data_stats(params.arch, T))
    loss_D, grad_D = stats_loss_and_grad(params, data_stats(params.arch, D))
    return loss_T + alpha * loss_D, grad_T + alpha * grad_D


def dynamic_selection_train(init: ModelParams, D: Dataset, scorer, schedule: TauSchedule,
                            cfg: TrainConfig) -> tuple[ModelParams, TrainTrace]:
    """Train on {y in D : log w(y) > tau_t}, with tau_t following ``schedule``.

    Steps whose selected subset is empty leave the parameters untouched and
    are recorded with ``skipped=True``.
    """
    w = _weights_array(scorer)
    if w is None or w.shape != (len(D),):
        raise ValueError("scorer weights must cover every element of D")
    if np.any(w < 0):
        raise ValueError("scorer weights must be non-negative")
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    arch = init.arch
    batches = BatchSchedule(len(D), cfg.batch_size, cfg.seed, cfg.shuffle)
    cache: dict[float, tuple[SuffStats | None, int]] = {}

    def objective(params, step):
        tau = schedule.tau_at(step)
        idx = next(batches)
        if idx is None:
            if tau not in cache:
                chosen = np.flatnonzero(log_w > tau)
                cache[tau] = (data_stats(arch, D.subset(chosen)) if chosen.size else None, chosen.size)
            stats, size = cache[tau]
        else:
            chosen = idx[log_w[idx] > tau]
            size = chosen.size
            stats = data_stats(arch, D.subset(chosen)) if size else None
        if stats is None:
            return None
        loss, grad = stats_loss_and_grad(params, stats)
        return loss, grad, size, tau

    objective.schedule = schedule
    if cfg.steps == 0:
        return init, TrainTrace(cfg.learning_rate)
    return _run(init, cfg, objective)


RESTARTS = 10


@dataclass(frozen=True)
class MinimizeResult:
    params: ModelParams
    loss: float
    grad_norm: float
    iterations: int
    converged: bool


def minimize_stats(init: ModelParams, stats: SuffStats, gtol: float = 1e-8,
                   max_iter: int = 100_000) -> MinimizeResult:
    """Drive the loss described by ``stats`` to a stationary point with L-BFGS.

    ``converged`` is False whenever the final gradient norm exceeds ``gtol``.
    """
    def fun(theta):
        return stats_loss_and_grad(init.replace(theta), stats)

    theta, iterations = init.theta, 0
    # line searches can stall near the rounding floor; a fresh start drops the stale curvature pairs
    for _ in range(RESTARTS):
        res = minimize(fun, theta, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter - iterations, "maxfun": 2 * max_iter, "gtol": gtol * 1e-2,
                                "ftol": 0.0, "maxcor": 30})
        theta, iterations = res.x, iterations + int(res.nit)
        loss, grad = stats_loss_and_grad(init.replace(theta), stats)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < gtol or iterations >= max_iter:
            break
    return MinimizeResult(init.replace(theta), loss, gnorm, iterations, gnorm < gtol)

