"""Influence scores and their link to one-step fine-tuning log-odds.

Sign convention: the per-example loss is ``l(y) = -log P(y | theta)``, so its
gradient is ``-grad_log_prob``. The influence of training point y on test
point y' is ``I(y, y') = -dl(y')^T M dl(y)`` with ``M = I`` (identity mode) or
``M = (H + delta I)^-1`` (damped_true mode). Since both loss gradients flip
sign together, ``I(y, y') = -g(y')^T M g(y)`` with ``g = grad_log_prob`` too.

One gradient step of size lr on the mean loss over T moves theta by
``lr * mean_T g``, hence to first order

    log P(y | theta_T) - log P(y | theta_D) = -lr * mean_{y' in T} I(y, y')

which :func:`one_step_logodds_check` measures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgWarning, lapack, lu_factor, lu_solve

from .csvio import write_csv
from .model import (
    DEFAULT_HESSIAN_CAP,
    HessianTooLargeError,
    ModelParams,
    empirical_loss_grad,
    grad_log_probs,
    hessian,
    log_probs,
)
from .selection import SelectionWeights
from .sources import Dataset
from .training import fine_tune

MODES = ("identity", "damped_true")
DEFAULT_DAMPING = 1e-3
SINGULAR_RCOND = 1e-9
CHUNK = 1024


class SingularHessianError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class InfluenceScore:
    value: float
    hessian_mode: str
    damping: float


class DampedHessian:
    """LU factorisation of H + delta I, computed once and reused for every solve."""

    def __init__(self, H: np.ndarray, damping: float):
        H = np.asarray(H, dtype=np.float64)
        if damping < 0:
            raise ValueError("damping must be >= 0")
        self.damping = float(damping)
        A = H + self.damping * np.eye(H.shape[0])
        anorm = np.abs(A).sum(axis=0).max()
        with warnings.catch_warnings():
            # exact singularity is reported through rcond below
            warnings.simplefilter("ignore", LinAlgWarning)
            self._lu = lu_factor(A, check_finite=True)
        rcond, info = lapack.dgecon(self._lu[0], anorm, norm="1")
        if info != 0 or rcond < SINGULAR_RCOND:
            hint = " use damping > 0" if self.damping == 0 else " increase the damping"
            raise SingularHessianError(f"H + {self.damping:g} I is singular (rcond {rcond:.2e});{hint}")
        self.rcond = float(rcond)

    @classmethod
    def from_data(cls, params: ModelParams, data: Dataset, damping: float = DEFAULT_DAMPING,
                  cap: int = DEFAULT_HESSIAN_CAP) -> DampedHessian:
        return cls(hessian(params, data, cap=cap), damping)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return lu_solve(self._lu, b)


def _operator(params: ModelParams, mode: str, damping: float, hessian_data: Dataset | None,
              factor: DampedHessian | None) -> DampedHessian | None:
    if mode not in MODES:
        raise ValueError(f"unknown hessian mode {mode!r}; expected one of {MODES}")
    if mode == "identity":
        return None
    if factor is not None:
        return factor
    if hessian_data is None:
        raise ValueError("damped_true mode needs hessian_data or a precomputed factor")
    if params.arch.n_params > DEFAULT_HESSIAN_CAP:
        raise HessianTooLargeError(f"{params.arch.n_params} parameters exceed the Hessian cap")
    return DampedHessian.from_data(params, hessian_data, damping)


def influence_matrix(params: ModelParams, train_tokens: np.ndarray, test_tokens: np.ndarray,
                     mode: str = "identity", damping: float = DEFAULT_DAMPING,
                     hessian_data: Dataset | None = None, factor: DampedHessian | None = None) -> np.ndarray:
    """I[i, j] = influence of training row i on test row j."""
    op = _operator(params, mode, damping, hessian_data, factor)
    G = grad_log_probs(params, train_tokens)
    Gp = grad_log_probs(params, test_tokens)
    MG = G.T if op is None else op.solve(G.T)
    return -(Gp @ MG).T


def influence(params: ModelParams, y: Sequence[int], y_prime: Sequence[int], mode: str = "identity",
              damping: float = DEFAULT_DAMPING, hessian_data: Dataset | None = None,
              factor: DampedHessian | None = None) -> InfluenceScore:
    value = influence_matrix(params, np.asarray(y)[None, :], np.asarray(y_prime)[None, :], mode, damping,
                             hessian_data, factor)[0, 0]
    return InfluenceScore(float(value), mode, 0.0 if mode == "identity" else (factor.damping if factor else damping))


def mean_influences(params: ModelParams, candidates: np.ndarray, T: Dataset, mode: str = "identity",
                    damping: float = DEFAULT_DAMPING, hessian_data: Dataset | None = None,
                    factor: DampedHessian | None = None) -> np.ndarray:
    """mean_{y' in T} I(y, y') for every row y of ``candidates``."""
    if len(T) == 0:
        raise ValueError("T is empty")
    op = _operator(params, mode, damping, hessian_data, factor)
    g_T = grad_log_probs(params, T.tokens).mean(axis=0)
    direction = g_T if op is None else op.solve(g_T)
    candidates = np.asarray(candidates)
    # chunked so the (rows x params) gradient matrix stays small
    out = [-(grad_log_probs(params, candidates[i:i + CHUNK]) @ direction)
           for i in range(0, len(candidates), CHUNK)]
    return np.concatenate(out) if out else np.zeros(0)


def mean_influence(params: ModelParams, y: Sequence[int], T: Dataset, mode: str = "identity",
                   damping: float = DEFAULT_DAMPING, hessian_data: Dataset | None = None,
                   factor: DampedHessian | None = None) -> float:
    return float(mean_influences(params, np.asarray(y)[None, :], T, mode, damping, hessian_data, factor)[0])


@dataclass(frozen=True)
class ResidualReport:
    learning_rate: float
    log_odds: np.ndarray
    predicted: np.ndarray
    residual: np.ndarray

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))


def one_step_logodds_check(params: ModelParams, T: Dataset, learning_rate: float, probe: Dataset) -> ResidualReport:
    """Compare one-step fine-tuning log-odds with -lr * mean identity-mode influence."""
    if not learning_rate > 0:
        raise ValueError("learning_rate must be > 0")
    theta_T, _ = fine_tune(params, T, 1, learning_rate)
    log_odds = log_probs(theta_T, probe.tokens) - log_probs(params, probe.tokens)
    predicted = -learning_rate * mean_influences(params, probe.tokens, T, "identity")
    return ResidualReport(learning_rate, log_odds, predicted, log_odds - predicted)


def residual_slope(params: ModelParams, T: Dataset, probe: Dataset,
                   learning_rates: Sequence[float]) -> tuple[float, list[ResidualReport]]:
    """Least-squares slope of log max|residual| against log lr."""
    reports = [one_step_logodds_check(params, T, lr, probe) for lr in learning_rates]
    x = np.log([r.learning_rate for r in reports])
    y = np.log([r.max_abs_residual for r in reports])
    slope = np.polyfit(x, y, 1)[0]
    return float(slope), reports


def newton_step(theta: np.ndarray, grad: np.ndarray, H: np.ndarray, damping: float) -> np.ndarray:
    return theta - DampedHessian(H, damping).solve(grad)


def newton_fine_tune(params: ModelParams, T: Dataset, damping: float = DEFAULT_DAMPING,
                     H: np.ndarray | None = None) -> ModelParams:
    """theta_D - (H + delta I)^-1 grad L(theta_D; T) with H the Hessian of L(.; T)."""
    grad = empirical_loss_grad(params, T)
    if not np.any(grad):
        return params
    if H is None:
        H = hessian(params, T)
    return params.replace(newton_step(params.theta, grad, H, damping))


def ranking_agreement(a: np.ndarray, b: np.ndarray, min_gap: float = 0.0) -> tuple[int, int]:
    """(concordant, discordant) pairs between orderings, ignoring pairs closer than ``min_gap`` in ``b``."""
    a, b = np.asarray(a), np.asarray(b)
    i, j = np.triu_indices(a.size, k=1)
    keep = np.abs(b[i] - b[j]) >= min_gap
    s = np.sign(a[i] - a[j])[keep] * np.sign(b[i] - b[j])[keep]
    return int(np.sum(s > 0)), int(np.sum(s < 0))


RANKING_COLUMNS = ("index", "sequence", "mean_influence", "implied_log_w")


def write_ranking_csv(data: Dataset, mean_infl: np.ndarray, learning_rate: float, path: str | Path) -> Path:
    """Rows in dataset order; implied_log_w = -lr * mean influence."""
    rows = ((i, seq, m, -learning_rate * m) for i, (seq, m) in enumerate(zip(data.tokens, mean_infl)))
    return write_csv(path, RANKING_COLUMNS, rows)


def influence_weights(params: ModelParams, D: Dataset, T: Dataset, learning_rate: float) -> SelectionWeights:
    """exp(-lr * mean influence): the one-step estimate of the importance weight."""
    m = mean_influences(params, D.tokens, T, "identity")
    return SelectionWeights(np.exp(-learning_rate * m), "influence_derived", {"learning_rate": learning_rate})
