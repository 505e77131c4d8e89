"""Data-selection weights as instances of weighted log-likelihood training.

Importance sampling, intelligent (contrastive) selection and influence-based
selection all train with ``-(1/|D|) sum_y w(y) log P(y | theta)``; they only
differ in where ``w`` comes from. Weights attach to dataset rows by index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import OracleResult, oracle_min_loss
from .csvio import parse_float, parse_sequence, read_csv, write_csv
from .model import ArchSpec, ModelParams, expected_loss, log_probs, zeros_params
from .sources import (
    AbsoluteContinuityError,
    Dataset,
    DistributionTable,
    MarkovSource,
    Vocab,
    enumerate_distribution,
    sequence_index,
)
from .training import TrainConfig, fine_tune, train

METHODS = ("true_importance", "estimated_importance", "intsel_binary", "influence_derived")


class DegenerateWeightsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SelectionWeights:
    values: np.ndarray
    method: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if self.method not in METHODS:
            raise ValueError(f"unknown weighting method {self.method!r}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("weights must be finite and non-negative")
        if self.method == "intsel_binary" and not np.all((values == 0) | (values == 1)):
            raise ValueError("binary selection weights must be 0 or 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def log_values(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.values)


def true_importance_weights(tableT: DistributionTable, tableD: DistributionTable, data: Dataset) -> SelectionWeights:
    """w(y) = P(y | T) / P(y | D) for every row of ``data``."""
    if not tableT.same_space(tableD):
        raise ValueError("tables live on different sequence spaces")
    idx = sequence_index(data.tokens, tableD.vocab.size)
    pD = tableD.probs[idx]
    if np.any(pD <= 0):
        raise AbsoluteContinuityError("P(y | D) is zero for a sequence in the data")
    return SelectionWeights(tableT.probs[idx] / pD, "true_importance")


def estimated_importance_weights(paramsT: ModelParams, paramsD: ModelParams, data: Dataset,
                                 **metadata) -> SelectionWeights:
    """exp(log P(y | theta_T) - log P(y | theta_D)); all ones when the models coincide."""
    if paramsT.arch != paramsD.arch:
        raise ValueError("both models must share an architecture")
    log_odds = log_probs(paramsT, data.tokens) - log_probs(paramsD, data.tokens)
    return SelectionWeights(np.exp(log_odds), "estimated_importance", dict(metadata))


@dataclass(frozen=True)
class EssReport:
    n: int
    mean_w: float
    mean_w2: float
    n_e: float
    n_e_from_means: float


def effective_sample_size(weights) -> EssReport:
    """Kish effective sample size (sum w)^2 / sum w^2."""
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
    if w.size == 0 or not np.any(w > 0):
        raise DegenerateWeightsError("effective sample size needs at least one positive weight")
    # factor out the largest weight so squares cannot overflow
    scaled = w / w.max()
    n_e = scaled.sum() ** 2 / np.sum(scaled**2)
    with np.errstate(over="ignore"):
        mean_w, mean_w2 = float(w.mean()), float(np.mean(w**2))
    return EssReport(w.size, mean_w, mean_w2, float(n_e), float(np.mean(scaled) ** 2 / np.mean(scaled**2) * w.size))


def binarize_intsel(weights: SelectionWeights, tau: float) -> SelectionWeights:
    """b(y) = 1{log w(y) > tau}; zero weights are never selected."""
    w = weights.values
    selected = np.zeros(w.size)
    pos = w > 0
    selected[pos] = np.log(w[pos]) > tau
    return SelectionWeights(selected, "intsel_binary", {**weights.metadata, "tau": float(tau)})


def selected_count(weights: SelectionWeights, tau: float) -> int:
    return int(binarize_intsel(weights, tau).values.sum())


def decile_thresholds(weights: SelectionWeights) -> np.ndarray:
    """Default tau grid: deciles (10%..90%) of the finite log weights."""
    logw = weights.log_values
    logw = logw[np.isfinite(logw)]
    if logw.size == 0:
        raise DegenerateWeightsError("no positive weights to take deciles of")
    return np.quantile(logw, np.linspace(0.1, 0.9, 9))


def conditional_weight_identity(px_T: float, px_D: float, w_cond: float) -> float:
    """Joint importance weight from the input-marginal ratio and a conditional weight."""
    if px_D <= 0:
        raise AbsoluteContinuityError("P(x | D) must be positive")
    if w_cond < 0 or px_T < 0:
        raise ValueError("probabilities and weights must be non-negative")
    if px_T == px_D:
        return float(w_cond)
    return float(px_T / px_D * w_cond)


@dataclass(frozen=True)
class EstimationErrorReport:
    min_loss_T: float
    loss_theta_D: float
    loss_true_w: float
    loss_est_w: float
    l_est_w: float
    l_est_what: float
    ess_true: float
    ess_est: float
    n_ft: int
    learning_rate_ft: float
    optimizer_tolerance: float
    flags: tuple[str, ...]

    def row(self) -> list:
        return [self.min_loss_T, self.loss_theta_D, self.loss_true_w, self.loss_est_w, self.l_est_w,
                self.l_est_what, self.ess_true, self.ess_est, self.n_ft, self.learning_rate_ft,
                self.optimizer_tolerance, ";".join(self.flags)]


ESTIMATION_COLUMNS = ("min_loss_T", "loss_theta_D", "loss_true_w", "loss_est_w", "l_est_w", "l_est_what",
                      "ess_true", "ess_est", "n_ft", "learning_rate_ft", "optimizer_tolerance", "flags")


def estimation_error_report(sourceT: MarkovSource, sourceD: MarkovSource, arch: ArchSpec, D: Dataset, T: Dataset,
                            cfg: TrainConfig, n_ft: int, learning_rate_ft: float,
                            oracle: OracleResult | None = None, tolerance: float = 1e-3) -> EstimationErrorReport:
    """Split the importance-sampling estimation error into finite-|D| and weight-estimation parts.

    Both parts are measured on the target source:
    ``l_est_w = L(theta_imp(true w); T) - min L(.; T)`` and
    ``l_est_what = L(theta_imp(w_hat); T) - L(theta_imp(true w); T)``,
    where w_hat comes from fine-tuning theta_D on T for ``n_ft`` steps.
    """
    tableT, tableD = enumerate_distribution(sourceT), enumerate_distribution(sourceD)
    if oracle is None:
        oracle = oracle_min_loss(tableT, arch)
    init = zeros_params(arch)
    w_true = true_importance_weights(tableT, tableD, D)
    theta_true, _ = train(init, D, cfg, w_true)
    theta_D, _ = train(init, D, cfg)
    theta_ft, _ = fine_tune(theta_D, T, n_ft, learning_rate_ft)
    w_hat = estimated_importance_weights(theta_ft, theta_D, D, n_ft=n_ft, learning_rate=learning_rate_ft)
    theta_hat, _ = train(init, D, cfg, w_hat)
    loss_true = expected_loss(theta_true, tableT)
    loss_hat = expected_loss(theta_hat, tableT)
    l_est_w = loss_true - oracle.loss
    l_est_what = loss_hat - loss_true
    flags = []
    if l_est_w < 0:
        flags.append("l_est_w_negative" if l_est_w < -tolerance else "l_est_w_negative_within_tolerance")
    if not oracle.converged:
        flags.append("oracle_not_converged")
    return EstimationErrorReport(oracle.loss, expected_loss(theta_D, tableT), loss_true, loss_hat, l_est_w,
                                 l_est_what, effective_sample_size(w_true).n_e, effective_sample_size(w_hat).n_e,
                                 n_ft, learning_rate_ft, tolerance, tuple(flags))


# csv interchange ---------------------------------------------------------------

WEIGHT_COLUMNS = ("index", "sequence", "weight", "method", "tau", "n_ft", "learning_rate")


def write_weights_csv(weights: SelectionWeights, data: Dataset, path: str | Path) -> Path:
    if len(weights) != len(data):
        raise ValueError("weights and dataset differ in length")
    meta = weights.metadata
    rows = ((i, seq, w, weights.method, meta.get("tau"), meta.get("n_ft"), meta.get("learning_rate"))
            for i, (seq, w) in enumerate(zip(data.tokens, weights.values)))
    return write_csv(path, WEIGHT_COLUMNS, rows)


def read_weights_csv(path: str | Path, vocab: Vocab) -> tuple[SelectionWeights, Dataset]:
    rows = read_csv(path)
    if not rows:
        raise ValueError(f"{path}: no weight rows")
    rows.sort(key=lambda r: int(r["index"]))
    methods = {r["method"] for r in rows}
    if len(methods) != 1:
        raise ValueError(f"{path}: mixed weighting methods {sorted(methods)}")
    meta = {}
    first = rows[0]
    for key, cast in (("tau", float), ("n_ft", int), ("learning_rate", float)):
        value = parse_float(first.get(key, ""))
        if value is not None:
            meta[key] = cast(value)
    data = Dataset.from_sequences([parse_sequence(r["sequence"]) for r in rows], vocab)
    weights = SelectionWeights([float(r["weight"]) for r in rows], methods.pop(), meta)
    return weights, data

