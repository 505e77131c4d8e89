"""Tiny autoregressive language models with exact likelihoods.

Both families predict token i from the previous ``min(i, k)`` tokens. A
context is identified by the tuple of those tokens; positions that have seen
fewer than k tokens get their own (shorter) contexts, which is the same as
left-padding with a start symbol that is never predicted.

Parameters are a weight matrix ``W`` of shape (F, V), flattened row-major;
the logits for a context are ``phi(context) @ W``:

* ``tabular``   -- phi is a one-hot over every reachable context, so each
  context owns a free row of logits.
* ``loglinear`` -- phi has one one-hot block of size V per lag 1..k plus a
  bias feature; lags reaching before the start contribute nothing.

The loss of an example is ``-log P(y | theta)``. Losses over a dataset only
depend on weighted (context, next token) counts, which is what
:class:`SuffStats` holds, so training cost does not scale with |D|.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .csvio import write_text
from .sources import (
    DEFAULT_ENUMERATION_CAP,
    Dataset,
    DistributionTable,
    EnumerationTooLargeError,
    Vocab,
    sequence_space,
)

DEFAULT_HESSIAN_CAP = 2000
FAMILIES = ("tabular", "loglinear")


class HessianTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    family: str
    context_len: int
    vocab: Vocab
    seq_len: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")

    @property
    def V(self) -> int:
        return self.vocab.size

    @property
    def max_context(self) -> int:
        return min(self.context_len, self.seq_len - 1)

    @cached_property
    def _context_offsets(self) -> np.ndarray:
        sizes = self.V ** np.arange(self.max_context + 1, dtype=np.int64)
        return np.concatenate([[0], np.cumsum(sizes)])

    @property
    def n_contexts(self) -> int:
        return int(self._context_offsets[-1])

    @property
    def n_features(self) -> int:
        if self.family == "tabular":
            return self.n_contexts
        return self.context_len * self.V + 1

    @property
    def n_params(self) -> int:
        return self.n_features * self.V

    def context_ids(self, tokens: np.ndarray) -> np.ndarray:
        """Context id of every position of every row of ``tokens`` -> (N, n)."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        N, n = tokens.shape
        if n != self.seq_len:
            raise ValueError(f"sequence length {n} does not match the architecture's {self.seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.V):
            raise ValueError(f"token id out of range [0, {self.V})")
        ids = np.empty((N, n), dtype=np.int64)
        for i in range(n):
            j = min(i, self.max_context)
            code = np.zeros(N, dtype=np.int64)
            for tok in tokens[:, i - j:i].T:
                code = code * self.V + tok
            ids[:, i] = self._context_offsets[j] + code
        return ids

    @cached_property
    def features(self) -> np.ndarray:
        """(n_contexts, n_features) design matrix."""
        C, V = self.n_contexts, self.V
        if self.family == "tabular":
            return np.eye(C)
        phi = np.zeros((C, self.n_features))
        phi[:, -1] = 1.0
        for j in range(self.max_context + 1):
            start = self._context_offsets[j]
            for code in range(V**j):
                # most recent token is the least significant digit
                rest = code
                for lag in range(1, j + 1):
                    phi[start + code, (lag - 1) * V + rest % V] = 1.0
                    rest //= V
        return phi


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: ArchSpec
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != self.arch.n_params:
            raise ValueError(f"theta has {theta.size} entries, architecture needs {self.arch.n_params}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def weights(self) -> np.ndarray:
        return self.theta.reshape(self.arch.n_features, self.arch.V)

    def replace(self, theta: np.ndarray) -> ModelParams:
        return ModelParams(self.arch, theta)


@dataclass(frozen=True, eq=False)
class GradVector:
    arch: ArchSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.arch.n_params,):
            raise ValueError("gradient length does not match the architecture")


def zeros_params(arch: ArchSpec) -> ModelParams:
    return ModelParams(arch, np.zeros(arch.n_params))


def random_params(arch: ArchSpec, seed: int, scale: float = 0.1) -> ModelParams:
    return ModelParams(arch, scale * np.random.default_rng(seed).standard_normal(arch.n_params))


def context_logits(params: ModelParams) -> np.ndarray:
    if params.arch.family == "tabular":
        return params.weights
    return params.arch.features @ params.weights


def context_log_probs(params: ModelParams) -> np.ndarray:
    """(n_contexts, V) table of log P(next token | context)."""
    return log_softmax(context_logits(params), axis=1)


def log_probs(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """log P(y | theta) for each row of ``tokens``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    ctx = params.arch.context_ids(tokens)
    table = context_log_probs(params)
    return table[ctx, tokens].sum(axis=1)


def log_prob(params: ModelParams, y: Sequence[int]) -> float:
    return float(log_probs(params, np.asarray(y)[None, :])[0])


def model_distribution(params: ModelParams, cap: int = DEFAULT_ENUMERATION_CAP) -> DistributionTable:
    arch = params.arch
    if arch.V**arch.seq_len > cap:
        raise EnumerationTooLargeError(f"|Omega| = {arch.V ** arch.seq_len} exceeds the enumeration cap {cap}")
    return DistributionTable(arch.vocab, arch.seq_len, np.exp(log_probs(params, sequence_space(arch.V, arch.seq_len))))


def grad_log_probs(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """Per-example gradient of log P(y | theta) -> (N, n_params)."""
    arch = params.arch
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    ctx = arch.context_ids(tokens)
    probs = softmax(context_logits(params), axis=1)
    N = tokens.shape[0]
    out = np.zeros((N, arch.n_features, arch.V))
    rows = np.arange(N)
    for i in range(arch.seq_len):
        diff = -probs[ctx[:, i]]
        diff[rows, tokens[:, i]] += 1.0
        if arch.family == "tabular":
            out[rows, ctx[:, i]] += diff
        else:
            out += arch.features[ctx[:, i]][:, :, None] * diff[:, None, :]
    return out.reshape(N, arch.n_params)


def grad_log_prob(params: ModelParams, y: Sequence[int]) -> GradVector:
    return GradVector(params.arch, grad_log_probs(params, np.asarray(y)[None, :])[0])


# dataset-level losses --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SuffStats:
    """Weighted (context, next-token) counts plus the loss normaliser.

    The loss is ``-(1 / norm) * sum(counts * log P(token | context))``.
    """

    arch: ArchSpec
    counts: np.ndarray
    norm: float

    def scaled(self, factor: float) -> SuffStats:
        """Same objective multiplied by ``factor``, normalised to norm = 1."""
        return SuffStats(self.arch, self.counts * (factor / self.norm), 1.0)


def _check_weights(weights: np.ndarray | None, count: int) -> np.ndarray | None:
    if weights is None:
        return None
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
    if w.shape != (count,):
        raise ValueError(f"{w.size} weights for {count} examples")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    return w


def sufficient_stats(arch: ArchSpec, tokens: np.ndarray, weights=None, norm: float | None = None) -> SuffStats:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    N = tokens.shape[0]
    w = _check_weights(weights, N)
    counts = np.zeros((arch.n_contexts, arch.V))
    if N:
        ctx = arch.context_ids(tokens)
        per_row = np.ones(N) if w is None else w
        np.add.at(counts, (ctx.ravel(), tokens.ravel()), np.repeat(per_row, arch.seq_len))
    return SuffStats(arch, counts, float(N) if norm is None else float(norm))


def data_stats(arch: ArchSpec, data: Dataset, weights=None) -> SuffStats:
    if len(data) == 0:
        raise ValueError("empty dataset")
    return sufficient_stats(arch, data.tokens, weights)


def table_stats(arch: ArchSpec, table: DistributionTable) -> SuffStats:
    return sufficient_stats(arch, table.sequences(), table.probs, norm=1.0)


def stats_loss(params: ModelParams, stats: SuffStats) -> float:
    logp = context_log_probs(params)
    mask = stats.counts != 0
    return float(-np.sum(stats.counts[mask] * logp[mask]) / stats.norm)


def stats_loss_and_grad(params: ModelParams, stats: SuffStats) -> tuple[float, np.ndarray]:
    logits = context_logits(params)
    logp = log_softmax(logits, axis=1)
    mask = stats.counts != 0
    loss = -np.sum(stats.counts[mask] * logp[mask]) / stats.norm
    totals = stats.counts.sum(axis=1, keepdims=True)
    dlogits = (totals * np.exp(logp) - stats.counts) / stats.norm
    if params.arch.family == "tabular":
        grad = dlogits
    else:
        grad = params.arch.features.T @ dlogits
    return float(loss), grad.ravel()


def empirical_loss(params: ModelParams, data: Dataset, weights=None) -> float:
    """Mean (optionally weighted) negative log-likelihood over ``data``."""
    return stats_loss(params, data_stats(params.arch, data, weights))


def empirical_loss_grad(params: ModelParams, data: Dataset, weights=None) -> np.ndarray:
    return stats_loss_and_grad(params, data_stats(params.arch, data, weights))[1]


def expected_loss(params: ModelParams, table: DistributionTable) -> float:
    """Exact cross-entropy E_{y ~ table}[-log P(y | theta)]."""
    if table.vocab.size != params.arch.V or table.seq_len != params.arch.seq_len:
        raise ValueError("table and model live on different sequence spaces")
    return stats_loss(params, table_stats(params.arch, table))


def perplexity(params: ModelParams, data: Dataset) -> float:
    return float(np.exp(empirical_loss(params, data) / params.arch.seq_len))


# curvature -------------------------------------------------------------------

def fd_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, h: float = 1e-5,
               symmetrize: bool = True) -> np.ndarray:
    """Central finite differences of an analytic gradient, one column per coordinate."""
    theta = np.asarray(theta, dtype=np.float64)
    P = theta.size
    H = np.empty((P, P))
    step = theta.copy()
    for j in range(P):
        step[j] = theta[j] + h
        up = grad_fn(step)
        step[j] = theta[j] - h
        down = grad_fn(step)
        step[j] = theta[j]
        H[:, j] = (up - down) / (2.0 * h)
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


def stats_hessian(params: ModelParams, stats: SuffStats, h: float = 1e-5, cap: int = DEFAULT_HESSIAN_CAP,
                  symmetrize: bool = True) -> np.ndarray:
    if params.arch.n_params > cap:
        raise HessianTooLargeError(f"{params.arch.n_params} parameters exceed the Hessian cap {cap}")
    return fd_hessian(lambda t: stats_loss_and_grad(params.replace(t), stats)[1], params.theta, h, symmetrize)


def hessian(params: ModelParams, data: Dataset, weights=None, h: float = 1e-5,
            cap: int = DEFAULT_HESSIAN_CAP, symmetrize: bool = True) -> np.ndarray:
    """Hessian of the empirical loss over ``data``."""
    if params.arch.n_params > cap:
        raise HessianTooLargeError(f"{params.arch.n_params} parameters exceed the Hessian cap {cap}")
    return stats_hessian(params, data_stats(params.arch, data, weights), h, cap, symmetrize)


# serialisation -----------------------------------------------------------------

def save_params(params: ModelParams, path: str | Path) -> None:
    """Text format: one header line, then one value per line at 17 significant digits."""
    a = params.arch
    lines = [f"# family={a.family} k={a.context_len} V={a.V} n={a.seq_len}"]
    lines += [f"{x:.17g}" for x in params.theta]
    write_text(path, "\n".join(lines) + "\n")


def load_params(path: str | Path) -> ModelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing architecture header")
    fields = dict(item.split("=", 1) for item in lines[0][1:].split())
    try:
        arch = ArchSpec(fields["family"], int(fields["k"]), Vocab(int(fields["V"])), int(fields["n"]))
    except KeyError as exc:
        raise ValueError(f"{path}: header lacks field {exc.args[0]!r}") from None
    theta = np.array([float(x) for x in lines[1:] if x.strip()])
    return ModelParams(arch, theta)
