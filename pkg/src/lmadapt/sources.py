"""Finite-support sequence distributions used as ground truth.

Every sequence space here is Omega = V^n (fixed length, no end symbol), small
enough to enumerate, so entropies and divergences are exact sums rather than
estimates. Quantities are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

DEFAULT_ENUMERATION_CAP = 2**20


class EnumerationTooLargeError(ValueError):
    pass


class AbsoluteContinuityError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ValueError(f"vocabulary size must be an integer >= 2, got {self.size}")


def _check_prob_vector(p: np.ndarray, what: str, tol: float = 1e-12) -> None:
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{what} has negative or non-finite entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{what} does not sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.3g})")


@dataclass(frozen=True, eq=False)
class MarkovSource:
    """Order-1 Markov chain over fixed-length token sequences."""

    vocab: Vocab
    initial: np.ndarray
    transition: np.ndarray
    seq_len: int

    def __post_init__(self):
        initial = np.array(self.initial, dtype=np.float64)
        transition = np.array(self.transition, dtype=np.float64)
        V = self.vocab.size
        if initial.shape != (V,):
            raise ValueError(f"initial must have shape ({V},), got {initial.shape}")
        if transition.shape != (V, V):
            raise ValueError(f"transition must have shape ({V}, {V}), got {transition.shape}")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        _check_prob_vector(initial, "initial distribution")
        _check_prob_vector(transition, "transition matrix")
        initial.setflags(write=False)
        transition.setflags(write=False)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)

    @property
    def V(self) -> int:
        return self.vocab.size


def sequence_space(V: int, n: int) -> np.ndarray:
    """All V**n sequences as an (V**n, n) int array, first token most significant."""
    idx = np.arange(V**n, dtype=np.int64)
    powers = V ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // powers[None, :]) % V


def sequence_index(seqs: np.ndarray, V: int) -> np.ndarray:
    """Inverse of `sequence_space`: position of each row of `seqs` in Omega."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    n = seqs.shape[1]
    powers = V ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return seqs @ powers


@dataclass(frozen=True, eq=False)
class DistributionTable:
    """Probability of every sequence in Omega, stored densely in `sequence_space` order."""

    vocab: Vocab
    seq_len: int
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.shape != (self.vocab.size**self.seq_len,):
            raise ValueError("probs must cover exactly V**n sequences")
        if np.any(~np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-10:
            raise ValueError(f"probabilities sum to {probs.sum():.15g}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __getitem__(self, seq: Sequence[int]) -> float:
        return float(self.probs[sequence_index(np.asarray(seq), self.vocab.size)[0]])

    def __len__(self) -> int:
        return self.probs.size

    def sequences(self) -> np.ndarray:
        return sequence_space(self.vocab.size, self.seq_len)

    def same_space(self, other: DistributionTable) -> bool:
        return self.vocab.size == other.vocab.size and self.seq_len == other.seq_len


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered sample of sequences. Duplicates are kept as distinct rows."""

    tokens: np.ndarray
    vocab: Vocab
    origin_seed: int | None = None

    def __post_init__(self):
        tokens = np.array(self.tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError("tokens must be a 2-D array (count, seq_len)")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab.size):
            raise ValueError(f"token ids must lie in [0, {self.vocab.size})")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], vocab: Vocab, origin_seed: int | None = None):
        seqs = list(seqs)
        if not seqs:
            raise ValueError("from_sequences needs at least one sequence; use Dataset.empty")
        return cls(np.array(seqs, dtype=np.int64), vocab, origin_seed)

    @classmethod
    def empty(cls, vocab: Vocab, seq_len: int) -> Dataset:
        return cls(np.zeros((0, seq_len), dtype=np.int64), vocab)

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def sequences(self) -> list[tuple[int, ...]]:
        return [tuple(int(t) for t in row) for row in self.tokens]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        return iter(self.sequences)

    def subset(self, index: np.ndarray) -> Dataset:
        return Dataset(self.tokens[np.asarray(index)], self.vocab, self.origin_seed)

    def head(self, count: int) -> Dataset:
        return Dataset(self.tokens[:count], self.vocab, self.origin_seed)


def enumerate_distribution(source: MarkovSource, cap: int = DEFAULT_ENUMERATION_CAP) -> DistributionTable:
    V, n = source.V, source.seq_len
    if V**n > cap:
        raise EnumerationTooLargeError(f"|Omega| = {V}^{n} = {V**n} exceeds the enumeration cap {cap}")
    seqs = sequence_space(V, n)
    probs = source.initial[seqs[:, 0]].copy()
    for i in range(1, n):
        probs *= source.transition[seqs[:, i - 1], seqs[:, i]]
    # renormalise away accumulated rounding so the table invariant holds at 1e-10
    probs /= probs.sum()
    return DistributionTable(source.vocab, n, probs)


def sample(source: MarkovSource, count: int, seed: int) -> Dataset:
    """Draw `count` i.i.d. sequences by ancestral sampling."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    V, n = source.V, source.seq_len
    u = rng.random((count, n))
    tokens = np.empty((count, n), dtype=np.int64)
    tokens[:, 0] = _inverse_cdf(np.cumsum(source.initial)[None, :], u[:, 0])
    cum = np.cumsum(source.transition, axis=1)
    for i in range(1, n):
        tokens[:, i] = _inverse_cdf(cum[tokens[:, i - 1]], u[:, i])
    return Dataset(tokens, source.vocab, seed)


def derive_seed(*tags) -> int:
    """Stable 63-bit seed from a tuple of ints/strings, for independent sub-streams."""
    words: list[int] = []
    for t in tags:
        words.extend(t.encode() if isinstance(t, str) else [int(t)])
    hi, lo = np.random.SeedSequence(words).generate_state(2)
    return (int(hi) << 31) ^ int(lo)


def _inverse_cdf(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    V = cdf_rows.shape[-1]
    hits = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(hits, V - 1)


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(table: DistributionTable) -> float:
    return float(-_xlogx(table.probs).sum())


def kl_divergence(p: DistributionTable, q: DistributionTable) -> float:
    if not p.same_space(q):
        raise ValueError("tables live on different sequence spaces")
    support = p.probs > 0
    if np.any(q.probs[support] <= 0):
        raise AbsoluteContinuityError("q assigns zero probability where p does not")
    ps, qs = p.probs[support], q.probs[support]
    return float(max(np.sum(ps * (np.log(ps) - np.log(qs))), 0.0))


def cross_entropy(p: DistributionTable, q: DistributionTable) -> float:
    """E_p[-log q] = H(p) + KL(p, q)."""
    return entropy(p) + kl_divergence(p, q)


def total_variation(p: DistributionTable, q: DistributionTable) -> float:
    if not p.same_space(q):
        raise ValueError("tables live on different sequence spaces")
    return float(0.5 * np.abs(p.probs - q.probs).sum())


def pinsker_margin(p: DistributionTable, q: DistributionTable) -> float:
    """sqrt(KL(p, q) / 2) - TV(p, q); non-negative up to rounding."""
    return float(np.sqrt(kl_divergence(p, q) / 2.0) - total_variation(p, q))


def chain_rule_entropy(source: MarkovSource) -> float:
    """Entropy of the length-n chain via H(initial) + sum of expected row entropies."""
    row_h = -_xlogx(source.transition).sum(axis=1)
    marginal = source.initial.copy()
    h = float(-_xlogx(marginal).sum())
    for _ in range(1, source.seq_len):
        h += float(marginal @ row_h)
        marginal = marginal @ source.transition
    return h


# presets ------------------------------------------------------------------

def uniform_source(V: int, n: int) -> MarkovSource:
    return MarkovSource(Vocab(V), np.full(V, 1.0 / V), np.full((V, V), 1.0 / V), n)


def sticky_source(V: int, n: int, stay: float) -> MarkovSource:
    """Uniform start; keep the previous token with probability `stay`, else move uniformly."""
    if not 0.0 <= stay <= 1.0:
        raise ValueError("stay probability must lie in [0, 1]")
    off = (1.0 - stay) / (V - 1)
    transition = np.full((V, V), off)
    np.fill_diagonal(transition, stay)
    transition /= transition.sum(axis=1, keepdims=True)
    return MarkovSource(Vocab(V), np.full(V, 1.0 / V), transition, n)


def perturbed_source(base: MarkovSource, scale: float, seed: int) -> MarkovSource:
    """Multiply every probability by exp(scale * N(0, 1)) and renormalise rows.

    Zero entries of `base` stay zero.
    """
    rng = np.random.default_rng(seed)
    V = base.V
    noise_init = rng.standard_normal(V)
    noise_trans = rng.standard_normal((V, V))
    initial = base.initial * np.exp(scale * noise_init)
    transition = base.transition * np.exp(scale * noise_trans)
    initial /= initial.sum()
    transition /= transition.sum(axis=1, keepdims=True)
    return MarkovSource(base.vocab, initial, transition, base.seq_len)


def random_source(V: int, n: int, rng: np.random.Generator, concentration: float = 1.0) -> MarkovSource:
    """Dirichlet-distributed start and transition rows (full support almost surely)."""
    initial = rng.dirichlet(np.full(V, concentration))
    transition = rng.dirichlet(np.full(V, concentration), size=V)
    return MarkovSource(Vocab(V), initial, transition, n)
