"""Hypothesis strategies shared across test modules."""

import numpy as np
from hypothesis import strategies as st

from lmadapt.model import ArchSpec, random_params
from lmadapt.sources import Vocab, random_source


@st.composite
def sources(draw, max_V=3, max_n=4):
    V = draw(st.integers(2, max_V))
    n = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    conc = draw(st.sampled_from([0.3, 1.0, 4.0]))
    return random_source(V, n, np.random.default_rng(seed), conc)


@st.composite
def source_pairs(draw, max_V=3, max_n=4):
    V = draw(st.integers(2, max_V))
    n = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return random_source(V, n, rng), random_source(V, n, rng)


@st.composite
def archs(draw, max_V=3, max_n=4):
    V = draw(st.integers(2, max_V))
    n = draw(st.integers(1, max_n))
    family = draw(st.sampled_from(["tabular", "loglinear"]))
    k = draw(st.integers(1, max(1, n)))
    return ArchSpec(family, k, Vocab(V), n)


@st.composite
def params_and_sequence(draw, max_V=3, max_n=4, scale=1.0):
    arch = draw(archs(max_V, max_n))
    params = random_params(arch, draw(st.integers(0, 2**31 - 1)), scale=scale)
    y = tuple(draw(st.lists(st.integers(0, arch.V - 1), min_size=arch.seq_len, max_size=arch.seq_len)))
    return params, y
