"""YAML experiment configuration.

Grammar (all sections optional unless marked)::

    seed: 0                          # base seed; every random draw derives from it
    output_dir: runs/standard
    space: {vocab_size: 4, seq_len: 5}          # required
    sources:                                    # required, name -> definition
      generic: "sticky(0.7)"
      target: "perturbed(generic, 0.7, 0)"
      flat: "uniform"
      hand: {initial: [...], transition: [[...], ...]}
    roles: {generic: generic, target: target}   # which sources play D and T
    pinned: {kl_target_generic: 0.30...}        # checked against the enumerated value
    data: {size_D: 10000, size_T: 100}
    arch: {family: tabular, context_len: 4}
    train: {learning_rate: 2.0, steps: 3000, batch_size: 0, shuffle: true}
    selection: {method: estimated_importance, n_ft: 10, learning_rate_ft: 0.5,
                tau: null, schedule: [[0, -.inf], [1500, 0.0]]}
    influence: {mode: identity, damping: 0.001, learning_rate: 0.0001, probe_size: 200}
    experiment: {...}                           # see ExperimentSettings

Errors carry the dotted field path and, when known, the line in the file.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .model import ArchSpec
from .sources import (
    MarkovSource,
    Vocab,
    derive_seed,
    enumerate_distribution,
    kl_divergence,
    perturbed_source,
    sticky_source,
    uniform_source,
)
from .training import TauSchedule, TrainConfig

SELECTION_METHODS = ("true_importance", "estimated_importance", "intsel_binary", "influence_derived")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path:
            where += f"{path}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class SelectionSettings:
    method: str = "estimated_importance"
    n_ft: int = 10
    learning_rate_ft: float = 0.5
    tau: float | None = None
    schedule: TauSchedule | None = None


@dataclass(frozen=True)
class InfluenceSettings:
    mode: str = "identity"
    damping: float = 1e-3
    learning_rate: float = 1e-4
    probe_size: int = 200


@dataclass(frozen=True)
class ExperimentSettings:
    epsilon: float = 0.1
    replicates: int = 20
    theorem1_sizes: tuple[int, ...] = (10_000,)
    crossover_sizes_T: tuple[int, ...] = (10, 30, 100, 300, 1000, 3000)
    crossover_replicates: int = 10
    slope_learning_rates: tuple[float, ...] = (1e-2, 5e-3, 2.5e-3, 1.25e-3)
    limit_learning_rate: float = 1e-6
    ranking_learning_rate: float = 1e-4
    determinism_rerun: bool = True


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    seed: int
    output_dir: Path
    space: tuple[int, int]
    sources: dict[str, MarkovSource]
    generic: str
    target: str
    size_D: int
    size_T: int
    arch: ArchSpec
    train: TrainConfig
    selection: SelectionSettings
    influence: InfluenceSettings
    experiment: ExperimentSettings
    pinned: dict[str, float] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def source_D(self) -> MarkovSource:
        return self.sources[self.generic]

    @property
    def source_T(self) -> MarkovSource:
        return self.sources[self.target]

    def derived_seed(self, *tags) -> int:
        return derive_seed(self.seed, *tags)

    @property
    def replicate_seeds(self) -> list[int]:
        return [self.derived_seed("replicate", i) for i in range(self.experiment.replicates)]

    @property
    def crossover_seeds(self) -> list[int]:
        return [self.derived_seed("crossover", i) for i in range(self.experiment.crossover_replicates)]

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(_jsonable(self.raw), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


class _Lines:
    """Maps dotted field paths to 1-based line numbers of the composed YAML tree."""

    def __init__(self, text: str):
        self.index: dict[str, int] = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError:
            node = None
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                self.index[path] = key.start_mark.line + 1
                self._walk(value, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, value in enumerate(node.value):
                path = f"{prefix}[{i}]"
                self.index[path] = value.start_mark.line + 1
                self._walk(value, path)

    def line(self, path: str) -> int | None:
        while path:
            if path in self.index:
                return self.index[path]
            path = path.rsplit(".", 1)[0] if "." in path else ""
        return None


class _Reader:
    def __init__(self, lines: _Lines):
        self.lines = lines

    def error(self, message: str, path: str) -> ConfigError:
        return ConfigError(message, path, self.lines.line(path))

    def section(self, raw: dict, key: str, required: bool = False) -> dict:
        value = raw.get(key)
        if value is None:
            if required:
                raise self.error("missing required section", key)
            return {}
        if not isinstance(value, dict):
            raise self.error("expected a mapping", key)
        return value

    def get(self, mapping: dict, key: str, path: str, kind, default=None, required: bool = False):
        if key not in mapping or mapping[key] is None:
            if required:
                raise self.error("missing required field", f"{path}.{key}" if path else key)
            return default
        value = mapping[key]
        full = f"{path}.{key}" if path else key
        try:
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                return value
            if kind is int:
                if isinstance(value, bool) or int(value) != value:
                    raise TypeError
                return int(value)
            if kind is float:
                if isinstance(value, bool):
                    raise TypeError
                return float(value)
            if kind is str:
                if not isinstance(value, str):
                    raise TypeError
                return value
        except (TypeError, ValueError):
            raise self.error(f"expected {kind.__name__}, got {value!r}", full) from None
        return value

    def check_keys(self, mapping: dict, allowed: set[str], path: str) -> None:
        for key in mapping:
            if key not in allowed:
                raise self.error(f"unknown field (allowed: {', '.join(sorted(allowed))})",
                                 f"{path}.{key}" if path else str(key))


_PRESET = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def _build_sources(defs: dict, V: int, n: int, r: _Reader) -> dict[str, MarkovSource]:
    built: dict[str, MarkovSource] = {}

    def build(name: str, stack: tuple[str, ...]) -> MarkovSource:
        if name in built:
            return built[name]
        path = f"sources.{name}"
        if name not in defs:
            raise r.error(f"undefined source {name!r}", stack[-1] if stack else "sources")
        if path in stack:
            raise r.error("circular source definition", path)
        spec = defs[name]
        try:
            if isinstance(spec, dict):
                r.check_keys(spec, {"initial", "transition"}, path)
                src = MarkovSource(Vocab(V), np.array(spec.get("initial"), dtype=float),
                                   np.array(spec.get("transition"), dtype=float), n)
            elif isinstance(spec, str):
                m = _PRESET.match(spec)
                if not m:
                    raise r.error(f"cannot parse source preset {spec!r}", path)
                kind, args = m.group(1), [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
                if kind == "uniform" and not args:
                    src = uniform_source(V, n)
                elif kind == "sticky" and len(args) == 1:
                    src = sticky_source(V, n, float(args[0]))
                elif kind == "perturbed" and len(args) == 3:
                    src = perturbed_source(build(args[0], stack + (path,)), float(args[1]), int(args[2]))
                else:
                    raise r.error(f"unknown preset {spec!r}; expected uniform, sticky(p) or "
                                  "perturbed(base, scale, seed)", path)
            else:
                raise r.error("expected a preset string or a mapping with initial/transition", path)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise r.error(str(exc), path) from None
        built[name] = src
        return src

    for name in defs:
        build(str(name), ())
    return built


def _tuple(r: _Reader, mapping: dict, key: str, path: str, kind, default):
    if key not in mapping:
        return default
    value = mapping[key]
    if not isinstance(value, list) or not value:
        raise r.error("expected a non-empty list", f"{path}.{key}")
    try:
        return tuple(kind(v) for v in value)
    except (TypeError, ValueError):
        raise r.error(f"expected a list of {kind.__name__}", f"{path}.{key}") from None


def parse_config(text: str, base_dir: Path | None = None, seed_override: int | None = None,
                 output_dir: str | Path | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"YAML syntax error: {problem}", None, line) from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    r = _Reader(_Lines(text))
    r.check_keys(raw, {"seed", "output_dir", "space", "sources", "roles", "pinned", "data", "arch", "train",
                       "selection", "influence", "experiment"}, "")
    if seed_override is not None:
        raw = {**raw, "seed": int(seed_override)}
    seed = r.get(raw, "seed", "", int, 0)

    space = r.section(raw, "space", required=True)
    r.check_keys(space, {"vocab_size", "seq_len"}, "space")
    V = r.get(space, "vocab_size", "space", int, required=True)
    n = r.get(space, "seq_len", "space", int, required=True)
    if V < 2 or n < 1:
        raise r.error("need vocab_size >= 2 and seq_len >= 1", "space")

    defs = r.section(raw, "sources", required=True)
    if not defs:
        raise r.error("at least one source is required", "sources")
    sources = _build_sources(defs, V, n, r)

    roles = r.section(raw, "roles")
    r.check_keys(roles, {"generic", "target"}, "roles")
    generic = r.get(roles, "generic", "roles", str, "generic")
    target = r.get(roles, "target", "roles", str, "target")
    for role, name in (("generic", generic), ("target", target)):
        if name not in sources:
            raise r.error(f"undefined source {name!r}", f"roles.{role}")

    pinned = r.section(raw, "pinned")
    r.check_keys(pinned, {"kl_target_generic"}, "pinned")
    pinned_vals = {k: r.get(pinned, k, "pinned", float) for k in pinned}

    data = r.section(raw, "data")
    r.check_keys(data, {"size_D", "size_T"}, "data")
    size_D = r.get(data, "size_D", "data", int, 10_000)
    size_T = r.get(data, "size_T", "data", int, 100)
    if size_D < 1 or size_T < 1:
        raise r.error("dataset sizes must be >= 1", "data")

    arch_raw = r.section(raw, "arch")
    r.check_keys(arch_raw, {"family", "context_len"}, "arch")
    try:
        arch = ArchSpec(r.get(arch_raw, "family", "arch", str, "tabular"),
                        r.get(arch_raw, "context_len", "arch", int, max(1, n - 1)), Vocab(V), n)
    except ValueError as exc:
        raise r.error(str(exc), "arch") from None

    train_raw = r.section(raw, "train")
    r.check_keys(train_raw, {"learning_rate", "steps", "batch_size", "shuffle"}, "train")
    try:
        train = TrainConfig(r.get(train_raw, "learning_rate", "train", float, 2.0),
                            r.get(train_raw, "steps", "train", int, 3000),
                            r.get(train_raw, "batch_size", "train", int, 0),
                            derive_seed(seed, "train"),
                            r.get(train_raw, "shuffle", "train", bool, True))
    except ValueError as exc:
        raise r.error(str(exc), "train") from None

    sel = r.section(raw, "selection")
    r.check_keys(sel, {"method", "n_ft", "learning_rate_ft", "tau", "schedule"}, "selection")
    method = r.get(sel, "method", "selection", str, "estimated_importance")
    if method not in SELECTION_METHODS:
        raise r.error(f"unknown method {method!r}; expected one of {SELECTION_METHODS}", "selection.method")
    schedule = None
    if sel.get("schedule") is not None:
        try:
            schedule = TauSchedule(tuple((int(s), float(t)) for s, t in sel["schedule"]))
        except (TypeError, ValueError) as exc:
            raise r.error(f"bad schedule: {exc}", "selection.schedule") from None
    selection = SelectionSettings(method, r.get(sel, "n_ft", "selection", int, 10),
                                  r.get(sel, "learning_rate_ft", "selection", float, 0.5),
                                  r.get(sel, "tau", "selection", float), schedule)

    inf = r.section(raw, "influence")
    r.check_keys(inf, {"mode", "damping", "learning_rate", "probe_size"}, "influence")
    influence = InfluenceSettings(r.get(inf, "mode", "influence", str, "identity"),
                                  r.get(inf, "damping", "influence", float, 1e-3),
                                  r.get(inf, "learning_rate", "influence", float, 1e-4),
                                  r.get(inf, "probe_size", "influence", int, 200))
    if influence.mode not in ("identity", "damped_true"):
        raise r.error(f"unknown mode {influence.mode!r}", "influence.mode")

    exp = r.section(raw, "experiment")
    allowed = {f for f in ExperimentSettings.__dataclass_fields__}
    r.check_keys(exp, allowed, "experiment")
    d = ExperimentSettings()
    experiment = ExperimentSettings(
        epsilon=r.get(exp, "epsilon", "experiment", float, d.epsilon),
        replicates=r.get(exp, "replicates", "experiment", int, d.replicates),
        theorem1_sizes=_tuple(r, exp, "theorem1_sizes", "experiment", int, (size_D,)),
        crossover_sizes_T=_tuple(r, exp, "crossover_sizes_T", "experiment", int, d.crossover_sizes_T),
        crossover_replicates=r.get(exp, "crossover_replicates", "experiment", int, d.crossover_replicates),
        slope_learning_rates=_tuple(r, exp, "slope_learning_rates", "experiment", float, d.slope_learning_rates),
        limit_learning_rate=r.get(exp, "limit_learning_rate", "experiment", float, d.limit_learning_rate),
        ranking_learning_rate=r.get(exp, "ranking_learning_rate", "experiment", float, d.ranking_learning_rate),
        determinism_rerun=r.get(exp, "determinism_rerun", "experiment", bool, d.determinism_rerun),
    )
    if experiment.replicates < 1 or experiment.crossover_replicates < 1:
        raise r.error("replicate counts must be >= 1", "experiment")

    out = output_dir if output_dir is not None else raw.get("output_dir", "runs/default")
    out = Path(out)
    if not out.is_absolute() and base_dir is not None and output_dir is None:
        out = base_dir / out

    return ExperimentConfig(seed, out, (V, n), sources, generic, target, size_D, size_T, arch, train, selection,
                            influence, experiment, pinned_vals, raw)


def load_config(path: str | Path, seed_override: int | None = None,
                output_dir: str | Path | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, path.parent, seed_override, output_dir)


def pinned_kl_matches(cfg: ExperimentConfig, atol: float = 1e-12) -> tuple[bool, float]:
    """Recompute KL(target, generic) and compare it with the pinned value (if any)."""
    kl = kl_divergence(enumerate_distribution(cfg.source_T), enumerate_distribution(cfg.source_D))
    pinned = cfg.pinned.get("kl_target_generic")
    return (pinned is None or abs(pinned - kl) <= atol), kl
