"""Command-line front end.

Every subcommand reads one YAML config, writes CSVs under
``<output_dir>/<command>/`` and finishes with a ``manifest.json`` holding the
config hash, package version, a sha256 per output file and the wall-clock time.

CSV column orders:

  simulate   D.csv, T.csv            index, sequence
             sources.csv             name, role, entropy, chain_rule_entropy, kl_to_generic, min_prob
  train      trace_D.csv, trace_ft.csv, trace_dynamic.csv
                                     step, loss, update_norm, dist_from_init, tau, subset_size
             decomposition.csv       evaluated_on, family, k, sample_size, l_H, l_app, l_est, total,
                                     direct, optimizer_tolerance, oracle_grad_norm
  select     weights.csv             index, sequence, weight, method, tau, n_ft, learning_rate
             ess.csv                 n, mean_w, mean_w2, n_e, n_e_from_means
             estimation_error.csv    min_loss_T, loss_theta_D, loss_true_w, loss_est_w, l_est_w,
                                     l_est_what, ess_true, ess_est, n_ft, learning_rate_ft,
                                     optimizer_tolerance, flags
  influence  ranking.csv             index, sequence, mean_influence, implied_log_w
             residual.csv            index, sequence, log_odds, predicted, residual
  verify     cNN_<check>.csv         one table per acceptance check
             summary.csv             criterion, name, passed, detail
  report     summary.csv             section, key, value

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import DECOMPOSITION_COLUMNS, decompose_loss
from .checks import CHECKS, Fixture
from .config import ConfigError, ExperimentConfig, load_config, pinned_kl_matches
from .csvio import read_csv, write_csv, write_text
from .influence import DampedHessian, influence_weights, mean_influences, one_step_logodds_check, write_ranking_csv
from .model import HessianTooLargeError, save_params, zeros_params
from .selection import (
    ESTIMATION_COLUMNS,
    binarize_intsel,
    effective_sample_size,
    estimated_importance_weights,
    estimation_error_report,
    true_importance_weights,
    write_weights_csv,
)
from .sources import (
    EnumerationTooLargeError,
    chain_rule_entropy,
    enumerate_distribution,
    entropy,
    kl_divergence,
    sample,
)
from .training import dynamic_selection_train, fine_tune, train, write_trace_csv

COMMANDS = ("simulate", "train", "select", "influence", "verify", "report")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: ExperimentConfig, outdir: Path, files: list[Path], started: float) -> Path:
    manifest = {
        "config_hash": cfg.config_hash,
        "version": __version__,
        "files": {p.name: _sha256(p) for p in sorted(files)},
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    return write_text(outdir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class _Run:
    """Shared inputs for the data-producing commands."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.D = sample(cfg.source_D, cfg.size_D, cfg.derived_seed("D"))
        self.T = sample(cfg.source_T, cfg.size_T, cfg.derived_seed("T"))

    def theta_D(self):
        return train(zeros_params(self.cfg.arch), self.D, self.cfg.train)

    def theta_ft(self, theta_D):
        s = self.cfg.selection
        return fine_tune(theta_D, self.T, s.n_ft, s.learning_rate_ft)


def cmd_simulate(cfg: ExperimentConfig, outdir: Path, jobs: int) -> list[Path]:
    run = _Run(cfg)
    files = [write_csv(outdir / "D.csv", ("index", "sequence"), enumerate(run.D.tokens)),
             write_csv(outdir / "T.csv", ("index", "sequence"), enumerate(run.T.tokens))]
    tableD = enumerate_distribution(cfg.source_D)
    rows = []
    for name, source in cfg.sources.items():
        table = enumerate_distribution(source)
        role = "generic" if name == cfg.generic else "target" if name == cfg.target else ""
        if cfg.generic == cfg.target and name == cfg.generic:
            role = "generic+target"
        rows.append([name, role, entropy(table), chain_rule_entropy(source), kl_divergence(table, tableD),
                     float(table.probs.min())])
    files.append(write_csv(outdir / "sources.csv",
                           ("name", "role", "entropy", "chain_rule_entropy", "kl_to_generic", "min_prob"), rows))
    return files


def cmd_train(cfg: ExperimentConfig, outdir: Path, jobs: int) -> list[Path]:
    run = _Run(cfg)
    theta_D, trace_D = run.theta_D()
    theta_ft, trace_ft = run.theta_ft(theta_D)
    save_params(theta_D, outdir / "params_D.txt")
    save_params(theta_ft, outdir / "params_ft.txt")
    files = [outdir / "params_D.txt", outdir / "params_ft.txt",
             write_trace_csv(trace_D, outdir / "trace_D.csv"), write_trace_csv(trace_ft, outdir / "trace_ft.csv")]
    if cfg.selection.schedule is not None:
        scorer = estimated_importance_weights(theta_ft, theta_D, run.D)
        _, trace_dyn = dynamic_selection_train(zeros_params(cfg.arch), run.D, scorer, cfg.selection.schedule,
                                               cfg.train)
        files.append(write_trace_csv(trace_dyn, outdir / "trace_dynamic.csv"))
    rows = []
    for label, source in (("generic", cfg.source_D), ("target", cfg.source_T)):
        rep = decompose_loss(source, cfg.arch, run.D, cfg.train)
        rows.append([label, *rep.row()])
    files.append(write_csv(outdir / "decomposition.csv", ("evaluated_on", *DECOMPOSITION_COLUMNS), rows))
    return files


def _selection_weights(cfg: ExperimentConfig, run: _Run, theta_D, theta_ft):
    s = cfg.selection
    if s.method == "true_importance":
        return true_importance_weights(enumerate_distribution(cfg.source_T), enumerate_distribution(cfg.source_D),
                                       run.D)
    if s.method == "influence_derived":
        return influence_weights(theta_D, run.D, run.T, cfg.influence.learning_rate)
    est = estimated_importance_weights(theta_ft, theta_D, run.D, n_ft=s.n_ft, learning_rate=s.learning_rate_ft)
    if s.method == "estimated_importance":
        return est
    tau = s.tau if s.tau is not None else float(np.median(est.log_values))
    return binarize_intsel(est, tau)


def cmd_select(cfg: ExperimentConfig, outdir: Path, jobs: int) -> list[Path]:
    run = _Run(cfg)
    theta_D, _ = run.theta_D()
    theta_ft, _ = run.theta_ft(theta_D)
    weights = _selection_weights(cfg, run, theta_D, theta_ft)
    ess = effective_sample_size(weights)
    files = [write_weights_csv(weights, run.D, outdir / "weights.csv"),
             write_csv(outdir / "ess.csv", ("n", "mean_w", "mean_w2", "n_e", "n_e_from_means"),
                       [[ess.n, ess.mean_w, ess.mean_w2, ess.n_e, ess.n_e_from_means]])]
    if cfg.selection.method in ("true_importance", "estimated_importance"):
        rep = estimation_error_report(cfg.source_T, cfg.source_D, cfg.arch, run.D, run.T, cfg.train,
                                      cfg.selection.n_ft, cfg.selection.learning_rate_ft)
        files.append(write_csv(outdir / "estimation_error.csv", ESTIMATION_COLUMNS, [rep.row()]))
    return files


def cmd_influence(cfg: ExperimentConfig, outdir: Path, jobs: int) -> list[Path]:
    run = _Run(cfg)
    theta_D, _ = run.theta_D()
    inf = cfg.influence
    factor = None
    if inf.mode == "damped_true":
        factor = DampedHessian.from_data(theta_D, run.D, inf.damping)
    m = mean_influences(theta_D, run.D.tokens, run.T, inf.mode, inf.damping, factor=factor)
    files = [write_ranking_csv(run.D, m, inf.learning_rate, outdir / "ranking.csv")]
    probe = run.D.head(inf.probe_size)
    rep = one_step_logodds_check(theta_D, run.T, inf.learning_rate, probe)
    rows = ([i, seq, a, b, c] for i, (seq, a, b, c) in
            enumerate(zip(probe.tokens, rep.log_odds, rep.predicted, rep.residual)))
    files.append(write_csv(outdir / "residual.csv", ("index", "sequence", "log_odds", "predicted", "residual"), rows))
    return files


def _compute_checks(cfg: ExperimentConfig, outdir: Path, jobs: int) -> list[Path]:
    fx = Fixture(cfg, jobs)
    files = []
    for check in CHECKS:
        table = check.compute(fx)
        files.append(write_csv(outdir / check.filename, table.columns, table.rows))
    return files


def run_verify(cfg: ExperimentConfig, outdir: Path, jobs: int = 1) -> tuple[bool, list[Path], list[list]]:
    files = _compute_checks(cfg, outdir, jobs)
    verdicts = []
    for check, path in zip(CHECKS, files):
        v = check.judge(read_csv(path))
        verdicts.append([check.number, check.name, v.passed, v.detail])
    if cfg.experiment.determinism_rerun:
        with tempfile.TemporaryDirectory() as tmp:
            again = _compute_checks(cfg, Path(tmp), jobs)
            rows = [[a.name, _sha256(a), _sha256(b), _sha256(a) == _sha256(b)] for a, b in zip(files, again)]
        det = write_csv(outdir / "c11_determinism.csv", ("file", "sha256_first", "sha256_second", "identical"), rows)
        files.append(det)
        same = [r for r in read_csv(det) if r["identical"] == "1"]
        verdicts.append([11, "determinism", len(same) == len(rows),
                         f"{len(same)}/{len(rows)} CSVs byte-identical across two runs"])
    verdicts.sort(key=lambda r: r[0])
    files.append(write_csv(outdir / "summary.csv", ("criterion", "name", "passed", "detail"), verdicts))
    return all(v[2] for v in verdicts), files, verdicts


def cmd_verify(cfg: ExperimentConfig, outdir: Path, jobs: int) -> tuple[list[Path], bool]:
    ok, kl = pinned_kl_matches(cfg)
    if not ok:
        raise ConfigError(f"pinned KL {cfg.pinned['kl_target_generic']!r} does not match enumerated value {kl!r}",
                          "pinned.kl_target_generic")
    passed, files, verdicts = run_verify(cfg, outdir, jobs)
    for number, name, good, detail in verdicts:
        print(f"{'PASS' if good else 'FAIL'}  [{number:2d}] {name}: {detail}")
    print("verify:", "all checks passed" if passed else "some checks FAILED")
    return files, passed


def cmd_report(cfg: ExperimentConfig, outdir: Path, jobs: int) -> list[Path]:
    """Merge whatever the other commands left under output_dir into one long table."""
    root = outdir.parent
    rows: list[list] = []
    for command in COMMANDS[:-1]:
        manifest = root / command / "manifest.json"
        if not manifest.exists():
            rows.append(["manifest", command, "missing"])
            continue
        info = json.loads(manifest.read_text())
        rows.append(["manifest", command, "config_match" if info["config_hash"] == cfg.config_hash
                     else "config_differs"])
    merges = {
        "sources": (root / "simulate" / "sources.csv", "name"),
        "decomposition": (root / "train" / "decomposition.csv", "evaluated_on"),
        "estimation_error": (root / "select" / "estimation_error.csv", None),
        "ess": (root / "select" / "ess.csv", None),
        "verify": (root / "verify" / "summary.csv", "name"),
    }
    for section, (path, key_col) in merges.items():
        if not path.exists():
            continue
        for i, rec in enumerate(read_csv(path)):
            prefix = rec[key_col] if key_col else str(i)
            for col, value in rec.items():
                if col != key_col:
                    rows.append([section, f"{prefix}.{col}", value])
    return [write_csv(outdir / "summary.csv", ("section", "key", "value"), rows)]


HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "select": cmd_select,
    "influence": cmd_influence,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmadapt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="YAML experiment config")
        p.add_argument("--output-dir", type=Path, help="overrides output_dir from the config")
        p.add_argument("--seed-override", type=int, help="replaces the config's top-level seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep cells")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    started = time.perf_counter()
    try:
        cfg = load_config(args.config, args.seed_override, args.output_dir)
        outdir = cfg.output_dir / args.command
        if args.command == "verify":
            files, passed = cmd_verify(cfg, outdir, args.jobs)
        else:
            files, passed = HANDLERS[args.command](cfg, outdir, args.jobs), True
        write_manifest(cfg, outdir, files, started)
    except (ConfigError, EnumerationTooLargeError, HessianTooLargeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(files)} files to {outdir}")
    return 0 if passed else 1


if __name__ == "__main__":
    sys.exit(main())
