"""Train on T versus train on D as |T| grows, with and without a distribution shift.

    python3 scripts/crossover_sweep.py --config configs/standard.yaml --jobs 4
"""

import argparse
from pathlib import Path

from lmadapt.analysis import CROSSOVER_COLUMNS, crossover_experiment
from lmadapt.config import load_config
from lmadapt.csvio import write_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/standard.yaml"))
    ap.add_argument("--sizes", type=int, nargs="+", help="|T| values (default: from the config)")
    ap.add_argument("--out", type=Path, default=Path("runs/crossover_sweep.csv"))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    sizes = args.sizes or list(cfg.experiment.crossover_sizes_T)
    rows = []
    for variant, source_T in (("shifted", cfg.source_T), ("same_source", cfg.source_D)):
        res = crossover_experiment(source_T, cfg.source_D, cfg.arch, sizes, cfg.size_D, cfg.crossover_seeds,
                                   cfg.train, args.jobs)
        rows += [[variant, *r] for r in res.table()]
        print(f"{variant:12s} crossover |T| = {res.crossover}")
        for r in res.rows:
            print(f"  |T|={r.size_T:>6}  T: {r.median_loss_T:.4f}  D: {r.median_loss_D:.4f}")
    write_csv(args.out, ("variant", *CROSSOVER_COLUMNS), rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
