"""Sweep |D| and compare L(theta_D; T) with H(T) + KL(T, D) + epsilon per replicate.

    python3 scripts/theorem1_sweep.py --config configs/standard.yaml --sizes 100 1000 10000 --jobs 4
"""

import argparse
from pathlib import Path

from lmadapt.analysis import THEOREM1_COLUMNS, median_observed_by_size, theorem1_check, theorem1_pass_fraction
from lmadapt.config import load_config
from lmadapt.csvio import write_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/standard.yaml"))
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 300, 1000, 3000, 10000])
    ap.add_argument("--out", type=Path, default=Path("runs/theorem1_sweep.csv"))
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    reports = theorem1_check(cfg.source_T, cfg.source_D, cfg.arch, args.sizes, cfg.replicate_seeds, cfg.train,
                             cfg.experiment.epsilon, args.jobs)
    write_csv(args.out, THEOREM1_COLUMNS, ([getattr(r, c) for c in THEOREM1_COLUMNS] for r in reports))
    bound = reports[0].bound
    print(f"bound H(T) + KL(T, D) + eps = {bound:.4f}")
    for size, med in median_observed_by_size(reports).items():
        print(f"|D|={size:>6}  median L(theta_D; T)={med:.4f}  pass={theorem1_pass_fraction(reports, size):.2f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
