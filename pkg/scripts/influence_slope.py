"""One-step log-odds residual against the influence prediction over a range of learning rates.

    python3 scripts/influence_slope.py --config configs/standard.yaml
"""

import argparse
from pathlib import Path

import numpy as np

from lmadapt.config import load_config
from lmadapt.csvio import write_csv
from lmadapt.influence import mean_influences, ranking_agreement, residual_slope
from lmadapt.model import zeros_params
from lmadapt.sources import sample
from lmadapt.training import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/standard.yaml"))
    ap.add_argument("--lrs", type=float, nargs="+", default=list(np.geomspace(1e-1, 1e-6, 11)))
    ap.add_argument("--out", type=Path, default=Path("runs/influence_slope.csv"))
    args = ap.parse_args()

    cfg = load_config(args.config)
    D = sample(cfg.source_D, cfg.size_D, cfg.derived_seed("D"))
    T = sample(cfg.source_T, cfg.size_T, cfg.derived_seed("T"))
    theta_D, _ = train(zeros_params(cfg.arch), D, cfg.train)
    probe = D.head(cfg.influence.probe_size)
    slope, reports = residual_slope(theta_D, T, probe, args.lrs)
    m = mean_influences(theta_D, probe.tokens, T)
    rows = []
    for r in reports:
        conc, disc = ranking_agreement(r.log_odds, -m, min_gap=10 * r.max_abs_residual / r.learning_rate)
        rows.append([r.learning_rate, r.max_abs_residual, conc, disc])
        print(f"lr={r.learning_rate:.2e}  max|residual|={r.max_abs_residual:.3e}  "
              f"ranking pairs agree/disagree={conc}/{disc}")
    print(f"log-log slope = {slope:.4f}")
    write_csv(args.out, ("learning_rate", "max_abs_residual", "concordant", "discordant"), rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
