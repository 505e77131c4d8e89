"""Compare selection methods on the same D: weights, effective sample size and loss on T.

    python3 scripts/selection_compare.py --config configs/standard.yaml
"""

import argparse
from pathlib import Path

import numpy as np

from lmadapt.config import load_config
from lmadapt.csvio import write_csv
from lmadapt.influence import influence_weights
from lmadapt.model import expected_loss, zeros_params
from lmadapt.selection import (
    binarize_intsel,
    effective_sample_size,
    estimated_importance_weights,
    true_importance_weights,
)
from lmadapt.sources import enumerate_distribution, sample
from lmadapt.training import fine_tune, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/standard.yaml"))
    ap.add_argument("--out", type=Path, default=Path("runs/selection_compare.csv"))
    args = ap.parse_args()

    cfg = load_config(args.config)
    tableT, tableD = enumerate_distribution(cfg.source_T), enumerate_distribution(cfg.source_D)
    D = sample(cfg.source_D, cfg.size_D, cfg.derived_seed("D"))
    T = sample(cfg.source_T, cfg.size_T, cfg.derived_seed("T"))
    theta_D, _ = train(zeros_params(cfg.arch), D, cfg.train)
    s = cfg.selection
    theta_ft, _ = fine_tune(theta_D, T, s.n_ft, s.learning_rate_ft)
    est = estimated_importance_weights(theta_ft, theta_D, D, n_ft=s.n_ft, learning_rate=s.learning_rate_ft)
    methods = {
        "uniform": None,
        "true_importance": true_importance_weights(tableT, tableD, D),
        "estimated_importance": est,
        "intsel_binary": binarize_intsel(est, float(np.median(est.log_values))),
        "influence_derived": influence_weights(theta_D, D, T, cfg.influence.learning_rate),
    }
    rows = []
    for name, w in methods.items():
        values = None if w is None else w.values
        params, _ = train(zeros_params(cfg.arch), D, cfg.train, values)
        n_e = len(D) if w is None else effective_sample_size(w).n_e
        loss = expected_loss(params, tableT)
        rows.append([name, n_e, loss])
        print(f"{name:22s} n_e={n_e:9.1f}  L(theta; T)={loss:.4f}")
    write_csv(args.out, ("method", "n_e", "loss_T"), rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
