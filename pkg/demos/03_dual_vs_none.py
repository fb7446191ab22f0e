"""Leave-one-user-out F1 with and without dual alignment over a few seeds.

Uses a reduced hyperparameter grid so it finishes in a few minutes.
Run:  python3 demos/03_dual_vs_none.py [n_seeds]
"""

from __future__ import annotations

import sys

import numpy as np

from mobility_outcome.diagnostics import ExclusionLog
from mobility_outcome.evaluate import EvalConfig, louo_cross_validate
from mobility_outcome.pipeline import PipelineConfig, build_feature_table
from mobility_outcome.synth import generate_cohort

GRID = EvalConfig(c_exponents=(-3, -1, 1, 3, 5), gamma_exponents=(-7, -5, -3, -1, 1),
                  rfe_c_exponents=(-1, 3), rfe_gamma_exponents=(-5, -1))
SCENARIO = "location_plus_both_baselines"


def main(n_seeds: int = 3) -> None:
    gains = []
    for seed in range(n_seeds):
        table = build_feature_table(generate_cohort(seed=seed).raw, PipelineConfig(seed=seed),
                                    ExclusionLog()).table
        f1 = {m: louo_cross_validate(table, SCENARIO, m, GRID, seed).metrics.f1
              for m in ("none", "dual")}
        gains.append(f1["dual"] - f1["none"])
        print(f"seed {seed}: none {f1['none']:.3f}  dual {f1['dual']:.3f}  gain {gains[-1]:+.3f}")
    print(f"mean gain {np.mean(gains):+.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
