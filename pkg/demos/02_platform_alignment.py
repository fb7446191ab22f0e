"""Covariance gap between Android and iOS features before and after alignment.

Run:  python3 demos/02_platform_alignment.py
"""

from __future__ import annotations

from mobility_outcome.diagnostics import ExclusionLog
from mobility_outcome.pipeline import PipelineConfig, adaptation_diagnostics, build_feature_table
from mobility_outcome.synth import generate_cohort


def main() -> None:
    cfg = PipelineConfig(seed=0)
    table = build_feature_table(generate_cohort(seed=0).raw, cfg, ExclusionLog()).table
    diag = adaptation_diagnostics(table, cfg)
    print(f"rows: android {diag['n_android']}, ios {diag['n_ios']}")
    for mode, gaps in diag["modes"].items():
        print(f"{mode:20s} ||C_a - C_i||_F  {gaps['frobenius_before']:10.4f} -> "
              f"{gaps['frobenius_after']:10.4f}")


if __name__ == "__main__":
    main()
