#!/usr/bin/env python3
"""Run a scaled-down pretraining-versus-none grid and print the report.

Uses a small cohort and short schedules so it finishes in about a minute,
then prints the per-cell test macro-AUC table and where the artifacts live.
The full-size default grid is what `cineclr experiment` runs.

Usage: python3 demos/03_mini_experiment.py [OUT_DIR]   (default demos/out/mini)
"""

import sys
from dataclasses import replace
from pathlib import Path

from cineclr.classify import FinetuneConfig
from cineclr.contrastive import PretrainConfig
from cineclr.experiment import ExperimentConfig, GridConfig, run_experiment
from cineclr.phantom import PhantomConfig


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demos/out/mini")
    cfg = ExperimentConfig(
        dataset=PhantomConfig(cases_per_class=12, seed=0),
        pretrain=PretrainConfig(epochs=12, patience=12),
        finetune=FinetuneConfig(epochs=15),
        grid=GridConfig(pretrain_modes=("none", "segmented-sscl"),
                        input_modes=("full", "segmented"), repeats=1),
    )
    report = run_experiment(cfg, out)

    print(f"{'pretrain':<16} {'input':<10} {'macro AUC':>9}")
    for cell in report.cells:
        print(f"{cell.pretrain_mode:<16} {cell.input_mode:<10} {cell.macro_auc:>9.3f}")
    print(f"\nartifacts: {out}/report.csv, tables.md, convergence.svg, "
          f"checkpoints/, predictions/, run.log")
    print("(small cohort + short schedules: numbers are illustrative, not the")
    print(" defaults — run `cineclr experiment` for the full grid)")


if __name__ == "__main__":
    main()
