"""End to end: the half-deletion experiment from a config file.

Trains a classifier to tell whether the bottom half of a digit was erased,
re-initialises it as the random baseline, compares both models' maps on
perturbed test images and writes figure grids, abs and signed (source | VBP trained |
VBP random | GBP trained | GBP random).

Run:  python3 demos/03_half_deletion_run.py [output_dir]
Takes under a minute on one CPU core.
"""
import dataclasses
import sys
from pathlib import Path

from causal_saliency.runner import parse_config, read_table, run_experiment

root = Path(__file__).resolve().parent.parent
cfg = parse_config(root / "configs" / "half_deletion.cfg")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "runs" / "demo_half_deletion"
cfg = dataclasses.replace(cfg, output_dir=str(out))

manifest = run_experiment(cfg)
print(f"test accuracy {manifest.summary['best_accuracy']} (reached target: {manifest.summary['reached_target']})")

_, columns, rows = read_table(manifest.path("report_aggregate"))
print(f"\n{'method':6} {'quantity':22} {'mean':>8} {'std':>8}")
for method, quantity, mean, std in rows:
    print(f"{method:6} {quantity:22} {float(mean):8.3f} {float(std):8.3f}")
print(f"\ngrids written to {manifest.path('grid')} and {manifest.path('grid_signed')}")
