"""The engineered tasks and their ground-truth masks, written as PGM strips.

Run:  python3 demos/05_task_generators.py [output_dir]
"""
import sys
from pathlib import Path

import numpy as np

from causal_saliency.runner import render_grid
from causal_saliency.tasks import (
    load_bundled_mnist, make_half_deletion_task, make_pair_task, make_shape_augment_task, split_by_class,
    train_test_split, upscale,
)

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs") / "demo_tasks"
out.mkdir(parents=True, exist_ok=True)
_, sample = train_test_split(load_bundled_mnist(), 300, seed=4)

tasks = {
    "half_deletion": make_half_deletion_task(sample, 0.5, seed=0),
    "shape_shape": make_shape_augment_task(sample, "shape", seed=0),
    "shape_digit": make_shape_augment_task(sample, "digit", seed=0),
}
a, b = split_by_class(upscale(sample, 64), range(5), range(5, 10))
tasks["pair"] = make_pair_task(a, b, 6, seed=0)

for name, ds in tasks.items():
    rows = [(ds.images[i], [(ds.masks[i][None], f"mask, label {ds.class_names[ds.labels[i]]}")]) for i in range(6)]
    path = render_grid(rows, out / f"{name}.pgm")
    counts = np.bincount(ds.labels, minlength=len(ds.class_names))
    print(f"{name:14} {len(ds):4d} examples, label counts {dict(zip(ds.class_names, counts.tolist()))} -> {path}")

shape_meta = tasks["shape_shape"].gen_meta
placed = [m for m in shape_meta if m["kind"] != "none"]
print(f"shapes placed: {len(placed)}, largest digit-box overlap {max(m['overlap'] for m in placed):.2f}, "
      f"fell back after 20 tries: {sum(not m['accepted'] for m in placed)}")
