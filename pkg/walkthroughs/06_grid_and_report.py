"""
Running a grid and reading the aggregate
========================================

``grid_run`` writes one results file, trace and checkpoint per
(config, seed) and a mean/std aggregate. The same is available from the
shell as ``looseqa grid --config grid.json --out runs/``.
"""

import tempfile
from pathlib import Path

from looseqa.datagen import BiasedClassConfig
from looseqa.harness import ExperimentConfig, grid_run, read_aggregate
from looseqa.losses import LossConfig

small = BiasedClassConfig(n_train=3000, n_test=1000, n_val=500)
configs = [
    ExperimentConfig(strategy="bias_product", loss=LossConfig(kind=k), dataset=small, seeds=(1, 2, 3), epochs=3)
    for k in ("ce", "alo")
]

out = Path(tempfile.mkdtemp(prefix="looseqa-grid-"))
rows, failures = grid_run(configs, out)
print("files:", sorted(p.name for p in out.iterdir())[:4], "...")

agg, failed = read_aggregate(out / "aggregate.csv")
for a in agg:
    if a["metric"] == "accuracy":
        print(f"{a['loss']:4s} {a['split']:9s} {a['mean']:.4f} +/- {a['std']:.4f} (n={a['n']})")
print("failed runs:", failed)
