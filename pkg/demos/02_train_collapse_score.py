"""Train the three model families on the synthetic taskset, collapse the
gated one, and score everything against the single-task baselines.

Small sizes keep this under a minute, and at this size one gated run can land
on either side of the baselines.  The default sweep run by the acceptance
suite shows the full trade-off curve.
"""
import numpy as np

from gatedmtl import ArchConfig, OptimizerConfig, ScoreTable, SparsityConfig, count_flops, delta_mtl, mean_rank
from gatedmtl.data import SyntheticTaskset, generate_dataset
from gatedmtl.prune import collapse, extract_pattern, pruned_predict, verify_equivalence
from gatedmtl.train import (build_gated, metric_keys, score_predictions, train_interrogate, train_mtl_uniform,
                            train_single_task)

taskset = SyntheticTaskset(rho=0.5, seed=1, train_size=1500, test_size=400)
train, test = generate_dataset(taskset)
tasks = taskset.tasks
arch = ArchConfig(stem_channels=8, widths=[8, 8], pool_after=[0])
cfg = OptimizerConfig(epochs=10, batch_size=32, seed=1)
keys = metric_keys(tasks)

stl_metrics = {}
stl_models = []
for t in range(len(tasks)):
    enc, hist = train_single_task(t, arch, tasks, train, cfg, test=test)
    stl_models.append(enc)
    stl_metrics.update(hist[-1]["test_metrics"])
mtl, mtl_hist = train_mtl_uniform(arch, tasks, train, cfg, test=test)

gated = build_gated(arch, tasks, cfg)
gated, hist = train_interrogate(gated, train, cfg, SparsityConfig(0.05, [0.25] * 3), test=test)
print("task-specific selection ratio per task:", [round(r, 3) for r in hist[-1]["selection_ratio"]])

pattern = extract_pattern(gated)
pruned = collapse(gated, pattern)
eq = verify_equivalence(gated, pruned, test.x[:32])
print(f"collapse check: max relative deviation {max(eq.max_rel):.2e} (passed={eq.passed})")
before, after = count_flops(gated).encoder_flops(), count_flops(pruned).encoder_flops()
print(f"encoder FLOPs: gated {before:,} -> collapsed {after:,} ({after / before:.0%})")

preds = [np.asarray(p) for p in pruned_predict(pruned, test.x)]
gated_metrics = score_predictions(tasks, preds, test.labels)

table = ScoreTable([t.name for t in tasks], [t.direction for t in tasks], {"STL": [stl_metrics[k] for k in keys]})
table.add("MTL uniform", [mtl_hist[-1]["test_metrics"][k] for k in keys])
table.add("gated", [gated_metrics[k] for k in keys])
ranks = mean_rank(table)
print(f"\n{'method':<12}" + "".join(f"{k:>20}" for k in keys) + f"{'delta %':>10}{'MR':>6}")
for name, row in table.rows.items():
    d = 0.0 if name == "STL" else delta_mtl(table, name)
    print(f"{name:<12}" + "".join(f"{v:>20.4f}" for v in row) + f"{d:>+10.2f}{ranks[name]:>6.2f}")
