"""
A small three-mode ablation, in memory
======================================

The same steps as ``stenomil synth ... report`` on a 40-patient cohort with
short schedules: pretrain both encoders on a separate patient stream, encode
the cohort, then train and evaluate combined, arteries-only and myo-only
models on one shared set of folds.  Takes a few minutes on one core; the
numbers are noisy at this size.
"""

import sys
import time

from stenomil.pipeline import PipelineConfig, run_experiment

cfg = PipelineConfig(
    patients=40,
    pretrain_patients=6,
    vcae_iterations=300,
    seq_iterations=300,
    myo_iterations=300,
    pretrain_patches=3000,
    iterations=4000,
    checkpoint_interval=200,
    folds=4,
)
out = sys.argv[1] if len(sys.argv) > 1 else None

t0 = time.time()
report = run_experiment(cfg, out_dir=out, progress=lambda s: print(f"[{time.time() - t0:6.1f}s] {s}", flush=True))
print()
print(report.table())
for mode in ("arteries", "myo"):
    print(f"combined - {mode}: {report.auc('combined') - report.auc(mode):+.4f}")
