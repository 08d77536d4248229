#!/usr/bin/env python3
"""Train the desk-scale model end to end and inspect the results.

Generates a 50-frame hilly dataset, trains with the default config
(pass --steps to shorten), evaluates with recursive history, and writes
a side-by-side comparison image per a few frames. Expect a few minutes
at the default 2000 steps on 8 CPU cores.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from elevmap import RunConfig, evaluate, read_dataset, train
from elevmap.cli import main as cli_main

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=2000)
parser.add_argument("--frames", type=int, default=50)
args = parser.parse_args()

out = Path(__file__).parent / "output" / "04"
out.mkdir(parents=True, exist_ok=True)
ds_dir = out / "dataset"

if not ds_dir.exists():
    print("generating dataset ...")
    assert cli_main([
        "synthgen", "--out", str(ds_dir), "--seed", "42", "--style", "hilly",
        "--frames", str(args.frames),
    ]) == 0

dataset = read_dataset(ds_dir)
config = RunConfig(train_steps=args.steps, checkpoint_every=500)

print(f"training {args.steps} steps on {len(dataset)} frames ...")
result = train(config, dataset, out / "run")
print(f"final loss {result.final_loss:.4f}; checkpoint at {result.checkpoint_path}")

losses = [r["total"] for r in result.loss_history]
for k in range(0, len(losses), max(1, len(losses) // 8)):
    window = losses[k : k + max(1, len(losses) // 8)]
    print(f"  steps {k:5d}+: mean loss {np.mean(window):.4f}")

report = evaluate(config, dataset, checkpoint=result.checkpoint_path)
print("\ntraining-set report (recursive history):")
print(report.render_table())
report.to_json(out / "report.json")

for frame in (0, len(dataset) // 2, len(dataset) - 1):
    code = cli_main([
        "predict", "--checkpoint", str(result.checkpoint_path),
        "--frame-dir", str(ds_dir / "frames" / f"{frame:06d}"),
        "--out", str(out / f"compare_{frame:03d}"),
    ])
    assert code == 0
print(f"\ncomparison renders in {out} (front view | ground truth | prediction)")
