"""Generate a small dataset, train a tiny simulator and compare grounding intervals.

Runs in a few minutes on one CPU core:

    python3 demos/quickstart.py /tmp/ggns-demo
"""

import json
import sys
from pathlib import Path

from ggns.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "ggns-demo")
run = out / "run"

main(["train", "--preset", "plate-small", "--seed", "0", "--out", str(run)])
main([
    "evaluate", "--checkpoint", str(run / "model.ckpt"), "--data", str(run / "data"),
    "--out", str(out / "eval"), "--k", "1,2,5,inf", "--no-m-plus-10",
])

metrics = json.loads((out / "eval" / "metrics.json").read_text())
print(f"{'k':>5}  {'rollout MSE':>12}  {'IoU':>6}")
for k, agg in metrics["per_k"].items():
    print(f"{k:>5}  {agg['rollout_mse_mean']:12.3e}  {agg['rollout_iou_mean']:6.3f}")
print("normalized benefit:", metrics["normalized_benefit"])
