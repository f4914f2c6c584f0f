"""Show how point clouds let a trained simulator track an unseen material.

The same scene is simulated twice, once auxetic and once nearly incompressible.
A trained checkpoint is rolled out on both with k=1 (a cloud every step) and
without clouds. Without observations the model cannot tell the two plates apart.

    python3 demos/material_grounding.py RUN_DIR/model.ckpt [seed]
"""

import sys

import numpy as np

from ggns.evaluation import INF, rollout
from ggns.model import ModelParams
from ggns.truthsim import CameraConfig, MaterialClass, ScenarioConfig, observe_trajectory, simulate_batch

params = ModelParams.load(sys.argv[1])
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
pair = simulate_batch(ScenarioConfig(), [seed, seed], [MaterialClass.AUXETIC, MaterialClass.INCOMPRESSIBLE])

for traj in pair:
    observe_trajectory(traj, CameraConfig(), seed)
    truth = traj.states[-1].positions
    for k in (1, INF):
        pred = rollout(params, traj, k).states[-1].positions
        err = float(np.mean((pred - truth) ** 2))
        print(f"{traj.material.value:>14} (nu {traj.material.nu:+.2f})  k={k!s:>4}  final-state MSE {err:.3e}")
