"""Tail-end insertion: visual servoing against a learned policy.

Each episode starts with the tip poking the gel up to 3 cm of calibration error
away from the slot (kept on the gel). A controller sees the poke centroid and
500 eyelet pixels and moves the tip in the gel plane; the episode succeeds
when most of the bump sits inside the slot.

    python demos/04_insertion.py [checkpoint.json]

Without a checkpoint the stored acceptance policy in tests/data is used; train
a fresh one with ``needlethread train-policy --seed 0 --out runs/ddpg``.
"""

import sys
from pathlib import Path

import numpy as np

from needlethread import policy
from needlethread.env import EnvConfig, InsertionEnv

ckpt = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "tests/data/ddpg_n2t2_seed0.json"
env = InsertionEnv(EnvConfig(needle=2, thread=2, angle=90.0))
controllers = {"visual servoing": policy.BaselinePolicy(env.mm_per_px)}
if ckpt.exists():
    controllers["learned policy"] = policy.ActorPolicy.load(ckpt)
else:
    print(f"no checkpoint at {ckpt}; showing the baseline only")

# One episode step by step.
for name, ctrl in controllers.items():
    ctrl.reset()
    obs = env.reset(seed=11)
    print(f"\n{name}: start {np.round(env.tip_uv * 1e3, 2)} mm, slot {np.round(env.scene.slot_center, 5) * 1e3} mm")
    while not env.done:
        a = ctrl(obs)
        obs, r, done, info = env.step(a)
        print(f"  move {np.round(a * 1e3, 2)} mm -> tip {np.round(env.tip_uv * 1e3, 2)} mm, reward {r:.3f}")
    print(f"  outcome {env.outcome.value}")

# Success over 100 resets (some end at the very first poke).
print()
for name, ctrl in controllers.items():
    res = policy.evaluate(env, ctrl, range(1000, 1100))
    print(f"{name:>16}: {res.successes}/{res.episodes} successes, mean steps {res.mean_steps:.2f}, {res.outcomes}")
