"""What the eyelet-side sensor sees.

Reset an insertion episode, poke the gel at a few places and segment each
image into bump and hole masks. Images are written as PGM files next to this
script's output directory so they can be opened in any image viewer.

    python demos/02_tactile_imprints.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from needlethread import harness, percept
from needlethread.env import EnvConfig, InsertionEnv
from needlethread.percept import Label

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

env = InsertionEnv(EnvConfig(needle=2, thread=2))
env.reset(seed=4)
slot = np.asarray(env.scene.slot_center)
print(f"slot centre on the gel: ({slot[0] * 1e3:.2f}, {slot[1] * 1e3:.2f}) mm")

# Poke on the slot, beside it, and on plain gel far away.
for name, uv in [("slot", slot), ("beside", slot + np.array([0.003, 0.0])), ("gel", (0.005, 0.005))]:
    env.reset(seed=4, initial_tip_uv=uv)
    img = env.render()
    harness.write_pgm(out / f"poke_{name}.pgm", img)
    masks = percept.segment(img, [Label.BUMP, Label.HOLE])
    bump, hole = percept.find(masks, Label.BUMP), percept.find(masks, Label.HOLE)
    overlap = int((bump.bits & hole.bits).sum()) if bump is not None and hole is not None else 0
    print(f"{name:>6}: contact {env.contact():<5} bump {0 if bump is None else bump.pixel_count:4d} px, "
          f"hole {0 if hole is None else hole.pixel_count:5d} px, overlap {overlap} -> {env.outcome.value}")

print(f"images written to {out}/")
