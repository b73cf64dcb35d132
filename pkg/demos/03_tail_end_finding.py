"""Finding the thread's end and predicting where its tip hangs.

The gripper glides down the thread twice. The first run stops when the line
imprint ends at the sensor centre and measures the thread; the second stops a
chosen tail length short of that. A small regressor then learns where the free
tip ends up relative to the grasp.

    python demos/03_tail_end_finding.py
"""

import time

import numpy as np

from needlethread import scene, tactile, tail

sensor = tactile.grip_sensor()
world = scene.make_world(thread=2, seed=0, thread_length=0.14)

first = tail.trace_to_tip(world, sensor, np.random.default_rng(0))
print(f"run 1: glided {first.d1 * 100:.2f} cm, thread measured at {first.l_thread * 100:.3f} cm (true 14 cm)")

result, grasped = tail.trace_to_offset(first.world, sensor, first.d1, first.l_thread, 0.02)
print(f"run 2: stopped at {result.d2 * 100:.2f} cm, tail {result.l_tail * 1e3:.2f} mm, "
      f"line angle {result.theta:.1f} deg")

t = time.time()
data = tail.collect_tip_dataset(200, np.random.default_rng(1))
model, err = tail.train_tip_model(data, n_train=160, epochs=300)
print(f"tip model from {len(data)} settled grasps ({time.time() - t:.0f} s): held-out error {err * 1e3:.2f} mm")

est = tail.estimate_tip(model, result.l_tail, result.theta, result.p_tac)
truth = grasped.thread.positions[-1]
print(f"predicted tip {np.round(est.position * 1e3, 1)} mm, true {np.round(truth * 1e3, 1)} mm, "
      f"error {np.linalg.norm(est.position - truth) * 1e3:.2f} mm")
