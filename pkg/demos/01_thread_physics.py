"""A thread as a particle chain.

Hang a nylon thread from one end and let it settle, then clamp a short
glass-fibre tail horizontally and compare its tip droop with beam theory.

    python demos/01_thread_physics.py
"""

import numpy as np

from needlethread import dlo, scene

nylon = scene.THREADS[2].material
glass = scene.THREADS[3].material

# A 16 cm thread laid out horizontally, pinned at its first particle.
chain = dlo.new_chain(0.16, nylon, direction=(1.0, 0.0, 0.0))
chain.pin([0])
res = dlo.settle(chain, tol=1e-6, max_steps=5000)
hang = res.chain
print(f"hanging chain: {len(hang)} particles, settled in {res.steps} steps")
print(f"  lowest point {-hang.positions[:, 2].min() * 100:.2f} cm below the pin (length 16 cm)")
print(f"  worst stretch {hang.stretch_residuals().max() / hang.rest_spacing:.1e} of the rest spacing")

# Short stiff tails barely droop; that is what lets a poke leave a mark. The
# bend compliance is calibrated at 20 mm; at 7 mm spacing a 10 or 30 mm tail is
# only a few segments long, so agreement there is looser.
for length in (0.01, 0.02, 0.03):
    tail = dlo.settle(dlo.clamped_tail(glass, length, direction=(1.0, 0.0, 0.0)), tol=1e-8, max_steps=4000)
    droop = -tail.chain.positions[-1, 2]
    beam = dlo.cantilever_droop(glass, length)
    print(f"glass tail {length * 1e3:.0f} mm: droop {droop * 1e6:.3f} um, beam theory {beam * 1e6:.3f} um")

# The same 20 mm tail in nylon droops far more.
soft = dlo.settle(dlo.clamped_tail(nylon, 0.02, direction=(1.0, 0.0, 0.0)), tol=1e-8, max_steps=4000)
print(f"nylon tail 20 mm: droop {-soft.chain.positions[-1, 2] * 1e6:.2f} um")
print(f"buckling load of that nylon tail: {dlo.buckling_load(nylon, 0.02) * 1e3:.2f} mN")
