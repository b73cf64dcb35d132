"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the terminal
summary. The learning criteria (5-7) evaluate the checkpoint stored in
``tests/data``, which was produced by ``needlethread train-policy --seed 0``
(1e5 steps). Set ``NEEDLETHREAD_RETRAIN=1`` to retrain it inside the test
(about 35 minutes on one core).
"""

import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from needlethread import dlo, env as E, harness, policy, scene, tactile, tail
from needlethread.env import EnvConfig, InsertionEnv, Outcome, RewardSpec
from needlethread.nn import MLP
from needlethread.percept import Label, Mask, Observation

DATA = Path(__file__).parent / "data"
CHECKPOINT = DATA / "ddpg_n2t2_seed0.json"
VERDICTS: dict[int, str] = {}


def _record(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, VERDICTS[n]


@pytest.fixture(scope="module", autouse=True)
def _print_verdicts(request):
    yield
    rep = request.config.pluginmanager.getplugin("terminalreporter")
    lines = [VERDICTS.get(n, f"criterion {n}: NOT RUN") for n in range(1, 10)]
    for line in ["", "acceptance summary"] + lines:
        if rep is not None:
            rep.write_line(line)
        else:
            print(line)


# --- 1. XPBD correctness ---------------------------------------------------------------

def test_c1_xpbd_suite():
    nylon, glass = scene.THREADS[2].material, scene.THREADS[3].material
    chain = dlo.new_chain(0.16, nylon, direction=(1.0, 0.0, 0.0))
    chain.pin([0])
    res = dlo.settle(chain, tol=1e-6, max_steps=5000)
    hang = res.chain
    free = np.arange(len(hang) - 1)
    rel = float((hang.stretch_residuals()[free] / hang.rest_spacing).max())
    lateral = float(np.abs(hang.positions[:, :2] - hang.positions[0, :2]).max())

    moving = dlo.new_chain(0.1, nylon, origin=(0, 0, 0.02), direction=(1, 0, 1))
    moving.pin([0, 5])
    pinned = moving.positions[[0, 5]].copy()
    plane = dlo.CollisionPlane(origin=(0, 0, 0), normal=(0, 0, 1), extent_u=1.0, extent_v=1.0)
    worst_pen, still = 0.0, True
    for _ in range(300):
        moving = dlo.step(moving, [plane])
        worst_pen = max(worst_pen, float(-((moving.positions - plane.origin) @ plane.normal).min()))
        still &= bool(np.array_equal(moving.positions[[0, 5]], pinned))

    tip = dlo.settle(dlo.clamped_tail(glass, 0.02, direction=(1.0, 0.0, 0.0)), tol=1e-8, max_steps=4000)
    droop = -tip.chain.positions[-1, 2]
    oracle = dlo.cantilever_droop(glass, 0.02)
    droop_err = abs(droop - oracle) / oracle

    ok = (res.converged and rel <= 1e-4 and still and worst_pen <= 1e-5
          and lateral < hang.rest_spacing / 10 and droop_err <= 0.25)
    _record(1, ok, f"residual {rel:.1e}, penetration {max(worst_pen, 0):.1e} m, lateral {lateral:.1e} m, "
                   f"droop {droop:.3e} vs {oracle:.3e} m ({100 * droop_err:.1f}%)")


# --- 2. gradient checks ----------------------------------------------------------------

def _layer_probe_error(net: MLP, rng, probes: int = 10, h: float = 1e-6) -> float:
    """Worst relative error over ``probes`` entries of every weight and bias array."""
    x = rng.normal(size=(3, net.sizes[0]))
    g = rng.normal(size=(3, net.sizes[-1]))
    _, acts = net.forward(x, keep=True)
    gw, gb, _ = net.backward(acts, g)
    worst = 0.0
    for arrays, grads in ((net.weights, gw), (net.biases, gb)):
        for arr, grad in zip(arrays, grads):
            for _ in range(probes):
                idx = tuple(int(rng.integers(n)) for n in arr.shape)
                old = arr[idx]
                arr[idx] = old + h
                up = float(np.sum(g * net.forward(x)))
                arr[idx] = old - h
                down = float(np.sum(g * net.forward(x)))
                arr[idx] = old
                num = (up - down) / (2 * h)
                worst = max(worst, abs(num - grad[idx]) / max(abs(num) + abs(grad[idx]), 1e-7))
    return worst


def test_c2_gradient_checks():
    rng = np.random.default_rng(0)
    raw = policy.RawFeaturizer().dim
    shapes = [
        ([8, 64, 64, 2], "relu", "tanh"),      # actor
        ([10, 64, 64, 1], "relu", "linear"),   # critic
        ([raw, 64, 64, 2], "relu", "tanh"),    # raw-feature actor
        ([raw + 2, 64, 64, 1], "relu", "linear"),
        ([8, 64, 64, 2], "tanh", "tanh"),      # on-policy mean
        ([8, 64, 64, 1], "tanh", "linear"),    # on-policy value
        ([8, *tail.TIP_LAYERS], "tanh", "linear"),  # tip regressor
    ]
    worst = 0.0
    for sizes, act, out in shapes:
        net = MLP.create(sizes, rng, act, out)
        for b in net.biases:
            b += rng.normal(0.0, 0.3, size=b.shape)
        worst = max(worst, _layer_probe_error(net, rng))
    _record(2, worst < 1e-4, f"worst relative error {worst:.1e} over {len(shapes)} network shapes")


# --- 3. tail-end finding ---------------------------------------------------------------

def test_c3_tail_end_finding():
    sensor = tactile.grip_sensor()
    world = scene.make_world(thread=2, seed=0, thread_length=0.14)
    first = tail.trace_to_tip(world, sensor, np.random.default_rng(0))
    len_err = abs(first.l_thread - 0.14)
    result, _ = tail.trace_to_offset(first.world, sensor, first.d1, first.l_thread, 0.02)
    exact = result.l_tail == result.d1 - result.d2

    data = tail.collect_tip_dataset(500, np.random.default_rng(0))
    _, err = tail.train_tip_model(data, n_train=400, epochs=300)
    ok = len_err <= 2 * sensor.mm_per_px and exact and err <= 5e-3
    _record(3, ok, f"length error {1e3 * len_err:.3f} mm (bound {2e3 * sensor.mm_per_px:.3f}), "
                   f"l_tail exact {exact}, tip held-out error {1e3 * err:.2f} mm")


# --- 4. reward and termination ---------------------------------------------------------

THR = 31


def _case(count, inside, hole, shape=(40, 40)):
    n = shape[0] * shape[1]
    b = np.zeros(n, bool)
    b[: count or 0] = True
    bump = Mask(b.reshape(shape), Label.BUMP) if count is not None else None
    if not hole:
        return bump, None
    h = np.zeros(n, bool)
    h[:inside] = True
    h[n - 50:] = True
    return bump, Mask(h.reshape(shape), Label.HOLE)


def _oracle_outcome(count, inside, hole, steps):
    if count is None or count < THR:
        return Outcome.FAIL_TOO_FEW_PIXELS
    if hole and 2 * inside > count:
        return Outcome.SUCCESS
    return Outcome.FAIL_STEP_LIMIT if steps > 5 else Outcome.RUNNING


def test_c4_reward_and_termination():
    spec = RewardSpec.for_resolution(400, 300, 500)
    rng = np.random.default_rng(0)
    worst = 0.0
    in_range = True
    for _ in range(200):
        n = int(rng.integers(1, 400))
        pix = np.column_stack([rng.integers(0, 300, n), rng.integers(0, 400, n)])
        c = rng.uniform([0, 0], [299, 399])
        brute = -sum(math.hypot(r - c[0], q - c[1]) for r, q in pix.tolist()) / n / 500.0
        obs = Observation(c, pix, n, 500.0, (300, 400))
        got = E.compute_reward(obs, Outcome.RUNNING, spec)
        worst = max(worst, abs(got - brute))
        in_range &= -1.0 <= got <= 0.0
    obs = Observation(np.zeros(2), np.zeros((1, 2)), 1, 500.0, (300, 400))
    terminal = (E.compute_reward(obs, Outcome.SUCCESS, spec) == 100.0
                and E.compute_reward(obs, Outcome.FAIL_TOO_FEW_PIXELS, spec) == -100.0
                and E.compute_reward(obs, Outcome.FAIL_STEP_LIMIT, spec) == -100.0)

    cases = [
        (None, 0, True, 1), (0, 0, True, 1), (THR - 1, THR - 1, True, 1), (THR - 1, 0, True, 6),
        (THR, THR, True, 0), (THR, 16, True, 2), (THR, 15, True, 2), (32, 16, True, 2),
        (32, 17, True, 6), (600, 301, True, 2), (600, 300, True, 3), (600, 300, True, 5),
        (600, 300, True, 6), (601, 301, True, 1), (601, 300, True, 1), (600, 600, True, 9),
        (100, 0, True, 0), (100, 0, True, 6), (100, 0, False, 2), (100, 0, False, 6),
    ]
    table_ok = all(
        E.classify_outcome(*_case(c, i, h), s, THR) == _oracle_outcome(c, i, h, s) for c, i, h, s in cases
    )
    ok = worst <= 1e-12 and in_range and terminal and table_ok and len(cases) == 20
    _record(4, ok, f"reward max deviation {worst:.1e}, step reward in [-1,0] {in_range}, "
                   f"terminals exact {terminal}, 20-case table {table_ok}")


# --- 5-7. learning ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    if os.environ.get("NEEDLETHREAD_RETRAIN") == "1":
        out = tmp_path_factory.mktemp("train")
        env = InsertionEnv(EnvConfig(needle=2, thread=2, angle=90.0))
        res = policy.train_offpolicy(env, policy.DDPGConfig(total_steps=100_000), seed=0)
        res.policy.save(out / "policy.json")
        return out / "policy.json", "retrained"
    if not CHECKPOINT.exists():
        pytest.fail(f"missing checkpoint {CHECKPOINT}")
    return CHECKPOINT, "stored checkpoint"


def _campaign(controller, needles, threads, checkpoint=None):
    cfg = harness.RunConfig(
        seed=7, needles=needles, threads=threads, angles=(90.0,), episodes=100,
        controller=controller, checkpoint=None if checkpoint is None else str(checkpoint),
    )
    return harness.run_campaign(cfg)


@pytest.fixture(scope="module")
def campaigns(checkpoint):
    path, _ = checkpoint
    return (
        _campaign("policy", (1, 2, 3), (1, 2, 3, 4), path),
        _campaign("vs", (1, 2, 3), (1, 2, 3, 4)),
    )


def test_c5_learning_at_desk_scale(checkpoint, campaigns):
    cell = campaigns[0].cell(2, 2)
    _record(5, cell.success_rate >= 0.60,
            f"needle #2 / thread #2 success {100 * cell.success_rate:.0f}% over {cell.episodes} episodes "
            f"({checkpoint[1]})")


def test_c6_baseline_ordering(campaigns):
    pol, vs = (t.aggregate(needles=(2, 3)) for t in campaigns)
    _record(6, pol - vs >= 0.10,
            f"needles #2 and #3 aggregate: policy {100 * pol:.1f}% vs VS {100 * vs:.1f}%")


def test_c7_size_trend(campaigns):
    table = campaigns[0]
    rates = [table.cell(n, 2).success_rate for n in (1, 2, 3)]
    pairs = [(rates[2], rates[1]), (rates[1], rates[0])]
    inversions = [hi - lo for hi, lo in pairs if hi < lo]
    trend = len(inversions) == 0 or (len(inversions) == 1 and -inversions[0] <= 0.05)
    cells = [c for c in table.cells if not c.excluded and c.successes]
    steps = sum(c.mean_steps * c.successes for c in cells) / max(sum(c.successes for c in cells), 1)
    ok = trend and steps <= 5
    _record(7, ok, "thread #2 success by needle #1/#2/#3: "
                   + "/".join(f"{100 * r:.0f}%" for r in rates)
                   + f", mean steps {steps:.2f}")


# --- 8. limitation ---------------------------------------------------------------------

def test_c8_soft_thread_limitation():
    env = InsertionEnv(EnvConfig(needle=3, thread=2, angle=90.0, modulus_scale=1e-4))
    material = env.config.material
    force = tactile.indentation_force(tactile.GEL_MODULUS, E.POKE_DEPTH, material.thickness)
    below = not tactile.bump_feasible(material, env.config.tail_length, force)
    res = policy.evaluate(env, policy.BaselinePolicy(env.mm_per_px), range(100))
    fails = res.outcomes.get(Outcome.FAIL_TOO_FEW_PIXELS.value, 0)
    _record(8, below and fails == res.episodes == 100,
            f"{fails}/{res.episodes} FailTooFewPixels with modulus scaled by 1e-4")


# --- 9. determinism --------------------------------------------------------------------

def _cli(out, *args):
    cmd = [sys.executable, "-m", "needlethread", *args, "--out", str(out)]
    return subprocess.run(cmd, capture_output=True, text=True, check=True)


def test_c9_cli_determinism(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nversion = 1\n[campaign]\nneedles = 2\nthreads = 1, 2\nepisodes = 5\ncontroller = vs\n")
    runs = [
        ("eval", "--config", str(ini), "--seed", "3"),
        ("train-policy", "--steps", "300", "--seed", "3"),
        ("collect-tip-data", "--count", "4", "--seed", "3"),
        ("trace", "--seed", "3"),
    ]
    same = []
    for i, args in enumerate(runs):
        a, b = tmp_path / f"a{i}", tmp_path / f"b{i}"
        _cli(a, *args)
        _cli(b, *args)
        files = sorted(p.name for p in a.iterdir() if p.suffix in (".csv", ".jsonl"))
        same.append(bool(files) and all((a / f).read_bytes() == (b / f).read_bytes() for f in files))
    _record(9, all(same), f"byte-identical CSV outputs for {sum(same)}/{len(runs)} subcommands")
