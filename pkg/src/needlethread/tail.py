"""Tail-end finding: two tracing runs and a learned tip-offset regressor.

Run one glides the sliding grip down the braked thread until the imprint's
end reaches the sensor centre, giving the traversal ``d1`` and the thread
length. Run two stops ``l_tail`` earlier at ``d2 = d1 - l_tail`` and closes
the grip. The tip is then predicted as ``p_tac + f(l_tail, theta, p_tac)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import dlo, percept, scene, tactile
from .geometry import Pose
from .nn import MLP, Adam, Standardizer

log = logging.getLogger(__name__)

DEFAULT_TAIL = 0.020
COARSE_STEP = 0.005
TAIL_RANGE = (0.005, 0.040)
THETA_RANGE = (80.0, 100.0)
#: Region where dataset grasps are placed (m, robot base frame).
GRASP_BOX = ((0.20, -0.10, 0.10), (0.40, 0.10, 0.30))
TIP_LAYERS = (16, 32, 32, 3)
#: Offsets are regressed in centimetres to keep targets of order one.
OUTPUT_SCALE = 0.01


class TraceError(RuntimeError):
    """The thread end never showed up in the grip image."""


class TrainingError(RuntimeError):
    """Tip-model training diverged."""


class TipTrace(NamedTuple):
    d1: float
    l_thread: float
    world: scene.WorldState
    endpoint: np.ndarray


@dataclass(frozen=True)
class TraceResult:
    d1: float
    d2: float
    l_thread: float
    l_tail: float
    theta: float
    p_tac: Pose


def _line_mask(world, sensor, rng):
    img = tactile.render_grip_image(world, sensor, rng)
    return percept.find(percept.segment(img, [percept.Label.LINE]), percept.Label.LINE)


def trace_to_tip(
    world: scene.WorldState,
    sensor: tactile.SensorSpec,
    rng: np.random.Generator | None = None,
    step: float = COARSE_STEP,
    max_travel: float = 1.0,
) -> TipTrace:
    """First run: glide until the line's end sits on the sensor's centre row."""
    world = scene.reset_glide(world)
    centre_row = (sensor.height_px - 1) / 2
    mpp = sensor.mm_per_px
    for _ in range(int(max_travel / step) + 3):
        line = _line_mask(world, sensor, rng)
        end = percept.line_endpoint(line) if line is not None else None
        if end is not None and percept.touched_borders(line)["top"] > 0:
            offset = end[0] - centre_row
            if abs(offset) <= 2:
                return TipTrace(world.traversed, world.traversed + percept.residual_length(line, mpp), world, end)
            # bring the end onto the centre row in one move
            world, _, _ = scene.glide_along_thread(world, max(offset, 0.0) * mpp)
            continue
        if world.traversed >= max_travel:
            break
        world, _, clipped = scene.glide_along_thread(world, step)
    raise TraceError("thread end not found within the travel bound")


def trace_to_offset(
    world: scene.WorldState,
    sensor: tactile.SensorSpec,
    d1: float,
    l_thread: float,
    l_tail_target: float = DEFAULT_TAIL,
    rng: np.random.Generator | None = None,
) -> tuple[TraceResult, scene.WorldState]:
    """Second run: stop ``l_tail_target`` short of ``d1`` and close the grip."""
    if not 0 < l_tail_target < d1:
        raise ValueError("l_tail_target must lie in (0, d1)")
    d2 = d1 - l_tail_target
    world = scene.reset_glide(world)
    world, traversed, _ = scene.glide_along_thread(world, d2)
    grasp = world.gripper_pose.position
    true_tail = world.thread_length - traversed - world.sensor_height / 2
    world = scene.grasp_thread(world, grasp, true_tail)
    line = _line_mask(world, sensor, rng)
    theta = percept.line_orientation(line)
    result = TraceResult(d1, traversed, l_thread, d1 - traversed, theta, world.gripper_pose)
    return result, world


# --- dataset -------------------------------------------------------------------

@dataclass(frozen=True)
class TipSample:
    l_tail: float
    theta: float
    p_tac: Pose
    offset_true: np.ndarray


def grip_axis(p_tac: Pose) -> np.ndarray:
    """Nominal thread direction through the jaws (image-down on the sensor)."""
    return -p_tac.matrix[:, 1]


def tail_direction(p_tac: Pose, theta_deg: float) -> np.ndarray:
    """World direction of a tail leaving the jaws at image angle ``theta``."""
    t = math.radians(unwrap_theta(theta_deg))
    return p_tac.rotation.apply([-math.cos(t), -math.sin(t), 0.0])


def unwrap_theta(theta_deg: float) -> float:
    """Map a line angle in (-90, 90] onto (0, 180] for a downward tail."""
    return theta_deg if theta_deg > 0 else theta_deg + 180.0


def tip_features(l_tail: float, theta: float, p_tac: Pose) -> np.ndarray:
    return np.concatenate([[l_tail, unwrap_theta(theta)], p_tac.position, grip_axis(p_tac)])


def _sample_once(material, rng, sensor, l_tail, theta_cmd):
    lo, hi = np.asarray(GRASP_BOX[0]), np.asarray(GRASP_BOX[1])
    pos = rng.uniform(lo, hi)
    p_tac = Pose(pos, Rotation.random(random_state=rng).as_quat())
    if l_tail == 0:
        return TipSample(0.0, theta_cmd, p_tac, np.zeros(3)), True
    direction = tail_direction(p_tac, theta_cmd)
    chain = dlo.clamped_tail(material, l_tail, clamp=pos, direction=direction)
    res = dlo.settle(chain, tol=1e-6, max_steps=3000)
    view = tactile.GripView(res.chain, p_tac)
    line = _line_mask(view, sensor, rng)
    try:
        theta = percept.line_orientation(line) if line is not None else theta_cmd
    except percept.InsufficientExtentError:
        theta = theta_cmd
    offset = res.chain.positions[-1] - pos
    return TipSample(l_tail, theta, p_tac, offset), res.converged


def collect_tip_dataset(
    count: int,
    rng: np.random.Generator,
    material: dlo.MaterialSpec | None = None,
    sensor: tactile.SensorSpec | None = None,
    tail_range=TAIL_RANGE,
    theta_range=THETA_RANGE,
) -> list[TipSample]:
    """Grasp random tails in random poses, settle them and record the tip offset."""
    if count < 1:
        raise ValueError("count must be >= 1")
    material = scene.THREADS[2].material if material is None else material
    sensor = tactile.grip_sensor() if sensor is None else sensor
    out = []
    while len(out) < count:
        l_tail = float(rng.uniform(*tail_range))
        theta = float(rng.uniform(*theta_range))
        sample, ok = _sample_once(material, rng, sensor, l_tail, theta)
        if not ok:
            log.warning("settle did not converge for l_tail=%.4f; redrawing", l_tail)
            continue
        out.append(sample)
    return out


def sample_at(material, l_tail, theta, p_tac: Pose) -> TipSample:
    """Ground-truth sample for a given grasp (no image measurement)."""
    if l_tail == 0:
        return TipSample(0.0, theta, p_tac, np.zeros(3))
    chain = dlo.clamped_tail(material, l_tail, clamp=p_tac.position, direction=tail_direction(p_tac, theta))
    res = dlo.settle(chain, tol=1e-6, max_steps=3000)
    return TipSample(l_tail, theta, p_tac, res.chain.positions[-1] - p_tac.position)


CSV_HEADER = ["l_tail", "theta", "px", "py", "pz", "qx", "qy", "qz", "qw", "ox", "oy", "oz"]


def save_dataset(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for s in samples:
            w.writerow([repr(float(x)) for x in (s.l_tail, s.theta, *s.p_tac.position, *s.p_tac.orientation, *s.offset_true)])


def load_dataset(path) -> list[TipSample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError("unexpected tip dataset header")
        for row in reader:
            v = [float(x) for x in row]
            out.append(TipSample(v[0], v[1], Pose(v[2:5], v[5:9]), np.array(v[9:12])))
    return out


# --- model ---------------------------------------------------------------------

@dataclass
class TipModel:
    net: MLP
    inputs: Standardizer
    meta: dict = field(default_factory=dict)

    def offset(self, l_tail, theta, p_tac: Pose) -> np.ndarray:
        x = self.inputs(tip_features(l_tail, theta, p_tac))
        return self.net(x) * OUTPUT_SCALE

    def in_range(self, l_tail, theta, p_tac: Pose, k: float = 3.0) -> bool:
        z = self.inputs(tip_features(l_tail, theta, p_tac))
        return bool(np.all(np.abs(z) <= k))

    def save(self, path) -> None:
        data = {"version": 1, "net": self.net.to_dict(), "inputs": self.inputs.to_dict(), "meta": self.meta}
        Path(path).write_text(json.dumps(data))

    @classmethod
    def load(cls, path) -> "TipModel":
        data = json.loads(Path(path).read_text())
        if data.get("version") != 1:
            raise ValueError("unsupported tip model version")
        return cls(MLP.from_dict(data["net"]), Standardizer.from_dict(data["inputs"]), data.get("meta", {}))


def _arrays(samples):
    x = np.array([tip_features(s.l_tail, s.theta, s.p_tac) for s in samples])
    y = np.array([s.offset_true for s in samples])
    return x, y


def mean_distance_error(model: TipModel, samples) -> float:
    errs = [np.linalg.norm(model.offset(s.l_tail, s.theta, s.p_tac) - s.offset_true) for s in samples]
    return float(np.mean(errs))


def train_tip_model(
    dataset,
    n_train: int = 400,
    epochs: int = 600,
    lr: float = 3e-3,
    batch: int = 32,
    seed: int = 0,
    layers=TIP_LAYERS,
) -> tuple[TipModel, float]:
    """Fit the regressor on the first ``n_train`` samples; report held-out error (m)."""
    if len(dataset) < 100:
        raise ValueError("need at least 100 samples")
    n_train = min(n_train, len(dataset) - 1)
    train, test = dataset[:n_train], dataset[n_train:]
    x, y = _arrays(train)
    norm = Standardizer.fit(x)
    xz, yz = norm(x), y / OUTPUT_SCALE
    rng = np.random.default_rng(seed)
    net = MLP.create([xz.shape[1], *layers], rng, activation="tanh", out_scale=0.1)
    # start from the mean offset so training only has to learn the variation
    net.biases[-1][:] = yz.mean(axis=0)
    opt = Adam(net.params(), lr=lr)
    decay = 0.01 ** (1.0 / max(epochs, 1))
    for epoch in range(epochs):
        order = rng.permutation(len(xz))
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            pred, acts = net.forward(xz[idx], keep=True)
            diff = pred - yz[idx]
            loss = float(np.mean(np.sum(diff**2, axis=1)))
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch}")
            gw, gb, _ = net.backward(acts, 2 * diff / len(idx))
            opt.step(MLP.interleave(gw, gb))
        opt.lr *= decay
    model = TipModel(net, norm, {"n_train": n_train, "epochs": epochs, "lr": lr, "seed": seed})
    err = mean_distance_error(model, test)
    model.meta["heldout_error"] = err
    return model, err


class TipEstimate(NamedTuple):
    position: np.ndarray
    in_range: bool


def estimate_tip(model: TipModel, l_tail: float, theta: float, p_tac: Pose) -> TipEstimate:
    """``p_tip = f(l_tail, theta, p_tac) + p_tac``, flagged when inputs leave the training range."""
    pos = model.offset(l_tail, theta, p_tac) + p_tac.position
    return TipEstimate(pos, model.in_range(l_tail, theta, p_tac))


class DroopOracle(NamedTuple):
    droop: float
    applicable: bool


def cantilever_droop_oracle(l_tail: float, material: dlo.MaterialSpec) -> DroopOracle:
    """Small-deflection self-weight droop ``q L^4 / (8 E I)``."""
    d = dlo.cantilever_droop(material, l_tail)
    return DroopOracle(d, d < 0.2 * l_tail)
