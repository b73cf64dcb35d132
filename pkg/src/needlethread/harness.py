"""Configuration, campaigns, the end-to-end pipeline and result files."""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dlo, policy, scene, tactile, tail
from .env import EnvConfig, InsertionEnv, Outcome
from .geometry import Pose
from .percept import InsufficientExtentError

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


# --- configuration ---------------------------------------------------------------

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"resolution must look like 400x300, got {text!r}") from exc
    if w <= 0 or h <= 0:
        raise ConfigError("resolution must be positive")
    return w, h


@dataclass
class RunConfig:
    """Everything a CLI invocation needs. See ``README.md`` for the file schema."""

    seed: int = 0
    resolution: tuple[int, int] = tactile.DEFAULT_RESOLUTION
    # campaign
    needles: tuple[int, ...] = (1, 2, 3)
    threads: tuple[int, ...] = (1, 2, 3, 4)
    angles: tuple[float, ...] = (60.0,)
    episodes: int = 20
    controller: str = "policy"
    checkpoint: str | None = None
    # environment
    noise_bound: float = 0.03
    distortion: float = tactile.EYELET_DISTORTION
    exec_noise: float = 3e-5
    noise_sigma: float = 0.01
    tail_length: float = tail.DEFAULT_TAIL
    modulus_scale: float = 1.0
    # training
    algo: str = "ddpg"
    total_steps: int = 100_000
    # tip model
    tip_samples: int = 500
    tip_epochs: int = 600
    tip_model: str | None = None

    def __post_init__(self):
        bad = [n for n in self.needles if n not in scene.NEEDLE_SLOTS]
        bad += [t for t in self.threads if t not in scene.THREADS]
        if bad:
            raise ConfigError(f"unknown needle/thread index {bad}")
        if any(a not in scene.MOUNT_ANGLES for a in self.angles):
            raise ConfigError(f"angles must be drawn from {scene.MOUNT_ANGLES}")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.controller not in ("policy", "vs"):
            raise ConfigError("controller must be 'policy' or 'vs'")
        if self.algo not in ("ddpg", "ppo"):
            raise ConfigError("algo must be 'ddpg' or 'ppo'")
        if not 0 <= self.noise_bound <= scene.MAX_CALIBRATION_NOISE:
            raise ConfigError("noise_bound must lie in [0, 0.03] m")

    def env_config(self, needle: int, thread: int, angle: float) -> EnvConfig:
        try:
            return EnvConfig(
                needle=needle, thread=thread, angle=angle, noise_bound=self.noise_bound,
                resolution=self.resolution, distortion=self.distortion, exec_noise=self.exec_noise,
                noise_sigma=self.noise_sigma, tail_length=self.tail_length, modulus_scale=self.modulus_scale,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_SCHEMA = {
    "run": {"seed": int, "resolution": parse_resolution},
    "campaign": {
        "needles": _ints, "threads": _ints, "angles": _floats, "episodes": int,
        "controller": str, "checkpoint": str,
    },
    "env": {
        "noise_bound": float, "distortion": float, "exec_noise": float, "noise_sigma": float,
        "tail_length": float, "modulus_scale": float,
    },
    "train": {"algo": str, "total_steps": int},
    "tip": {"tip_samples": int, "tip_epochs": int, "tip_model": str},
}


def load_config(path=None, **overrides) -> RunConfig:
    """Read an INI file (``[run] version = 1`` required) and apply overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        version = parser.get("run", "version", fallback=None)
        if version is None or version.strip() != str(CONFIG_VERSION):
            raise ConfigError(f"config needs [run] version = {CONFIG_VERSION}")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key == "version" and section == "run":
                    continue
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                try:
                    values[key] = _SCHEMA[section][key](raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def episode_seed(master: int, needle: int, thread: int, angle: float, episode: int) -> int:
    """Order-independent per-episode seed."""
    key = [int(master), int(needle), int(thread), int(round(angle * 10)), int(episode)]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def excluded(needle: int, thread: int) -> bool:
    return not scene.compatible(needle, thread)


# --- controllers -----------------------------------------------------------------

def make_controller(cfg: RunConfig, env: InsertionEnv):
    if cfg.controller == "vs":
        return policy.BaselinePolicy(env.mm_per_px)
    if not cfg.checkpoint:
        raise ConfigError("controller 'policy' needs a checkpoint")
    try:
        return policy.ActorPolicy.load(cfg.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {cfg.checkpoint}: {exc}") from exc


# --- results ---------------------------------------------------------------------

@dataclass(frozen=True)
class CellResult:
    needle: int
    thread: int
    angle: float
    episodes: int
    successes: int
    mean_steps: float
    mean_final_offset: float
    excluded: bool = False

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0


CSV_FIELDS = ["needle", "thread", "angle", "episodes", "successes", "success_rate", "mean_steps", "mean_final_offset"]


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


@dataclass
class ResultsTable:
    cells: list[CellResult] = field(default_factory=list)

    def cell(self, needle: int, thread: int, angle: float | None = None) -> CellResult:
        for c in self.cells:
            if c.needle == needle and c.thread == thread and (angle is None or c.angle == angle):
                return c
        raise KeyError((needle, thread, angle))

    def aggregate(self, needles=None) -> float:
        """Success rate pooled over all non-excluded episodes (optionally of some needles)."""
        use = [c for c in self.cells if not c.excluded and (needles is None or c.needle in needles)]
        n = sum(c.episodes for c in use)
        return sum(c.successes for c in use) / n if n else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in self.cells:
            if c.excluded:
                w.writerow([c.needle, c.thread, _fmt(c.angle)] + ["*"] * (len(CSV_FIELDS) - 3))
            else:
                w.writerow([
                    c.needle, c.thread, _fmt(c.angle), c.episodes, c.successes,
                    _fmt(c.success_rate), _fmt(c.mean_steps), _fmt(c.mean_final_offset),
                ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultsTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != CSV_FIELDS:
            raise ValueError("unexpected results header")
        cells = []
        for r in rows[1:]:
            if r[3] == "*":
                cells.append(CellResult(int(r[0]), int(r[1]), float(r[2]), 0, 0, float("nan"), float("nan"), True))
            else:
                cells.append(CellResult(int(r[0]), int(r[1]), float(r[2]), int(r[3]), int(r[4]), float(r[6]), float(r[7])))
        return cls(cells)

    def to_text(self) -> str:
        """Success-rate grid: needles as rows, threads as columns, one block per angle."""
        lines = []
        for angle in sorted({c.angle for c in self.cells}):
            cells = [c for c in self.cells if c.angle == angle]
            needles = sorted({c.needle for c in cells})
            threads = sorted({c.thread for c in cells})
            head = [f"angle {angle:g}"] + [scene.thread_spec(t).label for t in threads]
            rows = [head]
            for n in needles:
                row = [scene.needle_spec(n).label]
                for t in threads:
                    c = next((x for x in cells if x.needle == n and x.thread == t), None)
                    row.append("" if c is None else "*" if c.excluded else f"{100 * c.success_rate:.2f}%")
                rows.append(row)
            widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
            lines += ["  ".join(s.ljust(wd) for s, wd in zip(r, widths)).rstrip() for r in rows]
            lines.append("")
        lines.append(f"aggregate {100 * self.aggregate():.2f}%")
        return "\n".join(lines) + "\n"


def run_campaign(cfg: RunConfig, records=None, controller=None) -> ResultsTable:
    """Evaluate every compatible (needle, thread, angle) cell for ``cfg.episodes`` episodes."""
    table = ResultsTable()
    for angle in cfg.angles:
        for needle in cfg.needles:
            for thread in cfg.threads:
                if excluded(needle, thread):
                    table.cells.append(CellResult(needle, thread, angle, 0, 0, float("nan"), float("nan"), True))
                    continue
                env = InsertionEnv(cfg.env_config(needle, thread, angle))
                ctrl = controller if controller is not None else make_controller(cfg, env)
                seeds = [episode_seed(cfg.seed, needle, thread, angle, e) for e in range(cfg.episodes)]
                res = policy.evaluate(env, ctrl, seeds, records)
                table.cells.append(
                    CellResult(needle, thread, angle, res.episodes, res.successes, res.mean_steps, res.mean_final_offset)
                )
                log.info("needle %d thread %d angle %g: %d/%d", needle, thread, angle, res.successes, res.episodes)
    return table


def report(table: ResultsTable, out_dir, text: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "results.csv"]
    paths[0].write_text(table.to_csv())
    if text:
        paths.append(out / "results.txt")
        paths[1].write_text(table.to_text())
    return paths


def write_learning_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "episode_reward", "success_flag"])
        for e in curve:
            w.writerow([e.step, repr(float(e.episode_reward)), int(e.success)])


def write_pgm(path, image: tactile.TactileImage) -> None:
    """8-bit binary greyscale dump of a tactile image."""
    data = np.round(np.clip(image.intensities, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    data = raw[m.end() : m.end() + w * h]
    if len(data) != w * h:
        raise ValueError("truncated PGM")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# --- end-to-end pipeline -----------------------------------------------------------

@dataclass
class PipelineRecord:
    seed: int
    needle: int
    thread: int
    angle: float
    outcome: str
    stage: str
    trace: dict | None = None
    tip_estimate: list | None = None
    tip_error: float | None = None
    tip_in_range: bool | None = None
    approach: list | None = None
    initial_tip_uv: list | None = None
    steps: list = field(default_factory=list)
    steps_taken: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def run_full_pipeline(
    cfg: RunConfig,
    seed: int,
    tip_model: tail.TipModel,
    controller,
    needle: int = 2,
    thread: int = 2,
    angle: float = 90.0,
) -> PipelineRecord:
    """Trace twice, estimate the tip, approach the eyelet and run one insertion episode.

    Stage failures end up in ``outcome``/``stage``; nothing is raised.
    """
    env_cfg = cfg.env_config(needle, thread, angle)
    rec = PipelineRecord(seed, needle, thread, angle, "Running", "trace")
    rng = np.random.default_rng(seed)
    sensor = tactile.grip_sensor(cfg.resolution, cfg.noise_sigma)
    try:
        world = scene.make_world(
            thread, needle, angle, seed=seed, slot_jitter=env_cfg.slot_jitter,
            randomize_base=env_cfg.randomize_base, material=env_cfg.material,
        )
        first = tail.trace_to_tip(world, sensor, rng)
        result, world = tail.trace_to_offset(world, sensor, first.d1, first.l_thread, cfg.tail_length, rng)
        rec.trace = {
            "d1": result.d1, "d2": result.d2, "l_thread": result.l_thread,
            "l_tail": result.l_tail, "theta": result.theta, "true_length": world.thread_length,
        }

        rec.stage = "tip"
        est = tail.estimate_tip(tip_model, result.l_tail, result.theta, result.p_tac)
        true_tip = world.thread.positions[-1]
        rec.tip_estimate = est.position.tolist()
        rec.tip_error = float(np.linalg.norm(est.position - true_tip))
        rec.tip_in_range = est.in_range

        rec.stage = "approach"
        eyelet = scene.estimate_eyelet_pose(world, cfg.noise_bound, rng)
        tail_dir = tail.tail_direction(result.p_tac, result.theta)
        tip_pose = Pose.from_matrix(est.position, _frame_with_z(tail_dir))
        plan = scene.plan_approach(tip_pose, eyelet, world.gripper_pose)
        rec.approach = plan.gripper.position.tolist()
        world = replace(world, brake_engaged=False)
        old = world.gripper_pose
        delta = Pose(plan.gripper.position - old.position, (plan.gripper.rotation * old.rotation.inv()).as_quat())
        world = scene.move_gripper(world, delta, payout_allowed=True)
        settled = dlo.settle(world.thread, max_steps=400, tol=1e-5)
        world.thread = settled.chain
        u, v, _ = world.gel_coords(world.thread.positions[-1])[0]
        rec.initial_tip_uv = [float(u), float(v)]

        rec.stage = "insertion"
        env = InsertionEnv(env_cfg)
        env.reset(seed, initial_tip_uv=(u, v))
        obs = env.last_obs
        controller.reset()
        while not env.done:
            obs, _, _, _ = env.step(controller(obs))
        rec.steps = [json.loads(r.to_json()) for r in env.records]
        rec.steps_taken = env.steps
        rec.outcome = env.outcome.value
        rec.stage = "done"
    except (tail.TraceError, scene.PlanningError, dlo.SimulationError, InsufficientExtentError) as exc:
        rec.outcome = f"{type(exc).__name__}: {exc}"
    return rec


def _frame_with_z(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    z = z / np.linalg.norm(z)
    hint = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(hint, z)
    x /= np.linalg.norm(x)
    return np.column_stack([x, np.cross(z, x), z])


def train_tip_pipeline(cfg: RunConfig, rng: np.random.Generator, thread: int = 2):
    """Collect the tip dataset and fit the regressor; returns (model, error, dataset)."""
    material = scene.THREADS[thread].material
    sensor = tactile.grip_sensor(cfg.resolution, cfg.noise_sigma)
    data = tail.collect_tip_dataset(cfg.tip_samples, rng, material, sensor)
    model, err = tail.train_tip_model(data, n_train=int(round(0.8 * len(data))), epochs=cfg.tip_epochs, seed=cfg.seed)
    return model, err, data


__all__ = [
    "CONFIG_VERSION", "ConfigError", "RunConfig", "load_config", "episode_seed", "excluded",
    "CellResult", "ResultsTable", "run_campaign", "report", "write_learning_curve", "write_pgm",
    "read_pgm", "PipelineRecord", "run_full_pipeline", "train_tip_pipeline", "Outcome",
]
