"""Goal-conditioned insertion environment on the eyelet sensor's uv-plane.

Each step is a poke cycle: retract the tip from the gel, translate it in the
plane, push it back in to the commanded indentation, and read the eyelet
image. The tip follows the gripper rigidly during an episode; the droop of the
tail below the grip is resolved once, before the episode starts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import dlo, percept, scene, tactile
from .percept import Label, Mask, Observation

R_TERMINAL = 100.0
STEP_CAP = 5
MAX_ACTION = 0.01
RETRACT = 2e-3
POKE_DEPTH = 1.5e-3
#: Reset placements keep the tip this far inside the gel edge.
GEL_MARGIN = 0.5e-3


class EpisodeStateError(RuntimeError):
    """Stepping an environment whose episode has already ended."""


class Outcome(str, Enum):
    SUCCESS = "Success"
    FAIL_TOO_FEW_PIXELS = "FailTooFewPixels"
    FAIL_STEP_LIMIT = "FailStepLimit"
    RUNNING = "Running"

    @property
    def terminal(self) -> bool:
        return self is not Outcome.RUNNING


@dataclass(frozen=True)
class EpisodeOutcome:
    outcome: Outcome
    steps_taken: int
    final_offset: float


@dataclass(frozen=True)
class RewardSpec:
    r_terminal: float
    N: int
    image_diag: float
    pixel_threshold: int
    step_cap: int = STEP_CAP

    @classmethod
    def for_resolution(cls, width_px: int, height_px: int, N: int = 500) -> "RewardSpec":
        return cls(R_TERMINAL, N, math.hypot(width_px, height_px), tactile.pixel_threshold(width_px, height_px))


def classify_outcome(bump: Mask | None, hole: Mask | None, steps: int, threshold: int) -> Outcome:
    """Apply the pixel rules in order: too few bump pixels, majority overlap, step cap."""
    count = 0 if bump is None else bump.pixel_count
    if count < threshold:
        return Outcome.FAIL_TOO_FEW_PIXELS
    if hole is not None:
        inside = int(np.count_nonzero(bump.bits & hole.bits))
        if 2 * inside > count:
            return Outcome.SUCCESS
    if steps > STEP_CAP:
        return Outcome.FAIL_STEP_LIMIT
    return Outcome.RUNNING


def compute_reward(obs: Observation, outcome: Outcome, spec: RewardSpec) -> float:
    """+r on success, -r on failure, else minus the mean normalised pixel distance."""
    if outcome is Outcome.SUCCESS:
        return spec.r_terminal
    if outcome.terminal:
        return -spec.r_terminal
    if obs.poke_com is None or len(obs.eyelet_pixels) == 0:
        return -1.0
    d = np.linalg.norm(obs.eyelet_pixels - obs.poke_com, axis=1)
    return -float(np.mean(d)) / obs.image_diag


@dataclass
class EnvConfig:
    needle: int = 2
    thread: int = 2
    angle: float = 90.0
    noise_bound: float = 0.03
    resolution: tuple[int, int] = tactile.DEFAULT_RESOLUTION
    N: int = 500
    slot_jitter: float = 0.002
    exec_noise: float = 3e-5
    noise_sigma: float = 0.01
    distortion: float = tactile.EYELET_DISTORTION
    tail_length: float = 0.020
    #: Multiplies the thread's Young's modulus (below 1 softens the tail).
    modulus_scale: float = 1.0
    randomize_base: bool = True

    def __post_init__(self):
        if self.needle not in scene.NEEDLE_SLOTS:
            raise ValueError(f"needle must be one of {sorted(scene.NEEDLE_SLOTS)}")
        if self.thread not in scene.THREADS:
            raise ValueError(f"thread must be one of {sorted(scene.THREADS)}")
        if not 0 <= self.noise_bound <= scene.MAX_CALIBRATION_NOISE:
            raise ValueError("noise_bound must lie in [0, 0.03] m")
        if self.N < 1 or self.tail_length <= 0 or self.modulus_scale <= 0:
            raise ValueError("N, tail_length and modulus_scale must be positive")
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    @property
    def material(self) -> dlo.MaterialSpec:
        m = scene.THREADS[self.thread].material
        if self.modulus_scale == 1.0:
            return m
        return dlo.MaterialSpec(m.young_modulus * self.modulus_scale, m.density, m.thickness)


@dataclass
class StepRecord:
    episode: int
    step: int
    action: list
    reward: float
    outcome: str
    c: list | None
    eyelet_com: list | None
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class InsertionEnv:
    """Reset/step environment for one needle, thread and mount angle."""

    config: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        cfg = self.config
        w, h = cfg.resolution
        self.sensor = tactile.eyelet_sensor((w, h), cfg.noise_sigma, cfg.distortion)
        self.reward_spec = RewardSpec.for_resolution(w, h, cfg.N)
        self.material = cfg.material
        self.episode = -1
        self.records: list[StepRecord] = []
        self._done = True

    # -- episode control --------------------------------------------------------

    def reset(self, seed: int, initial_tip_uv=None, episode: int | None = None) -> Observation:
        """Start an episode; the tip lands at ``initial_tip_uv`` or a random offset.

        The random offset is uniform on the calibration-error disk, redrawn
        until the tip lands on the gel.
        """
        cfg = self.config
        self.rng = np.random.default_rng(seed)
        self.seed = int(seed)
        self.episode = self.episode + 1 if episode is None else episode
        self.world = scene.make_world(
            cfg.thread, cfg.needle, cfg.angle, seed=seed, slot_jitter=cfg.slot_jitter,
            randomize_base=cfg.randomize_base, material=self.material,
        )
        self.scene = tactile.scene_from_world(self.world)
        if initial_tip_uv is None:
            initial_tip_uv = self._draw_start()
        self.tip_uv = np.asarray(initial_tip_uv, dtype=float).copy()
        self.steps = 0
        self.records = []
        self._done = False
        obs, outcome = self._poke()
        self.last_obs, self.outcome = obs, outcome
        self._done = outcome.terminal
        return obs

    def _draw_start(self) -> np.ndarray:
        half = scene.GEL_SIZE / 2 - GEL_MARGIN
        if self.config.noise_bound == 0:
            return np.zeros(2)
        while True:
            uv = scene.sample_disk(self.rng, self.config.noise_bound)
            if np.all(np.abs(uv) <= half):
                return uv

    @property
    def done(self) -> bool:
        return self._done

    def step(self, action):
        """Apply one poke cycle; returns ``(obs, reward, done, EpisodeOutcome)``."""
        if self._done:
            raise EpisodeStateError("episode has ended; call reset()")
        a = np.clip(np.asarray(action, dtype=float).reshape(2), -MAX_ACTION, MAX_ACTION)
        noise = self.rng.normal(0.0, self.config.exec_noise, 2) if self.config.exec_noise > 0 else 0.0
        self.tip_uv = self.tip_uv + a + noise
        self.steps += 1
        obs, outcome = self._poke()
        reward = compute_reward(obs, outcome, self.reward_spec)
        self.last_obs, self.outcome = obs, outcome
        self._done = outcome.terminal
        eye_com = obs.eyelet_pixels.mean(axis=0).tolist() if len(obs.eyelet_pixels) else None
        self.records.append(
            StepRecord(
                self.episode, self.steps, a.tolist(), reward, outcome.value,
                None if obs.poke_com is None else obs.poke_com.tolist(), eye_com, self.seed,
            )
        )
        return obs, reward, self._done, self.episode_outcome()

    def episode_outcome(self) -> EpisodeOutcome:
        return EpisodeOutcome(self.outcome, self.steps, self.final_offset())

    def final_offset(self) -> float:
        """In-plane distance between tip and slot centre (m)."""
        return float(np.hypot(*(self.tip_uv - np.asarray(self.scene.slot_center))))

    # -- poke mechanics ---------------------------------------------------------

    def contact(self) -> str:
        return self.scene.contact(self.tip_uv, self.material.thickness)

    def _poke(self):
        """Indent at the current tip position and classify the resulting image."""
        image = self.render()
        masks = percept.segment(image, [Label.BUMP, Label.HOLE])
        obs = percept.build_observation(masks, image, self.config.N, self.rng)
        outcome = classify_outcome(
            percept.find(masks, Label.BUMP), percept.find(masks, Label.HOLE),
            self.steps, self.reward_spec.pixel_threshold,
        )
        return obs, outcome

    def bump_visible(self) -> bool:
        if self.contact() not in ("slot", "gel"):
            return False
        force = tactile.indentation_force(self.sensor.gel_young_modulus, POKE_DEPTH, self.material.thickness)
        return tactile.bump_feasible(self.material, self.config.tail_length, force)

    def render(self) -> tactile.TactileImage:
        bump = self.tip_uv if self.bump_visible() else None
        return tactile.render_eyelet(
            self.scene, self.sensor, bump, POKE_DEPTH if bump is not None else 0.0,
            self.material.thickness, self.rng, self.world.gel_pose,
        )

    # -- helpers for controllers ------------------------------------------------

    @property
    def mm_per_px(self) -> float:
        return self.sensor.mm_per_px

    def write_records(self, fh) -> None:
        for r in self.records:
            fh.write(r.to_json() + "\n")
