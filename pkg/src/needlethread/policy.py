"""Insertion controllers: feature map, visual-servoing baseline and RL trainers.

The learned controllers are a deterministic actor-critic trained off-policy
from a replay buffer and a clipped-surrogate on-policy learner, both on the
numpy networks in :mod:`needlethread.nn`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tactile
from .env import MAX_ACTION, InsertionEnv, Outcome
from .nn import MLP, Adam, load_networks, save_networks
from .percept import Observation

log = logging.getLogger(__name__)

OBS_DIM = 8
ACT_DIM = 2
#: Rewards are scaled down so the terminal reward is of order one for the critic.
REWARD_SCALE = 0.01


class BaselineFailure(RuntimeError):
    """The baseline has no bump to servo on."""


# --- features ------------------------------------------------------------------

def _norm(rc, shape) -> np.ndarray:
    h, w = shape
    return np.array([(rc[0] - (h - 1) / 2) / h, (rc[1] - (w - 1) / 2) / w])


@dataclass
class Featurizer:
    """Fixed-length state vector from an observation.

    Layout: poke centroid (2), eyelet centroid (2), eyelet orientation,
    eyelet half-extents (2) and a bump-absent flag. When the bump is absent
    the last seen poke centroid is reused.
    """

    prev_c: np.ndarray | None = None

    def reset(self) -> None:
        self.prev_c = None

    def __call__(self, obs: Observation) -> np.ndarray:
        shape = obs.shape
        absent = obs.poke_com is None
        if not absent:
            self.prev_c = np.asarray(obs.poke_com, dtype=float)
        c = self.prev_c if self.prev_c is not None else np.array([(shape[0] - 1) / 2, (shape[1] - 1) / 2])
        pix = np.asarray(obs.eyelet_pixels, dtype=float)
        if len(pix):
            com = pix.mean(axis=0)
            cov = np.cov(pix.T) if len(pix) > 1 else np.zeros((2, 2))
            vals, vecs = np.linalg.eigh(cov + 1e-12 * np.eye(2))
            major = vecs[:, 1]
            # angle of the major axis against image columns, v up, in (-90, 90]
            ang = math.degrees(math.atan2(-major[0], major[1]))
            ang = ang - 180 if ang > 90 else ang + 180 if ang <= -90 else ang
            half = np.sqrt(3.0 * np.maximum(np.diag(cov), 0.0))
        else:
            com = np.array([(shape[0] - 1) / 2, (shape[1] - 1) / 2])
            ang, half = 0.0, np.zeros(2)
        return np.concatenate([
            _norm(c, shape),
            _norm(com, shape),
            [ang / 90.0],
            half / np.array(shape, dtype=float),
            [1.0 if absent else 0.0],
        ])


@dataclass
class RawFeaturizer:
    """Ablation layout: poke centroid plus ``k`` eyelet pixels, all normalised.

    Pixels are the first ``k`` samples sorted by (row, col), padded with the
    image centre when fewer are available, followed by the bump-absent flag.
    """

    k: int = 32
    prev_c: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return 2 * self.k + 3

    def reset(self) -> None:
        self.prev_c = None

    def __call__(self, obs: Observation) -> np.ndarray:
        shape = obs.shape
        centre = np.array([(shape[0] - 1) / 2, (shape[1] - 1) / 2])
        absent = obs.poke_com is None
        if not absent:
            self.prev_c = np.asarray(obs.poke_com, dtype=float)
        c = self.prev_c if self.prev_c is not None else centre
        pix = np.asarray(obs.eyelet_pixels, dtype=float).reshape(-1, 2)
        pix = pix[np.lexsort((pix[:, 1], pix[:, 0]))][: self.k]
        if len(pix) < self.k:
            pix = np.vstack([pix, np.tile(centre, (self.k - len(pix), 1))])
        flat = np.concatenate([_norm(p, shape) for p in pix])
        return np.concatenate([_norm(c, shape), flat, [1.0 if absent else 0.0]])


def featurize(obs: Observation, prev_c=None) -> np.ndarray:
    f = Featurizer(None if prev_c is None else np.asarray(prev_c, dtype=float))
    return f(obs)


#: Keeps the prior's pre-image finite when the centroid move saturates the bound.
PRIOR_CLIP = 0.95


def vs_prior(states) -> np.ndarray:
    """Pre-squash centroid move implied by compact features.

    The feature centroids are normalised by image size, so the pixel
    displacement scales to metres through the sensor's field of view. The
    result is ``atanh`` of the linear visual-servoing move in squashed units.
    """
    s = np.asarray(states, dtype=float)
    fu, fv = tactile.DEFAULT_FOV
    move = np.stack([(s[..., 3] - s[..., 1]) * fu, -(s[..., 2] - s[..., 0]) * fv], axis=-1) / MAX_ACTION
    return np.arctanh(np.clip(move, -PRIOR_CLIP, PRIOR_CLIP))


def act(actor: MLP, states) -> np.ndarray:
    """Squashed action of ``actor``; residual actors add their output to :func:`vs_prior`."""
    out = actor(states)
    if actor.meta.get("residual"):
        return np.tanh(out + vs_prior(states))
    return out


# --- baseline ------------------------------------------------------------------

def vs_baseline(obs: Observation, mm_per_px: float, raise_on_absent: bool = False) -> np.ndarray:
    """Move by the centroid displacement from bump to eyelet, scaled linearly to metres."""
    if obs.poke_com is None or len(obs.eyelet_pixels) == 0:
        if raise_on_absent:
            raise BaselineFailure("no bump or eyelet in the image")
        return np.zeros(2)
    d = np.asarray(obs.eyelet_pixels, dtype=float).mean(axis=0) - obs.poke_com
    a = np.array([d[1] * mm_per_px, -d[0] * mm_per_px])
    return np.clip(a, -MAX_ACTION, MAX_ACTION)


# --- replay --------------------------------------------------------------------

class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.d = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        if self.size == 0:
            raise ValueError("buffer is empty")
        idx = rng.integers(0, self.size, size=batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx]


# --- policies ------------------------------------------------------------------

@dataclass
class ActorPolicy:
    """Deterministic policy ``a = MAX_ACTION * act(actor, features)``."""

    actor: MLP
    featurizer: Featurizer = field(default_factory=Featurizer)

    def reset(self) -> None:
        self.featurizer.reset()

    def __call__(self, obs: Observation) -> np.ndarray:
        return MAX_ACTION * act(self.actor, self.featurizer(obs))

    def save(self, path) -> None:
        f = self.featurizer
        self.actor.meta["features"] = f"raw:{f.k}" if isinstance(f, RawFeaturizer) else "compact"
        save_networks(path, actor=self.actor)

    @classmethod
    def load(cls, path) -> "ActorPolicy":
        actor = load_networks(path)["actor"]
        kind = actor.meta.get("features", "compact")
        if kind.startswith("raw:"):
            return cls(actor, RawFeaturizer(int(kind[4:])))
        return cls(actor)


@dataclass
class BaselinePolicy:
    mm_per_px: float

    def reset(self) -> None:
        pass

    def __call__(self, obs: Observation) -> np.ndarray:
        return vs_baseline(obs, self.mm_per_px)


@dataclass(frozen=True)
class EvalResult:
    episodes: int
    successes: int
    outcomes: dict
    mean_steps: float
    mean_final_offset: float

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0


def run_episode(env: InsertionEnv, policy, seed: int, episode: int | None = None, initial_tip_uv=None):
    obs = env.reset(seed, initial_tip_uv=initial_tip_uv, episode=episode)
    policy.reset()
    while not env.done:
        obs, _, _, _ = env.step(policy(obs))
    return env.episode_outcome()


def evaluate(env: InsertionEnv, policy, seeds, records=None) -> EvalResult:
    """Roll the policy out once per seed. Mean steps are over successful episodes."""
    counts = {o.value: 0 for o in Outcome if o.terminal}
    steps, offsets = [], []
    for ep, seed in enumerate(seeds):
        out = run_episode(env, policy, int(seed), ep)
        counts[out.outcome.value] += 1
        offsets.append(out.final_offset)
        if out.outcome is Outcome.SUCCESS:
            steps.append(out.steps_taken)
        if records is not None:
            env.write_records(records)
    n = len(offsets)
    return EvalResult(
        n, counts[Outcome.SUCCESS.value], counts,
        float(np.mean(steps)) if steps else float("nan"),
        float(np.mean(offsets)) if offsets else float("nan"),
    )


# --- off-policy actor-critic -----------------------------------------------------

@dataclass
class DDPGConfig:
    total_steps: int = 100_000
    hidden: tuple[int, int] = (64, 64)
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    batch: int = 64
    buffer: int = 100_000
    warmup: int = 1_000
    noise_start: float = 2e-3
    noise_end: float = 2e-4
    updates_per_step: int = 1
    #: Learn a correction on top of the linear centroid move (compact features only).
    residual: bool = True
    #: L2 weight on the residual output, so corrections stay at zero where the reward is indifferent.
    residual_penalty: float = 3.0
    log_every: int = 1_000

    def __post_init__(self):
        if self.total_steps < 1 or self.batch < 1 or self.updates_per_step < 1 or self.residual_penalty < 0:
            raise ValueError("invalid trainer settings")
        if not 0 < self.tau <= 1 or not 0 <= self.gamma <= 1:
            raise ValueError("invalid trainer settings")


@dataclass(frozen=True)
class EpisodeLog:
    """One finished training episode: env step count at its end, return and success."""

    step: int
    episode_reward: float
    success: bool


@dataclass
class TrainResult:
    policy: ActorPolicy
    curve: list[EpisodeLog]
    critic: MLP | None = None

    def window_means(self, frac: float = 0.1) -> tuple[float, float]:
        """Mean episode reward over the first and the last ``frac`` of episodes."""
        n = max(1, int(len(self.curve) * frac))
        r = [e.episode_reward for e in self.curve]
        return float(np.mean(r[:n])), float(np.mean(r[-n:]))


def _episode_seeds(seed: int):
    k = 0
    while True:
        yield int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        k += 1


def _succeeded(info) -> bool:
    return getattr(info, "outcome", None) is Outcome.SUCCESS


def _report(curve, step, progress, window: int = 100) -> None:
    recent = curve[-window:]
    rate = float(np.mean([e.success for e in recent])) if recent else 0.0
    if progress is not None:
        progress(step, len(curve), rate)
    log.info("step %d episodes %d recent success %.2f", step, len(curve), rate)


class _Rollout:
    """Episode bookkeeping shared by both trainers.

    Resets whose first poke already ends the episode carry no decision and
    are skipped. The env may define ``reward_scale`` (default
    :data:`REWARD_SCALE`) and the caller may pass its own featurizer.
    """

    def __init__(self, env, seed: int, featurizer):
        self.env = env
        self.seeds = _episode_seeds(seed)
        self.feat = featurizer if featurizer is not None else Featurizer()
        self.scale = getattr(env, "reward_scale", REWARD_SCALE)
        self.curve: list[EpisodeLog] = []
        self.ret = 0.0
        self.steps = 0
        self.state = self._fresh()

    def _fresh(self):
        self.feat.reset()
        while True:
            obs = self.env.reset(next(self.seeds))
            if not self.env.done:
                return self.feat(obs)

    def step(self, a):
        """Advance with squashed action ``a``; returns (s, a, scaled r, s2, done)."""
        s = self.state
        obs, r, done, info = self.env.step(np.asarray(a) * MAX_ACTION)
        s2 = self.feat(obs)
        self.ret += r
        self.steps += 1
        if done:
            self.curve.append(EpisodeLog(self.steps, self.ret, _succeeded(info)))
            self.ret = 0.0
            self.state = self._fresh()
        else:
            self.state = s2
        return s, a, r * self.scale, s2, done


def train_offpolicy(
    env,
    cfg: DDPGConfig | None = None,
    seed: int = 0,
    progress: Callable | None = None,
    featurizer=None,
) -> TrainResult:
    """Deterministic actor-critic with target networks and Gaussian exploration.

    Actions are handled in squashed units (``MAX_ACTION`` per unit). Exploration
    noise decays linearly from ``noise_start`` to ``noise_end`` (metres).
    """
    cfg = cfg or DDPGConfig()
    rng = np.random.default_rng(seed)
    roll = _Rollout(env, seed, featurizer)
    dim = len(roll.state)
    if cfg.residual and not isinstance(roll.feat, Featurizer):
        raise ValueError("residual actors need the compact featurizer")
    actor = MLP.create([dim, *cfg.hidden, ACT_DIM], rng, "relu", "linear" if cfg.residual else "tanh", out_scale=0.1)
    actor.meta["residual"] = cfg.residual
    critic = MLP.create([dim + ACT_DIM, *cfg.hidden, 1], rng, "relu", "linear")
    actor_t, critic_t = actor.copy(), critic.copy()
    a_opt, c_opt = Adam(actor.params(), cfg.actor_lr), Adam(critic.params(), cfg.critic_lr)
    buf = ReplayBuffer(cfg.buffer, dim)
    last_good = actor.copy()

    for step in range(1, cfg.total_steps + 1):
        sigma = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * (step - 1) / cfg.total_steps
        if step <= cfg.warmup:
            a = rng.uniform(-1, 1, ACT_DIM)
        else:
            a = act(actor, roll.state) + rng.normal(0, sigma / MAX_ACTION, ACT_DIM)
        buf.add(*roll.step(np.clip(a, -1, 1)))
        if len(buf) >= max(cfg.batch, cfg.warmup // 2):
            try:
                for _ in range(cfg.updates_per_step):
                    _ddpg_update(actor, critic, actor_t, critic_t, a_opt, c_opt, buf, cfg, rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{exc} at step {step}", ActorPolicy(last_good)) from exc
        if step % cfg.log_every == 0:
            last_good = actor.copy()
            _report(roll.curve, step, progress)
    return TrainResult(ActorPolicy(actor, roll.feat), roll.curve, critic)


class TrainingDiverged(FloatingPointError):
    """A loss became non-finite; ``checkpoint`` holds the last good policy."""

    def __init__(self, message: str, checkpoint: ActorPolicy):
        super().__init__(message)
        self.checkpoint = checkpoint


def _ddpg_update(actor, critic, actor_t, critic_t, a_opt, c_opt, buf, cfg, rng):
    s, a, r, s2, d = buf.sample(cfg.batch, rng)
    q2 = critic_t(np.hstack([s2, act(actor_t, s2)]))[:, 0]
    y = r + cfg.gamma * (1 - d) * q2
    q, acts = critic.forward(np.hstack([s, a]), keep=True)
    diff = q[:, 0] - y
    if not np.all(np.isfinite(diff)):
        raise FloatingPointError("critic loss is not finite")
    gw, gb, _ = critic.backward(acts, (2 * diff / len(diff))[:, None])
    c_opt.step(MLP.interleave(gw, gb))

    # actor ascends Q through the critic's input gradient
    out, a_acts = actor.forward(s, keep=True)
    pa = np.tanh(out + vs_prior(s)) if actor.meta.get("residual") else out
    _, q_acts = critic.forward(np.hstack([s, pa]), keep=True)
    _, _, gin = critic.backward(q_acts, -np.ones((len(s), 1)) / len(s))
    g = gin[:, actor.sizes[0]:]
    if actor.meta.get("residual"):
        g = g * (1.0 - pa**2) + 2.0 * cfg.residual_penalty * out / len(s)
    gw, gb, _ = actor.backward(a_acts, g)
    a_opt.step(MLP.interleave(gw, gb))

    actor_t.soft_update(actor, cfg.tau)
    critic_t.soft_update(critic, cfg.tau)


# --- on-policy clipped surrogate -------------------------------------------------

@dataclass
class PPOConfig:
    total_steps: int = 100_000
    hidden: tuple[int, int] = (64, 64)
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    horizon: int = 1024
    epochs: int = 10
    batch: int = 64
    #: Initial spread of the Gaussian policy in squashed action units.
    init_std: float = 0.2
    log_every: int = 1_000


def train_onpolicy(
    env,
    cfg: PPOConfig | None = None,
    seed: int = 0,
    progress: Callable | None = None,
    featurizer=None,
) -> TrainResult:
    """Gaussian policy with a state-independent spread and a learned value baseline."""
    cfg = cfg or PPOConfig()
    rng = np.random.default_rng(seed)
    roll = _Rollout(env, seed, featurizer)
    dim = len(roll.state)
    mean_net = MLP.create([dim, *cfg.hidden, ACT_DIM], rng, "tanh", "tanh", out_scale=0.1)
    value = MLP.create([dim, *cfg.hidden, 1], rng, "tanh", "linear")
    log_std = np.full(ACT_DIM, math.log(cfg.init_std))
    p_opt = Adam(mean_net.params() + [log_std], cfg.lr)
    v_opt = Adam(value.params(), cfg.lr)

    step = 0
    while step < cfg.total_steps:
        batch = []
        for _ in range(min(cfg.horizon, cfg.total_steps - step)):
            mu = mean_net(roll.state)
            a = mu + np.exp(log_std) * rng.normal(size=ACT_DIM)
            lp = _gauss_logp(a, mu, log_std)
            s, _, r, _, done = roll.step(np.clip(a, -1, 1))
            batch.append((s, a, r, done, lp))
            step += 1
            if step % cfg.log_every == 0:
                _report(roll.curve, step, progress)
        S, A, R, D, LP = (np.asarray(x) for x in zip(*batch))
        V = value(S)[:, 0]
        # bootstrap from the live state when the horizon cut an episode
        tail_v = 0.0 if D[-1] else float(value(roll.state)[0])
        adv = np.zeros(len(R))
        gae = 0.0
        for t in range(len(R) - 1, -1, -1):
            nv = 0.0 if D[t] else (tail_v if t == len(R) - 1 else V[t + 1])
            delta = R[t] + cfg.gamma * nv - V[t]
            gae = delta + (0.0 if D[t] else cfg.gamma * cfg.lam * gae)
            adv[t] = gae
        ret = adv + V
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        for _ in range(cfg.epochs):
            order = rng.permutation(len(R))
            for start in range(0, len(order), cfg.batch):
                idx = order[start : start + cfg.batch]
                _ppo_update(mean_net, value, log_std, p_opt, v_opt, S[idx], A[idx], LP[idx], adv[idx], ret[idx], cfg.clip)
        if not (np.all(np.isfinite(mean_net.flat())) and np.all(np.isfinite(log_std))):
            raise TrainingDiverged(f"policy parameters not finite at step {step}", ActorPolicy(mean_net))
    return TrainResult(ActorPolicy(mean_net, roll.feat), roll.curve)


def _gauss_logp(a, mu, log_std):
    z = (a - mu) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * a.shape[-1] * math.log(2 * math.pi)


def _ppo_update(mean_net, value, log_std, p_opt, v_opt, s, a, lp_old, adv, ret, clip):
    n = len(s)
    mu, acts = mean_net.forward(s, keep=True)
    std = np.exp(log_std)
    ratio = np.exp(_gauss_logp(a, mu, log_std) - lp_old)
    # the gradient flows only where the unclipped term is the active minimum
    active = (ratio * adv <= np.clip(ratio, 1 - clip, 1 + clip) * adv).astype(float)
    g_lp = -(active * ratio * adv) / n
    z = (a - mu) / std
    gw, gb, _ = mean_net.backward(acts, g_lp[:, None] * (z / std))
    g_logstd = np.sum(g_lp[:, None] * (z * z - 1.0), axis=0)
    p_opt.step(MLP.interleave(gw, gb) + [g_logstd])
    np.clip(log_std, math.log(0.01), math.log(1.0), out=log_std)

    v, v_acts = value.forward(s, keep=True)
    gw, gb, _ = value.backward(v_acts, (2 * (v[:, 0] - ret) / n)[:, None])
    v_opt.step(MLP.interleave(gw, gb))


# --- sanity environment ----------------------------------------------------------

@dataclass
class BanditEnv:
    """One-step task with reward ``-|a - target|`` (metres) and a constant observation."""

    target: tuple[float, float] = (0.004, -0.006)
    reward_scale: float = 100.0
    done: bool = True

    def reset(self, seed: int):
        self.done = False
        return np.zeros(OBS_DIM)

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=float), -MAX_ACTION, MAX_ACTION)
        self.done = True
        return np.zeros(OBS_DIM), -float(np.linalg.norm(a - np.asarray(self.target))), True, None


class IdentityFeatures:
    def reset(self) -> None:
        pass

    def __call__(self, x):
        return np.asarray(x, dtype=float)
