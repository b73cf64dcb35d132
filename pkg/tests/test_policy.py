import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from needlethread import policy as P
from needlethread.env import MAX_ACTION, EnvConfig, InsertionEnv
from needlethread.nn import MLP
from needlethread.percept import Observation

SHAPE = (300, 400)
CENTRE = np.array([149.5, 199.5])


def _obs(c, pixels):
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return Observation(None if c is None else np.asarray(c, float), pixels, len(pixels), 500.0, SHAPE)


def _slot_pixels(centre, rng, n=200):
    return centre + rng.uniform([-40, -8], [40, 8], size=(n, 2))


# --- features ------------------------------------------------------------------

def test_centred_observation_gives_zero_position_entries():
    f = P.featurize(_obs(CENTRE, [CENTRE + [-1, 0], CENTRE + [1, 0]]))
    np.testing.assert_allclose(f[:4], 0.0, atol=1e-15)
    assert f.shape == (P.OBS_DIM,)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(-30, 30), st.integers(-30, 30))
def test_translation_shifts_features_linearly(seed, dr, dc):
    rng = np.random.default_rng(seed)
    c = CENTRE + rng.uniform(-50, 50, 2)
    pix = np.round(_slot_pixels(CENTRE, rng))
    a = P.featurize(_obs(c, pix))
    b = P.featurize(_obs(c + [dr, dc], pix + [dr, dc]))
    step = np.array([dr / SHAPE[0], dc / SHAPE[1]])
    np.testing.assert_allclose(b[:2] - a[:2], step, atol=1e-12)
    np.testing.assert_allclose(b[2:4] - a[2:4], step, atol=1e-12)
    np.testing.assert_allclose(b[4:], a[4:], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_features_bounded_and_repeatable(seed):
    rng = np.random.default_rng(seed)
    pix = np.column_stack([rng.integers(0, 300, 64), rng.integers(0, 400, 64)])
    c = rng.uniform([0, 0], [299, 399])
    a, b = P.featurize(_obs(c, pix)), P.featurize(_obs(c, pix))
    assert np.all(np.isfinite(a)) and np.all(np.abs(a) <= 1.0)
    np.testing.assert_array_equal(a, b)


def test_absent_bump_reuses_previous_centroid():
    f = P.Featurizer()
    pix = [CENTRE]
    first = f(_obs(CENTRE + [10, 20], pix))
    second = f(_obs(None, pix))
    np.testing.assert_array_equal(first[:2], second[:2])
    assert first[-1] == 0.0 and second[-1] == 1.0
    f.reset()
    np.testing.assert_array_equal(f(_obs(None, pix))[:2], [0.0, 0.0])


def test_eyelet_angle_feature():
    rng = np.random.default_rng(0)
    vertical = P.featurize(_obs(CENTRE, CENTRE + rng.uniform([-40, -3], [40, 3], (300, 2))))
    horizontal = P.featurize(_obs(CENTRE, CENTRE + rng.uniform([-3, -40], [3, 40], (300, 2))))
    assert abs(vertical[4]) == pytest.approx(1.0, abs=0.05)
    assert horizontal[4] == pytest.approx(0.0, abs=0.05)
    assert vertical[5] > vertical[6]


def test_raw_featurizer_layout():
    f = P.RawFeaturizer(k=4)
    out = f(_obs(CENTRE, [CENTRE + [2, 0], CENTRE + [-2, 0]]))
    assert out.shape == (f.dim,) == (11,)
    np.testing.assert_allclose(out[:2], 0.0)
    # sorted by row: the upper pixel comes first, then centre padding
    np.testing.assert_allclose(out[2:4], [-2 / 300, 0])
    np.testing.assert_allclose(out[6:10], 0.0)


# --- baseline ------------------------------------------------------------------

def test_vs_baseline_arithmetic():
    # c 40 px left of the eyelet COM at 0.05 mm/px -> +2 mm along u
    a = P.vs_baseline(_obs(CENTRE - [0, 40], [CENTRE]), 5e-5)
    np.testing.assert_allclose(a, [2e-3, 0.0], atol=1e-15)
    # rows grow downwards while v points up
    b = P.vs_baseline(_obs(CENTRE + [20, 0], [CENTRE]), 5e-5)
    np.testing.assert_allclose(b, [0.0, 1e-3], atol=1e-15)


def test_vs_baseline_zero_and_clip():
    assert np.all(P.vs_baseline(_obs(CENTRE, [CENTRE]), 5e-5) == 0)
    a = P.vs_baseline(_obs(CENTRE - [0, 300], [CENTRE]), 5e-5)  # 15 mm request
    np.testing.assert_allclose(a, [MAX_ACTION, 0.0])


def test_vs_baseline_without_bump():
    np.testing.assert_array_equal(P.vs_baseline(_obs(None, [CENTRE]), 5e-5), [0, 0])
    with pytest.raises(P.BaselineFailure):
        P.vs_baseline(_obs(None, [CENTRE]), 5e-5, raise_on_absent=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(-60, 60), st.integers(-60, 60))
def test_vs_baseline_translation_equivariant(seed, dr, dc):
    rng = np.random.default_rng(seed)
    pix = _slot_pixels(CENTRE, rng, 50)
    c = CENTRE + rng.uniform(-30, 30, 2)
    a = P.vs_baseline(_obs(c, pix), 5e-5)
    b = P.vs_baseline(_obs(c + [dr, dc], pix + [dr, dc]), 5e-5)
    np.testing.assert_allclose(a, b, atol=1e-15)


# --- policies and replay -------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 100.0))
def test_actor_actions_within_bounds_for_any_weights(seed, scale):
    rng = np.random.default_rng(seed)
    actor = MLP.create([P.OBS_DIM, 16, 2], rng, "relu", "tanh")
    actor.set_flat(rng.normal(0, scale, actor.flat().size))
    pol = P.ActorPolicy(actor)
    a = pol(_obs(rng.uniform([0, 0], [299, 399]), _slot_pixels(CENTRE, rng, 20)))
    assert np.all(np.abs(a) <= MAX_ACTION)


def test_actor_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for feat in (P.Featurizer(), P.RawFeaturizer(8)):
        dim = P.OBS_DIM if isinstance(feat, P.Featurizer) else feat.dim
        pol = P.ActorPolicy(MLP.create([dim, 8, 2], rng, "relu", "tanh"), feat)
        pol.save(tmp_path / "p.json")
        back = P.ActorPolicy.load(tmp_path / "p.json")
        assert type(back.featurizer) is type(feat)
        o = _obs(CENTRE + [3, 4], _slot_pixels(CENTRE, rng, 20))
        np.testing.assert_array_equal(back(o), pol(o))


def _residual_actor(rng, scale=0.0):
    actor = MLP.create([P.OBS_DIM, 16, 2], rng, "relu", "linear")
    actor.set_flat(rng.normal(0, scale, actor.flat().size) if scale else np.zeros(actor.flat().size))
    actor.meta["residual"] = True
    return actor


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_zero_residual_reproduces_visual_servoing(seed):
    rng = np.random.default_rng(seed)
    c = CENTRE + rng.uniform(-60, 60, 2)
    obs = _obs(c, _slot_pixels(CENTRE + rng.uniform(-20, 20, 2), rng, 50))
    vs = P.vs_baseline(obs, 5e-5)
    a = P.ActorPolicy(_residual_actor(rng))(obs)
    np.testing.assert_allclose(a, vs, atol=1e-15)


def test_residual_prior_saturates_inside_bounds():
    obs = _obs(CENTRE + [0, -199], [CENTRE + [0, 199]])
    a = P.ActorPolicy(_residual_actor(np.random.default_rng(0)))(obs)
    assert a[0] == pytest.approx(P.PRIOR_CLIP * MAX_ACTION)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 100.0))
def test_residual_actions_within_bounds_for_any_weights(seed, scale):
    rng = np.random.default_rng(seed)
    pol = P.ActorPolicy(_residual_actor(rng, scale))
    a = pol(_obs(rng.uniform([0, 0], [299, 399]), _slot_pixels(CENTRE, rng, 20)))
    assert np.all(np.abs(a) <= MAX_ACTION)


def test_residual_flag_survives_checkpoint(tmp_path):
    rng = np.random.default_rng(1)
    pol = P.ActorPolicy(_residual_actor(rng, 0.3))
    pol.save(tmp_path / "r.json")
    back = P.ActorPolicy.load(tmp_path / "r.json")
    obs = _obs(CENTRE + [10, -30], _slot_pixels(CENTRE, rng, 30))
    np.testing.assert_array_equal(back(obs), pol(obs))


def test_residual_needs_compact_features():
    env = InsertionEnv(EnvConfig())
    with pytest.raises(ValueError):
        P.train_offpolicy(env, P.DDPGConfig(total_steps=10), seed=0, featurizer=P.RawFeaturizer(8))


def test_replay_buffer_ring_and_seeded_sampling():
    buf = P.ReplayBuffer(5, obs_dim=1, act_dim=1)
    for i in range(8):
        buf.add([i], [i], float(i), [i + 1], i == 7)
    assert len(buf) == 5
    assert sorted(buf.r.tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]
    a = buf.sample(20, np.random.default_rng(1))
    b = buf.sample(20, np.random.default_rng(1))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(ValueError):
        P.ReplayBuffer(0)
    with pytest.raises(ValueError):
        P.ReplayBuffer(3).sample(1, np.random.default_rng(0))


def test_replay_sampling_is_uniform():
    buf = P.ReplayBuffer(4, obs_dim=1, act_dim=1)
    for i in range(4):
        buf.add([i], [0], float(i), [0], False)
    r = buf.sample(40000, np.random.default_rng(0))[2]
    np.testing.assert_allclose(np.bincount(r.astype(int)) / 40000, 0.25, atol=0.01)


def test_evaluate_with_baseline():
    env = InsertionEnv(EnvConfig(exec_noise=0.0))
    res = P.evaluate(env, P.BaselinePolicy(env.mm_per_px), range(6))
    assert res.episodes == 6
    assert sum(res.outcomes.values()) == 6
    assert 0.0 <= res.success_rate <= 1.0


# --- trainers ------------------------------------------------------------------

def _bandit_error(res, env):
    a = MAX_ACTION * res.policy.actor(np.zeros(P.OBS_DIM))
    return float(np.linalg.norm(a - np.asarray(env.target)))


def test_offpolicy_bandit_converges():
    env = P.BanditEnv()
    res = P.train_offpolicy(env, P.DDPGConfig(total_steps=10_000, warmup=500, residual=False), seed=0, featurizer=P.IdentityFeatures())
    assert _bandit_error(res, env) < 1e-3
    first, last = res.window_means()
    assert last > first


def test_onpolicy_bandit_converges_and_is_deterministic():
    cfg = P.PPOConfig(total_steps=20_000, horizon=512)
    env = P.BanditEnv()
    res = P.train_onpolicy(env, cfg, seed=0, featurizer=P.IdentityFeatures())
    assert _bandit_error(res, env) < 1e-3
    short = P.PPOConfig(total_steps=1_500, horizon=512)
    a = P.train_onpolicy(P.BanditEnv(), short, seed=3, featurizer=P.IdentityFeatures())
    b = P.train_onpolicy(P.BanditEnv(), short, seed=3, featurizer=P.IdentityFeatures())
    assert a.curve == b.curve
    np.testing.assert_array_equal(a.policy.actor.flat(), b.policy.actor.flat())


def test_offpolicy_same_seed_same_weights():
    cfg = P.DDPGConfig(total_steps=800, warmup=200, residual=False)
    a = P.train_offpolicy(P.BanditEnv(), cfg, seed=4, featurizer=P.IdentityFeatures())
    b = P.train_offpolicy(P.BanditEnv(), cfg, seed=4, featurizer=P.IdentityFeatures())
    np.testing.assert_array_equal(a.policy.actor.flat(), b.policy.actor.flat())


def test_offpolicy_runs_on_insertion_env():
    env = InsertionEnv(EnvConfig())
    res = P.train_offpolicy(env, P.DDPGConfig(total_steps=150, warmup=100, batch=16), seed=0)
    assert len(res.curve) > 0
    assert res.policy.actor.sizes[0] == P.OBS_DIM


def test_raw_features_train_end_to_end():
    env = InsertionEnv(EnvConfig())
    res = P.train_offpolicy(env, P.DDPGConfig(total_steps=120, warmup=100, batch=16, residual=False), seed=0, featurizer=P.RawFeaturizer(8))
    assert res.policy.actor.sizes[0] == 19
    assert isinstance(res.policy.featurizer, P.RawFeaturizer)


def test_trainer_config_validation():
    with pytest.raises(ValueError):
        P.DDPGConfig(total_steps=0)
    with pytest.raises(ValueError):
        P.DDPGConfig(tau=0.0)
