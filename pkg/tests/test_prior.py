import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smplab.diffusion import Denoiser, PriorConfig, StyleDirective, build_schedule, train_prior
from smplab.env import EnvParams, EnvState, extract_features
from smplab.errors import ConfigError, InputError
from smplab.gait import make_clip
from smplab.prior import (
    SmpPrior, absorb_errors, composite_reward, gsi_sample, prior_digest, smp_reward, timestep_set,
    update_running_mean, window_to_states,
)

P = EnvParams()


class ExactPrior(Denoiser):
    """Denoiser whose prediction recovers the true noise for one known window."""

    def __init__(self, z):
        super().__init__(1, z.shape[-1], 0, build_schedule(50), hidden=(4,))
        self.z = z

    def predict(self, x, i, c, use_ema=True):
        ab = self.schedule.ab(np.asarray(i))
        ab = ab[:, None] if np.ndim(ab) else ab
        return (x - np.sqrt(ab) * self.z) / np.sqrt(1 - ab)


def tiny_model(seed=0, D=13, H=10):
    rng = np.random.default_rng(seed)
    m = Denoiser(H, D, 2, build_schedule(50), hidden=(32,), rng=rng)
    m.theta += 0.1 * rng.standard_normal(m.n_params)
    m.ema.shadow[:] = m.theta
    return m


def test_timestep_set():
    assert timestep_set(50) == (22, 15, 8)
    assert all(1 <= i <= 10 for i in timestep_set(10))


def test_exact_predictor_gives_unit_reward():
    z = np.random.default_rng(0).standard_normal((5, 6))
    for mode in ("ensemble", "random"):
        prior = SmpPrior(ExactPrior(z), mode=mode)
        s = smp_reward(prior, z, np.random.default_rng(1), update_stats=True)
        np.testing.assert_allclose(s.errors, 0.0, atol=1e-20)
        np.testing.assert_allclose(s.reward, 1.0)


def test_reward_formula_exact():
    m = tiny_model()
    prior = SmpPrior(m)
    mu = np.array([300.0, 500.0, 700.0])
    prior.mu[:] = mu
    prior.mu_ready[:] = True
    z = np.random.default_rng(2).standard_normal((4, 130))
    s = smp_reward(prior, z, np.random.default_rng(3))
    expect = np.exp(-(1.0 / 3) * (s.errors / mu).sum(axis=1))
    np.testing.assert_allclose(s.reward, expect, rtol=1e-13)
    assert np.all((s.reward > 0) & (s.reward <= 1))


def test_running_mean_recurrence():
    prior = SmpPrior(tiny_model(), decay=0.9)
    assert update_running_mean(prior, 22, 1.0) == 1.0
    assert update_running_mean(prior, 22, 2.0) == pytest.approx(1.1, abs=1e-15)
    prior = SmpPrior(tiny_model(), decay=0.0)
    for m in (4.0, 9.0, 2.5):
        assert update_running_mean(prior, 15, m) == m
    prior = SmpPrior(tiny_model(), decay=0.999)
    for _ in range(50):
        v = update_running_mean(prior, 8, 3.25)
    assert v == pytest.approx(3.25, abs=1e-12)


def test_normalized_error_fixed_point_on_stationary_stream():
    m = tiny_model(1)
    prior = SmpPrior(m, decay=0.99)
    rng = np.random.default_rng(4)
    data = rng.standard_normal((64, 130))
    last = []
    for b in range(500):
        s = smp_reward(prior, data[rng.integers(0, 64, 16)], rng, update_stats=True)
        if b >= 400:
            last.append(s.normalized.mean(axis=0))
    np.testing.assert_allclose(np.mean(last, axis=0), 1.0, atol=0.1)


def test_reward_calls_leave_model_untouched():
    m = tiny_model(2)
    before = prior_digest(m)
    theta = m.theta.copy()
    prior = SmpPrior(m, StyleDirective(label=1, w_cfg=2.0))
    rng = np.random.default_rng(0)
    for _ in range(20):
        smp_reward(prior, rng.standard_normal((8, 130)), rng, update_stats=True)
    assert prior_digest(m) == before
    assert m.theta.tobytes() == theta.tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(0.0, 8.0))
def test_reward_in_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    prior = SmpPrior(tiny_model(3), mode="random" if seed % 2 else "ensemble")
    z = scale * rng.standard_normal((4, 130))
    r = smp_reward(prior, z, rng, update_stats=bool(seed % 3)).reward
    assert np.all((r > 0) & (r <= 1))


def test_unnormalized_input_rejected():
    prior = SmpPrior(tiny_model())
    with pytest.raises(InputError):
        smp_reward(prior, np.full((1, 130), 50.0), np.random.default_rng(0))
    with pytest.raises(InputError):
        smp_reward(prior, np.zeros((1, 12)), np.random.default_rng(0))


def test_bad_timestep_set_rejected():
    with pytest.raises(ConfigError):
        SmpPrior(tiny_model(), K=(0, 5))
    with pytest.raises(ConfigError):
        SmpPrior(tiny_model(), mode="bogus")


def test_composite_reward():
    assert composite_reward(1.0, 0.0, 0.5, 0.5) == 0.5
    assert composite_reward(0.3, 0.9, 1.0, 0.0) == 0.3
    assert composite_reward(0.3, 0.9, 0.0, 1.0) == 0.9
    with pytest.raises(ConfigError):
        composite_reward(1.0, 1.0, -0.1, 1.0)


def test_window_to_states_inverts_features():
    clip = make_clip("highknees", 3.0, 2.0, np.random.default_rng(0), turn_rate=0.7)
    hist = clip.states[20:30]
    feats = extract_features(hist)[None]
    rebuilt = window_to_states(feats, hist.heading[-1:], hist.pos[-1:])
    np.testing.assert_allclose(rebuilt.pos[0], hist.pos, atol=1e-9)
    np.testing.assert_allclose(np.cos(rebuilt.heading[0] - hist.heading), 1.0, atol=1e-12)
    np.testing.assert_allclose(rebuilt.vel[0], hist.vel, atol=1e-12)
    np.testing.assert_allclose(rebuilt.q[0], hist.q, atol=1e-12)
    np.testing.assert_allclose(rebuilt.qd[0], hist.qd, atol=1e-12)
    np.testing.assert_allclose(extract_features(rebuilt)[0], feats[0], atol=1e-9)


def constant_pose_prior():
    s = EnvState.zeros((10,))
    s.q[:] = [0.3, -0.2]
    w = np.repeat(extract_features(s)[None], 64, axis=0)
    m, _ = train_prior(w, None, PriorConfig(steps=600, batch=32, hidden=(32, 32), N=10, log_every=100))
    return SmpPrior(m)


def test_gsi_constant_pose_and_spawn_region():
    prior = constant_pose_prior()
    state, hist = gsi_sample(prior, 32, np.random.default_rng(0))
    assert hist.shape == (32, 10) and state.shape == (32,)
    np.testing.assert_array_equal(state.t, 0)
    # the model's per-coordinate scale is its std floor of 0.1
    assert np.all(np.abs(state.q - [0.3, -0.2]) < 0.3)
    assert np.all(np.abs(state.pos) <= P.spawn_half_width)
    np.testing.assert_array_equal(state.pos, hist.pos[:, -1])
    again, _ = gsi_sample(prior, 32, np.random.default_rng(0))
    assert again.q.tobytes() == state.q.tobytes()


def test_absorb_rollout_batch_equals_sequential_step_updates():
    rng = np.random.default_rng(7)
    errors = rng.uniform(1, 5, (6, 4, 3))
    steps = np.broadcast_to(np.array([22, 15, 8]), errors.shape)
    a, b = SmpPrior(tiny_model(), decay=0.9), SmpPrior(tiny_model(), decay=0.9)
    absorb_errors(a, errors, steps)
    for t in range(6):
        for j, i in enumerate((22, 15, 8)):
            update_running_mean(b, i, float(errors[t, :, j].mean()))
    np.testing.assert_array_equal(a.mu, b.mu)


def test_warm_running_means_uses_policy_rollouts_only():
    from smplab.ppo import PpoConfig, warm_running_means
    m = tiny_model()
    before = m.theta.copy()
    prior = warm_running_means(SmpPrior(m), PpoConfig(n_envs=4, horizon=8, hidden=(8,)))
    assert prior.mu_ready.all() and np.all(prior.mu > 0)
    assert m.theta.tobytes() == before.tobytes()
    with pytest.raises(ConfigError):
        warm_running_means(SmpPrior(m), PpoConfig(w_prior=0.0, w_g=1.0))


def test_replayed_clip_outscores_random_policy():
    from smplab.env import VecEnv, make_task
    from smplab.evaluation import clip_initializer
    from smplab.gait import clip_windows, preset_dataset
    from smplab.ppo import PpoConfig, warm_running_means
    ds = preset_dataset("single_clip", 0)
    m, _ = train_prior(ds.windows, ds.labels, PriorConfig(steps=1500, batch=64, hidden=(64, 64)), ds.styles)
    prior = warm_running_means(SmpPrior(m, StyleDirective(label=0)), PpoConfig(n_envs=16, horizon=16, hidden=(8,)))
    rng = np.random.default_rng(0)
    replay = smp_reward(prior, prior.normalize(clip_windows(ds.clips[0], 10)), rng).reward.mean()
    # random actions from the clip's own start states
    env = VecEnv(16, make_task("imitation"), clip_initializer(ds.clips[0].states, range(16), 10), rng)
    windows = []
    for _ in range(20):
        windows.append(extract_features(env.step(rng.uniform(-1, 1, (16, 4)))[2]))
    rand = smp_reward(prior, prior.normalize(np.concatenate(windows)), rng).reward.mean()
    assert replay > rand + 0.1, (replay, rand)
