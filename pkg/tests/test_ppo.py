import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smplab.diffusion import Denoiser, build_schedule
from smplab.errors import ConfigError
from smplab.nn import Adam
from smplab.ppo import (
    PolicyModel, PpoConfig, RolloutBatch, ValueModel, collect_rollouts, compute_gae,
    gaussian_logp, make_run, ppo_update, resume_run, save_run, surrogate_loss_and_grad,
    td_lambda_targets, train_policy,
)
from smplab.prior import SmpPrior


def lambda_return_brute(r, v, gamma, lam):
    """TD(lambda) targets for one done-free episode, as a weighted sum of n-step returns."""
    T = len(r)
    out = np.empty(T)
    for t in range(T):
        def g(n):
            return sum(gamma ** k * r[t + k] for k in range(n)) + gamma ** n * v[t + n]
        m = T - t
        out[t] = (1 - lam) * sum(lam ** (n - 1) * g(n) for n in range(1, m)) + lam ** (m - 1) * g(m)
    return out


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), T=st.integers(1, 12),
       gamma=st.floats(0.0, 1.0), lam=st.floats(0.0, 1.0))
def test_td_lambda_matches_n_step_mixture(seed, T, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal(T), rng.standard_normal(T + 1)
    got = td_lambda_targets(r[:, None], v[:, None], np.zeros((T, 1), bool), gamma, lam)[:, 0]
    np.testing.assert_allclose(got, lambda_return_brute(r, v, gamma, lam), atol=1e-12)


def test_gae_limits():
    rng = np.random.default_rng(0)
    T, g = 9, 0.9
    r, v = rng.standard_normal((T, 3)), rng.standard_normal((T + 1, 3))
    d = np.zeros((T, 3), bool)
    # lambda = 0: one-step TD error
    np.testing.assert_allclose(compute_gae(r, v, d, g, 0.0), r + g * v[1:] - v[:-1], atol=1e-12)
    # lambda = 1: discounted return with bootstrap, minus V
    mc = np.array([sum(g ** (k - t) * r[k] for k in range(t, T)) + g ** (T - t) * v[T] for t in range(T)])
    np.testing.assert_allclose(compute_gae(r, v, d, g, 1.0), mc - v[:-1], atol=1e-12)


def test_gae_done_cuts_bootstrap():
    rng = np.random.default_rng(1)
    T, g = 6, 0.95
    r, v = rng.standard_normal((T, 1)), rng.standard_normal((T + 1, 1))
    d = np.zeros((T, 1), bool)
    d[2] = True
    a = compute_gae(r, v, d, g, 1.0)[:, 0]
    # the first episode ends after step 2 with no bootstrap
    for t in range(3):
        np.testing.assert_allclose(a[t], sum(g ** (k - t) * r[k, 0] for k in range(t, 3)) - v[t, 0], atol=1e-12)
    # the second is unaffected by the first
    b = compute_gae(r[3:], v[3:], d[3:], g, 1.0)[:, 0]
    np.testing.assert_allclose(a[3:], b, atol=1e-12)
    with pytest.raises(ConfigError):
        compute_gae(r, v[:-1], d, g, 1.0)


def policy_batch(seed=0, n=32, obs_dim=5):
    rng = np.random.default_rng(seed)
    pol = PolicyModel(obs_dim, 4, (16,), rng, init_log_std=-0.3)
    pol.theta += 0.2 * rng.standard_normal(pol.n_params)
    obs = rng.standard_normal((n, obs_dim))
    a, lp = pol.sample(obs, rng)
    return pol, obs, a, lp, rng


def test_surrogate_gradient_matches_finite_differences():
    pol, obs, a, lp, rng = policy_batch()
    theta = pol.theta + 0.05 * rng.standard_normal(pol.n_params)   # ratio != 1
    adv = rng.standard_normal(len(obs))
    _, grad, info = surrogate_loss_and_grad(pol, theta, obs, a, lp, adv, 0.2, 0.01)
    h = 1e-6
    for k in rng.choice(pol.n_params, 40, replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        fd = (surrogate_loss_and_grad(pol, tp, obs, a, lp, adv, 0.2, 0.01)[0]
              - surrogate_loss_and_grad(pol, tm, obs, a, lp, adv, 0.2, 0.01)[0]) / (2 * h)
        assert abs(fd - grad[k]) <= 1e-5 * max(1.0, abs(fd))


def test_unit_ratio_has_no_clipping_and_zero_kl():
    pol, obs, a, lp, rng = policy_batch(1)
    adv = rng.standard_normal(len(obs))
    loss, _, info = surrogate_loss_and_grad(pol, pol.theta, obs, a, lp, adv, 0.2, 0.0)
    assert info["clip_frac"] == 0.0
    assert info["kl"] == pytest.approx(0.0, abs=1e-12)
    assert loss == pytest.approx(-adv.mean(), abs=1e-12)


def test_logp_matches_closed_form():
    rng = np.random.default_rng(2)
    a, mu, ls = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal(4) * 0.3
    sd = np.exp(ls)
    expect = np.sum(-0.5 * ((a - mu) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi), axis=1)
    np.testing.assert_allclose(gaussian_logp(a, mu, ls), expect, atol=1e-12)


def test_zero_advantage_and_entropy_leave_policy_unchanged():
    rng = np.random.default_rng(3)
    T, E, od = 8, 4, 5
    pol = PolicyModel(od, 4, (8,), rng)
    val = ValueModel(od, (8,), rng)
    obs = rng.standard_normal((T, E, od))
    act, lp = pol.sample(obs.reshape(-1, od), rng)
    v = np.zeros((T + 1, E))
    batch = RolloutBatch(obs, act.reshape(T, E, 4), lp.reshape(T, E), v, np.zeros((T, E)),
                         np.zeros((T, E)), np.zeros((T, E)), np.zeros((T, E), bool))
    cfg = PpoConfig(entropy_coef=0.0, minibatch=16, epochs=2)
    before = pol.theta.copy()
    ppo_update(pol, val, batch, cfg, Adam(pol.n_params, 1e-3), Adam(val.n_params, 1e-3), rng)
    assert pol.theta.tobytes() == before.tobytes()


class ExplodingModel(Denoiser):
    def predict(self, *a, **k):
        raise AssertionError("prior queried with w_prior = 0")


def test_zero_prior_weight_never_queries_prior():
    prior = SmpPrior(ExplodingModel(10, 13, 0, build_schedule(50), hidden=(4,)))
    cfg = PpoConfig(n_envs=4, horizon=8, w_prior=0.0, w_g=1.0, hidden=(8,))
    run = make_run(cfg, "target_speed", None)
    batch = collect_rollouts(run.policy, run.value, run.env, prior, cfg,
                             run.rngs["act"], run.rngs["prior"])
    assert np.all(batch.r_smp == 0)
    assert make_run(cfg, "target_speed", prior).prior is None


def test_positive_prior_weight_needs_prior():
    with pytest.raises(ConfigError):
        make_run(PpoConfig(w_prior=0.5), "target_speed", None)
    with pytest.raises(ConfigError):
        make_run(PpoConfig(clip=1.5), "target_speed", None)


def test_truncation_bootstraps_final_value():
    cfg = PpoConfig(n_envs=2, horizon=4, w_prior=0.0, w_g=1.0, hidden=(8,))
    run = make_run(cfg, "target_speed", None)
    run.env.state.t[:] = run.env.params.episode_length - 2   # done after two steps
    batch = collect_rollouts(run.policy, run.value, run.env, None, cfg, run.rngs["act"], run.rngs["prior"])
    assert batch.dones[1].all() and not batch.dones[0].any()
    np.testing.assert_array_equal(batch.rewards[0], batch.r_task[0])
    assert np.all(batch.rewards[1] != batch.r_task[1])


def small_prior(seed=0):
    rng = np.random.default_rng(seed)
    m = Denoiser(10, 13, 0, build_schedule(50), hidden=(16,), rng=rng)
    m.theta += 0.05 * rng.standard_normal(m.n_params)
    m.ema.shadow[:] = m.theta
    return SmpPrior(m)


def quick_cfg(**kw):
    base = dict(n_envs=4, horizon=16, minibatch=32, epochs=2, hidden=(16,), seed=7)
    base.update(kw)
    return PpoConfig(**base)


def test_training_deterministic(tmp_path):
    outs = []
    for k in range(2):
        run = train_policy(make_run(quick_cfg(), "target_speed", small_prior()), 3)
        save_run(run, tmp_path / f"{k}.smpl")
        outs.append((tmp_path / f"{k}.smpl").read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.parametrize("task", ["target_speed", "target_location"])
def test_resume_equals_continuous(tmp_path, task):
    full = train_policy(make_run(quick_cfg(), task, small_prior()), 4)
    part = train_policy(make_run(quick_cfg(), task, small_prior()), 2)
    save_run(part, tmp_path / "p.smpl")
    resumed = train_policy(resume_run(tmp_path / "p.smpl", small_prior()), 4)
    assert resumed.policy.theta.tobytes() == full.policy.theta.tobytes()
    assert resumed.value.theta.tobytes() == full.value.theta.tobytes()
    assert resumed.metrics == full.metrics


def test_resume_rejects_different_prior(tmp_path):
    run = train_policy(make_run(quick_cfg(), "target_speed", small_prior()), 1)
    save_run(run, tmp_path / "p.smpl")
    with pytest.raises(ConfigError):
        resume_run(tmp_path / "p.smpl", small_prior(seed=1))
