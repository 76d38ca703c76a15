"""PPO with GAE(lambda) advantages, TD(lambda) value targets and an optional frozen
motion prior contributing a style reward."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import (
    EnvParams, TASKS, VecEnv, default_initializer, extract_features, make_task,
)
from .errors import ConfigError, TrainingError
from .nn import Adam, Manifest, ParamSet, clip_grad_norm, init_params, mlp_backward, mlp_forward, \
    read_checkpoint, write_checkpoint
from .prior import (
    SmpPrior, absorb_errors, composite_reward, gsi_initializer, reward_from_errors, smp_errors,
)

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -4.0, 1.0
LOG_2PI = np.log(2 * np.pi)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 512
    lr: float = 3e-4
    n_envs: int = 64
    horizon: int = 64
    w_prior: float = 0.5
    w_g: float = 0.5
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    kl_stop: float = 0.5
    hidden: tuple[int, ...] = (128, 128)
    init_log_std: float = -0.5
    iterations: int = 300
    seed: int = 0
    gsi: bool = True

    def validate(self) -> None:
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("gamma and lambda must lie in [0, 1]")
        if not 0 < self.clip < 1:
            raise ConfigError("clip ratio must lie in (0, 1)")
        if self.w_prior < 0 or self.w_g < 0:
            raise ConfigError("reward weights must be non-negative")
        if min(self.epochs, self.minibatch, self.n_envs, self.horizon) < 1:
            raise ConfigError("epochs, minibatch, n_envs and horizon must be positive")


# ---------------------------------------------------------------------------
# models


class PolicyModel:
    """Gaussian policy: tanh MLP mean plus a state-independent log-std."""

    def __init__(self, obs_dim: int, act_dim: int = 4, hidden=(128, 128),
                 rng: np.random.Generator | None = None, init_log_std: float = -0.5):
        self.manifest = Manifest((obs_dim, *hidden, act_dim), "tanh")
        self.act_dim = act_dim
        n = self.manifest.n_params
        theta = np.zeros(n + act_dim)
        if rng is not None:
            theta[:n] = init_params(self.manifest, rng, last_scale=0.01)
        theta[n:] = init_log_std
        self.theta = theta

    @property
    def n_params(self) -> int:
        return self.theta.size

    def split(self, theta=None):
        theta = self.theta if theta is None else theta
        n = self.manifest.n_params
        return ParamSet(self.manifest, theta[:n]), theta[n:]

    def log_std(self, theta=None) -> np.ndarray:
        return np.clip(self.split(theta)[1], LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs: np.ndarray, theta=None) -> np.ndarray:
        return mlp_forward(self.split(theta)[0], obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        mu = self.mean(obs)
        ls = self.log_std()
        a = mu + np.exp(ls) * rng.standard_normal(mu.shape)
        return a, gaussian_logp(a, mu, ls)

    def clamp(self) -> None:
        n = self.manifest.n_params
        np.clip(self.theta[n:], LOG_STD_MIN, LOG_STD_MAX, out=self.theta[n:])


class ValueModel:
    """Tanh MLP state value; the output is scaled by 1 / (1 - gamma)."""

    def __init__(self, obs_dim: int, hidden=(128, 128), rng: np.random.Generator | None = None,
                 scale: float = 100.0):
        self.manifest = Manifest((obs_dim, *hidden, 1), "tanh")
        self.theta = np.zeros(self.manifest.n_params)
        if rng is not None:
            self.theta[:] = init_params(self.manifest, rng, last_scale=0.1)
        self.scale = scale

    @property
    def n_params(self) -> int:
        return self.theta.size

    def __call__(self, obs: np.ndarray, theta=None) -> np.ndarray:
        p = ParamSet(self.manifest, self.theta if theta is None else theta)
        return mlp_forward(p, obs)[:, 0] * self.scale


def gaussian_logp(a: np.ndarray, mu: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (a - mu) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, -1) - np.sum(log_std) - 0.5 * a.shape[-1] * LOG_2PI


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.size * (1.0 + LOG_2PI))


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float) -> np.ndarray:
    """Unnormalized GAE(lambda) over a (T, ...) batch.

    ``values`` has T + 1 rows, the last being the bootstrap value. A done at
    step t cuts both the bootstrap of V_{t+1} and the recursion.
    """
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape[0] != T:
        raise ConfigError("values need T + 1 rows and dones T rows")
    adv = np.zeros_like(rewards, dtype=np.float64)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


def td_lambda_targets(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                      gamma: float, lam: float) -> np.ndarray:
    return compute_gae(rewards, values, dones, gamma, lam) + values[:-1]


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBatch:
    obs: np.ndarray        # (T, E, obs_dim)
    actions: np.ndarray    # (T, E, act_dim)
    logp: np.ndarray       # (T, E)
    values: np.ndarray     # (T + 1, E)
    r_smp: np.ndarray      # (T, E)
    r_task: np.ndarray     # (T, E)
    rewards: np.ndarray    # (T, E) combined, truncation bootstrap included
    dones: np.ndarray      # (T, E)
    norm_errors: np.ndarray | None = None   # (T, E, |K|)

    @property
    def size(self) -> int:
        return self.r_task.size


def _window_z(prior: SmpPrior, window, params: EnvParams) -> np.ndarray:
    return prior.normalize(extract_features(window, params))


def collect_rollouts(policy: PolicyModel, value: ValueModel, env: VecEnv, prior: SmpPrior | None,
                     cfg: PpoConfig, rng_act: np.random.Generator,
                     rng_prior: np.random.Generator, update_stats: bool = True) -> RolloutBatch:
    """T steps on every env. The prior is queried only when w_prior > 0.

    Raw prior errors are gathered for the whole batch, the running means are
    updated once, and only then are the errors turned into rewards.
    """
    T, E = cfg.horizon, env.n
    use_prior = prior is not None and cfg.w_prior > 0
    obs = np.empty((T, E, env.obs_dim))
    acts = np.empty((T, E, policy.act_dim))
    logp = np.empty((T, E))
    vals = np.empty((T + 1, E))
    r_task = np.empty((T, E))
    dones = np.zeros((T, E), dtype=bool)
    boot = np.zeros((T, E))
    errs, steps = [], []
    for t in range(T):
        o = env.observation()
        a, lp = policy.sample(o, rng_act)
        obs[t], acts[t], logp[t] = o, a, lp
        vals[t] = value(o)
        r, done, window = env.step(np.clip(a, -1.0, 1.0))
        r_task[t], dones[t] = r, done
        if np.any(done):
            boot[t] = np.where(done, cfg.gamma * value(env.final_obs), 0.0)
        if use_prior:
            e, s = smp_errors(prior, _window_z(prior, window, env.params), rng_prior)
            errs.append(e)
            steps.append(s)
    vals[T] = value(env.observation())
    if use_prior:
        e, s = np.stack(errs), np.stack(steps)
        if update_stats:
            absorb_errors(prior, e, s)
        sample = reward_from_errors(prior, e, s)
        r_smp, norm = sample.reward, sample.normalized
    else:
        r_smp, norm = np.zeros((T, E)), None
    rewards = composite_reward(r_smp, r_task, cfg.w_prior, cfg.w_g) + boot
    return RolloutBatch(obs, acts, logp, vals, r_smp, r_task, rewards, dones, norm)


# ---------------------------------------------------------------------------
# update


def surrogate_loss_and_grad(policy: PolicyModel, theta: np.ndarray, obs: np.ndarray,
                            actions: np.ndarray, logp_old: np.ndarray, adv: np.ndarray,
                            clip: float, entropy_coef: float):
    """Clipped PPO surrogate (to be minimized) minus the entropy bonus.

    Returns ``(loss, grad, info)``; info holds the approximate KL and clip fraction.
    """
    mp, raw_ls = policy.split(theta)
    ls = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    mu, cache = mlp_forward(mp, obs, return_cache=True)
    lp = gaussian_logp(actions, mu, ls)
    ratio = np.exp(lp - logp_old)
    clipped = np.clip(ratio, 1 - clip, 1 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    n = obs.shape[0]
    ent = gaussian_entropy(ls)
    loss = -surr.mean() - entropy_coef * ent
    # d(-surr)/d(logp) where the unclipped branch is the active minimum
    active = ratio * adv <= clipped * adv
    g_lp = np.where(active, -adv * ratio, 0.0) / n
    inv_var = np.exp(-2 * ls)
    diff = actions - mu
    g_mu = g_lp[:, None] * diff * inv_var
    g_ls = (g_lp[:, None] * (diff * diff * inv_var - 1.0)).sum(0) - entropy_coef
    g_ls = np.where((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX), g_ls, 0.0)
    gm, _, _ = mlp_backward(mp, obs, None, g_mu, cache)
    grad = np.concatenate([gm, g_ls])
    log_ratio = lp - logp_old
    info = {"kl": float(np.mean(ratio - 1.0 - log_ratio)),
            "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)),
            "entropy": ent, "policy_loss": float(-surr.mean())}
    return float(loss), grad, info


def value_loss_and_grad(value: ValueModel, theta: np.ndarray, obs: np.ndarray, targets: np.ndarray):
    p = ParamSet(value.manifest, theta)
    out, cache = mlp_forward(p, obs, return_cache=True)
    pred = out[:, 0] * value.scale
    r = (pred - targets) / value.scale
    loss = 0.5 * float(np.mean(r * r))
    g_out = (r / obs.shape[0])[:, None]
    grad, _, _ = mlp_backward(p, obs, None, g_out, cache)
    return loss, grad


def ppo_update(policy: PolicyModel, value: ValueModel, batch: RolloutBatch, cfg: PpoConfig,
               popt: Adam, vopt: Adam, rng: np.random.Generator) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches; stops early on large KL."""
    adv = compute_gae(batch.rewards, batch.values, batch.dones, cfg.gamma, cfg.lam)
    targets = adv + batch.values[:-1]
    n = batch.size
    obs = batch.obs.reshape(n, -1)
    act = batch.actions.reshape(n, -1)
    lp_old = batch.logp.reshape(n)
    adv_n = normalize_advantages(adv.reshape(n))
    tgt = targets.reshape(n)
    stats = {"kl": 0.0, "clip_frac": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    count, stopped = 0, False
    mb = min(cfg.minibatch, n)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n - mb + 1, mb):
            idx = perm[s:s + mb]
            _, g, info = surrogate_loss_and_grad(policy, policy.theta, obs[idx], act[idx],
                                                 lp_old[idx], adv_n[idx], cfg.clip, cfg.entropy_coef)
            if info["kl"] > cfg.kl_stop:
                stopped = True
                break
            clip_grad_norm(g, cfg.max_grad_norm)
            popt.step(policy.theta, g)
            policy.clamp()
            vl, vg = value_loss_and_grad(value, value.theta, obs[idx], tgt[idx])
            clip_grad_norm(vg, cfg.max_grad_norm)
            vopt.step(value.theta, vg)
            for k in ("kl", "clip_frac", "policy_loss", "entropy"):
                stats[k] += info[k]
            stats["value_loss"] += vl
            count += 1
        if stopped:
            log.info("PPO epochs stopped early: approx KL above %.3g", cfg.kl_stop)
            break
    for k in stats:
        stats[k] = stats[k] / max(count, 1)
    stats["early_stop"] = int(stopped)
    if not all(np.isfinite(v) for v in stats.values()):
        raise TrainingError("non-finite PPO diagnostics")
    return stats


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PolicyRun:
    """Everything needed to continue training bit-exactly."""

    cfg: PpoConfig
    task_name: str
    policy: PolicyModel
    value: ValueModel
    popt: Adam
    vopt: Adam
    env: VecEnv
    prior: SmpPrior | None
    rngs: dict
    iteration: int = 0
    metrics: list = field(default_factory=list)
    prior_digest: str = ""


def _rngs(seed: int) -> dict:
    names = ("init", "env", "act", "prior", "update")
    return {k: np.random.default_rng(s) for k, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def make_run(cfg: PpoConfig, task_name: str, prior: SmpPrior | None,
             params: EnvParams = EnvParams(), task_kwargs: dict | None = None) -> PolicyRun:
    cfg.validate()
    if task_name not in TASKS:
        raise ConfigError(f"unknown task {task_name!r}; choose from {sorted(TASKS)}")
    if cfg.w_prior > 0 and prior is None:
        raise ConfigError("w_prior > 0 needs a prior checkpoint")
    if cfg.w_prior == 0:
        prior = None
    rngs = _rngs(cfg.seed)
    task = make_task(task_name, params, **(task_kwargs or {}))
    H = prior.model.H if prior is not None else 10
    init = gsi_initializer(prior, params) if (prior is not None and cfg.gsi) else default_initializer(params, H)
    env = VecEnv(cfg.n_envs, task, init, rngs["env"], H=H, params=params)
    policy = PolicyModel(env.obs_dim, 4, cfg.hidden, rngs["init"], cfg.init_log_std)
    value = ValueModel(env.obs_dim, cfg.hidden, rngs["init"], scale=1.0 / max(1.0 - cfg.gamma, 1e-3))
    return PolicyRun(cfg, task_name, policy, value, Adam(policy.n_params, cfg.lr),
                     Adam(value.n_params, cfg.lr), env, prior, rngs,
                     prior_digest=prior.digest() if prior is not None else "")


def warm_running_means(prior: SmpPrior, cfg: PpoConfig | None = None, task_name: str = "target_speed",
                       batches: int = 1, params: EnvParams = EnvParams()) -> SmpPrior:
    """Set the prior's running means from rollouts of a freshly initialized policy.

    This is the state of the statistics after the first RL batch, used when the
    reward is probed outside of training.
    """
    cfg = cfg or PpoConfig()
    if cfg.w_prior <= 0:
        raise ConfigError("warming the running means needs w_prior > 0")
    run = make_run(cfg, task_name, prior, params)
    for _ in range(batches):
        collect_rollouts(run.policy, run.value, run.env, prior, cfg, run.rngs["act"], run.rngs["prior"])
    return prior


METRIC_FIELDS = ("iter", "env_steps", "task_return", "mean_r_smp", "kl", "clip_frac",
                 "policy_loss", "value_loss", "entropy", "early_stop")


def train_iteration(run: PolicyRun) -> dict:
    cfg = run.cfg
    batch = collect_rollouts(run.policy, run.value, run.env, run.prior, cfg,
                             run.rngs["act"], run.rngs["prior"])
    stats = ppo_update(run.policy, run.value, batch, cfg, run.popt, run.vopt, run.rngs["update"])
    run.iteration += 1
    row = {"iter": run.iteration, "env_steps": run.iteration * batch.size,
           "task_return": float(batch.r_task.mean()), "mean_r_smp": float(batch.r_smp.mean()), **stats}
    if run.prior is not None and batch.norm_errors is not None and run.prior.mode == "ensemble":
        for j, i in enumerate(run.prior.K):
            row[f"norm_err_{i}"] = float(batch.norm_errors[..., j].mean())
    run.metrics.append(row)
    return row


def train_policy(run: PolicyRun, iterations: int | None = None, progress=None,
                 metrics_path: str | Path | None = None) -> PolicyRun:
    """Run PPO iterations; the prior's parameters are checked unchanged at the end."""
    total = run.cfg.iterations if iterations is None else iterations
    while run.iteration < total:
        row = train_iteration(run)
        if progress:
            progress(row)
        log.info("iter %d task %.3f smp %.3f kl %.4f", row["iter"], row["task_return"],
                 row["mean_r_smp"], row["kl"])
    if run.prior is not None and run.prior.digest() != run.prior_digest:
        raise TrainingError("prior parameters changed during policy training")
    if metrics_path is not None:
        write_metrics(run.metrics, metrics_path)
    return run


def write_metrics(rows: list[dict], path: str | Path) -> None:
    keys = list(METRIC_FIELDS) + sorted({k for r in rows for k in r} - set(METRIC_FIELDS))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# checkpoints


def save_run(run: PolicyRun, path: str | Path, extra: dict | None = None) -> None:
    arrays = {"value": run.value.theta,
              "popt_m": run.popt.m, "popt_v": run.popt.v, "vopt_m": run.vopt.m, "vopt_v": run.vopt.v}
    for k, v in run.env.get_state().items():
        arrays[f"env_{k}"] = np.asarray(v, dtype=np.float64)
    if run.prior is not None:
        arrays["mu"] = run.prior.mu
        arrays["mu_ready"] = run.prior.mu_ready.astype(np.float64)
    cfg = asdict(run.cfg)
    cfg["hidden"] = list(cfg["hidden"])
    manifest = {
        "kind": "smp-policy", "task": run.task_name, "config": cfg,
        "policy": run.policy.manifest.to_dict(), "value": run.value.manifest.to_dict(),
        "value_scale": run.value.scale, "iteration": run.iteration,
        "popt_t": run.popt.t, "vopt_t": run.vopt.t,
        "rng": {k: g.bit_generator.state for k, g in run.rngs.items()},
        "prior_digest": run.prior_digest, "metrics": run.metrics, **(extra or {}),
    }
    write_checkpoint(path, manifest, run.policy.theta, None, arrays)


def load_policy(path: str | Path):
    """(manifest, PolicyModel, ValueModel, arrays) from a policy checkpoint."""
    man, theta, _, arrays = read_checkpoint(path)
    if man.get("kind") != "smp-policy":
        raise ConfigError(f"{path}: not a policy checkpoint")
    pm = Manifest.from_dict(man["policy"])
    policy = PolicyModel(pm.n_in, pm.n_out, pm.sizes[1:-1])
    policy.theta = theta
    vm = Manifest.from_dict(man["value"])
    value = ValueModel(vm.n_in, vm.sizes[1:-1], scale=man["value_scale"])
    value.theta = arrays["value"]
    return man, policy, value, arrays


def resume_run(path: str | Path, prior: SmpPrior | None, params: EnvParams = EnvParams(),
               task_kwargs: dict | None = None) -> PolicyRun:
    man, policy, value, arrays = load_policy(path)
    c = dict(man["config"])
    c["hidden"] = tuple(c["hidden"])
    cfg = PpoConfig(**c)
    run = make_run(cfg, man["task"], prior, params, task_kwargs)
    if run.prior is not None and run.prior.digest() != man["prior_digest"]:
        raise ConfigError("prior checkpoint differs from the one this run was trained with")
    run.policy, run.value = policy, value
    run.popt.m, run.popt.v, run.popt.t = arrays["popt_m"], arrays["popt_v"], man["popt_t"]
    run.vopt.m, run.vopt.v, run.vopt.t = arrays["vopt_m"], arrays["vopt_v"], man["vopt_t"]
    env_state = {k[4:]: v for k, v in arrays.items() if k.startswith("env_")}
    env_state["state_t"] = env_state["state_t"].astype(np.int64)
    env_state["hist_t"] = env_state["hist_t"].astype(np.int64)
    env_state["timer"] = env_state["timer"].astype(np.int64)
    run.env.set_state(env_state)
    if run.prior is not None:
        run.prior.mu = np.array(arrays["mu"])
        run.prior.mu_ready = arrays["mu_ready"].astype(bool)
    for k, g in run.rngs.items():
        g.bit_generator.state = man["rng"][k]
    run.iteration = man["iteration"]
    run.metrics = list(man["metrics"])
    return run


# ---------------------------------------------------------------------------
# evaluation rollouts


@dataclass
class EvalRollout:
    r_task: np.ndarray     # (steps, E)
    states: object         # EnvState (steps + 1, E) trajectory
    goals: np.ndarray      # (steps, E, goal)


def evaluate_policy(policy: PolicyModel, task_name: str, n_envs: int, steps: int,
                    rng: np.random.Generator, initializer=None, params: EnvParams = EnvParams(),
                    deterministic: bool = True, task_kwargs: dict | None = None, H: int = 10) -> EvalRollout:
    """Roll the policy (mean action by default) and keep the full state trajectory."""
    from .env import stack_states
    task = make_task(task_name, params, **(task_kwargs or {}))
    params_long = params if steps < params.episode_length else \
        EnvParams(**{**asdict(params), "episode_length": steps + 1})
    env = VecEnv(n_envs, task, initializer or default_initializer(params_long, H), rng, H=H,
                 params=params_long)
    traj = [env.state.copy()]
    rews, goals = [], []
    for _ in range(steps):
        o = env.observation()
        goals.append(env.goal.copy())
        a = policy.mean(o) if deterministic else policy.sample(o, rng)[0]
        r, _, _ = env.step(np.clip(a, -1.0, 1.0))
        rews.append(r)
        traj.append(env.state.copy())
    return EvalRollout(np.array(rews), stack_states(traj, axis=0), np.array(goals))
