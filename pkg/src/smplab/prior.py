"""Frozen score-matching motion prior used as an RL reward and state sampler.

The reward for a z-normalized window x is

    r = exp(-(w_s / |K|) * sum_{i in K} e_i / mu_i),  e_i = ||f(x^i, c) - eps_i||^2

where x^i is x diffused to step i with fresh noise eps_i and mu_i is a running
mean of e_i over policy data.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, StyleDirective, directed_predict, forward_diffuse, sample_reverse
from .env import EnvParams, EnvState, default_state, extract_features, stack_states
from .errors import ConfigError, InputError

K_FRACTIONS = (0.44, 0.30, 0.16)
MU_FLOOR = 1e-8


def timestep_set(N: int, fractions=K_FRACTIONS) -> tuple[int, ...]:
    """Diffusion steps round(f * N), clamped to [1, N]; N = 50 gives (22, 15, 8)."""
    return tuple(int(min(N, max(1, round(f * N)))) for f in fractions)


@dataclass
class RewardSample:
    errors: np.ndarray       # (n, |K|) raw e_i
    normalized: np.ndarray   # (n, |K|) e_i / mu_i
    reward: np.ndarray       # (n,)
    steps: np.ndarray        # (n, |K|) diffusion step of each column


class SmpPrior:
    """Frozen denoiser + timestep set + style directive + running error means.

    ``mode="random"`` replaces the ensemble by one uniformly drawn step per
    window and keeps a running mean for every step 1..N.
    """

    def __init__(self, model: Denoiser, directive: StyleDirective | None = None,
                 K: tuple[int, ...] | None = None, w_s: float = 1.0, decay: float = 0.999,
                 mode: str = "ensemble"):
        if mode not in ("ensemble", "random"):
            raise ConfigError(f"unknown reward mode {mode!r}")
        N = model.schedule.N
        self.model = model
        self.directive = directive or StyleDirective()
        self.K = tuple(timestep_set(N) if K is None else K)
        if not self.K or any(not 1 <= i <= N for i in self.K):
            raise ConfigError(f"timestep set {self.K} outside [1, {N}]")
        self.w_s = float(w_s)
        self.decay = float(decay)
        self.mode = mode
        n_mu = N if mode == "random" else len(self.K)
        self.mu = np.zeros(n_mu)
        self.mu_ready = np.zeros(n_mu, dtype=bool)

    def _mu_index(self, i: int) -> int:
        return i - 1 if self.mode == "random" else self.K.index(i)

    def normalize(self, features: np.ndarray) -> np.ndarray:
        """Raw (n, H, D) feature windows to the model's z-space, (n, H*D)."""
        return self.model.normalize(np.asarray(features, dtype=np.float64))

    def digest(self) -> str:
        return prior_digest(self.model)

    def state_dict(self) -> dict:
        return {"mu": self.mu.copy(), "mu_ready": self.mu_ready.copy()}

    def load_state_dict(self, d: dict) -> None:
        self.mu = np.array(d["mu"], dtype=np.float64)
        self.mu_ready = np.array(d["mu_ready"], dtype=bool)


def prior_digest(model: Denoiser) -> str:
    h = hashlib.sha256()
    for a in (model.theta, model.ema.shadow, model.mean, model.std):
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def sds_errors(prior: SmpPrior, z: np.ndarray, steps: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """e_i = ||f(x^i) - eps||^2 per window for the steps in ``steps`` (n, k)."""
    n, k = steps.shape
    out = np.empty((n, k))
    for j in range(k):
        col = steps[:, j]
        eps = rng.standard_normal(z.shape)
        i = int(col[0]) if np.all(col == col[0]) else col
        xi = forward_diffuse(prior.model.schedule, z, i, eps)
        pred = directed_predict(prior.model, xi, i, prior.directive)
        r = pred - eps
        out[:, j] = np.einsum("ij,ij->i", r, r)
    return out


def update_running_mean(prior: SmpPrior, i: int, batch_mean: float) -> float:
    """mu_i <- d mu_i + (1 - d) m; the first update sets mu_i = m."""
    k = prior._mu_index(i)
    if not prior.mu_ready[k]:
        prior.mu[k] = batch_mean
        prior.mu_ready[k] = True
    else:
        prior.mu[k] = prior.decay * prior.mu[k] + (1.0 - prior.decay) * batch_mean
    return float(prior.mu[k])


def _check_z(prior: SmpPrior, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != prior.model.dim:
        raise InputError(f"window size {z.shape[1]} != model input {prior.model.dim}")
    if not np.all(np.isfinite(z)) or np.any(np.abs(z.mean(axis=1)) > 10.0):
        raise InputError("window does not look z-normalized (|mean| > 10 or non-finite)")
    return z


def smp_errors(prior: SmpPrior, z: np.ndarray, rng: np.random.Generator):
    """Raw SDS errors and their diffusion steps, both (n, k)."""
    z = _check_z(prior, z)
    n = z.shape[0]
    if prior.mode == "ensemble":
        steps = np.broadcast_to(np.asarray(prior.K), (n, len(prior.K)))
    else:
        steps = rng.integers(1, prior.model.schedule.N + 1, (n, 1))
    return sds_errors(prior, z, steps, rng), np.asarray(steps)


def absorb_errors(prior: SmpPrior, errors: np.ndarray, steps: np.ndarray) -> None:
    """Fold a batch of errors into the running means.

    ``errors``/``steps`` are (n, k) for one set of windows, or (T, n, k) for a
    rollout batch; the latter applies one update per rollout step, in time
    order, each from that step's mean error over the environments.
    """
    errors, steps = np.asarray(errors), np.asarray(steps)
    if errors.ndim == 2:
        errors, steps = errors[None], steps[None]
    for t in range(errors.shape[0]):
        for i in np.unique(steps[t]):
            update_running_mean(prior, int(i), float(errors[t][steps[t] == i].mean()))


def reward_from_errors(prior: SmpPrior, errors: np.ndarray, steps: np.ndarray) -> RewardSample:
    """Normalize by the running means (1 where a mean was never set) and map to (0, 1]."""
    if prior.mode == "random":
        idx = steps - 1
    else:
        idx = np.broadcast_to(np.arange(len(prior.K)), steps.shape)
    mu = np.where(prior.mu_ready[idx], np.maximum(prior.mu[idx], MU_FLOOR), 1.0)
    norm = errors / mu
    # capped exponent keeps r strictly positive in floating point
    r = np.exp(-np.minimum(prior.w_s * norm.mean(axis=-1), 700.0))
    return RewardSample(errors, norm, r, steps)


def smp_reward(prior: SmpPrior, z: np.ndarray, rng: np.random.Generator,
               update_stats: bool = False) -> RewardSample:
    """Reward for z-normalized windows ``z`` of shape (n, H*D) or (H*D,).

    With ``update_stats`` the running means absorb this batch before it is
    normalized.
    """
    e, steps = smp_errors(prior, z, rng)
    if update_stats:
        absorb_errors(prior, e, steps)
    return reward_from_errors(prior, e, steps)


def composite_reward(r_smp, r_task, w_prior: float, w_g: float):
    if w_prior < 0 or w_g < 0:
        raise ConfigError("reward weights must be non-negative")
    return w_prior * np.asarray(r_smp) + w_g * np.asarray(r_task)


# ---------------------------------------------------------------------------
# generative state initialization


def window_to_states(features: np.ndarray, heading: np.ndarray, pos: np.ndarray,
                     params: EnvParams = EnvParams()) -> EnvState:
    """Rebuild (n, H) states from raw feature windows (n, H, D).

    The last frame is placed at ``pos``/``heading``; earlier frames follow by
    integrating the window's velocities backwards.
    """
    n, H, _ = features.shape
    dt = params.dt
    q = np.stack([np.arctan2(features[..., 4], features[..., 3]),
                  np.arctan2(features[..., 6], features[..., 5])], -1)
    qd = features[..., 7:9].copy()
    omega = features[..., 2].copy()
    c, s = np.cos(heading)[:, None], np.sin(heading)[:, None]
    lv = features[..., 0:2]
    vel = np.stack([c * lv[..., 0] - s * lv[..., 1], s * lv[..., 0] + c * lv[..., 1]], -1)
    head = np.empty((n, H))
    p = np.empty((n, H, 2))
    head[:, -1], p[:, -1] = heading, pos
    for j in range(H - 1, 0, -1):
        head[:, j - 1] = head[:, j] - dt * omega[:, j]
        p[:, j - 1] = p[:, j] - dt * vel[:, j]
    head = (head + np.pi) % (2 * np.pi) - np.pi
    t = np.broadcast_to(np.arange(-(H - 1), 1), (n, H)).copy()
    return EnvState(p, head, vel, omega, q, qd, t)


def valid_windows(features: np.ndarray, params: EnvParams = EnvParams()) -> np.ndarray:
    """Per-window check that generated features describe a reachable state."""
    ok = np.all(np.isfinite(features), axis=(1, 2))
    for a, b in ((3, 4), (5, 6)):
        r = np.hypot(features[..., a], features[..., b])
        ok &= np.all((r > 0.5) & (r < 1.5), axis=1)
    ok &= np.all(np.hypot(features[..., 0], features[..., 1]) <= params.speed_cap, axis=1)
    ok &= np.all(np.abs(features[..., 2]) <= params.turn_max / params.turn_damping, axis=1)
    ok &= np.all(np.abs(features[..., 7:9]) <= 60.0, axis=(1, 2))
    return ok


def gsi_sample(prior: SmpPrior, n: int, rng: np.random.Generator,
               params: EnvParams = EnvParams(), max_tries: int = 10):
    """Initial states and H-state histories drawn from the prior.

    Windows that fail :func:`valid_windows` are resampled up to ``max_tries``
    times; the rest fall back to the rest pose. Global pose is uniform.
    """
    model = prior.model
    H = model.H
    feats = np.zeros((n, H, model.D))
    pending = np.arange(n)
    for _ in range(max_tries):
        if pending.size == 0:
            break
        w = model.denormalize(sample_reverse(model, prior.directive, rng, pending.size))
        ok = valid_windows(w, params)
        feats[pending[ok]] = w[ok]
        pending = pending[~ok]
    base = default_state(n, rng, params)
    hist = window_to_states(feats, base.heading, base.pos, params)
    if pending.size:
        rest = stack_states([base[pending]] * H)
        rest.t = np.broadcast_to(np.arange(-(H - 1), 1), (pending.size, H)).copy()
        hist.set(pending, rest)
    state = hist[:, -1].copy()
    state.t = np.zeros(n, dtype=np.int64)
    return state, hist


def gsi_initializer(prior: SmpPrior, params: EnvParams = EnvParams()):
    def init(n, rng):
        return gsi_sample(prior, n, rng, params)
    return init


def features_of_history(hist: EnvState, params: EnvParams = EnvParams()) -> np.ndarray:
    return extract_features(hist, params)
