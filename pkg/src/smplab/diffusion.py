"""DDPM over flattened motion windows with an epsilon-predicting FiLM MLP.

Windows enter the model z-normalized with per-coordinate dataset statistics
that travel with the checkpoint. Style labels index a learned embedding table
whose extra last row is the unconditional (NULL) token.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import limb_mask
from .errors import ConfigError, InputError, TrainingError
from .nn import (
    Adam, EmaShadow, Manifest, ParamSet, ema_update, init_params, mlp_backward, mlp_forward,
    read_checkpoint, write_checkpoint,
)

log = logging.getLogger(__name__)

NULL = -1
CLAMP = 6.0
STD_FLOOR = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar for steps 1..N, stored at array index i - 1."""

    N: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "cosine"
    offset: float = 0.008

    def ab(self, i):
        return self.alpha_bar[np.asarray(i) - 1]

    def ab_prev(self, i):
        i = np.asarray(i)
        return np.where(i > 1, self.alpha_bar[np.maximum(i - 2, 0)], 1.0)


def cosine_alpha_bar(t: np.ndarray, s: float = 0.008) -> np.ndarray:
    """Continuous cosine alpha_bar(t) for t in [0, 1], normalized so alpha_bar(0) = 1."""
    f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
    return f / np.cos(s / (1 + s) * np.pi / 2) ** 2


def build_schedule(N: int, kind: str = "cosine", offset: float = 0.008,
                   max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine (default) or linear schedule with ``alpha_bar_i = prod_j (1 - beta_j)``."""
    if int(N) != N or N < 2:
        raise ConfigError(f"need N >= 2 diffusion steps, got {N}")
    N = int(N)
    if kind == "cosine":
        ab = cosine_alpha_bar(np.arange(N + 1) / N, offset)
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, max_beta)
    elif kind == "linear":
        beta = np.linspace(1e-4 * 1000 / N, 0.02 * 1000 / N, N).clip(1e-8, max_beta)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    return NoiseSchedule(N, beta, alpha, np.cumprod(alpha), kind, offset)


def forward_diffuse(schedule: NoiseSchedule, x0: np.ndarray, i, eps: np.ndarray) -> np.ndarray:
    """Sample x^i given x^0: sqrt(ab_i) x0 + sqrt(1 - ab_i) eps.

    ``i`` is a scalar or one step per row of ``x0``.
    """
    i = np.asarray(i)
    if np.any(i < 1) or np.any(i > schedule.N):
        raise InputError(f"diffusion step outside [1, {schedule.N}]")
    ab = schedule.ab(i)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(i, dim: int = 32, N: int = 50) -> np.ndarray:
    """Sinusoidal features of the step index, shape (..., dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    a = np.asarray(i, dtype=np.float64)[..., None] * (1000.0 / N) * freqs
    return np.concatenate([np.sin(a), np.cos(a)], -1)


@dataclass
class StyleDirective:
    """How the frozen model is queried: one label with a CFG weight, or a
    masked blend of two labels (``mask`` names the features taken from
    ``compose[0]``; the rest come from ``compose[1]``)."""

    label: int = NULL
    w_cfg: float = 1.0
    compose: tuple[int, int] | None = None
    mask: str = "limb1"

    def to_dict(self) -> dict:
        return {"label": self.label, "w_cfg": self.w_cfg,
                "compose": list(self.compose) if self.compose else None, "mask": self.mask}


class Denoiser:
    """FiLM MLP predicting epsilon from (x^i, i, c), plus its EMA shadow.

    With ``skip`` the MLP output is added to sqrt(1 - ab_i) x^i, so the network
    only models the departure of the data from a unit Gaussian.

    All trainable parameters (main MLP, time head, style table) share one flat
    array ``theta``.
    """

    def __init__(self, H: int, D: int, n_styles: int, schedule: NoiseSchedule,
                 hidden=(256, 256, 256), time_dim: int = 32, time_hidden: int = 64,
                 style_dim: int = 16, rng: np.random.Generator | None = None,
                 mean: np.ndarray | None = None, std: np.ndarray | None = None,
                 style_names: tuple[str, ...] = (), ema_decay: float = 0.999,
                 skip: bool = True):
        self.H, self.D, self.n_styles = H, D, n_styles
        self.schedule = schedule
        self.time_dim, self.style_dim = time_dim, style_dim
        self.style_names = tuple(style_names)
        self.skip = bool(skip)
        n = H * D
        self.main_m = Manifest((n, *hidden, n), "silu", cond_dim=time_dim + style_dim)
        self.time_m = Manifest((time_dim, time_hidden, time_dim), "silu")
        self.n_table = (n_styles + 1) * style_dim
        self.n_params = self.main_m.n_params + self.time_m.n_params + self.n_table
        self.mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = np.ones(n) if std is None else np.asarray(std, dtype=np.float64)
        theta = np.zeros(self.n_params)
        if rng is not None:
            a, b = self.main_m.n_params, self.time_m.n_params
            theta[:a] = init_params(self.main_m, rng, last_scale=0.1 if skip else 1.0)
            theta[a:a + b] = init_params(self.time_m, rng)
            theta[a + b:] = rng.normal(0.0, 1.0, self.n_table)
        self.theta = theta
        self.ema = EmaShadow.of(theta, ema_decay)

    @property
    def dim(self) -> int:
        return self.H * self.D

    def _split(self, theta: np.ndarray):
        a, b = self.main_m.n_params, self.time_m.n_params
        return (ParamSet(self.main_m, theta[:a]), ParamSet(self.time_m, theta[a:a + b]),
                theta[a + b:].reshape(self.n_styles + 1, self.style_dim))

    def params(self, use_ema: bool = True) -> np.ndarray:
        return self.ema.shadow if use_ema else self.theta

    def _rows(self, c) -> np.ndarray:
        c = np.asarray(c)
        if np.any((c != NULL) & ((c < 0) | (c >= self.n_styles))):
            raise InputError(f"style label outside [0, {self.n_styles}) and not NULL")
        return np.where(c == NULL, self.n_styles, c)

    def forward(self, x: np.ndarray, i, c, theta: np.ndarray | None = None, cache: bool = False):
        """eps-prediction for a batch. ``i``/``c`` are scalars (shared) or per-row arrays."""
        theta = self.ema.shadow if theta is None else theta
        main, head, table = self._split(theta)
        shared = np.ndim(i) == 0 and np.ndim(c) == 0
        temb_in = timestep_embedding(i, self.time_dim, self.schedule.N)
        if shared:
            temb, tcache = mlp_forward(head, temb_in[None], return_cache=True)
            cond = np.concatenate([temb[0], table[int(self._rows(c))]])
        else:
            n = x.shape[0]
            temb_in = np.broadcast_to(temb_in, (n, self.time_dim))
            temb, tcache = mlp_forward(head, temb_in, return_cache=True)
            rows = np.broadcast_to(self._rows(c), (n,))
            cond = np.concatenate([temb, table[rows]], -1)
        out, mcache = mlp_forward(main, x, cond, return_cache=True) if cache else (mlp_forward(main, x, cond), None)
        if self.skip:
            out = out + self.skip_gain(i).astype(out.dtype) * x
        if not cache:
            return out
        return out, (x, i, c, cond, temb_in, tcache, mcache, theta)

    def skip_gain(self, i) -> np.ndarray:
        """sqrt(1 - ab_i): the epsilon predictor that is optimal for N(0, I) data."""
        g = np.sqrt(1.0 - self.schedule.ab(np.asarray(i)))
        return g[:, None] if np.ndim(g) else g

    def backward(self, fcache, grad_out: np.ndarray) -> np.ndarray:
        x, i, c, cond, temb_in, tcache, mcache, theta = fcache
        main, head, table = self._split(theta)
        gmain, _, gcond = mlp_backward(main, x, cond, grad_out, mcache)
        grad = np.zeros(self.n_params, dtype=theta.dtype)
        a, b = self.main_m.n_params, self.time_m.n_params
        grad[:a] = gmain
        gt = gcond[..., :self.time_dim]
        gs = gcond[..., self.time_dim:]
        gtable = grad[a + b:].reshape(self.n_styles + 1, self.style_dim)
        if gcond.ndim == 1:
            ghead, _, _ = mlp_backward(head, np.atleast_2d(temb_in), None, gt[None], tcache)
            gtable[int(self._rows(c))] += gs
        else:
            ghead, _, _ = mlp_backward(head, temb_in, None, gt, tcache)
            rows = np.broadcast_to(self._rows(c), (x.shape[0],))
            np.add.at(gtable, rows, gs)
        grad[a:a + b] = ghead
        return grad

    def predict(self, x, i, c, use_ema: bool = True) -> np.ndarray:
        return self.forward(np.atleast_2d(x), i, c, theta=self.params(use_ema))

    def normalize(self, windows: np.ndarray) -> np.ndarray:
        return (windows.reshape(windows.shape[0], -1) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return (z * self.std + self.mean).reshape(z.shape[0], self.H, self.D)

    # -- checkpoint ---------------------------------------------------------
    def manifest(self) -> dict:
        return {"kind": "smp-denoiser", "main": self.main_m.to_dict(),
                "time_head": self.time_m.to_dict(), "H": self.H, "D": self.D,
                "n_styles": self.n_styles, "style_names": list(self.style_names),
                "style_dim": self.style_dim, "time_dim": self.time_dim,
                "ema_decay": self.ema.decay, "skip": self.skip,
                "schedule": {"N": self.schedule.N, "kind": self.schedule.kind,
                             "offset": self.schedule.offset}}

    def save(self, path: str | Path) -> None:
        write_checkpoint(path, self.manifest(), self.theta, self.ema.shadow,
                         {"norm_mean": self.mean, "norm_std": self.std})

    @classmethod
    def load(cls, path: str | Path) -> "Denoiser":
        man, theta, ema, arrays = read_checkpoint(path)
        if man.get("kind") != "smp-denoiser":
            raise ConfigError(f"{path}: not a denoiser checkpoint")
        sch = build_schedule(man["schedule"]["N"], man["schedule"]["kind"], man["schedule"]["offset"])
        main = Manifest.from_dict(man["main"])
        head = Manifest.from_dict(man["time_head"])
        m = cls(man["H"], man["D"], man["n_styles"], sch, hidden=main.sizes[1:-1],
                time_dim=man["time_dim"], time_hidden=head.sizes[1], style_dim=man["style_dim"],
                mean=arrays["norm_mean"], std=arrays["norm_std"],
                style_names=tuple(man["style_names"]), ema_decay=man["ema_decay"],
                skip=man.get("skip", False))
        if theta.size != m.n_params:
            raise ConfigError(f"{path}: parameter count mismatch")
        m.theta = theta
        m.ema = EmaShadow(man["ema_decay"], ema if ema is not None else theta.copy())
        return m


def ddpm_loss(model, x0: np.ndarray, c, rng: np.random.Generator, theta=None,
              with_grad: bool = True):
    """Simple DDPM objective: mean over the batch of ||eps - f(x^i, i, c)||^2.

    Steps are drawn uniformly from 1..N and noise from N(0, I). Returns
    ``(loss, grad)`` (grad is None when ``with_grad`` is False).
    """
    B = x0.shape[0]
    N = model.schedule.N
    i = rng.integers(1, N + 1, B)
    eps = rng.standard_normal(x0.shape)
    xi = forward_diffuse(model.schedule, x0, i, eps)
    theta = model.theta if theta is None else theta
    if theta.dtype != np.float64:
        xi, eps = xi.astype(theta.dtype), eps.astype(theta.dtype)
    if with_grad:
        pred, fc = model.forward(xi, i, c, theta=theta, cache=True)
    else:
        pred, fc = model.forward(xi, i, c, theta=theta), None
    r = pred - eps
    loss = float(np.sum(r * r, dtype=np.float64) / B)
    if not np.isfinite(loss):
        raise TrainingError("non-finite DDPM loss")
    if not with_grad:
        return loss, None
    return loss, model.backward(fc, 2.0 * r / B)


@dataclass
class PriorConfig:
    steps: int = 20_000
    batch: int = 256
    lr: float = 3e-4
    ema_decay: float = 0.999
    cond_dropout: float = 0.1
    N: int = 50
    hidden: tuple[int, ...] = (256, 256, 256)
    seed: int = 0
    log_every: int = 500
    lr_warmup: int = 200
    lr_schedule: str = "constant"    # or "cosine": decay to zero over the run
    # forward/backward precision; master weights, Adam and EMA stay float64
    compute_dtype: str = "float32"


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    initial_loss: float = float("nan")


def normalization_stats(flat: np.ndarray, floor: float = STD_FLOOR):
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), floor)
    return mean, std


def train_prior(windows: np.ndarray, labels: np.ndarray | None, cfg: PriorConfig,
                style_names: tuple[str, ...] = (), progress=None) -> tuple[Denoiser, TrainLog]:
    """Fit a denoiser to dataset windows (n, H, D); returns the model and loss log.

    With ``labels`` the model is style-conditioned and labels are replaced by
    NULL with probability ``cfg.cond_dropout``; without, it is unconditional.
    """
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ConfigError("need a non-empty (n, H, D) window array")
    n, H, D = windows.shape
    rng = np.random.default_rng(cfg.seed)
    flat = windows.reshape(n, -1)
    mean, std = normalization_stats(flat)
    data = (flat - mean) / std
    n_styles = 0 if labels is None else int(max(len(style_names), labels.max() + 1))
    model = Denoiser(H, D, n_styles, build_schedule(cfg.N), hidden=tuple(cfg.hidden), rng=rng,
                     mean=mean, std=std, style_names=style_names, ema_decay=cfg.ema_decay)
    opt = Adam(model.n_params, lr=cfg.lr)
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ConfigError("lr_schedule must be constant or cosine")
    if cfg.compute_dtype not in ("float32", "float64"):
        raise ConfigError("compute_dtype must be float32 or float64")
    dtype = np.dtype(cfg.compute_dtype)
    logbook = TrainLog()
    over, window_loss = 0, None
    for step in range(cfg.steps):
        idx = rng.integers(0, n, cfg.batch)
        if labels is None:
            c = np.full(cfg.batch, NULL)
        else:
            c = np.where(rng.random(cfg.batch) < cfg.cond_dropout, NULL, labels[idx])
        theta = model.theta if dtype == np.float64 else model.theta.astype(dtype)
        loss, grad = ddpm_loss(model, data[idx], c, rng, theta=theta)
        grad = grad.astype(np.float64, copy=False)
        if step == 0:
            logbook.initial_loss = loss
        lr = cfg.lr * min(1.0, (step + 1) / max(cfg.lr_warmup, 1))
        if cfg.lr_schedule == "cosine":
            lr *= 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))
        opt.step(model.theta, grad, lr)
        # EMA warmup so early shadows are not dominated by the random init
        model.ema.decay = min(cfg.ema_decay, (1.0 + step) / (10.0 + step))
        ema_update(model.ema, model.theta)
        window_loss = loss if window_loss is None else 0.99 * window_loss + 0.01 * loss
        over = over + 1 if loss > 10 * logbook.initial_loss else 0
        if over >= 1000:
            raise TrainingError(
                f"diverged: loss {loss:.4g} above 10x initial {logbook.initial_loss:.4g} "
                f"for 1000 steps", step=step)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logbook.steps.append(step)
            logbook.losses.append(window_loss)
            log.info("prior step %d loss %.4f", step, window_loss)
            if progress:
                progress(step, window_loss)
    model.ema.decay = cfg.ema_decay
    return model, logbook


# ---------------------------------------------------------------------------
# guided prediction and sampling


def cfg_predict(model: Denoiser, x: np.ndarray, i, c: int, w_cfg: float,
                use_ema: bool = True) -> np.ndarray:
    """f(x, NULL) + w (f(x, c) - f(x, NULL)); a single call when w == 1 or c is NULL."""
    cond = model.predict(x, i, c, use_ema)
    if w_cfg == 1.0 or c == NULL:
        return cond
    uncond = model.predict(x, i, NULL, use_ema)
    return uncond + w_cfg * (cond - uncond)


def check_partition(mask_a: np.ndarray, mask_b: np.ndarray) -> None:
    a, b = np.asarray(mask_a), np.asarray(mask_b)
    if a.shape != b.shape or not np.all((a == 0) | (a == 1)) or not np.all((b == 0) | (b == 1)):
        raise InputError("masks must be binary and of equal shape")
    if not (np.all(a + b == 1) and np.all(a * b == 0)):
        raise InputError("masks do not partition the feature vector")


def compose_styles(model: Denoiser, x: np.ndarray, i, c_a: int, c_b: int,
                   mask_a: np.ndarray, mask_b: np.ndarray, w_cfg: float = 1.0,
                   use_ema: bool = True) -> np.ndarray:
    """mask_a * f(x, c_a) + mask_b * f(x, c_b)."""
    check_partition(mask_a, mask_b)
    fa = cfg_predict(model, x, i, c_a, w_cfg, use_ema)
    if c_a == c_b:
        return fa
    fb = cfg_predict(model, x, i, c_b, w_cfg, use_ema)
    return np.where(np.asarray(mask_a) == 1, fa, fb)


def directive_masks(model: Denoiser, directive: StyleDirective):
    a = limb_mask(model.H, directive.mask)
    return a, 1.0 - a


def directed_predict(model: Denoiser, x: np.ndarray, i, directive: StyleDirective) -> np.ndarray:
    if directive.compose is not None:
        ma, mb = directive_masks(model, directive)
        return compose_styles(model, x, i, directive.compose[0], directive.compose[1], ma, mb,
                              directive.w_cfg)
    return cfg_predict(model, x, i, directive.label, directive.w_cfg)


def posterior_step(sch: NoiseSchedule, x: np.ndarray, eps: np.ndarray, i: int,
                   noise: np.ndarray | None) -> np.ndarray:
    """One ancestral step x^i -> x^{i-1} from an epsilon prediction.

    The implied clean window x0 = (x - sqrt(1 - ab_i) eps) / sqrt(ab_i) is
    clamped to [-CLAMP, CLAMP] before forming the posterior mean, since 1/sqrt(ab_i)
    amplifies prediction error at the noisiest steps.
    """
    ab = sch.alpha_bar[i - 1]
    ab_prev = sch.alpha_bar[i - 2] if i > 1 else 1.0
    beta, alpha = sch.beta[i - 1], sch.alpha[i - 1]
    x0 = np.clip((x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -CLAMP, CLAMP)
    mean = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * x) / (1.0 - ab)
    if i == 1 or noise is None:
        return mean
    return mean + np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) * noise


def sample_reverse(model: Denoiser, directive: StyleDirective, rng: np.random.Generator,
                   n: int = 1) -> np.ndarray:
    """Ancestral DDPM sampling with guidance; returns n z-space windows (n, H*D)."""
    sch = model.schedule
    x = rng.standard_normal((n, model.dim))
    for i in range(sch.N, 0, -1):
        eps = directed_predict(model, x, i, directive)
        noise = rng.standard_normal(x.shape) if i > 1 else None
        x = np.clip(posterior_step(sch, x, eps, i, noise), -CLAMP, CLAMP)
    return x
