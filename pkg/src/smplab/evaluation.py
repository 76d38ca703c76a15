"""Evaluation: DTW tracking error, MMD, rule-based style classifier, reward ablation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvParams, EnvState, body_points
from .diffusion import StyleDirective, sample_reverse
from .errors import InputError
from .gait import STYLE_NAMES, STYLES, gait_frequency, zero_crossing_frequency
from .prior import SmpPrior, smp_reward

# ---------------------------------------------------------------------------
# dynamic time warping


@dataclass
class AlignmentResult:
    path: list[tuple[int, int]]
    error: float      # total cost / path length
    total: float


def frame_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cost between frames of a (n, ...) and b (m, ...).

    Frames shaped (P, 2) are point sets and cost the mean Euclidean distance
    over points; flat frames cost their Euclidean distance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.ndim == 2:
        a, b = a[:, None, :], b[:, None, :]
    d = a[:, None] - b[None, :]
    return np.sqrt(np.sum(d * d, axis=-1)).mean(axis=-1)


def dtw_align(traj_a: np.ndarray, traj_b: np.ndarray, cost: np.ndarray | None = None) -> AlignmentResult:
    """Classic DTW with steps (1,0), (0,1), (1,1); ties prefer the diagonal."""
    if len(traj_a) == 0 or len(traj_b) == 0:
        raise InputError("DTW needs non-empty sequences")
    c = frame_cost(traj_a, traj_b) if cost is None else np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = c[i - 1, j - 1] + min(D[i - 1, j - 1], D[i - 1, j], D[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        moves = ((D[i - 1, j - 1], i - 1, j - 1), (D[i - 1, j], i - 1, j), (D[i, j - 1], i, j - 1))
        _, i, j = min(moves, key=lambda t: t[0])  # min keeps the first (diagonal) on ties
        path.append((i - 1, j - 1))
    path.reverse()
    total = float(D[n, m])
    return AlignmentResult(path, total / len(path), total)


def tracking_points(states: EnvState, params: EnvParams = EnvParams()) -> np.ndarray:
    """Root and limb-tip positions per frame, (T, 3, 2)."""
    return body_points(states, params)


def tracking_error(sim: EnvState, ref: EnvState, params: EnvParams = EnvParams(),
                   align_start: bool = True) -> AlignmentResult:
    """DTW position error between two state sequences.

    With ``align_start`` both sequences are first moved into the frame of their
    own first state, so the error ignores global placement and heading.
    """
    a, b = tracking_points(sim, params), tracking_points(ref, params)
    if align_start:
        a, b = _to_first_frame(a, sim), _to_first_frame(b, ref)
    return dtw_align(a, b)


def clip_initializer(clip_states: EnvState, starts, H: int):
    """Episodes that begin on a reference clip: episode j replays frames
    starts[j] .. starts[j] + H - 1 as its history."""
    starts = np.asarray(starts, dtype=np.int64)

    def init(n, rng):
        idx = starts[np.arange(n) % len(starts)][:, None] + np.arange(H)
        hist = clip_states[idx]
        hist.t = np.broadcast_to(np.arange(-(H - 1), 1), idx.shape).copy()
        state = hist[:, -1].copy()
        state.t = np.zeros(n, dtype=np.int64)
        return state, hist
    return init


def imitation_error(policy, task_name: str, clip_states: EnvState, n_starts: int = 8, H: int = 10,
                    min_len: int = 30, params: EnvParams = EnvParams()) -> dict:
    """DTW tracking error of rollouts started on the reference clip.

    Start frames are spread over the clip so every gait phase is covered; each
    rollout is compared with the remainder of the clip after its start.
    """
    from .ppo import evaluate_policy
    T = clip_states.shape[0]
    if T < H + min_len:
        raise InputError(f"reference clip of {T} frames is too short")
    starts = np.unique(np.linspace(0, T - H - min_len, n_starts).astype(np.int64))
    errors = []
    for s in starts:
        ref = clip_states[s + H - 1:]
        ro = evaluate_policy(policy, task_name, 1, ref.shape[0] - 1, np.random.default_rng(0),
                             initializer=clip_initializer(clip_states, [s], H), params=params, H=H)
        errors.append(tracking_error(ro.states[:, 0], ref, params).error)
    errors = np.array(errors)
    return {"starts": starts, "errors": errors, "mean": float(errors.mean()), "max": float(errors.max())}


def _to_first_frame(points: np.ndarray, states: EnvState) -> np.ndarray:
    th = -float(states.heading[0])
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return (points - states.pos[0]) @ R.T


# ---------------------------------------------------------------------------
# maximum mean discrepancy


def _sorted_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return x[np.lexsort(x.T[::-1])]


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([_sorted_rows(a), _sorted_rows(b)])
    d = _sqdist(pooled, pooled)
    iu = np.triu_indices(len(pooled), 1)
    med = float(np.median(np.sqrt(d[iu])))
    return med if med > 0 else 1.0


def mmd_unbiased(samples_a: np.ndarray, samples_b: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased RBF MMD^2 estimate (may be slightly negative)."""
    a, b = _sorted_rows(samples_a), _sorted_rows(samples_b)
    if len(a) < 2 or len(b) < 2:
        raise InputError("MMD needs at least two samples per set")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    g = 1.0 / (2.0 * h * h)
    kaa, kbb, kab = np.exp(-g * _sqdist(a, a)), np.exp(-g * _sqdist(b, b)), np.exp(-g * _sqdist(a, b))
    n, m = len(a), len(b)
    taa = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    tbb = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    return float(taa + tbb - 2.0 * kab.mean())


def mmd_biased(samples_a: np.ndarray, samples_b: np.ndarray, bandwidth: float | None = None) -> float:
    a, b = _sorted_rows(samples_a), _sorted_rows(samples_b)
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    g = 1.0 / (2.0 * h * h)
    return float(np.exp(-g * _sqdist(a, a)).mean() + np.exp(-g * _sqdist(b, b)).mean()
                 - 2.0 * np.exp(-g * _sqdist(a, b)).mean())


def mmd(samples_a: np.ndarray, samples_b: np.ndarray, bandwidth: float | None = None) -> float:
    """max(0, unbiased MMD^2) with an RBF kernel; median-heuristic bandwidth by default."""
    return max(0.0, mmd_unbiased(samples_a, samples_b, bandwidth))


# ---------------------------------------------------------------------------
# style classifier


@dataclass
class StyleVerdict:
    style: str
    limb_styles: tuple[str, str]
    frequency: np.ndarray   # Hz per limb
    amplitude: np.ndarray   # rad per limb
    offset: np.ndarray      # rad per limb


ZOMBIE_RIGID_AMPLITUDE = 0.1


def _limb_distances(amplitude: np.ndarray, offset: np.ndarray, styles=STYLE_NAMES) -> np.ndarray:
    """(n_styles, 2) distance of each limb's (amplitude, offset) to each style."""
    ref_a = np.array([STYLES[s].amplitude for s in styles])
    ref_o = np.array([STYLES[s].offset for s in styles])
    return np.hypot(amplitude - ref_a, offset - ref_o)


def verdict_from_stats(frequency, amplitude, offset, styles=STYLE_NAMES) -> StyleVerdict:
    amplitude, offset = np.asarray(amplitude, float), np.asarray(offset, float)
    d = _limb_distances(amplitude, offset, styles)
    limbs = [styles[int(np.argmin(d[:, k]))] for k in range(2)]
    if "zombie" in styles and amplitude[0] < ZOMBIE_RIGID_AMPLITUDE \
            and abs(offset[0] - STYLES["zombie"].offset[0]) < 0.3:
        limbs[0] = "zombie"
    style = styles[int(np.argmin(d.sum(axis=1)))]
    return StyleVerdict(style, (limbs[0], limbs[1]), np.asarray(frequency, float), amplitude, offset)


def classify_style(q: np.ndarray, dt: float, styles=STYLE_NAMES) -> StyleVerdict:
    """Classify a limb-angle trajectory q of shape (T, 2).

    Frequency comes from zero crossings; amplitude is sqrt(2) times the
    standard deviation (exact for a sinusoid); offset is the mean.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 2 or q.shape[0] < 3:
        raise InputError("trajectory must be (T >= 3, 2) limb angles")
    freq = np.array([zero_crossing_frequency(q[:, k], dt) for k in range(2)])
    amp = np.sqrt(2.0) * q.std(axis=0)
    off = q.mean(axis=0)
    return verdict_from_stats(freq, amp, off, styles)


def fit_sinusoid(q: np.ndarray, qd: np.ndarray, omega: float, dt: float):
    """Least-squares fit of q = a sin(wt) + b cos(wt) + c using q and qd / w.

    Returns (amplitude, offset) per column of q (T, k).
    """
    T = q.shape[0]
    t = np.arange(T) * dt
    s, c = np.sin(omega * t), np.cos(omega * t)
    one, zero = np.ones(T), np.zeros(T)
    A = np.concatenate([np.stack([s, c, one], 1), np.stack([c, -s, zero], 1)])
    y = np.concatenate([q, qd / omega])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return np.hypot(coef[0], coef[1]), coef[2]


def classify_window(features: np.ndarray, dt: float = 1 / 30, styles=STYLE_NAMES) -> StyleVerdict:
    """Classify a short (H, D) feature window.

    The gait frequency is read from the window's mean root speed through the
    generator's speed-frequency relation, then amplitude and offset come from
    a sinusoid fit to the limb angles and velocities.
    """
    f = np.asarray(features, dtype=np.float64)
    q = np.stack([np.arctan2(f[:, 4], f[:, 3]), np.arctan2(f[:, 6], f[:, 5])], -1)
    qd = f[:, 7:9]
    speed = float(np.mean(np.hypot(f[:, 0], f[:, 1])))
    freq = float(gait_frequency(max(speed, 0.0)))
    amp, off = fit_sinusoid(q, qd, 2 * np.pi * freq, dt)
    return verdict_from_stats(np.array([freq, freq]), amp, off, styles)


def style_accuracy(windows: np.ndarray, label: str, dt: float = 1 / 30) -> float:
    return float(np.mean([classify_window(w, dt).style == label for w in windows]))


# ---------------------------------------------------------------------------
# reward ablation and task metrics


def reward_spread(prior: SmpPrior, z: np.ndarray, trials: int, rng: np.random.Generator) -> np.ndarray:
    """(n_windows, trials) rewards from repeated frozen-statistics evaluations."""
    out = np.empty((z.shape[0], trials))
    for t in range(trials):
        out[:, t] = smp_reward(prior, z, rng, update_stats=False).reward
    return out


def ablation_ensemble_vs_random(ensemble: SmpPrior, random: SmpPrior, z: np.ndarray, trials: int,
                                rng: np.random.Generator, contrast: np.ndarray | None = None) -> dict:
    """Per-window reward mean/std for both reward modes on fixed windows.

    ``contrast`` (optional, same shape as z) gives off-distribution windows
    for the discrimination gap mean r(z) - mean r(contrast).
    """
    report = {}
    for name, prior in (("ensemble", ensemble), ("random", random)):
        r = reward_spread(prior, z, trials, rng)
        report[f"{name}_mean"] = r.mean(axis=1)
        report[f"{name}_std"] = r.std(axis=1)
        if contrast is not None:
            rc = reward_spread(prior, contrast, trials, rng)
            report[f"{name}_gap"] = float(r.mean() - rc.mean())
    report["fraction_ensemble_lower"] = float(np.mean(report["ensemble_std"] < report["random_std"]))
    return report


def reward_discrimination(prior: SmpPrior, z: np.ndarray, rng: np.random.Generator,
                          sigma: float = 0.5, warm: np.ndarray | None = None) -> dict:
    """Mean reward on data windows, on the same windows plus sigma-noise, and on pure noise.

    All three live in the prior's z-space. ``warm`` windows, if given, set the
    running error means first; the three evaluations leave them untouched.
    """
    if warm is not None:
        smp_reward(prior, warm, rng, update_stats=True)
    pert = z + sigma * rng.standard_normal(z.shape)
    noise = rng.standard_normal(z.shape)
    out = {name: float(smp_reward(prior, x, rng, update_stats=False).reward.mean())
           for name, x in (("data", z), ("perturbed", pert), ("noise", noise))}
    out["gap_data_perturbed"] = out["data"] - out["perturbed"]
    out["gap_perturbed_noise"] = out["perturbed"] - out["noise"]
    return out


def marginal_samples(model, rng: np.random.Generator, n: int, label_freq=None,
                     w_cfg: float = 1.0) -> np.ndarray:
    """n z-space samples from the model's data marginal.

    A style-conditioned model is sampled per label, with label counts drawn
    from ``label_freq`` (uniform by default); an unconditional model uses NULL.
    """
    if model.n_styles == 0:
        return sample_reverse(model, StyleDirective(), rng, n)
    p = np.full(model.n_styles, 1.0 / model.n_styles) if label_freq is None else \
        np.asarray(label_freq, dtype=np.float64) / np.sum(label_freq)
    counts = rng.multinomial(n, p)
    parts = [sample_reverse(model, StyleDirective(label=k, w_cfg=w_cfg), rng, int(m))
             for k, m in enumerate(counts) if m > 0]
    return np.concatenate(parts)


def prior_fidelity(model, held_out: np.ndarray, rng: np.random.Generator, n: int = 512,
                   held_labels: np.ndarray | None = None, repeats: int = 1,
                   w_cfg: float = 1.0) -> dict:
    """Distribution and style fidelity of a trained prior.

    ``mmd_ratio`` is MMD(samples, held-out) / MMD(standard normal, held-out)
    in z-space, each term from n vs n windows and averaged over ``repeats``
    independent draws. Samples follow the model's marginal (see
    :func:`marginal_samples`) with label frequencies from ``held_labels``.
    ``accuracy_<style>`` is the classifier accuracy on n // 2 samples
    conditioned on that style.
    """
    held = model.normalize(np.asarray(held_out, dtype=np.float64))
    freq = None if held_labels is None else np.bincount(held_labels, minlength=model.n_styles)
    m_s, m_r = [], []
    for _ in range(repeats):
        h = held[np.sort(rng.choice(len(held), min(n, len(held)), replace=False))]
        m_s.append(mmd(marginal_samples(model, rng, n, freq, w_cfg), h))
        m_r.append(mmd(rng.standard_normal((n, model.dim)), h))
    report = {"mmd": float(np.mean(m_s)), "mmd_random": float(np.mean(m_r))}
    report["mmd_ratio"] = report["mmd"] / max(report["mmd_random"], 1e-300)
    for k, name in enumerate(model.style_names):
        w = model.denormalize(sample_reverse(model, StyleDirective(label=k, w_cfg=w_cfg), rng, n // 2))
        report[f"accuracy_{name}"] = style_accuracy(w, name)
    return report


def normalized_task_return(task_rewards: np.ndarray) -> float:
    """Mean per-step task reward; 1.0 is a perfect episode since r^g <= 1."""
    return float(np.mean(task_rewards))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Correlation coefficient; nan when either input is constant."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def speed_sweep(policy, speeds, rng: np.random.Generator, episodes: int = 4, steps: int = 300,
                settle: int = 90, initializer=None, params: EnvParams = EnvParams()) -> dict:
    """Target Speed policy held at each commanded speed in turn.

    After ``settle`` steps the mean root speed and the mean limb frequency are
    measured. ``freq_pearson`` correlates limb frequency with the gait
    generator's f(v) at the measured speed.
    """
    from .ppo import evaluate_policy
    speeds = np.asarray(speeds, dtype=np.float64)
    measured, freq = np.empty(len(speeds)), np.empty(len(speeds))
    for j, v in enumerate(speeds):
        ro = evaluate_policy(policy, "target_speed", episodes, steps, rng, initializer=initializer,
                             params=params, task_kwargs={"speed_range": (v, v)})
        measured[j] = np.linalg.norm(ro.states.vel[settle:], axis=-1).mean()
        freq[j] = np.mean([classify_style(ro.states.q[settle:, k], params.dt).frequency.mean()
                           for k in range(episodes)])
    rel = np.abs(measured - speeds) / speeds
    return {"speeds": speeds, "measured": measured, "relative_error": rel, "frequency": freq,
            "max_relative_error": float(rel.max()),
            "freq_pearson": pearson(freq, gait_frequency(measured))}


def svg_line_plot(path, series: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "",
                  xlabel: str = "", ylabel: str = "") -> None:
    """Small dependency-free SVG line chart."""
    W, Hh, pad = 640, 400, 50
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (W - 2 * pad), Hh - pad - (y - y0) / (y1 - y0) * (Hh - 2 * pad))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}">',
             f'<rect width="{W}" height="{Hh}" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>',
             f'<text x="{W / 2}" y="{Hh - 10}" text-anchor="middle">{xlabel}</text>',
             f'<text x="12" y="{Hh / 2}" transform="rotate(-90 12 {Hh / 2})" text-anchor="middle">{ylabel}</text>',
             f'<text x="{pad}" y="{Hh - pad + 15}" font-size="10">{x0:.3g}</text>',
             f'<text x="{W - pad}" y="{Hh - pad + 15}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="{pad - 5}" y="{Hh - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
             f'<text x="{pad - 5}" y="{pad}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for k, (name, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in (px(u, v) for u, v in zip(x, y)))
        col = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{W - pad}" y="{pad + 15 * k}" fill="{col}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
