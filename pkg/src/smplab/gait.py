"""Procedural stylized gait clips and the binary dataset file.

Limb k of a clip follows ``A_k sin(2 pi f(v) t + phi_k + phase0) + offset_k``
with ``f(v) = 0.6 + 0.35 v`` Hz, while the root moves at speed v along a
heading that turns at a constant rate.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import FEATURE_DIM, EnvParams, EnvState, extract_features
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class StyleParams:
    amplitude: tuple[float, float]
    offset: tuple[float, float]
    phase: tuple[float, float]


STYLES: dict[str, StyleParams] = {
    "neutral": StyleParams((0.6, 0.6), (0.0, 0.0), (0.0, np.pi)),
    "highknees": StyleParams((1.0, 1.0), (0.4, 0.4), (0.0, np.pi)),
    "zombie": StyleParams((0.0, 0.3), (np.pi / 4, -0.4), (0.0, np.pi)),
}
STYLE_NAMES = tuple(STYLES)


def gait_frequency(speed) -> np.ndarray:
    """Limb oscillation frequency in Hz for a root speed in m/s."""
    return 0.6 + 0.35 * np.asarray(speed, dtype=np.float64)


@dataclass
class Clip:
    style: str
    speed: float
    turn_rate: float
    states: EnvState  # shape (n_frames,)

    @property
    def n_frames(self) -> int:
        return self.states.shape[0]


@dataclass
class GaitDataset:
    H: int
    fps: float
    styles: tuple[str, ...]
    windows: np.ndarray          # (n, H, D)
    labels: np.ndarray           # (n,) index into styles
    clip_ids: np.ndarray         # (n,)
    clips: list[Clip] = field(default_factory=list)
    preset: str = "custom"

    @property
    def D(self) -> int:
        return self.windows.shape[-1]

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]

    def flat(self) -> np.ndarray:
        return self.windows.reshape(self.n_windows, -1)


def make_clip(style: str, speed: float, duration: float, rng: np.random.Generator,
              turn_rate: float = 0.0, params: EnvParams = EnvParams()) -> Clip:
    if style not in STYLES:
        raise InputError(f"unknown style {style!r}; choose from {STYLE_NAMES}")
    if not 0.0 <= speed <= params.speed_cap:
        raise InputError(f"speed {speed} outside [0, {params.speed_cap}]")
    sp = STYLES[style]
    dt = params.dt
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    phase0 = rng.uniform(0.0, 2 * np.pi)
    heading0 = rng.uniform(-np.pi, np.pi)
    w = 2 * np.pi * gait_frequency(speed)

    heading = heading0 + turn_rate * t
    vel = speed * np.stack([np.cos(heading), np.sin(heading)], -1)
    pos = np.zeros((n, 2))
    pos[1:] = np.cumsum(dt * vel[1:], axis=0)   # p' = p + dt v', as the integrator does
    pos += rng.uniform(-5.0, 5.0, 2)

    arg = w * t[:, None] + np.asarray(sp.phase) + phase0
    amp = np.asarray(sp.amplitude)
    q = amp * np.sin(arg) + np.asarray(sp.offset)
    qd = amp * w * np.cos(arg)
    states = EnvState(pos, (heading + np.pi) % (2 * np.pi) - np.pi, vel,
                      np.full(n, float(turn_rate)), q, qd, np.arange(n))
    return Clip(style, float(speed), float(turn_rate), states)


def clip_windows(clip: Clip, H: int, params: EnvParams = EnvParams()) -> np.ndarray:
    """All stride-1 windows of a clip as features, shape (n_frames - H + 1, H, D)."""
    n = clip.n_frames - H + 1
    if n <= 0:
        raise InputError(f"clip of {clip.n_frames} frames is shorter than H={H}")
    idx = np.arange(n)[:, None] + np.arange(H)[None, :]
    return extract_features(clip.states[idx], params)


PRESETS = {
    # three styles, 20 clips each, random speeds and gentle turns
    "styles": dict(styles=STYLE_NAMES, clips_per_style=20, duration=4.0,
                   speed_range=(0.0, 4.5), turn_range=(-1.0, 1.0)),
    # walk-jog-run: one neutral clip per speed, 1 s each, straight line
    "walk_jog_run": dict(styles=("neutral",), speeds=(1.5, 3.0, 5.0), duration=1.0,
                         turn_range=(0.0, 0.0)),
    # one neutral clip for single-clip imitation
    "single_clip": dict(styles=("neutral",), speeds=(2.0,), duration=2.0,
                        turn_range=(0.0, 0.0)),
}


def generate_gait_dataset(rng: np.random.Generator, styles=STYLE_NAMES, speed_range=(0.0, 4.5),
                          clips_per_style: int = 20, duration: float = 4.0,
                          speeds=None, turn_range=(0.0, 0.0), H: int = 10,
                          params: EnvParams = EnvParams(), preset: str = "custom") -> GaitDataset:
    """Generate clips and cut them into H-frame feature windows.

    With ``speeds`` given, each style gets exactly one clip per listed speed;
    otherwise ``clips_per_style`` speeds are drawn uniformly from ``speed_range``.
    """
    if H < 2:
        raise InputError("H must be at least 2")
    for s in styles:
        if s not in STYLES:
            raise InputError(f"unknown style {s!r}; choose from {STYLE_NAMES}")
    clips = []
    for s in styles:
        clip_speeds = speeds if speeds is not None else rng.uniform(*speed_range, clips_per_style)
        for v in clip_speeds:
            turn = rng.uniform(*turn_range) if turn_range[1] > turn_range[0] else turn_range[0]
            clips.append(make_clip(s, float(v), duration, rng, turn, params))
    windows, labels, ids = [], [], []
    for k, c in enumerate(clips):
        w = clip_windows(c, H, params)
        windows.append(w)
        labels.append(np.full(len(w), styles.index(c.style)))
        ids.append(np.full(len(w), k))
    return GaitDataset(H, 1.0 / params.dt, tuple(styles), np.concatenate(windows),
                       np.concatenate(labels), np.concatenate(ids), clips, preset)


def generator_windows(rng: np.random.Generator, n: int, styles=STYLE_NAMES, speed_range=(0.0, 4.5),
                      turn_range=(-1.0, 1.0), H: int = 10, params: EnvParams = EnvParams()):
    """n windows, each cut from its own freshly generated clip.

    Unlike the windows of a finite dataset these are i.i.d. draws from the
    generator, which makes them a clean held-out reference set.
    Returns ``(windows (n, H, D), labels (n,))``.
    """
    labels = rng.integers(0, len(styles), n)
    out = np.empty((n, H, FEATURE_DIM))
    for k in range(n):
        clip = make_clip(styles[labels[k]], float(rng.uniform(*speed_range)), H * params.dt, rng,
                         float(rng.uniform(*turn_range)), params)
        out[k] = clip_windows(clip, H, params)[0]
    return out, labels


def held_out_split(ds: GaitDataset, frac: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks ``(train, held_out)`` over the windows of ``ds``.

    Held-out windows lie entirely in the last ``frac`` of each clip's frames and
    training windows entirely before it, so the two sets share no frame.
    """
    if not 0.0 < frac < 1.0:
        raise InputError("frac must be in (0, 1)")
    first = np.zeros(ds.n_windows, dtype=np.int64)
    starts = np.flatnonzero(np.r_[True, ds.clip_ids[1:] != ds.clip_ids[:-1]])
    for s, e in zip(starts, np.r_[starts[1:], ds.n_windows]):
        first[s:e] = s
    start = np.arange(ds.n_windows) - first
    n_frames = np.array([ds.clips[k].n_frames for k in ds.clip_ids]) if ds.clips else \
        np.bincount(ds.clip_ids)[ds.clip_ids] + ds.H - 1
    cut = np.floor((1.0 - frac) * n_frames).astype(np.int64)
    held = start >= cut
    train = start + ds.H <= cut
    return train, held


def preset_dataset(name: str, seed: int, H: int = 10, params: EnvParams = EnvParams()) -> GaitDataset:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return generate_gait_dataset(np.random.default_rng(seed), H=H, params=params,
                                 preset=name, **PRESETS[name])


def zero_crossing_frequency(x: np.ndarray, dt: float) -> float:
    """Frequency (Hz) from linearly interpolated crossings of the signal's mean."""
    y = np.asarray(x, dtype=np.float64) - np.mean(x)
    s = np.signbit(y)
    k = np.flatnonzero(s[1:] != s[:-1])
    if k.size < 2:
        return 0.0
    times = (k + y[k] / (y[k] - y[k + 1])) * dt
    return (k.size - 1) / (2.0 * (times[-1] - times[0]))


# ---------------------------------------------------------------------------
# dataset file:
#   b"SMPD" | u32 version | u32 len | header JSON
#   | f32 windows (n, H, D) | i32 labels (n) | i32 clip ids (n)
#   | per clip: f64 pos (n,2), heading, vel (n,2), omega, q (n,2), qd (n,2)
# little-endian throughout

DATA_MAGIC = b"SMPD"
DATA_VERSION = 1
_CLIP_FIELDS = (("pos", 2), ("heading", 0), ("vel", 2), ("omega", 0), ("q", 2), ("qd", 2))


def save_dataset(ds: GaitDataset, path: str | Path) -> None:
    header = {
        "H": ds.H, "D": ds.D, "fps": ds.fps, "styles": list(ds.styles), "n_windows": ds.n_windows,
        "preset": ds.preset,
        "clips": [{"style": c.style, "speed": c.speed, "turn_rate": c.turn_rate, "n_frames": c.n_frames}
                  for c in ds.clips],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<II", DATA_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.windows, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(ds.clip_ids, dtype="<i4").tobytes())
        for c in ds.clips:
            for name, _ in _CLIP_FIELDS:
                fh.write(np.ascontiguousarray(getattr(c.states, name), dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> GaitDataset:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != DATA_MAGIC:
        raise ConfigError(f"{path}: not an SMPD dataset file")
    version, n = struct.unpack("<II", raw[4:12])
    if version != DATA_VERSION:
        raise ConfigError(f"{path}: unsupported dataset version {version}")
    header = json.loads(raw[12:12 + n])
    off = 12 + n
    H, D, nw = header["H"], header["D"], header["n_windows"]
    if D != FEATURE_DIM:
        raise ConfigError(f"{path}: feature dim {D} != {FEATURE_DIM}")

    def take(dtype, count):
        nonlocal off
        a = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += a.nbytes
        return a

    windows = take("<f4", nw * H * D).astype(np.float64).reshape(nw, H, D)
    labels = take("<i4", nw).astype(np.int64)
    ids = take("<i4", nw).astype(np.int64)
    clips = []
    for c in header["clips"]:
        m = c["n_frames"]
        arrs = {}
        for name, width in _CLIP_FIELDS:
            a = take("<f8", m * max(width, 1)).astype(np.float64)
            arrs[name] = a.reshape(m, width) if width else a
        clips.append(Clip(c["style"], c["speed"], c["turn_rate"],
                          EnvState(**arrs, t=np.arange(m))))
    return GaitDataset(H, header["fps"], tuple(header["styles"]), windows, labels, ids, clips,
                       header.get("preset", "custom"))
