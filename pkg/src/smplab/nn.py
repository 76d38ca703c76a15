"""Small MLPs with hand-written backprop, FiLM conditioning, Adam and EMA.

Weights are float64; forward and backward can also run in float32 for speed.

Parameters of a network live in one flat array so that the optimizer, the EMA
shadow and the checkpoint writer never need to know the layer structure. A
:class:`Manifest` describes how to slice that array.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, TrainingError

ACTIVATIONS = ("tanh", "silu", "linear")


@dataclass(frozen=True)
class Manifest:
    """Layer sizes ``(n_in, hidden..., n_out)`` plus activation tags.

    Hidden layers use ``activation``; the last layer is always linear. When
    ``cond_dim > 0`` every hidden layer owns a FiLM head (scale and shift
    matrices of shape ``cond_dim x width``).
    """

    sizes: tuple[int, ...]
    activation: str = "tanh"
    cond_dim: int = 0

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) <= 0 for s in self.sizes):
            raise ConfigError(f"bad layer sizes {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.cond_dim < 0:
            raise ConfigError("cond_dim must be >= 0")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        dense = sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        film = sum(2 * self.cond_dim * w for w in self.sizes[1:-1])
        return dense + film

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "activation": self.activation,
                "cond_dim": self.cond_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(tuple(int(s) for s in d["sizes"]), d["activation"], int(d["cond_dim"]))


@dataclass
class _Views:
    W: list
    b: list
    Ws: list
    Wb: list


def _views(m: Manifest, theta: np.ndarray) -> _Views:
    if theta.shape != (m.n_params,):
        raise ConfigError(f"parameter array has shape {theta.shape}, manifest wants ({m.n_params},)")
    W, b, Ws, Wb = [], [], [], []
    k = 0
    for a, o in zip(m.sizes[:-1], m.sizes[1:]):
        W.append(theta[k:k + a * o].reshape(a, o))
        k += a * o
        b.append(theta[k:k + o])
        k += o
    for o in m.sizes[1:-1]:
        n = m.cond_dim * o
        Ws.append(theta[k:k + n].reshape(m.cond_dim, o))
        k += n
        Wb.append(theta[k:k + n].reshape(m.cond_dim, o))
        k += n
    return _Views(W, b, Ws, Wb)


@dataclass
class ParamSet:
    """A manifest plus the flat parameter vector it describes.

    ``theta`` may be a view into a larger array; in-place optimizer updates on
    the parent array are then visible here.
    """

    manifest: Manifest
    theta: np.ndarray

    def __post_init__(self):
        if self.theta.dtype not in (np.float64, np.float32):
            raise ConfigError("parameters must be float64 or float32")
        self._v = _views(self.manifest, self.theta)

    @property
    def weights(self) -> list[np.ndarray]:
        return self._v.W

    @property
    def biases(self) -> list[np.ndarray]:
        return self._v.b

    @property
    def film_scale(self) -> list[np.ndarray]:
        return self._v.Ws

    @property
    def film_shift(self) -> list[np.ndarray]:
        return self._v.Wb


def init_params(manifest: Manifest, rng: np.random.Generator,
                last_scale: float = 1.0) -> np.ndarray:
    """Scaled-uniform fan-in init; zero biases and zero FiLM heads.

    Each weight matrix has entries ~ U(-a, a) with a = gain * sqrt(3 / fan_in),
    giving variance gain^2 / fan_in. The last layer is further multiplied by
    ``last_scale``. Zero FiLM heads make a fresh network start out
    unconditioned.
    """
    theta = np.zeros(manifest.n_params)
    v = _views(manifest, theta)
    gain = {"tanh": 5.0 / 3.0, "silu": 1.7, "linear": 1.0}[manifest.activation]
    for l, W in enumerate(v.W):
        a = gain * np.sqrt(3.0 / W.shape[0])
        if l == len(v.W) - 1:
            a = np.sqrt(3.0 / W.shape[0]) * last_scale
        W[...] = rng.uniform(-a, a, size=W.shape)
    return theta


def _sigmoid(z: np.ndarray) -> np.ndarray:
    s = np.negative(z)
    with np.errstate(over="ignore"):   # exp overflow to inf gives the correct limit 0
        np.exp(s, out=s)
    s += 1.0
    return np.reciprocal(s, out=s)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "silu":
        return z * _sigmoid(z)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "silu":
        # s (1 + z (1 - s)) = s + h (1 - s) with h = z s
        s = _sigmoid(z)
        g = 1.0 - s
        g *= h
        g += s
        return g
    return np.ones_like(z)


@dataclass
class ForwardCache:
    x: np.ndarray
    cond: np.ndarray | None
    inputs: list = field(default_factory=list)   # input to each layer
    pre: list = field(default_factory=list)      # affine output before FiLM
    scales: list = field(default_factory=list)
    post: list = field(default_factory=list)     # after FiLM, before activation
    hidden: list = field(default_factory=list)   # after activation


def _check_input(m: Manifest, x: np.ndarray, cond):
    if x.ndim != 2 or x.shape[1] != m.n_in:
        raise ConfigError(f"input shape {x.shape} does not match manifest input size {m.n_in}")
    if cond is not None:
        if m.cond_dim == 0:
            raise ConfigError("network has no conditioning heads")
        if cond.shape[-1] != m.cond_dim or cond.ndim not in (1, 2):
            raise ConfigError(f"condition shape {cond.shape} does not match cond_dim {m.cond_dim}")
        if cond.ndim == 2 and cond.shape[0] != x.shape[0]:
            raise ConfigError("per-sample condition batch size mismatch")


def mlp_forward(params: ParamSet, x: np.ndarray, cond: np.ndarray | None = None,
                return_cache: bool = False):
    """Evaluate the network on a batch ``x`` of shape (B, n_in).

    ``cond`` is either one embedding (cond_dim,) shared by the batch or one per
    sample (B, cond_dim); ``None`` means unconditioned.
    """
    m = params.manifest
    squeeze = np.ndim(x) == 1
    # computation runs in the parameters' precision
    x = np.atleast_2d(np.asarray(x, dtype=params.theta.dtype))
    _check_input(m, x, cond)
    v = params._v
    cache = ForwardCache(x=x, cond=cond) if return_cache else None
    h = x
    last = m.n_layers - 1
    for l in range(m.n_layers):
        u = h @ v.W[l] + v.b[l]
        if l == last:
            out = u
            break
        if cond is not None:
            scale = 1.0 + cond @ v.Ws[l]
            z = u * scale + cond @ v.Wb[l]
        else:
            scale = None
            z = u
        hn = _act(m.activation, z)
        if cache is not None:
            cache.inputs.append(h)
            cache.pre.append(u)
            cache.scales.append(scale)
            cache.post.append(z)
            cache.hidden.append(hn)
        h = hn
    if cache is not None:
        cache.inputs.append(h)
    if squeeze:
        out = out[0]
    return (out, cache) if return_cache else out


def mlp_backward(params: ParamSet, x: np.ndarray, cond: np.ndarray | None,
                 output_grad: np.ndarray, cache: ForwardCache | None = None):
    """Backpropagate ``output_grad`` (dL/dy).

    Returns ``(param_grad, input_grad, cond_grad)``; ``param_grad`` is flat and
    aligned with ``params.theta``. ``cond_grad`` is None when unconditioned.
    Pass the cache from ``mlp_forward(..., return_cache=True)`` to skip the
    recomputation of activations.
    """
    m = params.manifest
    dt = params.theta.dtype
    x = np.atleast_2d(np.asarray(x, dtype=dt))
    gy = np.atleast_2d(np.asarray(output_grad, dtype=dt))
    if cache is None:
        _, cache = mlp_forward(params, x, cond, return_cache=True)
    if gy.shape != (x.shape[0], m.n_out):
        raise ConfigError(f"output_grad shape {gy.shape} does not match ({x.shape[0]}, {m.n_out})")
    v = params._v
    grad = np.zeros(m.n_params, dtype=dt)
    g = _views(m, grad)
    gcond = None
    if cond is not None:
        gcond = np.zeros((x.shape[0], m.cond_dim) if cond.ndim == 2 else m.cond_dim, dtype=dt)

    last = m.n_layers - 1
    h_in = cache.inputs[last]
    g.W[last][...] = h_in.T @ gy
    g.b[last][...] = gy.sum(axis=0)
    gh = gy @ v.W[last].T
    for l in range(last - 1, -1, -1):
        gz = gh * _act_grad(m.activation, cache.post[l], cache.hidden[l])
        if cond is not None:
            gscale = gz * cache.pre[l]
            gu = gz * cache.scales[l]
            if cond.ndim == 2:
                g.Ws[l][...] = cond.T @ gscale
                g.Wb[l][...] = cond.T @ gz
                gcond += gscale @ v.Ws[l].T + gz @ v.Wb[l].T
            else:
                gs_sum = gscale.sum(axis=0)
                gz_sum = gz.sum(axis=0)
                g.Ws[l][...] = np.outer(cond, gs_sum)
                g.Wb[l][...] = np.outer(cond, gz_sum)
                gcond += v.Ws[l] @ gs_sum + v.Wb[l] @ gz_sum
        else:
            gu = gz
        g.W[l][...] = cache.inputs[l].T @ gu
        g.b[l][...] = gu.sum(axis=0)
        gh = gu @ v.W[l].T
    return grad, gh, gcond


class Adam:
    """Adam with bias correction over a flat parameter vector."""

    def __init__(self, n: int, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        """Update ``theta`` in place and return it."""
        if grad.shape != theta.shape or theta.shape != self.m.shape:
            raise ConfigError("optimizer state, parameters and gradient lengths differ")
        if not np.all(np.isfinite(grad)):
            raise TrainingError("non-finite gradient", step=self.t + 1)
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m *= self.b1
        self.m += (1.0 - self.b1) * grad
        self.v *= self.b2
        buf = np.multiply(grad, grad)
        buf *= 1.0 - self.b2
        self.v += buf
        # theta -= lr * m_hat / (sqrt(v_hat) + eps)
        np.sqrt(self.v, out=buf)
        buf *= 1.0 / np.sqrt(1.0 - self.b2 ** self.t)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= lr / (1.0 - self.b1 ** self.t)
        theta -= buf
        return theta

    def state_dict(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}

    def load_state_dict(self, d: dict):
        self.m = np.array(d["m"], dtype=np.float64)
        self.v = np.array(d["v"], dtype=np.float64)
        self.t = int(d["t"])


def adam_step(params: np.ndarray, grads: np.ndarray, opt: Adam, lr: float | None = None) -> np.ndarray:
    return opt.step(params, grads, lr)


@dataclass
class EmaShadow:
    decay: float
    shadow: np.ndarray

    @classmethod
    def of(cls, theta: np.ndarray, decay: float) -> "EmaShadow":
        return cls(decay, theta.copy())


def ema_update(ema: EmaShadow, params: np.ndarray) -> EmaShadow:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if params.shape != ema.shadow.shape:
        raise ConfigError("EMA shadow and parameter lengths differ")
    ema.shadow *= ema.decay
    ema.shadow += (1.0 - ema.decay) * params
    return ema


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> float:
    """Rescale ``grad`` in place so its L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(grad @ grad))
    if norm > max_norm:
        grad *= max_norm / (norm + 1e-12)
    return norm


# ---------------------------------------------------------------------------
# checkpoint format
#
#   b"SMPL" | u32 version | u32 len | manifest JSON (utf-8, sorted keys)
#   | u64 n | f64[n] params | u64 n_ema | f64[n_ema] shadow
#   | extra f64 arrays, in the order and lengths listed in manifest["arrays"]
# All integers and floats little-endian.

MAGIC = b"SMPL"
FORMAT_VERSION = 1


def _dump_json(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path: str | Path, manifest: dict, params: np.ndarray,
                     ema: np.ndarray | None = None,
                     arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = arrays or {}
    manifest = dict(manifest)
    manifest["arrays"] = [[k, list(np.shape(a))] for k, a in arrays.items()]
    blob = _dump_json(manifest)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        _write_f64(fh, params)
        _write_f64(fh, np.zeros(0) if ema is None else ema)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _write_f64(fh: BinaryIO, a: np.ndarray):
    a = np.ascontiguousarray(np.ravel(a), dtype="<f8")
    fh.write(struct.pack("<Q", a.size))
    fh.write(a.tobytes())


def _read_f64(fh: BinaryIO, n: int | None = None) -> np.ndarray:
    if n is None:
        (n,) = struct.unpack("<Q", fh.read(8))
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise ConfigError("truncated checkpoint")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def read_checkpoint(path: str | Path):
    """Return ``(manifest, params, ema_or_None, arrays)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ConfigError(f"{path}: not an SMPL checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
        params = _read_f64(fh)
        ema = _read_f64(fh)
        arrays = {}
        for name, shape in manifest.pop("arrays", []):
            shape = tuple(shape) if isinstance(shape, list) else (shape,)
            arrays[name] = _read_f64(fh, int(np.prod(shape, dtype=np.int64))).reshape(shape)
    return manifest, params, (ema if ema.size else None), arrays


def manifest_bytes(manifest: dict) -> bytes:
    return _dump_json(manifest)
