"""Planar gait character: physics, motion features, tasks and a vectorized env.

The character is a point root with a heading and two swinging limbs seen from
above. Everything is batched: every field of :class:`EnvState` carries arbitrary
leading dimensions, so one call advances any number of characters.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, SimulationError

FEATURE_DIM = 13
LIMB_SIDES = np.array([1.0, -1.0])


@dataclass(frozen=True)
class EnvParams:
    dt: float = 1.0 / 30.0
    mass: float = 1.0
    force_max: float = 8.0          # N
    drag: float = 0.8               # 1/s
    turn_max: float = 20.0          # rad/s^2
    turn_damping: float = 4.0       # 1/s
    limb_torque: float = 250.0      # rad/s^2 per unit action
    limb_stiffness: float = 20.0    # k_s
    limb_damping: float = 1.0       # k_d
    limb_length: float = 0.5        # m
    hip_offset: float = 0.15        # m, lateral
    speed_cap: float = 10.0         # m/s
    episode_length: int = 300
    spawn_half_width: float = 5.0   # m


@dataclass
class EnvState:
    """Root pose/velocity and limb angles. Shapes: pos/vel/q/qd (..., 2), rest (...)."""

    pos: np.ndarray
    heading: np.ndarray
    vel: np.ndarray
    omega: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    t: np.ndarray

    @classmethod
    def zeros(cls, shape=()) -> "EnvState":
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        z = np.zeros(shape)
        z2 = np.zeros(shape + (2,))
        return cls(z2.copy(), z.copy(), z2.copy(), z.copy(), z2.copy(), z2.copy(),
                   np.zeros(shape, dtype=np.int64))

    @property
    def shape(self) -> tuple:
        return self.heading.shape

    def copy(self) -> "EnvState":
        return EnvState(*(np.array(getattr(self, f.name)) for f in fields(self)))

    def __getitem__(self, idx) -> "EnvState":
        return EnvState(*(np.asarray(getattr(self, f.name))[idx] for f in fields(self)))

    def set(self, idx, other: "EnvState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def is_finite(self) -> np.ndarray:
        ok = np.isfinite(self.heading) & np.isfinite(self.omega)
        for a in (self.pos, self.vel, self.q, self.qd):
            ok &= np.all(np.isfinite(a), axis=-1)
        return ok


def stack_states(states: list[EnvState], axis: int = -1) -> EnvState:
    """Stack states along a new time axis placed just before any vector axis."""
    out = {}
    for f in fields(EnvState):
        arrs = [np.asarray(getattr(s, f.name)) for s in states]
        if f.name in ("pos", "vel", "q", "qd"):
            out[f.name] = np.stack(arrs, axis=axis - 1 if axis < 0 else axis)
        else:
            out[f.name] = np.stack(arrs, axis=axis)
    return EnvState(**out)


def rot(theta: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 2, 2) mapping local to global coordinates."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def to_local(vec: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Express global vectors (..., 2) in the frame with heading ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], -1)


def to_global(vec: np.ndarray, theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], -1)


def wrap_angle(a: np.ndarray) -> np.ndarray:
    """Map angles into [-pi, pi]; angles already inside are returned untouched."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(np.abs(a) > np.pi, (a + np.pi) % (2.0 * np.pi) - np.pi, a)


def physics_step(state: EnvState, action: np.ndarray, params: EnvParams = EnvParams()) -> EnvState:
    """Advance one semi-implicit Euler step of length ``params.dt``.

    ``action`` has shape (..., 4): forward force, turning torque, limb torques;
    components are clamped to [-1, 1] before scaling.
    """
    p = params
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    dt = p.dt
    fwd = np.stack([np.cos(state.heading), np.sin(state.heading)], -1)
    acc = (p.force_max * a[..., 0:1] * fwd - p.drag * state.vel) / p.mass
    vel = state.vel + dt * acc
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    vel = np.where(speed > p.speed_cap, vel * (p.speed_cap / np.maximum(speed, 1e-12)), vel)
    pos = state.pos + dt * vel

    omega = state.omega + dt * (p.turn_max * a[..., 1] - p.turn_damping * state.omega)
    heading = wrap_angle(state.heading + dt * omega)

    qdd = p.limb_torque * a[..., 2:4] - p.limb_damping * state.qd - p.limb_stiffness * state.q
    qd = state.qd + dt * qdd
    q = state.q + dt * qd
    hit = np.abs(q) > np.pi
    q = np.clip(q, -np.pi, np.pi)
    qd = np.where(hit, 0.0, qd)
    return EnvState(pos, heading, vel, omega, q, qd, state.t + 1)


def limb_tips_body(q: np.ndarray, params: EnvParams = EnvParams()) -> np.ndarray:
    """Limb-tip positions in the body frame, shape (..., 2 limbs, 2)."""
    x = params.limb_length * np.sin(q)
    y = np.broadcast_to(LIMB_SIDES * params.hip_offset, q.shape)
    return np.stack([x, y], -1)


def limb_tips_global(state: EnvState, params: EnvParams = EnvParams()) -> np.ndarray:
    tips = limb_tips_body(state.q, params)
    return state.pos[..., None, :] + to_global(tips, state.heading[..., None])


def body_points(state: EnvState, params: EnvParams = EnvParams()) -> np.ndarray:
    """Root plus both limb tips in global coordinates, shape (..., 3, 2)."""
    return np.concatenate([state.pos[..., None, :], limb_tips_global(state, params)], -2)


def extract_features(window: EnvState, params: EnvParams = EnvParams()) -> np.ndarray:
    """Motion features of a window of states, shape (..., H, 13).

    ``window`` has a time axis as its last batch axis. Every frame is expressed
    in the frame of the window's last state (origin at its root, x-axis along
    its heading). Per-frame layout::

        0-1   root linear velocity        2     root angular velocity
        3-4   cos/sin limb-1 angle        5-6   cos/sin limb-2 angle
        7-8   limb angular velocities     9-12  limb-1 and limb-2 tip positions
    """
    last_pos = window.pos[..., -1:, :]
    last_th = window.heading[..., -1:]
    vel = to_local(window.vel, last_th)
    tips = limb_tips_global(window, params) - last_pos[..., None, :]
    tips = to_local(tips, last_th[..., None])
    q = window.q
    return np.concatenate([
        vel,
        window.omega[..., None],
        np.stack([np.cos(q[..., 0]), np.sin(q[..., 0]), np.cos(q[..., 1]), np.sin(q[..., 1])], -1),
        window.qd,
        tips.reshape(tips.shape[:-2] + (4,)),
    ], -1)


# feature indices owned by each limb; root features go with limb 1
LIMB1_FEATURES = (0, 1, 2, 3, 4, 7, 9, 10)
LIMB2_FEATURES = (5, 6, 8, 11, 12)


def limb_mask(H: int, which: str) -> np.ndarray:
    """Binary mask over a flattened (H, 13) window selecting one limb's features."""
    idx = {"limb1": LIMB1_FEATURES, "limb2": LIMB2_FEATURES}.get(which)
    if idx is None:
        raise ConfigError(f"unknown mask {which!r}; expected limb1 or limb2")
    m = np.zeros((H, FEATURE_DIM))
    m[:, list(idx)] = 1.0
    return m.ravel()


OBS_SCALE = np.array([1 / 5, 1 / 5, 1 / 3, 1, 1, 1, 1, 1 / 10, 1 / 10, 2, 1, 2, 1])


def observe(state: EnvState, params: EnvParams = EnvParams()) -> np.ndarray:
    """Policy observation: single-frame local features, rescaled to O(1)."""
    return extract_features(stack_states([state]), params)[..., 0, :] * OBS_SCALE


def default_state(n: int, rng: np.random.Generator, params: EnvParams = EnvParams()) -> EnvState:
    """Character at rest with random global position and heading."""
    s = EnvState.zeros((n,))
    s.pos[...] = rng.uniform(-params.spawn_half_width, params.spawn_half_width, (n, 2))
    s.heading[...] = rng.uniform(-np.pi, np.pi, n)
    return s


# ---------------------------------------------------------------------------
# tasks


class Task:
    name = "base"
    goal_dim = 0

    def __init__(self, params: EnvParams = EnvParams()):
        self.params = params

    def sample_goal(self, state: EnvState, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(state.shape + (max(self.goal_dim, 1),))

    def reward(self, state: EnvState, goal: np.ndarray) -> np.ndarray:
        return np.zeros(state.shape)

    def observe_goal(self, state: EnvState, goal: np.ndarray) -> np.ndarray:
        return np.zeros(state.shape + (self.goal_dim,))

    def update_goal(self, state: EnvState, goal: np.ndarray, timer: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Advance goal timers and resample goals whose time is up."""
        return goal, timer


class TargetSpeed(Task):
    name = "target_speed"
    goal_dim = 1

    def __init__(self, params: EnvParams = EnvParams(), speed_range=(1.2, 6.8), period: int = 150):
        super().__init__(params)
        self.speed_range = speed_range
        self.period = period

    def sample_goal(self, state, rng):
        return rng.uniform(*self.speed_range, state.shape + (1,))

    def reward(self, state, goal):
        speed = np.linalg.norm(state.vel, axis=-1)
        return np.exp(-2.0 * (speed - goal[..., 0]) ** 2)

    def observe_goal(self, state, goal):
        return goal / 5.0

    def update_goal(self, state, goal, timer, rng):
        timer = timer + 1
        due = timer >= self.period
        if np.any(due):
            goal = goal.copy()
            goal[due] = self.sample_goal(state[due], rng)
            timer = np.where(due, 0, timer)
        return goal, timer


class TargetLocation(Task):
    """Reach a point on the floor; goal stored globally, observed locally.

    After arrival (distance < ``radius``) the target is held for ``hold``
    steps, then a new one is drawn.
    """

    name = "target_location"
    goal_dim = 2

    def __init__(self, params: EnvParams = EnvParams(), distance_range=(0.5, 2.5),
                 radius: float = 0.3, hold: int = 120):
        super().__init__(params)
        self.distance_range = distance_range
        self.radius = radius
        self.hold = hold

    def sample_goal(self, state, rng):
        d = rng.uniform(*self.distance_range, state.shape)
        a = rng.uniform(-np.pi, np.pi, state.shape)
        return state.pos + np.stack([d * np.cos(a), d * np.sin(a)], -1)

    def distance(self, state, goal):
        return np.linalg.norm(goal - state.pos, axis=-1)

    def reward(self, state, goal):
        d = self.distance(state, goal)
        return np.where(d < self.radius, 1.0, np.exp(-0.5 * d * d))

    def observe_goal(self, state, goal):
        local = to_local(goal - state.pos, state.heading)
        n = np.linalg.norm(local, axis=-1, keepdims=True)
        return local / np.maximum(n, 1.0) * np.minimum(n, 5.0) / 2.0

    def update_goal(self, state, goal, timer, rng):
        # timer < 0: travelling; timer >= 0: steps held since arrival
        arrived = (self.distance(state, goal) < self.radius) & (timer < 0)
        timer = np.where(arrived, 0, np.where(timer >= 0, timer + 1, timer))
        due = timer >= self.hold
        if np.any(due):
            goal = goal.copy()
            goal[due] = self.sample_goal(state[due], rng)
            timer = np.where(due, -1, timer)
        return goal, timer


class Imitation(Task):
    """No task objective; the prior reward alone drives learning."""

    name = "imitation"
    goal_dim = 0


TASKS = {"target_speed": TargetSpeed, "target_location": TargetLocation, "imitation": Imitation}


def make_task(name: str, params: EnvParams = EnvParams(), **kw) -> Task:
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name](params, **kw)


def env_step(state: EnvState, action: np.ndarray, task: Task, goal: np.ndarray,
             params: EnvParams = EnvParams()):
    """One transition: ``(next_state, task_reward, terminated)``.

    Termination happens only at the episode time limit; a non-finite state
    raises :class:`SimulationError`.
    """
    nxt = physics_step(state, action, params)
    if not np.all(nxt.is_finite()):
        raise SimulationError("non-finite state", step=int(np.max(nxt.t)))
    return nxt, task.reward(nxt, goal), nxt.t >= params.episode_length


Initializer = Callable[[int, np.random.Generator], "tuple[EnvState, EnvState]"]


def default_initializer(params: EnvParams = EnvParams(), H: int = 10) -> Initializer:
    def init(n, rng):
        s = default_state(n, rng, params)
        hist = stack_states([s] * H)
        return s, hist
    return init


class VecEnv:
    """E independent characters with per-env goal timers and H-state histories.

    ``initializer(n, rng)`` returns ``(states, histories)`` for n fresh
    episodes, where histories carry H states ending at the initial state.
    """

    def __init__(self, n_envs: int, task: Task, initializer: Initializer,
                 rng: np.random.Generator, H: int = 10, params: EnvParams = EnvParams()):
        self.n = n_envs
        self.task = task
        self.params = params
        self.H = H
        self.init = initializer
        self.rng = rng
        self.state, self.history = initializer(n_envs, rng)
        self.goal = task.sample_goal(self.state, rng)
        self.timer = self._fresh_timer(n_envs)

    def _fresh_timer(self, n):
        return np.full(n, -1 if isinstance(self.task, TargetLocation) else 0, dtype=np.int64)

    def observation(self) -> np.ndarray:
        return np.concatenate([observe(self.state, self.params),
                               self.task.observe_goal(self.state, self.goal)], -1)

    @property
    def obs_dim(self) -> int:
        return FEATURE_DIM + self.task.goal_dim

    def window(self) -> EnvState:
        return self.history

    def step(self, action: np.ndarray):
        """Returns ``(task_reward, done, final_window)``.

        ``final_window`` holds the H-state windows ending at the new states,
        taken before finished episodes are reset.
        """
        nxt, r_task, done = env_step(self.state, action, self.task, self.goal, self.params)
        hist = self.history
        window = EnvState(
            np.concatenate([hist.pos[:, 1:], nxt.pos[:, None]], 1),
            np.concatenate([hist.heading[:, 1:], nxt.heading[:, None]], 1),
            np.concatenate([hist.vel[:, 1:], nxt.vel[:, None]], 1),
            np.concatenate([hist.omega[:, 1:], nxt.omega[:, None]], 1),
            np.concatenate([hist.q[:, 1:], nxt.q[:, None]], 1),
            np.concatenate([hist.qd[:, 1:], nxt.qd[:, None]], 1),
            np.concatenate([hist.t[:, 1:], nxt.t[:, None]], 1),
        )
        self.state = nxt
        self.history = window
        self.goal, self.timer = self.task.update_goal(nxt, self.goal, self.timer, self.rng)
        final = window.copy()
        # observation of the pre-reset states, for bootstrapping truncated episodes
        self.final_obs = np.concatenate([observe(nxt, self.params),
                                         self.task.observe_goal(nxt, self.goal)], -1)
        if np.any(done):
            idx = np.flatnonzero(done)
            s, h = self.init(idx.size, self.rng)
            self.state = self.state.copy()
            self.history = self.history.copy()
            self.state.set(idx, s)
            self.history.set(idx, h)
            self.goal = self.goal.copy()
            self.goal[idx] = self.task.sample_goal(s, self.rng)
            self.timer[idx] = self._fresh_timer(idx.size)
        return r_task, done, final

    # full snapshot for deterministic resume
    def get_state(self) -> dict:
        d = {f"state_{f.name}": getattr(self.state, f.name) for f in fields(EnvState)}
        d.update({f"hist_{f.name}": getattr(self.history, f.name) for f in fields(EnvState)})
        d["goal"] = self.goal
        d["timer"] = self.timer
        return {k: np.array(v) for k, v in d.items()}

    def set_state(self, d: dict) -> None:
        self.state = EnvState(**{f.name: np.array(d[f"state_{f.name}"]) for f in fields(EnvState)})
        self.history = EnvState(**{f.name: np.array(d[f"hist_{f.name}"]) for f in fields(EnvState)})
        self.goal = np.array(d["goal"])
        self.timer = np.array(d["timer"])


def with_params(params: EnvParams, **kw) -> EnvParams:
    return replace(params, **kw)
