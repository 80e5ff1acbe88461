"""Ground-truth control problems with a stateless transition oracle.

Every environment exposes ``step(s, a)`` that can be queried at any
state-action pair in any order, a known reward ``r(s, a, s')``, a start
distribution and a finite query box used for drawing acquisition candidates.
All functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from barl.errors import ContractError


def wrap_angle(x):
    """Map angles into [-pi, pi)."""
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    action_low: np.ndarray
    action_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray
    start_low: np.ndarray
    start_high: np.ndarray
    dt: float
    periodic: np.ndarray
    dynamics: Callable = field(repr=False)
    reward_fn: Callable = field(repr=False)
    project_fn: Callable = field(repr=False)
    constants: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def query_low(self) -> np.ndarray:
        return np.concatenate([self.state_low, self.action_low])

    @property
    def query_high(self) -> np.ndarray:
        return np.concatenate([self.state_high, self.action_high])

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)

    def project(self, s):
        """Bring a predicted state back into the environment's state space.

        Wraps periodic coordinates and applies the same hard limits the
        ground-truth integrator enforces. Used on model predictions during
        planning.
        """
        return self.project_fn(np.asarray(s, dtype=float))

    def state_diff(self, s_next, s):
        """``s_next - s`` with periodic coordinates wrapped to [-pi, pi)."""
        diff = np.asarray(s_next, dtype=float) - np.asarray(s, dtype=float)
        if self.periodic.any():
            diff = diff.copy()
            diff[..., self.periodic] = wrap_angle(diff[..., self.periodic])
        return diff


def step(env: EnvSpec, s, a):
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if s.shape[-1] != env.state_dim or a.shape[-1] != env.action_dim:
        raise ContractError(
            f"{env.name}: expected state dim {env.state_dim} and action dim "
            f"{env.action_dim}, got {s.shape[-1]} and {a.shape[-1]}"
        )
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise ContractError(f"{env.name}: non-finite state or action")
    return env.dynamics(s, env.clip_action(a))


def reward(env: EnvSpec, s, a, s_next):
    return env.reward_fn(np.asarray(s, dtype=float), np.asarray(a, dtype=float),
                         np.asarray(s_next, dtype=float))


def sample_start(env: EnvSpec, rng: np.random.Generator, size=None):
    shape = (env.state_dim,) if size is None else (size, env.state_dim)
    return rng.uniform(env.start_low, env.start_high, size=shape)


def sample_queries(env: EnvSpec, rng: np.random.Generator, count: int):
    """Uniform draws from the state-action query box, shape (count, d + n_a)."""
    return rng.uniform(env.query_low, env.query_high, size=(count, env.input_dim))


# -- pendulum ----------------------------------------------------------------

_PEND = dict(g=10.0, m=1.0, l=1.0, max_speed=8.0, max_torque=2.0, dt=0.05)


def _pendulum_dynamics(s, a):
    c = _PEND
    th, thdot = s[..., 0], s[..., 1]
    u = a[..., 0]
    thddot = 3 * c["g"] / (2 * c["l"]) * np.sin(th) + 3.0 / (c["m"] * c["l"] ** 2) * u
    new_thdot = np.clip(thdot + thddot * c["dt"], -c["max_speed"], c["max_speed"])
    new_th = wrap_angle(th + new_thdot * c["dt"])
    return np.stack([new_th, new_thdot], axis=-1)


def _pendulum_reward(s, a, s_next):
    th, thdot = s_next[..., 0], s_next[..., 1]
    u = a[..., 0]
    return -(wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)


def _pendulum_project(s):
    th = wrap_angle(s[..., 0])
    thdot = np.clip(s[..., 1], -_PEND["max_speed"], _PEND["max_speed"])
    return np.stack([th, thdot], axis=-1)


def pendulum() -> EnvSpec:
    return EnvSpec(
        name="pendulum",
        state_dim=2,
        action_dim=1,
        horizon=200,
        action_low=np.array([-2.0]),
        action_high=np.array([2.0]),
        state_low=np.array([-np.pi, -8.0]),
        state_high=np.array([np.pi, 8.0]),
        start_low=np.array([-np.pi, -1.0]),
        start_high=np.array([np.pi, 1.0]),
        dt=_PEND["dt"],
        periodic=np.array([True, False]),
        dynamics=_pendulum_dynamics,
        reward_fn=_pendulum_reward,
        project_fn=_pendulum_project,
        constants=dict(_PEND),
    )


# -- cartpole swing-up ---------------------------------------------------------

_CART = dict(g=9.8, m_cart=1.0, m_pole=0.1, l=0.5, max_force=10.0, dt=0.04,
             tip_width=0.4, tip_slope=8.0)


def _cartpole_dynamics(s, a):
    c = _CART
    x, xdot, th, thdot = (s[..., i] for i in range(4))
    f = a[..., 0]
    total = c["m_cart"] + c["m_pole"]
    sin, cos = np.sin(th), np.cos(th)
    tmp = (f + c["m_pole"] * c["l"] * thdot ** 2 * sin) / total
    thacc = (c["g"] * sin - cos * tmp) / (
        c["l"] * (4.0 / 3.0 - c["m_pole"] * cos ** 2 / total))
    xacc = tmp - c["m_pole"] * c["l"] * thacc * cos / total
    dt = c["dt"]
    return np.stack([
        x + dt * xdot,
        xdot + dt * xacc,
        wrap_angle(th + dt * thdot),
        thdot + dt * thacc,
    ], axis=-1)


def cartpole_tip(s):
    l2 = 2 * _CART["l"]
    return np.stack([s[..., 0] + l2 * np.sin(s[..., 2]), l2 * np.cos(s[..., 2])], axis=-1)


def _cartpole_reward(s, a, s_next):
    goal = np.array([0.0, 2 * _CART["l"]])
    dist = np.linalg.norm(cartpole_tip(s_next) - goal, axis=-1)
    z = _CART["tip_slope"] * (dist - _CART["tip_width"])
    return -0.5 * (1.0 + np.tanh(0.5 * z))  # logistic(z), overflow-free


def _cartpole_project(s):
    out = s.copy()
    out[..., 2] = wrap_angle(out[..., 2])
    return out


def cartpole() -> EnvSpec:
    return EnvSpec(
        name="cartpole",
        state_dim=4,
        action_dim=1,
        horizon=100,
        action_low=np.array([-10.0]),
        action_high=np.array([10.0]),
        state_low=np.array([-3.0, -6.0, -np.pi, -10.0]),
        state_high=np.array([3.0, 6.0, np.pi, 10.0]),
        start_low=np.array([-0.05, -0.05, np.pi - 0.05, -0.05]),
        start_high=np.array([0.05, 0.05, np.pi + 0.05, 0.05]),
        dt=_CART["dt"],
        periodic=np.array([False, False, True, False]),
        dynamics=_cartpole_dynamics,
        reward_fn=_cartpole_reward,
        project_fn=_cartpole_project,
        constants=dict(_CART),
    )


# -- lava path -----------------------------------------------------------------

LAVA_RECTS = ((0.3, 0.7, 0.0, 0.45), (0.3, 0.7, 0.55, 1.0))
LAVA_GOAL = np.array([0.9, 0.5])
LAVA_PENALTY = 500.0
_LAVA_DT = 0.1


def in_lava(p):
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    hit = np.zeros(np.shape(x), dtype=bool)
    for x0, x1, y0, y1 in LAVA_RECTS:
        hit |= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    return hit


def in_gap(p):
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    return (x >= 0.3) & (x <= 0.7) & (y > 0.45) & (y < 0.55)


def _lava_dynamics(s, a):
    p, v = s[..., :2], s[..., 2:]
    v_new = np.clip(v + a * _LAVA_DT, -1.0, 1.0)
    p_new = np.clip(p + v_new * _LAVA_DT, 0.0, 1.0)
    return np.concatenate([p_new, v_new], axis=-1)


def _lava_reward(s, a, s_next):
    p = s_next[..., :2]
    return -np.sum((p - LAVA_GOAL) ** 2, axis=-1) - LAVA_PENALTY * in_lava(p)


def _lava_project(s):
    return np.concatenate([np.clip(s[..., :2], 0.0, 1.0), np.clip(s[..., 2:], -1.0, 1.0)],
                          axis=-1)


def lavapath() -> EnvSpec:
    return EnvSpec(
        name="lavapath",
        state_dim=4,
        action_dim=2,
        horizon=50,
        action_low=np.array([-1.0, -1.0]),
        action_high=np.array([1.0, 1.0]),
        state_low=np.array([0.0, 0.0, -1.0, -1.0]),
        state_high=np.array([1.0, 1.0, 1.0, 1.0]),
        start_low=np.array([0.05, 0.45, 0.0, 0.0]),
        start_high=np.array([0.15, 0.55, 0.0, 0.0]),
        dt=_LAVA_DT,
        periodic=np.zeros(4, dtype=bool),
        dynamics=_lava_dynamics,
        reward_fn=_lava_reward,
        project_fn=_lava_project,
        constants=dict(goal=LAVA_GOAL.tolist(), penalty=LAVA_PENALTY, rects=LAVA_RECTS),
    )


ENVIRONMENTS = {"pendulum": pendulum, "cartpole": cartpole, "lavapath": lavapath}


def make_env(name: str) -> EnvSpec:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ContractError(
            f"unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}"
        ) from None
