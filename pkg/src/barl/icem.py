"""Receding-horizon MPC with the improved cross-entropy method.

Sampling uses temporally correlated (1/f^beta) action noise, the population
shrinks geometrically across CEM rounds, and a fraction of each round's
elites is carried into the next round. Planning is batched: ``B``
independent problems (different start states and/or different dynamics
functions) are optimized in lockstep, each with its own random stream, so a
problem's result does not depend on what else is in the batch.

Dynamics callables take states (B, P, d) and actions (B, P, n_a) and return
next states (B, P, d); rewards broadcast over leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from barl.errors import ContractError, PlanningError


@dataclass(frozen=True)
class PlanSpec:
    base_samples: int
    elites: int
    horizon: int
    iterations: int
    replan_period: int
    action_low: np.ndarray
    action_high: np.ndarray
    beta: float = 3.0
    gamma: float = 1.25
    xi: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "action_low", np.asarray(self.action_low, dtype=float))
        object.__setattr__(self, "action_high", np.asarray(self.action_high, dtype=float))
        if 2 * self.elites > self.base_samples:
            raise ContractError("need 2 * elites <= base_samples")
        if not 1 <= self.replan_period <= self.horizon:
            raise ContractError("need 1 <= replan_period <= horizon")
        if self.iterations < 1 or self.elites < 1:
            raise ContractError("iterations and elites must be positive")
        if self.gamma < 1 or not 0 <= self.xi <= 1 or self.beta < 0:
            raise ContractError("invalid beta/gamma/xi")

    @property
    def action_dim(self) -> int:
        return self.action_low.size

    def population(self, i: int) -> int:
        return max(math.ceil(self.base_samples * self.gamma ** (-i)), 2 * self.elites)

    @property
    def num_cached(self) -> int:
        return math.ceil(self.xi * self.elites)

    def with_overrides(self, **kw) -> "PlanSpec":
        return replace(self, **kw)


# base samples, elites, horizon, iterations, replan period
MPC_TABLE = {
    "pendulum": (25, 3, 20, 3, 6),
    "cartpole": (30, 6, 15, 5, 1),
    "lavapath": (25, 4, 20, 3, 6),
}


def default_plan_spec(env) -> PlanSpec:
    n, e, h, it, rp = MPC_TABLE[env.name]
    return PlanSpec(base_samples=n, elites=e, horizon=h, iterations=it, replan_period=rp,
                    action_low=env.action_low, action_high=env.action_high)


def colored_noise(beta: float, horizon: int, n_a: int, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with power spectral density proportional to 1/f^beta.

    Synthesized in the frequency domain along the time axis and scaled by
    its analytic standard deviation, so each timestep has unit variance.
    Returns shape (count, horizon, n_a).
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    if horizon == 1:
        return rng.standard_normal((count, 1, n_a))
    f = np.fft.rfftfreq(horizon)
    f[0] = 1.0 / horizon  # low-frequency cutoff
    scale = f ** (-beta / 2.0)
    # exact per-timestep variance of the irfft below: DC and (even-length)
    # Nyquist bins are real with doubled variance, other bins contribute 4x
    comp = 4.0 * scale ** 2
    comp[0] = 2.0 * scale[0] ** 2
    if horizon % 2 == 0:
        comp[-1] = 2.0 * scale[-1] ** 2
    sigma = np.sqrt(comp.sum()) / horizon
    shape = (count, n_a, f.size)
    re = rng.standard_normal(shape) * scale
    im = rng.standard_normal(shape) * scale
    im[..., 0] = 0.0
    re[..., 0] *= np.sqrt(2.0)
    if horizon % 2 == 0:
        im[..., -1] = 0.0
        re[..., -1] *= np.sqrt(2.0)
    y = np.fft.irfft(re + 1j * im, n=horizon, axis=-1) / sigma
    return np.swapaxes(y, 1, 2)


@dataclass
class Plan:
    actions: np.ndarray
    mean: np.ndarray
    stddev: np.ndarray
    predicted_return: float
    best_history: list = field(default_factory=list)
    populations: list = field(default_factory=list)


def rollout_returns(dynamics, reward, s0, actions):
    """Summed reward of action sequences.

    s0 (B, d), actions (B, P, h, n_a) -> returns (B, P), states (B, P, h+1, d).
    """
    B, P, h, _ = actions.shape
    s = np.broadcast_to(s0[:, None, :], (B, P, s0.shape[-1])).copy()
    states = [s]
    total = np.zeros((B, P))
    for t in range(h):
        a = actions[:, :, t]
        s_next = dynamics(s, a)
        total += reward(s, a, s_next)
        states.append(s_next)
        s = s_next
    return total, np.stack(states, axis=2)


def icem_plan_batch(dynamics, reward, s0, spec: PlanSpec, rngs, warm_means=None):
    """Plan for B problems at once; returns a list of B Plans."""
    s0 = np.atleast_2d(np.asarray(s0, dtype=float))
    B = s0.shape[0]
    if len(rngs) != B:
        raise ContractError("need one random stream per planning problem")
    h, na = spec.horizon, spec.action_dim
    low, high = spec.action_low, spec.action_high
    mid = 0.5 * (low + high)
    if warm_means is None:
        mean = np.broadcast_to(mid, (B, h, na)).copy()
    else:
        mean = np.clip(np.asarray(warm_means, dtype=float).reshape(B, h, na), low, high)
    std0 = (high - low) / 4.0
    std = np.broadcast_to(std0, (B, h, na)).copy()
    std_floor = 1e-3 * (high - low)

    best_seq = mean.copy()
    best_ret = np.full(B, -np.inf)
    history = [[] for _ in range(B)]
    pops = []
    cached = None
    n_cache = spec.num_cached
    for i in range(spec.iterations):
        pop = spec.population(i)
        pops.append(pop)
        noise = np.stack([colored_noise(spec.beta, h, na, pop, r) for r in rngs])
        cands = np.clip(mean[:, None] + std[:, None] * noise, low, high)
        extra = []
        if cached is not None and n_cache:
            extra.append(cached)
        if i == spec.iterations - 1:
            extra.append(mean[:, None])
        if extra:
            cands = np.concatenate([cands] + extra, axis=1)
        returns, states = rollout_returns(dynamics, reward, s0, cands)
        bad = ~np.isfinite(returns) | ~np.all(np.isfinite(states), axis=(-2, -1))
        if bad.any():
            b, p = np.argwhere(bad)[0]
            raise PlanningError("non-finite return during planning rollout",
                                actions=cands[b, p], states=states[b, p])
        order = np.argsort(-returns, axis=1, kind="stable")
        elite_idx = order[:, :spec.elites]
        elites = np.take_along_axis(cands, elite_idx[..., None, None], axis=1)
        top = np.take_along_axis(returns, elite_idx[:, :1], axis=1)[:, 0]
        improved = top > best_ret
        best_ret = np.where(improved, top, best_ret)
        best_seq[improved] = elites[improved, 0]
        for b in range(B):
            history[b].append(float(best_ret[b]))
        mean = elites.mean(axis=1)
        std = np.maximum(elites.std(axis=1), std_floor)
        cached = elites[:, :n_cache]
    return [Plan(actions=best_seq[b].copy(), mean=mean[b].copy(), stddev=std[b].copy(),
                 predicted_return=float(best_ret[b]), best_history=history[b],
                 populations=list(pops)) for b in range(B)]


def icem_plan(dynamics, reward, s0, spec: PlanSpec, warm_start: Plan | None = None,
              rng: np.random.Generator | None = None) -> Plan:
    """Single-problem planning with an unbatched dynamics ``f(s, a) -> s'``.

    ``dynamics`` here broadcasts over leading dimensions like the
    environment step functions do.
    """
    rng = np.random.default_rng() if rng is None else rng
    warm = None if warm_start is None else shift_mean(warm_start.mean, spec)[None]
    return icem_plan_batch(dynamics, reward, np.asarray(s0, dtype=float)[None], spec, [rng],
                           warm)[0]


def shift_mean(mean, spec: PlanSpec):
    """Advance a plan's mean by the replanning period, padding with zeros."""
    k = spec.replan_period
    pad = np.clip(np.zeros((k,) + mean.shape[1:]), spec.action_low, spec.action_high)
    return np.concatenate([mean[k:], pad], axis=0)


class MpcController:
    """Receding-horizon controller state for B synchronized episodes.

    Replans every ``replan_period`` calls, warm-starting from the shifted
    previous mean, and otherwise executes the stored best sequence.
    """

    def __init__(self, dynamics, reward, spec: PlanSpec, rngs):
        self.dynamics = dynamics
        self.reward = reward
        self.spec = spec
        self.rngs = list(rngs)
        self.plans: list[Plan] | None = None
        self.steps_since = 0
        self.num_plans = 0

    def reset(self):
        self.plans = None
        self.steps_since = 0

    def act(self, states):
        states = np.atleast_2d(states)
        if self.plans is None or self.steps_since >= self.spec.replan_period:
            warm = None
            if self.plans is not None:
                warm = np.stack([shift_mean(p.mean, self.spec) for p in self.plans])
            self.plans = icem_plan_batch(self.dynamics, self.reward, states, self.spec,
                                         self.rngs, warm)
            self.num_plans += 1
            self.steps_since = 0
        t = self.steps_since
        self.steps_since += 1
        return np.stack([p.actions[t] for p in self.plans])


def mpc_policy_step(controller: MpcController, s):
    """One action from a single-episode controller."""
    return controller.act(np.asarray(s, dtype=float)[None])[0]


def run_episodes(controller: MpcController, real_step, reward, s0, horizon):
    """Execute the controller on ``real_step`` for B episodes in lockstep.

    ``real_step`` maps (B, d), (B, n_a) -> (B, d). Returns (states
    (B, H+1, d), actions (B, H, n_a), rewards (B, H)).
    """
    s = np.atleast_2d(np.asarray(s0, dtype=float))
    states, actions, rewards = [s], [], []
    for _ in range(horizon):
        a = controller.act(s)
        s_next = real_step(s, a)
        if not np.all(np.isfinite(s_next)):
            raise PlanningError("non-finite state during execution", actions=a, states=s)
        rewards.append(reward(s, a, s_next))
        actions.append(a)
        states.append(s_next)
        s = s_next
    return np.stack(states, axis=1), np.stack(actions, axis=1), np.stack(rewards, axis=1)
