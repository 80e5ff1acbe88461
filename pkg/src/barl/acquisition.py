"""Scoring candidate transition queries.

``eig_tau_star`` estimates the expected information gain about the optimal
trajectory by comparing the predictive entropy at a candidate with its
entropy after noiselessly conditioning on each sampled optimal trajectory.
``eig_t`` is the plain predictive-entropy baseline.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from barl.envs import EnvSpec, sample_start
from barl.errors import ContractError
from barl.gp import GpModel, predictive_entropy
from barl.icem import MpcController, PlanSpec, run_episodes
from barl.paths import NUM_FEATURES, sample_paths


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray   # (H + 1, d)
    actions: np.ndarray  # (H, n_a)
    inputs: np.ndarray   # (H, d + n_a)

    @classmethod
    def from_rollout(cls, states, actions):
        return cls(states, actions, np.hstack([states[:-1], actions]))


@dataclass(frozen=True)
class AcqScore:
    candidate: np.ndarray
    value: float


def num_threads() -> int:
    """Thread cap from BARL_THREADS (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("BARL_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def path_dynamics(ensemble, env: EnvSpec):
    """Batched planning dynamics where batch element l follows path l."""
    return lambda S, A: env.project(ensemble.step(S, A))


def sample_optimal_trajectories(model: GpModel, env: EnvSpec, spec: PlanSpec, n: int,
                                rng: np.random.Generator, horizon: int | None = None,
                                num_features: int = NUM_FEATURES, timings: dict | None = None):
    """Roll out MPC on ``n`` posterior paths from one shared start state.

    Returns (trajectories, start_state). Every path gets its own child
    stream for its function draw and its own planner stream, so the result
    depends only on ``rng``. If given, ``timings`` receives wall-clock
    seconds under "sample_paths" and "rollout_tau".
    """
    if n < 1:
        raise ContractError("need at least one posterior sample")
    horizon = env.horizon if horizon is None else horizon
    s0 = sample_start(env, rng)
    path_rngs = rng.spawn(n)
    plan_rngs = rng.spawn(n)
    t0 = time.perf_counter()
    ens = sample_paths(model, path_rngs, num_features)
    t1 = time.perf_counter()
    dyn = path_dynamics(ens, env)
    ctrl = MpcController(dyn, env.reward_fn, spec, plan_rngs)
    real = lambda s, a: dyn(s[:, None, :], a[:, None, :])[:, 0]  # noqa: E731
    S, A, _ = run_episodes(ctrl, real, env.reward_fn, np.tile(s0, (n, 1)), horizon)
    if timings is not None:
        timings["sample_paths"] = t1 - t0
        timings["rollout_tau"] = time.perf_counter() - t1
    return [Trajectory.from_rollout(S[i], A[i]) for i in range(n)], s0


def _floor(var, floor):
    return np.maximum(var, floor)


def eig_tau_star_batch(model: GpModel, trajectories, candidates, threads: int | None = None):
    """EIG about the optimal trajectory at each candidate, shape (k,).

    Only ``Trajectory.inputs`` is read; trajectory states never enter.
    """
    if len(trajectories) == 0:
        raise ContractError("need at least one trajectory")
    Q = np.atleast_2d(np.asarray(candidates, dtype=float))
    W, var = model.query_terms(Q)
    scale = model.y_std ** 2
    noise = model.noise_variance
    base = _floor(var, model.jitter)
    h0 = predictive_entropy(base * scale, noise)

    def conditioned(traj):
        red, jit = model.conditioned_reduction(traj.inputs, Q, W)
        cv = np.minimum(_floor(var - red, jit), base)
        return predictive_entropy(cv * scale, noise)

    threads = num_threads() if threads is None else threads
    if threads > 1 and len(trajectories) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            terms = list(pool.map(conditioned, trajectories))
    else:
        terms = [conditioned(t) for t in trajectories]
    return h0 - np.mean(np.stack(terms), axis=0)


def eig_tau_star(model: GpModel, trajectories, candidate) -> float:
    return float(eig_tau_star_batch(model, trajectories, np.asarray(candidate)[None], 1)[0])


def eig_t_batch(model: GpModel, candidates):
    Q = np.atleast_2d(np.asarray(candidates, dtype=float))
    _, var = model.query_terms(Q)
    return predictive_entropy(_floor(var, model.jitter) * model.y_std ** 2,
                              model.noise_variance)


def eig_t(model: GpModel, candidate) -> float:
    return float(eig_t_batch(model, np.asarray(candidate)[None])[0])


def choose_index(values) -> int:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ContractError("cannot choose from an empty candidate set")
    return int(np.argmax(values))  # first maximum wins ties


def choose_query(scores):
    scores = list(scores)
    if not scores:
        raise ContractError("cannot choose from an empty candidate set")
    return scores[choose_index([s.value for s in scores])].candidate
