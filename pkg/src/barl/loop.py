"""The active query loop, policy evaluation and the 'solved' criterion."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from barl import acquisition as acq
from barl.envs import EnvSpec, make_env, sample_queries, sample_start, step
from barl.errors import BarlError, ContractError, RunError
from barl.gp import Dataset, GpModel, fit_hyperparams, predictive_entropy
from barl.icem import MpcController, PlanSpec, default_plan_spec, run_episodes
from barl.paths import NUM_FEATURES

log = logging.getLogger(__name__)

BUDGETS = {"pendulum": 200, "cartpole": 300, "lavapath": 100}
EVAL_PERIODS = {"pendulum": 5, "cartpole": 10, "lavapath": 5}
STRATEGIES = ("barl", "eig_t", "random", "rollout_mpc")
PHASES = ("fit", "sample_paths", "rollout_tau", "score", "query", "eval")
SOLVED_FRACTION = 0.9

# random stream tags
_INIT, _ITER, _EVAL_STARTS, _EVAL_PLAN, _RANDOM_POLICY, _FIT, _TEST_INPUTS = range(7)


def stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass
class RunConfig:
    env: str
    budget: int
    acquisition: str = "barl"
    candidates: int = 1000
    n_paths: int = 15
    eval_episodes: int = 5
    eval_period: int = 5
    rollout_plan: PlanSpec | None = None
    eval_plan: PlanSpec | None = None
    seed: int = 0
    refit_period: int = 10
    fit_restarts: int = 5
    num_features: int = NUM_FEATURES
    stop_when_solved: bool = False

    def __post_init__(self):
        if self.acquisition not in STRATEGIES:
            raise ContractError(f"unknown acquisition {self.acquisition!r}")
        env = make_env(self.env)
        if self.rollout_plan is None:
            self.rollout_plan = default_plan_spec(env)
        if self.eval_plan is None:
            self.eval_plan = default_plan_spec(env)
        if self.budget < 0 or self.candidates < 1 or self.n_paths < 1:
            raise ContractError("budget, candidates and n_paths must be positive")
        if self.eval_episodes < 1 or self.eval_period < 1 or self.refit_period < 1:
            raise ContractError("eval_episodes, eval_period, refit_period must be >= 1")

    @classmethod
    def default(cls, env: str, **overrides) -> "RunConfig":
        base = dict(env=env, budget=BUDGETS[env], eval_period=EVAL_PERIODS[env])
        base.update(overrides)
        return cls(**base)


@dataclass
class QueryRecord:
    iteration: int
    x: np.ndarray
    s_next: np.ndarray
    acq_value: float


@dataclass
class EvalRecord:
    iteration: int
    n_queries: int
    mean_return: float
    se_return: float
    normalized: float
    mse_policy: float
    mse_uniform: float


@dataclass
class EvalResult:
    mean: float
    se: float
    returns: np.ndarray
    states: np.ndarray
    actions: np.ndarray


@dataclass
class RunLog:
    config: RunConfig
    gt_return: float
    rand_return: float
    queries: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    final_eval: EvalResult | None = None
    params: object = None
    dataset: Dataset | None = None

    def timed(self, iteration, phase, seconds):
        self.timings.append((iteration, phase, seconds))

    @property
    def queries_to_solved(self) -> float:
        for e in self.evals:
            if e.normalized >= SOLVED_FRACTION:
                return e.n_queries
        return math.inf


class GroundTruthModel:
    """Exposes the true dynamics through the posterior-mean interface."""

    def __init__(self, env: EnvSpec):
        self.env = env

    def mean_step(self, S, A):
        return step(self.env, S, A)


def normalized_score(ret, gt_return, rand_return):
    return (ret - rand_return) / (gt_return - rand_return)


def eval_starts(env: EnvSpec, seed: int, episodes: int):
    return sample_start(env, stream(seed, _EVAL_STARTS), size=episodes)


def evaluate_policy_detailed(model, env: EnvSpec, spec: PlanSpec, episodes: int,
                             seed: int) -> EvalResult:
    """Run MPC planned on ``model.mean_step`` in the real environment."""
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    s0 = eval_starts(env, seed, episodes)
    rngs = [stream(seed, _EVAL_PLAN, e) for e in range(episodes)]
    dyn = lambda S, A: env.project(model.mean_step(S, A))  # noqa: E731
    ctrl = MpcController(dyn, env.reward_fn, spec, rngs)
    S, A, R = run_episodes(ctrl, lambda s, a: step(env, s, a), env.reward_fn, s0, env.horizon)
    returns = R.sum(axis=1)
    se = float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return EvalResult(float(returns.mean()), se, returns, S, A)


def evaluate_policy(model, env: EnvSpec, spec: PlanSpec, episodes: int, seed: int):
    """(mean return, standard error) of the posterior-mean MPC policy."""
    res = evaluate_policy_detailed(model, env, spec, episodes, seed)
    return res.mean, res.se


def random_policy_return(env: EnvSpec, episodes: int, seed: int) -> float:
    rng = stream(seed, _RANDOM_POLICY)
    s = eval_starts(env, seed, episodes)
    total = np.zeros(episodes)
    for _ in range(env.horizon):
        a = rng.uniform(env.action_low, env.action_high, size=(episodes, env.action_dim))
        s_next = step(env, s, a)
        total += env.reward_fn(s, a, s_next)
        s = s_next
    return float(total.mean())


_THRESHOLD_CACHE: dict = {}


def solved_threshold(env: EnvSpec, spec: PlanSpec, seed: int, episodes: int = 5):
    """(ground-truth MPC return, random-policy return) on the eval start states."""
    key = (env.name, repr(spec), seed, episodes)
    if key not in _THRESHOLD_CACHE:
        gt, _ = evaluate_policy(GroundTruthModel(env), env, spec, episodes, seed)
        rand = random_policy_return(env, episodes, seed)
        if not gt > rand:
            raise ContractError(
                f"{env.name}: ground-truth MPC return {gt:.4g} does not beat random {rand:.4g}"
            )
        _THRESHOLD_CACHE[key] = (gt, rand)
    return _THRESHOLD_CACHE[key]


def one_step_mse(model, env: EnvSpec, X) -> float:
    """Mean squared one-step prediction error of the posterior mean at inputs X."""
    X = np.atleast_2d(X)
    d = env.state_dim
    pred = model.mean_step(X[:, :d], X[:, d:])
    true = step(env, X[:, :d], X[:, d:])
    return float(np.mean(np.sum(env.state_diff(pred, true) ** 2, axis=-1)))


def test_inputs(env: EnvSpec, seed: int, count: int = 1000):
    return sample_queries(env, stream(seed, _TEST_INPUTS), count)


class _Runner:
    """Mutable state for one run; one instance per (config, seed)."""

    def __init__(self, config: RunConfig):
        self.cfg = config
        self.env = make_env(config.env)
        self.data = Dataset(self.env.state_dim, self.env.action_dim)
        self.params = None
        self.model: GpModel | None = None
        self.acquired_at_fit = None
        self.input_scale = (self.env.query_high - self.env.query_low) / math.sqrt(12.0)
        gt, rand = solved_threshold(self.env, config.eval_plan, config.seed,
                                    config.eval_episodes)
        self.log = RunLog(config, gt, rand)
        self.uniform_inputs = test_inputs(self.env, config.seed)

    def query(self, iteration, x, value):
        d = self.env.state_dim
        t0 = time.perf_counter()
        s_next = step(self.env, x[:d], x[d:])
        self.data.append(x[:d], x[d:], s_next)
        self.log.timed(iteration, "query", time.perf_counter() - t0)
        self.log.queries.append(QueryRecord(iteration, np.array(x, dtype=float), s_next,
                                            float(value)))

    def refresh_model(self, iteration):
        t0 = time.perf_counter()
        acquired = len(self.data) - 1
        due = (self.params is None
               or acquired - self.acquired_at_fit >= self.cfg.refit_period)
        if due:
            self.params = fit_hyperparams(self.data, self.cfg.fit_restarts,
                                          stream(self.cfg.seed, _FIT, iteration),
                                          periodic=self.env.periodic,
                                          input_scale=self.input_scale)
            self.acquired_at_fit = acquired
        self.model = GpModel(self.params, self.data, self.env.periodic)
        self.log.timed(iteration, "fit", time.perf_counter() - t0)
        return self.model

    def evaluate(self, iteration) -> bool:
        t0 = time.perf_counter()
        model = GpModel(self.params, self.data, self.env.periodic)
        cfg = self.cfg
        res = evaluate_policy_detailed(model, self.env, cfg.eval_plan, cfg.eval_episodes,
                                       cfg.seed)
        visited = np.concatenate([res.states[:, :-1], res.actions], axis=-1)
        visited = visited.reshape(-1, self.env.input_dim)
        rec = EvalRecord(
            iteration=iteration,
            n_queries=len(self.data),
            mean_return=res.mean,
            se_return=res.se,
            normalized=float(normalized_score(res.mean, self.log.gt_return,
                                              self.log.rand_return)),
            mse_policy=one_step_mse(model, self.env, visited),
            mse_uniform=one_step_mse(model, self.env, self.uniform_inputs),
        )
        self.log.evals.append(rec)
        self.log.final_eval = res
        self.log.timed(iteration, "eval", time.perf_counter() - t0)
        log.info("%s/%s seed=%d n=%d return=%.3f normalized=%.3f", cfg.env, cfg.acquisition,
                 cfg.seed, rec.n_queries, rec.mean_return, rec.normalized)
        return rec.normalized >= SOLVED_FRACTION

    def finish(self):
        self.log.params = self.params
        self.log.dataset = self.data
        return self.log


def _choose_next(r: _Runner, i: int):
    """Pick the next query input and its acquisition value for iteration i."""
    cfg, env = r.cfg, r.env
    it_rng = stream(cfg.seed, _ITER, i)
    kind = cfg.acquisition
    if kind == "random":
        return sample_queries(env, it_rng, 1)[0], math.nan
    model = r.model
    if kind == "eig_t":
        t0 = time.perf_counter()
        cands = sample_queries(env, it_rng, cfg.candidates)
        values = acq.eig_t_batch(model, cands)
        r.log.timed(i, "score", time.perf_counter() - t0)
        best = acq.choose_index(values)
        return cands[best], values[best]
    # barl
    traj_rng, cand_rng = it_rng.spawn(2)
    spent: dict = {}
    trajectories, _ = acq.sample_optimal_trajectories(
        model, env, cfg.rollout_plan, cfg.n_paths, traj_rng, num_features=cfg.num_features,
        timings=spent)
    r.log.timed(i, "sample_paths", spent["sample_paths"])
    r.log.timed(i, "rollout_tau", spent["rollout_tau"])
    t0 = time.perf_counter()
    cands = sample_queries(env, cand_rng, cfg.candidates)
    values = acq.eig_tau_star_batch(model, trajectories, cands)
    r.log.timed(i, "score", time.perf_counter() - t0)
    best = acq.choose_index(values)
    return cands[best], values[best]


def run_barl(config: RunConfig, progress=None) -> RunLog:
    """Query-based data collection (BARL, EIG_T or uniform random).

    One uniform query seeds the dataset, then each of ``budget`` iterations
    adds exactly one transition. The posterior-mean policy is evaluated
    after the initial query and every ``eval_period`` iterations.
    """
    if config.acquisition == "rollout_mpc":
        return baseline_rollout_mpc(config, progress)
    with threadpool_limits(limits=1, user_api="blas"):
        r = _Runner(config)
        module = "barl_loop"
        i = 0
        try:
            x0 = sample_queries(r.env, stream(config.seed, _INIT), 1)[0]
            r.query(0, x0, math.nan)
            module = "dynamics_gp"
            r.refresh_model(0)
            module = "barl_loop"
            if r.evaluate(0) and config.stop_when_solved:
                return r.finish()
            for i in range(1, config.budget + 1):
                module = "dynamics_gp"
                r.refresh_model(i)
                module = "acquisition"
                x, value = _choose_next(r, i)
                module = "envs"
                r.query(i, x, value)
                if i % config.eval_period == 0 or i == config.budget:
                    module = "barl_loop"
                    solved = r.evaluate(i)
                    if progress:
                        progress(r.log)
                    if solved and config.stop_when_solved:
                        break
        except BarlError as exc:
            raise RunError(f"{module} failed at iteration {i}: {exc}", module, i) from exc
        return r.finish()


def baseline_rollout_mpc(config: RunConfig, progress=None) -> RunLog:
    """Episodic data collection with the posterior-mean MPC policy.

    Each episode starts from p_0 and appends every executed transition;
    the budget counts transitions. Evaluation follows each episode.
    """
    if config.acquisition != "rollout_mpc":
        raise ContractError("baseline_rollout_mpc needs acquisition = rollout_mpc")
    with threadpool_limits(limits=1, user_api="blas"):
        r = _Runner(config)
        env = r.env
        episode = 0
        try:
            x0 = sample_queries(env, stream(config.seed, _INIT), 1)[0]
            r.query(0, x0, math.nan)
            r.refresh_model(0)
            if r.evaluate(0) and config.stop_when_solved:
                return r.finish()
            while len(r.data) - 1 < config.budget:
                episode += 1
                model = r.refresh_model(episode)
                ep_rng = stream(config.seed, _ITER, episode)
                s = sample_start(env, ep_rng)
                dyn = lambda S, A: env.project(model.mean_step(S, A))  # noqa: E731
                ctrl = MpcController(dyn, env.reward_fn, config.eval_plan, ep_rng.spawn(1))
                steps = min(env.horizon, config.budget - (len(r.data) - 1))
                for _ in range(steps):
                    a = ctrl.act(s[None])[0]
                    r.query(episode, np.concatenate([s, a]), math.nan)
                    s = r.data.next_states[-1]
                solved = r.evaluate(episode)
                if progress:
                    progress(r.log)
                if solved and config.stop_when_solved:
                    break
        except BarlError as exc:
            raise RunError(f"rollout_mpc failed at episode {episode}: {exc}", "barl_loop",
                           episode) from exc
        return r.finish()


def info_gain_at(params, data: Dataset, periodic, x, s_next):
    """Predictive entropy at x before and after adding (x, s_next) to data."""
    d = data.state_dim
    before = GpModel(params, data, periodic)
    v0 = before.predict(x)[1]
    h0 = predictive_entropy(np.maximum(v0, before.jitter_variance), before.noise_variance)
    grown = data.copy()
    grown.append(x[:d], x[d:], s_next)
    after = GpModel(params, grown, periodic)
    v1 = after.predict(x)[1]
    h1 = predictive_entropy(np.maximum(v1, after.jitter_variance), after.noise_variance)
    return float(h0), float(h1)
