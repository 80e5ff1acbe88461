import math

import numpy as np
import pytest
from scipy import stats

from barl import loop
from barl.envs import make_env
from barl.errors import BarlError, ContractError, RunError
from barl.gp import Dataset
from barl.loop import (
    GroundTruthModel,
    RunConfig,
    baseline_rollout_mpc,
    eval_starts,
    evaluate_policy,
    info_gain_at,
    normalized_score,
    random_policy_return,
    run_barl,
    solved_threshold,
)


def _small(env="pendulum", **kw):
    base = dict(candidates=100, n_paths=3, eval_episodes=1, fit_restarts=1)
    base.update(kw)
    return RunConfig.default(env, **base)


class TestConfig:
    def test_defaults(self):
        for name, budget in [("pendulum", 200), ("cartpole", 300), ("lavapath", 100)]:
            cfg = RunConfig.default(name)
            assert cfg.budget == budget and cfg.candidates == 1000 and cfg.n_paths == 15
            assert cfg.eval_episodes == 5
            assert cfg.rollout_plan == cfg.eval_plan
        assert RunConfig.default("cartpole").eval_period == 10
        assert RunConfig.default("lavapath").eval_period == 5

    def test_invalid(self):
        with pytest.raises(ContractError):
            RunConfig.default("pendulum", acquisition="thompson")
        with pytest.raises(ContractError):
            RunConfig.default("pendulum", eval_episodes=0)


class TestEvaluation:
    def test_single_episode_has_zero_se(self):
        env = make_env("pendulum")
        spec = RunConfig.default("pendulum").eval_plan
        _, se = evaluate_policy(GroundTruthModel(env), env, spec, 1, seed=3)
        assert se == 0.0

    def test_ground_truth_scores_one_and_random_scores_zero(self):
        env = make_env("lavapath")
        spec = RunConfig.default("lavapath").eval_plan
        gt, rand = solved_threshold(env, spec, 0)
        again, _ = evaluate_policy(GroundTruthModel(env), env, spec, 5, 0)
        assert normalized_score(again, gt, rand) == 1.0
        assert normalized_score(random_policy_return(env, 5, 0), gt, rand) == 0.0

    def test_same_seed_same_returns(self):
        env = make_env("pendulum")
        spec = RunConfig.default("pendulum").eval_plan.with_overrides(iterations=1)
        a = evaluate_policy(GroundTruthModel(env), env, spec, 2, 11)
        b = evaluate_policy(GroundTruthModel(env), env, spec, 2, 11)
        assert a == b

    def test_ground_truth_beats_random(self):
        env = make_env("pendulum")
        gt, rand = solved_threshold(env, RunConfig.default("pendulum").eval_plan, 0)
        assert np.isfinite(gt) and gt > rand

    def test_misconfigured_environment_detected(self, monkeypatch):
        env = make_env("pendulum")
        spec = RunConfig.default("pendulum").eval_plan.with_overrides(iterations=2)
        monkeypatch.setattr(loop, "evaluate_policy", lambda *a, **k: (-1e9, 0.0))
        with pytest.raises(ContractError):
            solved_threshold(env, spec, 12345)


class TestRun:
    def test_budget_one_gives_two_transitions(self):
        log = run_barl(_small(budget=1, acquisition="random"))
        assert len(log.dataset) == 2 and len(log.queries) == 2
        assert math.isnan(log.queries[0].acq_value)
        assert [e.n_queries for e in log.evals] == [1, 2]

    def test_one_transition_per_iteration(self):
        log = run_barl(_small(budget=3, acquisition="eig_t"))
        assert [q.iteration for q in log.queries] == [0, 1, 2, 3]
        assert all(np.isfinite(q.acq_value) for q in log.queries[1:])

    def test_random_queries_are_uniform(self):
        cfg = _small(budget=1, acquisition="random")
        runner = loop._Runner(cfg)
        X = np.array([loop._choose_next(runner, i)[0] for i in range(1, 1001)])
        env = runner.env
        U = (X - env.query_low) / (env.query_high - env.query_low)
        for j in range(U.shape[1]):
            assert stats.kstest(U[:, j], "uniform").pvalue >= 0.01

    def test_deterministic(self):
        cfg = _small(budget=2, seed=4)
        a, b = run_barl(cfg), run_barl(cfg)
        for qa, qb in zip(a.queries, b.queries):
            assert np.array_equal(qa.x, qb.x) and np.array_equal(qa.s_next, qb.s_next)
            assert qa.acq_value == qb.acq_value or (math.isnan(qa.acq_value)
                                                  and math.isnan(qb.acq_value))
        assert [e.mean_return for e in a.evals] == [e.mean_return for e in b.evals]

    def test_timing_phases(self):
        log = run_barl(_small(budget=1))
        assert {p for _, p, _ in log.timings} <= set(loop.PHASES)
        assert {"sample_paths", "rollout_tau", "score", "query", "eval", "fit"} <= {p for _, p, _ in log.timings}

    def test_failure_names_module_and_iteration(self, monkeypatch):
        def broken(*a, **k):
            raise BarlError("boom")

        monkeypatch.setattr(loop.acq, "eig_t_batch", broken)
        with pytest.raises(RunError) as info:
            run_barl(_small(budget=2, acquisition="eig_t"))
        assert info.value.module == "acquisition" and info.value.iteration == 1

    def test_stop_when_solved_uses_first_solved_eval(self):
        cfg = _small(budget=4, acquisition="random", eval_period=1, stop_when_solved=True)
        log = run_barl(cfg)
        solved = [e for e in log.evals if e.normalized >= loop.SOLVED_FRACTION]
        if solved:
            assert log.evals[-1] is solved[0]
            assert log.queries_to_solved == solved[0].n_queries
        else:
            assert log.queries_to_solved == math.inf

    @pytest.mark.parametrize("kind", ["barl", "eig_t"])
    def test_entropy_drops_at_each_chosen_query(self, kind):
        log = run_barl(_small(budget=6, acquisition=kind, seed=2))
        env = make_env("pendulum")
        data = Dataset(2, 1)
        q0 = log.queries[0]
        data.append(q0.x[:2], q0.x[2:], q0.s_next)
        for q in log.queries[1:]:
            h0, h1 = info_gain_at(log.params, data, env.periodic, q.x, q.s_next)
            assert h0 - h1 > 1e-6
            data.append(q.x[:2], q.x[2:], q.s_next)


class TestRolloutBaseline:
    def test_one_episode_counts_horizon_plus_initial(self):
        cfg = _small(budget=200, acquisition="rollout_mpc")
        log = baseline_rollout_mpc(cfg)
        assert len(log.dataset) == 201
        assert [e.n_queries for e in log.evals] == [1, 201]

    def test_budget_truncates_last_episode(self):
        cfg = _small("lavapath", budget=70, acquisition="rollout_mpc")
        log = run_barl(cfg)
        assert len(log.dataset) == 71
        assert [e.n_queries for e in log.evals] == [1, 51, 71]

    def test_requires_rollout_kind(self):
        with pytest.raises(ContractError):
            baseline_rollout_mpc(_small(budget=1, acquisition="random"))

    def test_eval_protocol_matches_query_runs(self):
        rollout = run_barl(_small("lavapath", budget=10, acquisition="rollout_mpc", seed=5))
        queried = run_barl(_small("lavapath", budget=1, acquisition="random", seed=5))
        np.testing.assert_array_equal(rollout.final_eval.states[:, 0],
                                      queried.final_eval.states[:, 0])
        np.testing.assert_array_equal(rollout.final_eval.states[:, 0],
                                      eval_starts(make_env("lavapath"), 5, 1))
