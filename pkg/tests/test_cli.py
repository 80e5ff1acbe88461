import math
import re

import numpy as np
import pytest

from barl import loop, report
from barl.cli import main, run_dir
from barl.errors import BarlError
from barl.plotting import learning_curve_figure
from barl.report import (
    ExperimentConfig,
    collect_runs,
    median_queries,
    parse_config,
    read_keyvalues,
    read_learning_curve,
    read_queries,
    write_logs,
)

TINY = """\
env = pendulum
budget = 1
candidates = 40
n_paths = 2
eval.episodes = 1
plan.rollout.horizon = 10
plan.eval.iterations = 2
fit.restarts = 1
strategies = barl
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY + f"out = {root / 'runs'}\nseeds = 3\n")
    code = main(["-q", "run", "--config", str(cfg)])
    return code, run_dir(root / "runs", "pendulum", "barl", 3)


class TestRun:
    def test_budget_one_writes_two_query_rows(self, tiny_run):
        code, out = tiny_run
        assert code == 0
        lines = (out / "queries.csv").read_text().splitlines()
        assert lines[0] == "iteration,x_0,x_1,x_2,s_next_0,s_next_1,acq_value"
        assert len(lines) == 1 + 2

    def test_learning_curve_rows_match_evaluations(self, tiny_run):
        _, out = tiny_run
        curve = read_learning_curve(out / "learning_curve.csv")
        assert curve[:, 0].tolist() == [1.0, 2.0]
        assert (out / "learning_curve.csv").read_text().splitlines()[0] == \
            "n_queries,eval_return_mean,eval_return_se"

    def test_timing_schema(self, tiny_run):
        _, out = tiny_run
        rows = (out / "timing.csv").read_text().splitlines()
        assert rows[0] == "iteration,phase,seconds"
        assert {r.split(",")[1] for r in rows[1:]} <= set(loop.PHASES)

    def test_meta_holds_resolved_config(self, tiny_run):
        _, out = tiny_run
        meta = read_keyvalues(out / "meta.txt")
        assert meta["seed"] == "3" and meta["strategy"] == "barl"
        assert meta["plan.rollout.horizon"] == "10" and meta["plan.eval.horizon"] == "20"
        assert meta["plan.eval.iterations"] == "2" and meta["candidates"] == "40"
        assert float(meta["result.gt_return"]) > float(meta["result.rand_return"])

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY.replace("budget = 1", "budget = 0").replace("barl", "random")
                       + "seeds = 0, 1\n")
        assert main(["-q", "run", "--config", str(cfg), "--seed", "7",
                     "--out", str(tmp_path / "o")]) == 0
        assert [p.name for p in (tmp_path / "o/pendulum/random").iterdir()] == ["seed_7"]


def test_queries_round_trip_bit_equal(tmp_path):
    cfg = loop.RunConfig.default("lavapath", budget=3, acquisition="eig_t", candidates=30,
                                 eval_episodes=1, fit_restarts=1)
    log = loop.run_barl(cfg)
    write_logs(log, tmp_path)
    data, values = read_queries(tmp_path / "queries.csv")
    for a, b in zip(data, log.dataset):
        assert np.array_equal(a.s, b.s) and np.array_equal(a.a, b.a)
        assert np.array_equal(a.s_next, b.s_next)
    assert math.isnan(values[0])
    assert values[1:].tolist() == [q.acq_value for q in log.queries[1:]]
    curve = read_learning_curve(tmp_path / "learning_curve.csv")
    assert curve[:, 1].tolist() == [e.mean_return for e in log.evals]


class TestConfigErrors:
    @pytest.mark.parametrize("text", [
        "budget = 3\n",                          # no env
        "env = pendulum\nbogus = 1\n",
        "env = pendulum\nseeds = 1, 1\n",
        "env = pendulum\nbudget = many\n",
        "env = pendulum\nplan.eval.elites = 20\n",  # 2E > N
        "env = pendulum\nstrategies = thompson\n",
        "env = mountaincar\n",
        "env = pendulum\njust a line\n",
    ])
    def test_exit_two(self, tmp_path, text, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        assert main(["-q", "run", "--config", str(cfg)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["-q", "run", "--config", str(tmp_path / "none.cfg")]) == 2

    def test_bad_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_parse_dotted_keys(self):
        exp = parse_config({"env": "cartpole", "plan.eval.horizon": "12",
                            "plan.rollout.iterations": "2", "eval.period": "3",
                            "seeds": "4 5", "strategies": "barl,random",
                            "stop_when_solved": "true"})
        assert isinstance(exp, ExperimentConfig)
        cfg = exp.run_config("random", 5)
        assert cfg.eval_plan.horizon == 12 and cfg.rollout_plan.iterations == 2
        assert cfg.rollout_plan.horizon == 15 and cfg.eval_period == 3
        assert cfg.stop_when_solved and cfg.budget == 300
        assert exp.seeds == [4, 5] and exp.strategies == ["barl", "random"]


def test_run_failure_exit_three(tmp_path, monkeypatch, capsys):
    def broken(*a, **k):
        raise BarlError("scoring exploded")

    monkeypatch.setattr(loop.acq, "eig_t_batch", broken)
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY.replace("strategies = barl", "strategies = eig_t"))
    assert main(["-q", "run", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert "acquisition" in err and "iteration 1" in err


def _fake_run(root, env, strategy, seed, solved_at, grid=(1, 6, 11, 16, 21, 26, 31, 41, 100)):
    out = run_dir(root, env, strategy, seed)
    out.mkdir(parents=True)
    rows = ["n_queries,eval_return_mean,eval_return_se"]
    for n in grid:
        ret = -5.0 if solved_at is not None and n >= solved_at else -50.0 - n / 10
        rows.append(f"{n},{report.fmt(ret)},{report.fmt(1.5)}")
    (out / "learning_curve.csv").write_text("\n".join(rows) + "\n")
    (out / "meta.txt").write_text(f"env = {env}\nstrategy = {strategy}\nseed = {seed}\n"
                                  "result.gt_return = 0\nresult.rand_return = -100\n")


class TestTable:
    def test_median_of_five(self, tmp_path):
        grid = (1, 10, 12, 16, 20, 31, 50)
        for seed, n in enumerate([31, 10, 20, 12, 16]):
            _fake_run(tmp_path, "pendulum", "barl", seed, n, grid)
        assert main(["-q", "table", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "sample_complexity.csv").read_text().splitlines()
        assert lines[0] == "env,strategy,seeds,solved,median_queries,queries_per_seed"
        assert lines[1] == "pendulum,barl,5,5,16,0:31 1:10 2:20 3:12 4:16"

    def test_unsolved_majority_is_not_available(self, tmp_path):
        for seed, n in enumerate([11, None, None]):
            _fake_run(tmp_path, "lavapath", "random", seed, n)
        main(["-q", "table", "--out", str(tmp_path)])
        row = (tmp_path / "sample_complexity.csv").read_text().splitlines()[1]
        assert row == "lavapath,random,3,1,N/A,0:11 1:N/A 2:N/A"

    def test_byte_identical(self, tmp_path):
        for strategy in ("random", "barl", "eig_t"):
            for seed in range(3):
                _fake_run(tmp_path, "pendulum", strategy, seed, 6 + 5 * seed)
        main(["-q", "table", "--out", str(tmp_path)])
        first = (tmp_path / "sample_complexity.csv").read_bytes()
        main(["-q", "table", "--out", str(tmp_path)])
        assert (tmp_path / "sample_complexity.csv").read_bytes() == first
        strategies = [r.split(",")[1] for r in first.decode().splitlines()[1:]]
        assert strategies == ["barl", "eig_t", "random"]

    def test_median_helper(self):
        assert median_queries([10, 12, 16, 20, 31]) == 16
        assert median_queries([10, 20]) == 15
        assert median_queries([10, math.inf]) == math.inf
        assert median_queries([10, 20, math.inf]) == 20


class TestPlot:
    def test_svg_with_power_of_ten_ticks(self, tmp_path):
        for seed in range(3):
            _fake_run(tmp_path, "pendulum", "barl", seed, 16)
            _fake_run(tmp_path, "pendulum", "random", seed, 31)
        assert main(["-q", "plot", "--out", str(tmp_path)]) == 0
        svg = (tmp_path / "pendulum" / "learning_curve.svg").read_text()
        assert svg.lstrip().startswith("<?xml") and "<svg" in svg
        labels = re.findall(r"<text[^>]*>([^<]*)</text>", svg)
        assert {"1", "10", "100"} <= set(labels)

        fig, ax = learning_curve_figure("pendulum", collect_runs(tmp_path))
        assert ax.get_xscale() == "log"
        lo, hi = ax.get_xlim()
        ticks = [t for t in ax.get_xticks() if lo <= t <= hi]
        assert ticks and all(math.log10(t).is_integer() for t in ticks)

    def test_no_runs(self, tmp_path):
        assert main(["-q", "plot", "--out", str(tmp_path)]) == 3
