"""Run-log serialization, config files and cross-seed summaries.

Every float is written with 17 significant digits so a parse returns the
exact same double. File layout for one run::

    queries.csv         iteration, x_0.., s_next_0.., acq_value
    learning_curve.csv  n_queries, eval_return_mean, eval_return_se
    model_error.csv     n_queries, mse_policy, mse_uniform
    timing.csv          iteration, phase, seconds
    meta.txt            resolved config, seed and the solved-band endpoints
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from barl.envs import make_env
from barl.errors import ContractError
from barl.gp import Dataset
from barl.icem import default_plan_spec
from barl.loop import SOLVED_FRACTION, STRATEGIES, RunConfig, RunLog, normalized_score

PLAN_FIELDS = ("base_samples", "elites", "horizon", "iterations", "replan_period",
               "beta", "gamma", "xi")

# config key -> (RunConfig field, parser)
_RUN_KEYS = {
    "budget": ("budget", int),
    "candidates": ("candidates", int),
    "n_paths": ("n_paths", int),
    "eval.episodes": ("eval_episodes", int),
    "eval.period": ("eval_period", int),
    "refit_period": ("refit_period", int),
    "fit.restarts": ("fit_restarts", int),
    "features": ("num_features", int),
    "stop_when_solved": ("stop_when_solved", None),
}


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ContractError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def read_keyvalues(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, blank lines ignored."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ContractError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class ExperimentConfig:
    env: str
    run: dict = field(default_factory=dict)          # RunConfig overrides
    rollout_plan: dict = field(default_factory=dict)  # PlanSpec overrides
    eval_plan: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    strategies: list = field(default_factory=lambda: ["barl"])
    out: str = "runs"

    def __post_init__(self):
        make_env(self.env)
        if not self.seeds:
            raise ContractError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ContractError("seeds must be distinct")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ContractError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")

    def run_config(self, strategy: str, seed: int) -> RunConfig:
        env = make_env(self.env)
        base = default_plan_spec(env)
        return RunConfig.default(
            self.env, acquisition=strategy, seed=seed,
            rollout_plan=base.with_overrides(**self.rollout_plan),
            eval_plan=base.with_overrides(**self.eval_plan),
            **self.run,
        )


def parse_config(values: dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from flat dotted keys; raises ContractError."""
    values = dict(values)
    try:
        env = values.pop("env")
    except KeyError:
        raise ContractError("config needs an 'env' key") from None
    kw: dict = dict(run={}, rollout_plan={}, eval_plan={})
    try:
        for key, text in values.items():
            if key in _RUN_KEYS:
                name, conv = _RUN_KEYS[key]
                kw["run"][name] = _parse_bool(text) if conv is None else conv(text)
            elif key.startswith(("plan.rollout.", "plan.eval.")):
                _, which, name = key.split(".", 2)
                if name not in PLAN_FIELDS:
                    raise ContractError(f"unknown plan field {name!r}")
                conv = float if name in ("beta", "gamma", "xi") else int
                kw[f"{which}_plan"][name] = conv(text)
            elif key == "seeds":
                kw["seeds"] = _int_list(text)
            elif key == "strategies":
                kw["strategies"] = text.replace(",", " ").split()
            elif key == "out":
                kw["out"] = text
            else:
                raise ContractError(f"unknown config key {key!r}")
    except ValueError as exc:
        raise ContractError(f"bad config value: {exc}") from None
    cfg = ExperimentConfig(env=env, **kw)
    cfg.run_config(cfg.strategies[0], cfg.seeds[0])  # validate eagerly
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(read_keyvalues(path))


def resolved_items(cfg: RunConfig) -> list[tuple[str, str]]:
    """Every knob of a run as config-file key/value pairs."""
    items = [("env", cfg.env), ("strategy", cfg.acquisition), ("seed", fmt(cfg.seed))]
    for key, (name, _) in _RUN_KEYS.items():
        items.append((key, fmt(getattr(cfg, name))))
    for which, spec in (("rollout", cfg.rollout_plan), ("eval", cfg.eval_plan)):
        for name in PLAN_FIELDS:
            items.append((f"plan.{which}.{name}", fmt(getattr(spec, name))))
    return items


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_logs(log: RunLog, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(log.config.env)
    D, d = env.input_dim, env.state_dim
    _write_csv(out / "queries.csv",
               ["iteration"] + [f"x_{i}" for i in range(D)]
               + [f"s_next_{i}" for i in range(d)] + ["acq_value"],
               ([fmt(q.iteration)] + [fmt(v) for v in q.x] + [fmt(v) for v in q.s_next]
                + [fmt(q.acq_value)] for q in log.queries))
    _write_csv(out / "learning_curve.csv", ["n_queries", "eval_return_mean", "eval_return_se"],
               ([fmt(e.n_queries), fmt(e.mean_return), fmt(e.se_return)] for e in log.evals))
    _write_csv(out / "model_error.csv", ["n_queries", "mse_policy", "mse_uniform"],
               ([fmt(e.n_queries), fmt(e.mse_policy), fmt(e.mse_uniform)] for e in log.evals))
    _write_csv(out / "timing.csv", ["iteration", "phase", "seconds"],
               ([fmt(i), phase, fmt(s)] for i, phase, s in log.timings))
    meta = resolved_items(log.config) + [
        ("result.gt_return", fmt(log.gt_return)),
        ("result.rand_return", fmt(log.rand_return)),
    ]
    (out / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta))
    return out


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_queries(path) -> tuple[Dataset, np.ndarray]:
    """Parse queries.csv back into a Dataset plus the acquisition values."""
    header, rows = _read_rows(path)
    D = sum(h.startswith("x_") for h in header)
    d = sum(h.startswith("s_next_") for h in header)
    data = Dataset(d, D - d)
    values = []
    for row in rows:
        nums = [float(v) for v in row[1:]]
        x = np.array(nums[:D])
        data.append(x[:d], x[d:], np.array(nums[D:D + d]))
        values.append(nums[-1])
    return data, np.array(values)


def read_learning_curve(path) -> np.ndarray:
    """Array of shape (evals, 3): n_queries, mean return, standard error."""
    _, rows = _read_rows(path)
    return np.array([[float(v) for v in row] for row in rows]).reshape(-1, 3)


@dataclass
class RunSummary:
    env: str
    strategy: str
    seed: int
    curve: np.ndarray
    gt_return: float
    rand_return: float

    @property
    def normalized(self) -> np.ndarray:
        return normalized_score(self.curve[:, 1], self.gt_return, self.rand_return)

    @property
    def queries_to_solved(self) -> float:
        hit = np.nonzero(self.normalized >= SOLVED_FRACTION)[0]
        return float(self.curve[hit[0], 0]) if hit.size else math.inf


def collect_runs(root) -> list[RunSummary]:
    runs = []
    for meta_path in sorted(Path(root).rglob("meta.txt")):
        meta = read_keyvalues(meta_path)
        runs.append(RunSummary(
            env=meta["env"], strategy=meta["strategy"], seed=int(meta["seed"]),
            curve=read_learning_curve(meta_path.parent / "learning_curve.csv"),
            gt_return=float(meta["result.gt_return"]),
            rand_return=float(meta["result.rand_return"]),
        ))
    return runs


def median_queries(values) -> float:
    """Median over seeds; unsolved seeds count as infinitely many queries."""
    values = sorted(values)
    if not values:
        return math.inf
    n = len(values)
    if n % 2:
        return values[n // 2]
    lo, hi = values[n // 2 - 1], values[n // 2]
    return math.inf if math.isinf(hi) else statistics.fmean([lo, hi])


def _count(x: float) -> str:
    if math.isinf(x):
        return "N/A"
    return str(int(x)) if float(x).is_integer() else fmt(x)


def _strategy_order(name):
    return STRATEGIES.index(name) if name in STRATEGIES else len(STRATEGIES)


def sample_complexity_rows(runs) -> list[list[str]]:
    groups: dict = {}
    for r in runs:
        groups.setdefault((r.env, r.strategy), []).append(r)
    rows = []
    for env, strategy in sorted(groups, key=lambda k: (k[0], _strategy_order(k[1]), k[1])):
        members = sorted(groups[env, strategy], key=lambda r: r.seed)
        solved = [r.queries_to_solved for r in members]
        rows.append([env, strategy, str(len(members)),
                     str(sum(not math.isinf(q) for q in solved)),
                     _count(median_queries(solved)),
                     " ".join(f"{r.seed}:{_count(q)}" for r, q in zip(members, solved))])
    return rows


def write_sample_complexity(root) -> Path:
    path = Path(root) / "sample_complexity.csv"
    rows = sample_complexity_rows(collect_runs(root))
    _write_csv(path, ["env", "strategy", "seeds", "solved", "median_queries",
                      "queries_per_seed"], rows)
    return path

