"""Config-driven experiment harness.

A config names one scenario, the study area, the agents and the seeds.
:func:`run_experiment` trains every agent on every (setting, seed), tests it
on held-out episode seeds against the zero-incentive baseline of the same
setting and seed, and writes

* ``results.csv``: one row per (setting, seed, agent), means over the test
  episodes. Only seeded quantities go here, so reruns are byte-identical.
* ``timings.csv``: wall-clock seconds per row (kept apart for that reason).
* ``loss_curves.csv``: per-episode critic loss of the learning agents.
* ``summary.json``: per (setting, agent) means and standard deviations.
* ``checkpoints/``: final actor-critic parameters.
* ``config.yaml``: the fully resolved config.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .agents import AGENT_CLASSES, ActorCriticPricer, PricingAgent, ZeroPricer, run_episode
from .core import DEFAULT_MAX_PRICE, DEFAULT_WINDOW, DemandTensor, RegionGrid
from .ingest import (
    SyntheticDemandParams,
    aggregate_weekday_demand,
    bike_location_pool,
    default_total_supply,
    parse_trajectories,
    synthesize_demand,
)
from .metrics import dur, episode_kl
from .offlineopt import build_instance, v_horizon_optimize
from .sim import BikeShareEnv, SimConfig

logger = logging.getLogger(__name__)

SCENARIOS = ("loss-curve", "vary-budget", "vary-supply", "long-term", "optimality", "generalization")
WORKERS_ENV = "REBALANCE_WORKERS"
TEST_SEED_BASE = 1 << 40  # far away from every training-episode seed
RESULT_COLUMNS = ("scenario", "setting", "seed", "agent", "reward", "un", "dur", "kl", "spent", "episodes")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AreaConfig:
    """Study area and simulator constants; the defaults are the desk-scale 3x3 scenario."""

    rows: int = 3
    cols: int = 3
    cell_width_m: float = 500.0
    cell_height_m: float = 500.0
    daily_volume: int = 3000
    demand_seed: int = 1
    total_supply: int | None = None
    budget: float = 200.0
    timeslots: int = 24
    minutes_per_slot: int = 60
    window: int = DEFAULT_WINDOW
    max_price: float = DEFAULT_MAX_PRICE
    days: int = 1
    trips_csv: str | None = None

    def grid(self) -> RegionGrid:
        return RegionGrid(self.rows, self.cols, self.cell_width_m, self.cell_height_m)

    def demand(self) -> tuple[DemandTensor, Any, Any]:
        """Demand tensor, trip durations (or None) and bike location pool (or None)."""
        grid = self.grid()
        if self.trips_csv:
            trips, _ = parse_trajectories(self.trips_csv, grid)
            demand, durations = aggregate_weekday_demand(trips, grid, self.timeslots)
            return demand, durations, bike_location_pool(trips, grid)
        params = SyntheticDemandParams(n=grid.n, T=self.timeslots, daily_volume=self.daily_volume, seed=self.demand_seed)
        return synthesize_demand(params, grid), None, None

    def env(self) -> BikeShareEnv:
        demand, durations, pool = self.demand()
        supply = self.total_supply if self.total_supply is not None else default_total_supply(demand.total())
        cfg = SimConfig(
            grid=self.grid(),
            demand=demand,
            total_supply=int(supply),
            budget=float(self.budget),
            days=self.days,
            window=self.window,
            max_price=self.max_price,
            minutes_per_slot=self.minutes_per_slot,
            durations=durations,
            location_pool=pool,
        )
        return BikeShareEnv(cfg)


@dataclass(frozen=True)
class Protocol:
    train_episodes: int = 100
    test_episodes: int = 20
    gamma: float = 0.99


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    scenario: str
    agents: tuple[str, ...]
    seeds: tuple[int, ...]
    area: AreaConfig = AreaConfig()
    protocol: Protocol = Protocol()
    budgets: tuple[float, ...] = ()
    supplies: tuple[int, ...] = ()
    days: tuple[int, ...] = ()
    horizons: tuple[int, ...] = (1, 4, 24)
    test_areas: tuple[int, ...] = ()
    agent_params: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("agents", "seeds", "budgets", "supplies", "days", "horizons", "test_areas"):
            d[k] = list(d[k])
        d["agent_params"] = {k: dict(v) for k, v in self.agent_params.items()}
        return d


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:  # pragma: no cover - guarded by the key check
        raise ConfigError(str(exc)) from exc


def parse_config(raw: Mapping) -> ExperimentConfig:
    """Validate a config mapping (as loaded from YAML) and fill in defaults."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    for key in ("name", "scenario", "agents", "seeds"):
        if key not in raw:
            raise ConfigError(f"missing required key '{key}'")
    scenario = raw["scenario"]
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{scenario}'; expected one of {', '.join(SCENARIOS)}")
    agents = tuple(str(a).lower() for a in raw["agents"])
    bad = [a for a in agents if a not in AGENT_CLASSES or a == "zero"]
    if bad or not agents:
        raise ConfigError(f"unknown agents {bad}; expected some of {sorted(set(AGENT_CLASSES) - {'zero'})}")
    seeds = tuple(int(s) for s in raw["seeds"])
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be a non-empty list of distinct integers")
    area = _section(AreaConfig, raw.get("area"), "area")
    protocol = _section(Protocol, raw.get("protocol"), "protocol")
    if protocol.train_episodes < 0 or protocol.test_episodes < 1:
        raise ConfigError("need train_episodes >= 0 and test_episodes >= 1")
    params = raw.get("agent_params") or {}
    if not isinstance(params, Mapping) or not all(isinstance(v, Mapping) for v in params.values()):
        raise ConfigError("agent_params must map agent names to mappings")
    stray = sorted(set(params) - set(AGENT_CLASSES) - {"common"})
    if stray:
        raise ConfigError(f"agent_params for unknown agents: {', '.join(stray)}")
    cfg = ExperimentConfig(
        name=str(raw["name"]),
        scenario=scenario,
        agents=agents,
        seeds=seeds,
        area=area,
        protocol=protocol,
        budgets=tuple(float(b) for b in raw.get("budgets", ())),
        supplies=tuple(int(s) for s in raw.get("supplies", ())),
        days=tuple(int(d) for d in raw.get("days", ())),
        horizons=tuple(int(v) for v in raw.get("horizons", (1, 4, 24))),
        test_areas=tuple(int(a) for a in raw.get("test_areas", ())),
        agent_params={k: dict(v) for k, v in params.items()},
    )
    required = {"vary-budget": "budgets", "vary-supply": "supplies", "long-term": "days", "generalization": "test_areas"}
    if scenario in required and not getattr(cfg, required[scenario]):
        raise ConfigError(f"scenario '{scenario}' needs a non-empty '{required[scenario]}' list")
    if any(b < 0 for b in cfg.budgets) or any(s < 0 for s in cfg.supplies) or any(d < 1 for d in cfg.days):
        raise ConfigError("budgets and supplies must be nonnegative, days positive")
    if any(v < 1 for v in cfg.horizons):
        raise ConfigError("horizons must be positive")
    for name in agents:
        make_agent(name, cfg, 0)  # reject bad hyperparameter names early
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return parse_config(raw)


# ---------------------------------------------------------------------------
# agents and episodes
# ---------------------------------------------------------------------------

def make_agent(name: str, cfg: ExperimentConfig, seed: int) -> PricingAgent:
    """Instantiate ``name`` with protocol constants, ``common`` and per-agent overrides."""
    cls = AGENT_CLASSES[name]
    accepted = cls().get_params()
    kw: dict[str, Any] = {}
    proto = {
        "max_price": cfg.area.max_price,
        "gamma": cfg.protocol.gamma,
        "n_episodes": cfg.protocol.train_episodes,
        "random_state": seed,
        "calibration_seed": seed,
    }
    for k, v in proto.items():
        if k in accepted:
            kw[k] = v
    for k, v in {**cfg.agent_params.get("common", {}), **cfg.agent_params.get(name, {})}.items():
        if k not in accepted:
            if name in cfg.agent_params and k in cfg.agent_params[name]:
                raise ConfigError(f"agent '{name}' has no parameter '{k}'")
            continue  # common keys only reach agents that take them
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def held_out_seeds(seed: int, count: int) -> list[int]:
    return [TEST_SEED_BASE + 10_000 * seed + k for k in range(count)]


@dataclass
class Evaluation:
    served: float
    un: float
    kl: float
    spent: float
    episodes: int


def evaluate(agent: PricingAgent, env: BikeShareEnv, seeds) -> Evaluation:
    """Mean served, unserved, end-of-day KL and spend over test episodes on ``seeds``."""
    served, un, kl, spent = [], [], [], []
    for s in seeds:
        log = run_episode(agent, env, s).log
        served.append(log.served)
        un.append(log.unsatisfied)
        kl.append(episode_kl(log))
        spent.append(log.spent)
    return Evaluation(float(np.mean(served)), float(np.mean(un)), float(np.mean(kl)), float(np.mean(spent)), len(served))


def baseline(env: BikeShareEnv, seeds) -> Evaluation:
    return evaluate(ZeroPricer(env.config.max_price).fit(env), env, seeds)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Setting:
    label: str
    area: AreaConfig


def settings_for(cfg: ExperimentConfig) -> list[Setting]:
    a = cfg.area
    if cfg.scenario == "vary-budget":
        return [Setting(f"budget={_num(b)}", replace(a, budget=b)) for b in cfg.budgets]
    if cfg.scenario == "vary-supply":
        return [Setting(f"supply={s}", replace(a, total_supply=s)) for s in cfg.supplies]
    if cfg.scenario == "long-term":
        return [Setting(f"days={d}", replace(a, days=d)) for d in cfg.days]
    return [Setting("base", a)]


def test_areas_for(cfg: ExperimentConfig, setting: Setting) -> list[Setting]:
    """Where a trained agent is tested; other areas only for generalization."""
    if cfg.scenario != "generalization":
        return [setting]
    return [Setting(f"area={k}", replace(setting.area, demand_seed=k)) for k in cfg.test_areas]


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _row(cfg, setting, seed, agent, ev: Evaluation, base: Evaluation, kl=True) -> dict:
    return {
        "scenario": cfg.scenario,
        "setting": setting,
        "seed": seed,
        "agent": agent,
        "reward": ev.served,
        "un": ev.un,
        "dur": dur(base.un, ev.un) if base.un > 0 else 0.0,
        "kl": ev.kl if kl else math.nan,
        "spent": ev.spent,
        "episodes": ev.episodes,
    }


@dataclass
class _Task:
    setting: Setting
    seed: int
    agent: str


@dataclass
class _TaskResult:
    rows: list[dict]
    curves: list[dict]
    seconds: float
    checkpoint: tuple[str, Any] | None = None


def _run_task(cfg: ExperimentConfig, task: _Task, baselines: Mapping) -> _TaskResult:
    t0 = time.perf_counter()
    env = task.setting.area.env()
    agent = make_agent(task.agent, cfg, task.seed)
    agent.fit(env)
    rows = []
    for where in test_areas_for(cfg, task.setting):
        test_env = env if where is task.setting else where.area.env()
        ev = evaluate(agent, test_env, held_out_seeds(task.seed, cfg.protocol.test_episodes))
        rows.append(_row(cfg, where.label, task.seed, task.agent, ev, baselines[(where.label, task.seed)]))
    curves, ckpt = [], None
    if isinstance(agent, ActorCriticPricer):
        for rec in agent.diagnostics_:
            curves.append(
                {
                    "setting": task.setting.label,
                    "seed": task.seed,
                    "agent": task.agent,
                    "episode": rec["episode"],
                    "critic_loss": rec["critic_loss"],
                    "mean_q": rec["mean_q"],
                    "reward": rec["reward"],
                }
            )
        ckpt = (f"{_slug(task.setting.label)}__{task.agent}__seed{task.seed}.rbnn", agent.checkpoint_params())
    return _TaskResult(rows, curves, time.perf_counter() - t0, ckpt)


def _optimality_rows(cfg: ExperimentConfig, setting: Setting, seed: int, base: Evaluation) -> tuple[list[dict], dict]:
    env = setting.area.env()
    inst = build_instance(env, seed)
    total = int(inst.demand.sum())
    rows, info = [], {}
    for V in cfg.horizons:
        res = v_horizon_optimize(inst, V)
        ev = Evaluation(float(res.served), float(total - res.served), math.nan, float(sum(w.spent for w in res.windows)), 1)
        rows.append(_row(cfg, setting.label, seed, f"ilp-v{V}", ev, base, kl=False))
        info[f"v{V}"] = {"served": res.served, "exact": res.exact}
    return rows, info


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in label)


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    rows: list[dict]
    curves: list[dict]
    timings: list[dict]
    summary: dict
    checkpoints: dict[str, Any] = field(default_factory=dict)


def _sort_key(row: Mapping) -> tuple:
    return (row["setting"], row["seed"], row["agent"])


def execute(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Run every (setting, seed, agent) of ``cfg``; results are independent of ``workers``."""
    settings = settings_for(cfg)
    base_jobs = [(where, seed) for s in settings for where in test_areas_for(cfg, s) for seed in cfg.seeds]

    def run_base(job):
        where, seed = job
        return (where.label, seed), baseline(where.area.env(), held_out_seeds(seed, cfg.protocol.test_episodes))

    tasks = [_Task(s, seed, a) for s in settings for seed in cfg.seeds for a in cfg.agents]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        baselines = dict(pool.map(run_base, base_jobs))
        results = list(pool.map(lambda t: _run_task(cfg, t, baselines), tasks))

    rows: list[dict] = []
    curves: list[dict] = []
    timings: list[dict] = []
    checkpoints: dict[str, Any] = {}
    for (label, seed), ev in baselines.items():
        rows.append(_row(cfg, label, seed, "zero", ev, ev))
    for task, res in zip(tasks, results):
        rows.extend(res.rows)
        curves.extend(res.curves)
        timings.append({"setting": task.setting.label, "seed": task.seed, "agent": task.agent, "seconds": res.seconds})
        if res.checkpoint is not None:
            checkpoints[res.checkpoint[0]] = res.checkpoint[1]
    extra: dict[str, Any] = {}
    if cfg.scenario == "optimality":
        ilp = {}
        for s in settings:
            for seed in cfg.seeds:
                t0 = time.perf_counter()
                r, info = _optimality_rows(cfg, s, seed, baselines[(s.label, seed)])
                rows.extend(r)
                ilp[f"{s.label}/seed={seed}"] = info
                timings.append({"setting": s.label, "seed": seed, "agent": "ilp", "seconds": time.perf_counter() - t0})
        extra["ilp"] = ilp
    rows.sort(key=_sort_key)
    curves.sort(key=lambda r: (r["setting"], r["seed"], r["agent"], r["episode"]))
    timings.sort(key=_sort_key)
    summary = summarize(cfg, rows)
    summary.update(extra)
    return ExperimentResult(rows, curves, timings, summary, checkpoints)


def summarize(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["setting"], r["agent"]), []).append(r)
    table: dict[str, dict[str, dict]] = {}
    for (setting, agent), rs in sorted(groups.items()):
        entry = {"seeds": len(rs)}
        for k in ("reward", "un", "dur", "kl", "spent"):
            vals = np.array([r[k] for r in rs], dtype=np.float64)
            if np.isnan(vals).all():
                continue
            entry[f"{k}_mean"] = float(np.mean(vals))
            entry[f"{k}_std"] = float(np.std(vals))
        table.setdefault(setting, {})[agent] = entry
    out: dict[str, Any] = {"name": cfg.name, "scenario": cfg.scenario, "kl_units": "nats", "settings": table}
    if cfg.scenario == "generalization":
        out["dur_cdf"] = {
            agent: _cdf([r["dur"] for r in rows if r["agent"] == agent])
            for agent in cfg.agents
        }
    return out


def _cdf(values) -> list[list[float]]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return [[float(x), (k + 1) / len(v)] for k, x in enumerate(v)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else format(v, ".10g")
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    _write_csv(out / "results.csv", RESULT_COLUMNS, result.rows)
    _write_csv(out / "timings.csv", ("setting", "seed", "agent", "seconds"), result.timings)
    _write_csv(
        out / "loss_curves.csv",
        ("setting", "seed", "agent", "episode", "critic_loss", "mean_q", "reward"),
        result.curves,
    )
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")
    if result.checkpoints:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        for name, block in sorted(result.checkpoints.items()):
            block.save(ck / name)
    return out


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def run_experiment(config: str | Path | ExperimentConfig, out_dir: str | Path, workers: int | None = None) -> Path:
    """Load (if needed), run and write one experiment; returns the results directory."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    workers = worker_count() if workers is None else workers
    logger.info("running %s (%s) with %d worker(s)", cfg.name, cfg.scenario, workers)
    result = execute(cfg, workers)
    return write_outputs(cfg, result, out_dir)
