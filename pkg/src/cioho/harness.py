"""Experiment protocol: train/test split, seeding, reference returns, result files."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml
from filelock import FileLock

from . import __version__
from .baselines import HEURISTICS, ActorController, HeuristicConfig, make_controller, rollout
from .env import HandoverEnv
from .scenario import Scenario, ScenarioError, load_scenario, resolve_path
from .td3dma import TrainConfig, evaluate, load_actor, train, write_log_csv
from .topology import Region, TopologyError, build_dual_graph, centralized_region, decompose_regions, greedy_centers

log = logging.getLogger(__name__)

FORMAT = f"cioho/{__version__}"
FLAG_LOW, FLAG_HIGH = -0.5, 1.5
LEARNED = ("td3dma", "rl-checkpoint")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    """``mode`` is ``scenario`` (file-provided), ``centralized``, ``explicit`` or ``greedy``."""

    mode: str = "scenario"
    centers: tuple[int, ...] = ()
    hops: int = 1

    @classmethod
    def parse(cls, raw: Any) -> "RegionSpec":
        if raw is None or raw == "scenario":
            return cls()
        if raw == "centralized":
            return cls("centralized")
        if isinstance(raw, Mapping):
            hops = int(raw.get("hops", 1))
            if raw.get("centers") in (None, "greedy"):
                return cls("greedy", (), hops)
            return cls("explicit", tuple(int(c) for c in raw["centers"]), hops)
        raise ConfigError(f"cannot interpret region spec {raw!r}")

    def build(self, scenario: Scenario) -> tuple[list[Region], bool]:
        """Regions plus the ``centralized`` flag for the learner."""
        g = scenario.graph
        try:
            if self.mode == "centralized":
                return [centralized_region(g)], True
            if self.mode == "scenario":
                if scenario.region_centers is None:
                    return [centralized_region(g)], True
                return decompose_regions(g, scenario.region_centers, scenario.region_hops or 1, scenario.sites), False
            if self.mode == "greedy":
                return decompose_regions(g, greedy_centers(g, self.hops, scenario.sites), self.hops,
                                         scenario.sites), False
            return decompose_regions(g, self.centers, self.hops, scenario.sites), False
        except TopologyError as exc:
            raise ConfigError(f"region spec for {scenario.name}: {exc}") from exc

    def describe(self) -> Any:
        if self.mode in ("scenario", "centralized"):
            return self.mode
        return {"centers": "greedy" if self.mode == "greedy" else list(self.centers), "hops": self.hops}


@dataclass(frozen=True)
class ExperimentSpec:
    train: tuple[str, ...]
    test: tuple[str, ...] = ()
    policy: str = "td3dma"
    train_config: TrainConfig = field(default_factory=TrainConfig)
    regions: RegionSpec = field(default_factory=RegionSpec)
    eval_episodes: int = 5
    master_seed: int = 0
    out_dir: str = "results"
    checkpoint: str | None = None
    references: str = "auto"  # auto | none
    frozen_r_max: Mapping[str, float] = field(default_factory=dict)
    reference_cache: str | None = None
    heuristics: HeuristicConfig = field(default_factory=HeuristicConfig)

    def validate(self) -> None:
        if not self.train:
            raise ConfigError("at least one train scenario is required")
        overlap = sorted(set(self.train) & set(self.test))
        if overlap:
            raise ConfigError(f"train and test scenario sets overlap: {overlap}")
        for ref in (*self.train, *self.test):
            try:
                resolve_path(ref)
            except ScenarioError as exc:
                raise ConfigError(str(exc)) from exc
        if self.policy not in (*LEARNED, *HEURISTICS, "random"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.policy == "rl-checkpoint":
            if not self.checkpoint:
                raise ConfigError("policy rl-checkpoint needs a checkpoint path")
            if not Path(self.checkpoint).exists():
                raise ConfigError(f"checkpoint {self.checkpoint!r} not found")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.references not in ("auto", "none"):
            raise ConfigError("references must be 'auto' or 'none'")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        try:
            if "train_config" in d and not isinstance(d["train_config"], TrainConfig):
                d["train_config"] = TrainConfig.from_dict(dict(d["train_config"] or {}))
            if "heuristics" in d and not isinstance(d["heuristics"], HeuristicConfig):
                d["heuristics"] = HeuristicConfig(**(d["heuristics"] or {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(d.get("regions", RegionSpec()), RegionSpec):
            d["regions"] = RegionSpec.parse(d["regions"])
        for k in ("train", "test"):
            if k in d:
                d[k] = (d[k],) if isinstance(d[k], str) else tuple(d[k])
        d["frozen_r_max"] = {str(k): float(v) for k, v in (d.get("frozen_r_max") or {}).items()}
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ExperimentSpec":
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)


@dataclass(frozen=True)
class SeedPlan:
    """Disjoint sub-streams of the master seed.

    The upper-reference learner gets its own initialisation seed so that in the
    matched setting it is an independent run, not a copy of the evaluated one.
    """

    train_seed: int
    train_episodes: tuple[int, ...]
    eval_seeds: tuple[int, ...]
    oracle_seed: int

    @classmethod
    def derive(cls, master_seed: int, eval_episodes: int, max_train_episodes: int) -> "SeedPlan":
        s_train, s_eval, s_oracle = np.random.SeedSequence(master_seed).spawn(3)
        train_rng = np.random.default_rng(s_train)
        train_seed = int(train_rng.integers(2**31))
        # train episodes draw from [0, 2^30), eval from [2^30, 2^31): never shared
        episodes = tuple(int(x) for x in train_rng.integers(0, 2**30, size=max_train_episodes))
        evals = tuple(int(x) for x in np.random.default_rng(s_eval).choice(2**30, size=eval_episodes, replace=False)
                      + 2**30)
        oracle_seed = int(np.random.default_rng(s_oracle).integers(2**31))
        return cls(train_seed, episodes, evals, oracle_seed)


@dataclass(frozen=True)
class References:
    r_min: float
    r_max: float
    best_heuristic: str
    heuristic_means: Mapping[str, float]
    r_max_source: str  # trained | frozen


@dataclass(frozen=True)
class NormalizedResult:
    setting: str
    scenario: str
    policy: str
    r: float
    r_min: float
    r_max: float
    r_bar: float

    @property
    def flagged(self) -> bool:
        return not FLAG_LOW <= self.r_bar <= FLAG_HIGH


def normalized_return(r: float, r_min: float, r_max: float) -> float:
    if r_max == r_min:
        raise ValueError("degenerate references: R_max equals R_min")
    return (r - r_min) / (r_max - r_min)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def header_line(scenarios: Sequence[Scenario], master_seed: int, **extra) -> str:
    hashes = ",".join(f"{s.name}:{s.content_hash}" for s in scenarios)
    more = "".join(f" {k}={v}" for k, v in extra.items())
    return f"format={FORMAT} master_seed={master_seed} scenarios={hashes}{more}"


def write_csv(path: Path, header: str, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _mean(xs: Sequence[float]) -> float:
    return float(math.fsum(xs) / len(xs))


# -- references ------------------------------------------------------------

def _cache_key(scenario: Scenario, seeds: Sequence[int], cfg: TrainConfig, regions: RegionSpec,
               hcfg: HeuristicConfig, frozen: float | None) -> str:
    blob = json.dumps({"scenario": scenario.content_hash, "seeds": list(seeds), "train": cfg.to_dict(),
                       "regions": regions.describe(), "heuristics": hcfg.__dict__, "frozen": frozen,
                       "format": FORMAT}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def heuristic_returns(scenario: Scenario, seeds: Sequence[int],
                      hcfg: HeuristicConfig = HeuristicConfig()) -> dict[str, list[float]]:
    dual = build_dual_graph(scenario.graph)
    return {p: rollout(make_controller(p, scenario, dual, hcfg=hcfg), scenario, seeds) for p in HEURISTICS}


def compute_references(scenario: Scenario, seeds: Sequence[int], cfg: TrainConfig = TrainConfig(),
                       regions: RegionSpec = RegionSpec(), hcfg: HeuristicConfig = HeuristicConfig(),
                       frozen_r_max: float | None = None, cache_dir: str | Path | None = None,
                       train_seeds: Sequence[int] | None = None) -> References:
    """Best-heuristic lower reference and scenario-specialised learner upper reference."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("reference seeds must be non-empty")
    cache_file = None
    if cache_dir is not None:
        key = _cache_key(scenario, seeds, cfg, regions, hcfg, frozen_r_max)
        cache_file = Path(cache_dir) / f"refs-{scenario.name}-{key}.json"
        if cache_file.exists():
            try:
                d = json.loads(cache_file.read_text())
                return References(float(d["r_min"]), float(d["r_max"]), str(d["best_heuristic"]),
                                  {k: float(v) for k, v in d["heuristic_means"].items()}, str(d["r_max_source"]))
            except (ValueError, KeyError, TypeError):
                log.warning("reference cache %s is corrupt; recomputing", cache_file)
    means = {p: _mean(r) for p, r in heuristic_returns(scenario, seeds, hcfg).items()}
    best = max(HEURISTICS, key=lambda p: (means[p], -HEURISTICS.index(p)))
    if frozen_r_max is not None:
        r_max, source = float(frozen_r_max), "frozen"
    else:
        regs, centralized = regions.build(scenario)
        env = HandoverEnv(scenario, regions=regs)
        res = train(env, cfg, centralized=centralized, episode_seeds=train_seeds, regions=regs)
        r_max, source = _mean(evaluate(res.learner, env, seeds)), "trained"
    refs = References(means[best], r_max, best, means, source)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps({"format": FORMAT, "scenario": scenario.name,
                                          "scenario_hash": scenario.content_hash, "seeds": seeds,
                                          **refs.__dict__}, sort_keys=True))
    return refs


# -- experiment ------------------------------------------------------------

@dataclass
class ExperimentResult:
    out_dir: Path
    files: dict[str, Path]
    eval_rows: list[tuple]
    normalized: list[NormalizedResult]


def _evaluate_policy(spec: ExperimentSpec, scenario: Scenario, seeds: Sequence[int], actor=None,
                     learner=None, regions=None) -> list[float]:
    if spec.policy in LEARNED:
        env = HandoverEnv(scenario, regions=regions)
        if learner is not None:
            return evaluate(learner, env, seeds)
        return rollout(ActorController(actor, scenario.throughput_ref_bps, scenario.n_ues), scenario, seeds, env)
    dual = build_dual_graph(scenario.graph)
    return rollout(make_controller(spec.policy, scenario, dual, hcfg=spec.heuristics, seed=spec.master_seed),
                   scenario, seeds)


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Train (for the learner), evaluate matched and mismatched sets, write result files."""
    spec.validate()
    train_sc = [load_scenario(s) for s in spec.train]
    test_sc = [load_scenario(s) for s in spec.test]
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = spec.train_config
    max_episodes = cfg.total_steps // min(s.epochs for s in train_sc) + 1
    plan = SeedPlan.derive(spec.master_seed, spec.eval_episodes, max_episodes)
    header = header_line([*train_sc, *test_sc], spec.master_seed, policy=spec.policy)
    files: dict[str, Path] = {}

    with FileLock(str(out / ".lock")):
        learner = actor = None
        regions = None
        if spec.policy == "td3dma":
            regions, centralized = spec.regions.build(train_sc[0])
            fps = {s.graph.fingerprint() for s in train_sc}
            if len(fps) != 1:
                raise ConfigError("train scenarios must share one topology")
            envs = [HandoverEnv(s, regions=regions) for s in train_sc]
            cfg = replace(cfg, seed=plan.train_seed)
            res = train(envs, cfg, centralized=centralized, episode_seeds=plan.train_episodes, regions=regions)
            learner = res.learner
            files["train_log"] = out / "train_log.csv"
            with open(files["train_log"], "w", newline="") as fh:
                write_log_csv(res.log_rows, fh, header)
            files["checkpoint"] = out / "actor.json"
            learner.save(files["checkpoint"], {"format": FORMAT, "train": [s.name for s in train_sc]})
        elif spec.policy == "rl-checkpoint":
            g = train_sc[0].graph
            actor, _ = load_actor(spec.checkpoint, g, build_dual_graph(g),
                                  HandoverEnv(train_sc[0]).kpi_width, HandoverEnv(train_sc[0]).space.n)

        eval_rows: list[tuple] = []
        means: dict[tuple[str, str], float] = {}
        for setting, group in (("matched", train_sc), ("mismatched", test_sc)):
            for sc in group:
                if sc.graph.fingerprint() != train_sc[0].graph.fingerprint() and spec.policy in LEARNED:
                    raise ConfigError(f"test scenario {sc.name} has a different topology than training")
                rets = _evaluate_policy(spec, sc, plan.eval_seeds, actor, learner,
                                        regions if learner is not None else None)
                for s, r in zip(plan.eval_seeds, rets):
                    eval_rows.append((setting, sc.name, spec.policy, s, float(r)))
                means[(setting, sc.name)] = _mean(rets)
        files["eval"] = out / "eval.csv"
        write_csv(files["eval"], header, ("setting", "scenario", "policy", "seed", "return"), eval_rows)

        normalized: list[NormalizedResult] = []
        if spec.references == "auto":
            ref_cfg = replace(spec.train_config, seed=plan.oracle_seed)
            for (setting, name), r in means.items():
                sc = next(s for s in (*train_sc, *test_sc) if s.name == name)
                refs = compute_references(sc, plan.eval_seeds, ref_cfg, spec.regions, spec.heuristics,
                                          spec.frozen_r_max.get(name), spec.reference_cache,
                                          plan.train_episodes)
                normalized.append(NormalizedResult(setting, name, spec.policy, r, refs.r_min, refs.r_max,
                                                   normalized_return(r, refs.r_min, refs.r_max)))
            files["normalized"] = out / "normalized.csv"
            write_csv(files["normalized"], header,
                      ("setting", "scenario", "policy", "R", "R_min", "R_max", "r_bar", "flag"),
                      [(n.setting, n.scenario, n.policy, n.r, n.r_min, n.r_max, n.r_bar,
                        "out_of_range" if n.flagged else "") for n in normalized])
            for n in normalized:
                if n.flagged:
                    log.warning("normalized return %.3f for %s/%s is outside [%.1f, %.1f]",
                                n.r_bar, n.setting, n.scenario, FLAG_LOW, FLAG_HIGH)
    return ExperimentResult(out, files, eval_rows, normalized)


# -- plot data -------------------------------------------------------------

def window_mean(series: Sequence[float], window: int) -> np.ndarray:
    """Trailing window mean; output length is ``len(series) - window + 1``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=float)
    if len(x) < window:
        return np.empty(0)
    return np.lib.stride_tricks.sliding_window_view(x, window).mean(axis=1)


def episode_curve(log_rows: Iterable[Mapping]) -> tuple[list[int], list[float]]:
    """(step, return) at each episode boundary recorded in a training log."""
    steps, rets = [], []
    last_ep = None
    for r in log_rows:
        ret = r.get("return")
        if ret in (None, ""):
            continue
        ep = r.get("episode")
        if ep == last_ep:
            continue
        last_ep = ep
        steps.append(int(r["step"]))
        rets.append(float(ret))
    return steps, rets


def emit_plot_data(logs: Mapping[str, str | Path], out_dir: str | Path, window: int = 10,
                   references: Mapping[str, tuple[float, float]] | None = None) -> dict[str, Path]:
    """Smoothed return-vs-step curves and final-value bars, one CSV each.

    ``references`` maps a run name to (R_min, R_max); runs without one are
    reported on the raw scale.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve_rows, bar_rows = [], []
    for run in sorted(logs):
        steps, rets = episode_curve(read_csv(logs[run]))
        ref = (references or {}).get(run)
        vals = [normalized_return(r, *ref) for r in rets] if ref else rets
        sm = window_mean(vals, window)
        for st, v in zip(steps[window - 1:], sm):
            curve_rows.append((run, st, float(v), "normalized" if ref else "raw"))
        if len(sm):
            bar_rows.append((run, float(sm[-1]), "normalized" if ref else "raw"))
    header = f"format={FORMAT} window={window}"
    files = {"curves": out / "curves.csv", "bars": out / "bars.csv"}
    with FileLock(str(out / ".lock")):
        write_csv(files["curves"], header, ("run", "step", "value", "scale"), curve_rows)
        write_csv(files["bars"], header, ("run", "final_value", "scale"), bar_rows)
    return files
