"""Command-line entry point: ``cioho <subcommand> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .baselines import HeuristicConfig
from .harness import (FORMAT, ConfigError, ExperimentSpec, RegionSpec, SeedPlan, compute_references,
                      emit_plot_data, run_experiment, write_csv)
from .scenario import ScenarioError, load_scenario
from .td3dma import TrainConfig
from .topology import TopologyError, build_dual_graph, write_edge_list

log = logging.getLogger("cioho")

EXIT_CONFIG, EXIT_RUNTIME = 2, 3


def _opt_type(f: dataclasses.Field):
    if f.name == "eta2_final" or f.name == "reward_scale":
        return float
    return type(f.default)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"tc_{f.name}", type=_opt_type(f), default=None,
                       help=f"(default {f.default})")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="YAML or JSON file with option defaults")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cioho", description=__doc__)
    ap.add_argument("--version", action="version", version=f"cioho {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the learner and evaluate on matched/mismatched sets")
    _common(p)
    p.add_argument("--scenario", action="append", default=None, help="train scenario (repeatable)")
    p.add_argument("--test", action="append", default=None, help="test scenario (repeatable)")
    p.add_argument("--regions", default=None,
                   help="'scenario', 'centralized', 'greedy:N' or 'c1,c2,...:N'")
    p.add_argument("--episodes", type=int, default=None, help="evaluation episodes")
    p.add_argument("--references", choices=("auto", "none"), default=None)
    p.add_argument("--reference-cache", default=None)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="greedy evaluation of a saved actor")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", action="append", required=True)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("baseline", help="evaluate a non-learning controller")
    _common(p)
    p.add_argument("--policy", choices=("rrm", "son", "delta-cio", "random", "rl-checkpoint"), required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scenario", action="append", required=True)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("refs", help="compute lower/upper reference returns")
    _common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--r-max", type=float, default=None, help="freeze the upper reference")
    p.add_argument("--regions", default=None)
    _add_train_flags(p)

    p = sub.add_parser("graph", help="topology utilities")
    gsub = p.add_subparsers(dest="graph_command", required=True)
    d = gsub.add_parser("dump", help="write primal/dual edge lists and regions")
    _common(d)
    d.add_argument("--scenario", required=True)
    d.add_argument("--regions", default=None)

    p = sub.add_parser("plot-data", help="smoothed learning curves from training logs")
    _common(p)
    p.add_argument("--log", action="append", required=True, help="NAME=PATH or PATH (repeatable)")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--refs", default=None, help="JSON file mapping run name to [R_min, R_max]")
    return ap


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return doc


def _parse_regions(raw: str | None):
    if raw is None or raw in ("scenario", "centralized"):
        return raw
    centers, _, hops = raw.partition(":")
    try:
        n = int(hops) if hops else 1
        if centers == "greedy":
            return {"centers": "greedy", "hops": n}
        return {"centers": [int(c) for c in centers.split(",")], "hops": n}
    except ValueError as exc:
        raise ConfigError(f"cannot parse region spec {raw!r}") from exc


def _train_config(args, base: dict) -> dict:
    tc = dict(base.get("train_config") or {})
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"tc_{f.name}", None)
        if v is not None:
            tc[f.name] = v
    return tc


def _spec(args, policy: str, train: Sequence[str], test: Sequence[str] = ()) -> ExperimentSpec:
    doc = _load_config(args.config)
    doc["policy"] = policy
    doc["train"] = list(train) if train else doc.get("train", [])
    doc["test"] = list(test) if test else doc.get("test", [])
    if args.seed is not None:
        doc["master_seed"] = args.seed
    if args.out is not None:
        doc["out_dir"] = str(args.out)
    if getattr(args, "episodes", None) is not None:
        doc["eval_episodes"] = args.episodes
    if getattr(args, "regions", None) is not None:
        doc["regions"] = _parse_regions(args.regions)
    for key in ("references", "reference_cache", "checkpoint"):
        if getattr(args, key, None) is not None:
            doc[key] = getattr(args, key)
    doc["train_config"] = _train_config(args, doc)
    return ExperimentSpec.from_dict(doc)


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> None:
    spec = _spec(args, "td3dma", args.scenario or [], args.test or [])
    res = run_experiment(spec)
    _emit({"status": "ok", "files": {k: str(v) for k, v in res.files.items()}})


def cmd_eval(args) -> None:
    spec = _spec(args, "rl-checkpoint", args.scenario)
    spec = dataclasses.replace(spec, references="none")
    res = run_experiment(spec)
    _emit({"status": "ok", "files": {k: str(v) for k, v in res.files.items()}})


def cmd_baseline(args) -> None:
    if args.policy == "rl-checkpoint" and not args.checkpoint:
        raise ConfigError("--policy rl-checkpoint needs --checkpoint")
    spec = dataclasses.replace(_spec(args, args.policy, args.scenario), references="none")
    res = run_experiment(spec)
    _emit({"status": "ok", "files": {k: str(v) for k, v in res.files.items()}})


def cmd_refs(args) -> None:
    doc = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(doc.get("master_seed", 0))
    episodes = args.episodes or int(doc.get("eval_episodes", 5))
    cfg = TrainConfig.from_dict(_train_config(args, doc))
    regions = RegionSpec.parse(_parse_regions(args.regions) if args.regions else doc.get("regions"))
    sc = load_scenario(args.scenario)
    plan = SeedPlan.derive(seed, episodes, cfg.total_steps // sc.epochs + 1)
    cfg = dataclasses.replace(cfg, seed=plan.oracle_seed)
    out = Path(args.out or doc.get("out_dir", "results"))
    refs = compute_references(sc, plan.eval_seeds, cfg, regions, HeuristicConfig(**(doc.get("heuristics") or {})),
                              args.r_max, out / "refs-cache", plan.train_episodes)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"refs-{sc.name}.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": FORMAT, "scenario": sc.name, "scenario_hash": sc.content_hash,
                             "master_seed": seed, "seeds": list(plan.eval_seeds)}, sort_keys=True) + "\n")
        fh.write(json.dumps(dataclasses.asdict(refs), sort_keys=True) + "\n")
    _emit({"status": "ok", "files": {"refs": str(path)}, "r_min": refs.r_min, "r_max": refs.r_max})


def cmd_graph_dump(args) -> None:
    doc = _load_config(args.config)
    sc = load_scenario(args.scenario)
    dual = build_dual_graph(sc.graph)
    regions, centralized = RegionSpec.parse(
        _parse_regions(args.regions) if args.regions else doc.get("regions")).build(sc)
    out = Path(args.out or doc.get("out_dir", "results"))
    out.mkdir(parents=True, exist_ok=True)
    head = f"format={FORMAT} scenario={sc.name}:{sc.content_hash}"
    write_edge_list(out / "primal_edges.txt", sc.graph.edges, head + " primal")
    write_edge_list(out / "dual_edges.txt",
                    [(*dual.nodes[p], *dual.nodes[q]) for p, q in dual.dual_edges], head + " dual")
    write_csv(out / "regions.csv", head, ("region", "center", "hops", "cells", "edges"),
              [(r.index, "all" if centralized else r.center, r.hops, " ".join(map(str, r.cells)),
                " ".join(f"{i}-{j}" for i, j in r.induced_edges)) for r in regions])
    _emit({"status": "ok", "cells": sc.graph.n_cells, "edges": sc.graph.n_edges,
           "dual_edges": len(dual.dual_edges), "regions": len(regions)})


def cmd_plot_data(args) -> None:
    logs = {}
    for item in args.log:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).parent.name or item, item
        if not Path(path).exists():
            raise ConfigError(f"training log {path!r} not found")
        logs[name] = path
    refs = None
    if args.refs:
        try:
            refs = {k: tuple(v) for k, v in json.loads(Path(args.refs).read_text()).items()}
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read references {args.refs}: {exc}") from exc
    files = emit_plot_data(logs, args.out or Path("plots"), args.window, refs)
    _emit({"status": "ok", "files": {k: str(v) for k, v in files.items()}})


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline, "refs": cmd_refs,
            "plot-data": cmd_plot_data}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = cmd_graph_dump if args.command == "graph" else COMMANDS[args.command]
    try:
        handler(args)
    except (ConfigError, ScenarioError, TopologyError) as exc:
        _emit({"status": "error", "kind": "config", "message": str(exc)})
        return EXIT_CONFIG
    except (ValueError, OSError, KeyError) as exc:
        _emit({"status": "error", "kind": type(exc).__name__, "message": str(exc)})
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
