"""Scenario files: topology, radio, timescale, handover, traffic, mobility and episode settings."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .topology import NetworkGraph, TopologyError

BUNDLED_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class TimescaleConfig:
    delta_control: float = 1.0
    delta_meas: float = 0.05
    n_meas_per_control: int = 20

    def __post_init__(self):
        if self.n_meas_per_control < 1:
            raise ScenarioError("n_meas_per_control must be >= 1")
        if not math.isclose(self.delta_control, self.n_meas_per_control * self.delta_meas, rel_tol=1e-9):
            raise ScenarioError("control period must equal n_meas_per_control * delta_meas")

    @classmethod
    def from_periods(cls, delta_control: float, delta_meas: float) -> "TimescaleConfig":
        n = round(delta_control / delta_meas)
        return cls(delta_control, delta_meas, n)

    def window(self, epoch: int) -> range:
        n = self.n_meas_per_control
        return range(epoch * n, (epoch + 1) * n)


def ttt_instants(ttt_ms: float, delta_meas: float) -> int:
    return max(1, math.ceil(round(ttt_ms / (delta_meas * 1000.0), 9)))


@dataclass(frozen=True)
class HandoverConfig:
    hysteresis_db: float = 3.0
    ttt_instants: int = 3
    ho_interruption_instants: int = 1
    ping_pong_window_instants: int = 40

    def __post_init__(self):
        if self.hysteresis_db <= 0:
            raise ScenarioError("hysteresis must be positive")
        if self.ttt_instants < 1:
            raise ScenarioError("ttt_instants must be >= 1")
        if self.ho_interruption_instants < 0:
            raise ScenarioError("ho_interruption_instants must be >= 0")


@dataclass(frozen=True)
class RadioConfig:
    n_prb: int = 25
    prb_bandwidth_hz: float = 180e3
    tx_power_dbm: float | Mapping[int, float] = 46.0
    pathloss_exponent: float = 3.5
    ref_loss_db: float = 38.0
    ref_distance_m: float = 1.0
    shadowing_std_db: float = 4.0
    noise_figure_db: float = 9.0
    eta_min: float = 0.15
    eta_max: float = 7.4
    n_mcs_bins: int = 8

    def __post_init__(self):
        if self.n_prb < 1:
            raise ScenarioError("n_prb must be >= 1")
        if self.eta_min <= 0 or self.eta_max <= self.eta_min:
            raise ScenarioError("need 0 < eta_min < eta_max")

    @property
    def bandwidth_hz(self) -> float:
        return self.n_prb * self.prb_bandwidth_hz

    def tx_power(self, cell: int) -> float:
        if isinstance(self.tx_power_dbm, Mapping):
            return float(self.tx_power_dbm[cell])
        return float(self.tx_power_dbm)


@dataclass(frozen=True)
class TrafficProfile:
    name: str
    kind: str = "cbr"  # cbr | onoff
    rate_bps: float = 1e6
    mean_on_s: float = 1.0
    mean_off_s: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cbr", "onoff"):
            raise ScenarioError(f"unknown traffic type {self.kind!r}")
        if self.rate_bps < 0:
            raise ScenarioError("traffic rate must be non-negative")


@dataclass(frozen=True)
class MobilityBox:
    name: str
    kind: str  # red | green
    x: tuple[float, float]
    y: tuple[float, float]
    n_ues: int
    profile: str = "cbr"

    def __post_init__(self):
        if self.x[0] > self.x[1] or self.y[0] > self.y[1]:
            raise ScenarioError(f"box {self.name!r} has inverted bounds")
        if self.n_ues < 0:
            raise ScenarioError(f"box {self.name!r} has negative UE count")


@dataclass(frozen=True)
class MobilityConfig:
    speed_mps: float = 3.0
    turn_interval_s: float = 2.0
    boxes: tuple[MobilityBox, ...] = ()

    @property
    def n_ues(self) -> int:
        return sum(b.n_ues for b in self.boxes)


@dataclass(frozen=True)
class Scenario:
    name: str
    graph: NetworkGraph
    positions: Mapping[int, tuple[float, float]]
    sites: Mapping[int, Any] | None
    radio: RadioConfig
    timescale: TimescaleConfig
    handover: HandoverConfig
    profiles: Mapping[str, TrafficProfile]
    mobility: MobilityConfig
    epochs: int
    throughput_ref_bps: float
    region_centers: tuple[int, ...] | None = None
    region_hops: int | None = None
    content_hash: str = ""
    source: str = field(default="", compare=False)

    @property
    def n_ues(self) -> int:
        return self.mobility.n_ues

    @property
    def offered_load_bps(self) -> float:
        return sum(b.n_ues * self.profiles[b.profile].rate_bps for b in self.mobility.boxes)


def _get(d: Mapping, key: str, default=None, required: bool = False):
    if key in d:
        return d[key]
    if required:
        raise ScenarioError(f"missing required key {key!r}")
    return default


def parse_scenario(doc: Mapping, name: str | None = None, content_hash: str = "",
                   source: str = "") -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a mapping")
    g = _get(doc, "graph", required=True)
    cells_doc = _get(g, "cells", required=True)
    positions, sites = {}, {}
    has_sites = any("site" in c for c in cells_doc)
    for c in cells_doc:
        cid = int(_get(c, "id", required=True))
        positions[cid] = (float(_get(c, "x", required=True)), float(_get(c, "y", required=True)))
        sites[cid] = c.get("site", cid)
    edges = _get(g, "edges")
    if edges is None:
        thr = float(_get(g, "neighbor_distance_m", required=True))
        edges = distance_edges(positions, thr)
    try:
        graph = NetworkGraph.from_edges(positions, edges)
    except TopologyError as exc:
        raise ScenarioError(str(exc)) from exc

    r = dict(_get(doc, "radio", {}) or {})
    if isinstance(r.get("tx_power_dbm"), Mapping):
        r["tx_power_dbm"] = {int(k): float(v) for k, v in r["tx_power_dbm"].items()}
    radio = RadioConfig(**r)

    ts = _get(doc, "timescale", {}) or {}
    timescale = TimescaleConfig.from_periods(float(ts.get("delta_control_s", 1.0)),
                                             float(ts.get("delta_meas_s", 0.05)))
    ho = dict(_get(doc, "handover", {}) or {})
    if "ttt_ms" in ho:
        ho["ttt_instants"] = ttt_instants(float(ho.pop("ttt_ms")), timescale.delta_meas)
    ho.setdefault("ttt_instants", ttt_instants(110.0, timescale.delta_meas))
    handover = HandoverConfig(**ho)

    tr = _get(doc, "traffic", {}) or {}
    profiles = {"cbr": TrafficProfile("cbr")}
    for pname, p in (tr.get("profiles") or {}).items():
        p = dict(p)
        kind = p.pop("type", "cbr")
        profiles[pname] = TrafficProfile(pname, kind=kind, **{k: float(v) for k, v in p.items()})

    mob = _get(doc, "mobility", required=True)
    boxes = []
    for k, b in enumerate(_get(mob, "boxes", required=True)):
        box = MobilityBox(
            name=str(b.get("name", f"box{k}")), kind=str(b.get("type", "red")),
            x=tuple(map(float, b["x"])), y=tuple(map(float, b["y"])),
            n_ues=int(b["ues"]), profile=str(b.get("profile", "cbr")))
        if box.profile not in profiles:
            raise ScenarioError(f"box {box.name!r} uses unknown traffic profile {box.profile!r}")
        boxes.append(box)
    mobility = MobilityConfig(float(mob.get("speed_mps", 3.0)), float(mob.get("turn_interval_s", 2.0)),
                              tuple(boxes))
    if mobility.n_ues < 1:
        raise ScenarioError("scenario has no UEs")

    ep = _get(doc, "episode", {}) or {}
    epochs = int(ep.get("epochs", 50))
    if epochs < 1:
        raise ScenarioError("episode length must be >= 1 epoch")
    feats = _get(doc, "features", {}) or {}
    reg = _get(doc, "regions", {}) or {}
    scen = Scenario(
        name=str(doc.get("name", name or "scenario")), graph=graph, positions=positions,
        sites=sites if has_sites else None, radio=radio, timescale=timescale,
        handover=handover, profiles=profiles, mobility=mobility, epochs=epochs,
        throughput_ref_bps=float(feats.get("throughput_ref_bps", 0.0)) or 0.0,
        region_centers=tuple(int(c) for c in reg["centers"]) if "centers" in reg else None,
        region_hops=int(reg["hops"]) if "hops" in reg else None,
        content_hash=content_hash, source=source,
    )
    if scen.throughput_ref_bps <= 0:
        object.__setattr__(scen, "throughput_ref_bps", radio.n_prb * radio.prb_bandwidth_hz * radio.eta_max)
    return scen


def distance_edges(positions: Mapping[int, tuple[float, float]], threshold_m: float) -> list[tuple[int, int]]:
    """Neighbour relations between cells closer than ``threshold_m`` (convenience generator)."""
    ids = sorted(positions)
    out = []
    for a, i in enumerate(ids):
        for j in ids[a + 1:]:
            (xi, yi), (xj, yj) = positions[i], positions[j]
            if math.hypot(xi - xj, yi - yj) <= threshold_m:
                out.append((i, j))
    return out


def resolve_path(ref: str | Path) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    bundled = BUNDLED_DIR / f"{ref}.yaml"
    if bundled.exists():
        return bundled
    raise ScenarioError(f"scenario {str(ref)!r} not found")


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario by path or bundled name (``bench3``, ``bench8``, ``grid30`` ...)."""
    path = resolve_path(ref)
    raw = path.read_bytes()
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"malformed scenario {path}: {exc}") from exc
    return parse_scenario(doc, name=path.stem, content_hash=hashlib.sha256(raw).hexdigest(),
                          source=str(path))


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.yaml"))
