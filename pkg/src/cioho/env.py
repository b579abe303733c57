"""Dec-POMDP view of the simulator: global KPI states, per-edge agents, team reward."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .radiosim import (HIST0, RHO, THROUGHPUT, UE_COUNT, CellKpi, CioAssignment, HoEventLog, RadioSimulator,
                       kpi_columns, kpi_rows)
from .scenario import HandoverConfig, Scenario
from .topology import DualGraph, Edge, Region, build_dual_graph, centralized_region, k_hop_neighborhood, restrict

CIO_LEVELS_DB = (-6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0)


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    levels: tuple[float, ...] = CIO_LEVELS_DB

    def __post_init__(self):
        lv = np.asarray(self.levels)
        if np.any(np.diff(lv) <= 0):
            raise ValueError("CIO levels must be strictly increasing")
        if not np.allclose(lv, -lv[::-1]):
            raise ValueError("CIO levels must be symmetric about 0")

    @property
    def n(self) -> int:
        return len(self.levels)

    @property
    def neutral_index(self) -> int:
        return self.levels.index(0.0)

    def encode(self, biases_db: Sequence[float]) -> np.ndarray:
        idx = [self.levels.index(float(b)) for b in biases_db]
        return np.asarray(idx, dtype=int)

    def snap(self, bias_db: float) -> float:
        lv = np.asarray(self.levels)
        return float(lv[np.argmin(np.abs(lv - np.clip(bias_db, lv[0], lv[-1])))])


@dataclass(frozen=True)
class GlobalState:
    """Raw per-cell KPI rows (cell order of the topology)."""

    kpi: np.ndarray

    @property
    def per_cell(self) -> list[CellKpi]:
        return [CellKpi.from_row(r) for r in self.kpi]

    def __len__(self) -> int:
        return self.kpi.shape[0]


@dataclass(frozen=True)
class Observation:
    root: Edge
    nodes: tuple[Edge, ...]  # dual nodes of the M-hop ball, dual order
    edges: tuple[tuple[int, int], ...]  # local index pairs among ``nodes``
    node_features: np.ndarray  # (len(nodes), 2K)

    @property
    def root_index(self) -> int:
        return self.nodes.index(self.root)


@dataclass(frozen=True)
class RewardReport:
    team_reward: float
    region_returns: tuple[float, ...]
    per_cell: np.ndarray


def apply(action: np.ndarray, dual: DualGraph, space: ActionSpace = ActionSpace()) -> CioAssignment:
    """Map per-edge level indices to a CIO assignment."""
    action = np.asarray(action, dtype=int)
    if action.shape != (dual.n_nodes,) or action.min(initial=0) < 0 or action.max(initial=0) >= space.n:
        raise ValueError(f"invalid joint action {action!r}")
    return CioAssignment({e: space.levels[a] for e, a in zip(dual.nodes, action)})


def scale_features(kpi: np.ndarray, throughput_ref_bps: float, n_ues: int) -> np.ndarray:
    """Network-input scaling; raw KPIs (and rewards) are never modified."""
    x = np.array(kpi, dtype=float, copy=True)
    x[..., THROUGHPUT] = x[..., THROUGHPUT] / throughput_ref_bps
    x[..., UE_COUNT] = x[..., UE_COUNT] / max(n_ues, 1)
    return x


def dual_features(x: np.ndarray, dual: DualGraph, cell_index: dict[int, int]) -> np.ndarray:
    """z_e = [x_i, x_j] for each dual node; works on (..., C, K) arrays."""
    ii = [cell_index[i] for i, _ in dual.nodes]
    jj = [cell_index[j] for _, j in dual.nodes]
    return np.concatenate([x[..., ii, :], x[..., jj, :]], axis=-1)


def observe(state: GlobalState | np.ndarray, dual: DualGraph, m_hops: int,
            cell_order: Sequence[int]) -> dict[Edge, Observation]:
    """Rooted M-hop attributed subgraph for every agent."""
    if m_hops < 0:
        raise ValueError("observation radius must be non-negative")
    kpi = state.kpi if isinstance(state, GlobalState) else np.asarray(state)
    z = dual_features(kpi, dual, {c: k for k, c in enumerate(cell_order)})
    index = dual.node_index
    out = {}
    for e in dual.nodes:
        ball = k_hop_neighborhood(dual, e, m_hops)
        nodes = tuple(n for n in dual.nodes if n in ball)
        local = {n: k for k, n in enumerate(nodes)}
        edges = tuple((local[dual.nodes[p]], local[dual.nodes[q]]) for p, q in dual.dual_edges
                      if dual.nodes[p] in ball and dual.nodes[q] in ball)
        out[e] = Observation(e, nodes, edges, z[[index[n] for n in nodes]])
    return out


class HandoverEnv:
    """One simulator instance exposed as an episodic multi-agent environment."""

    def __init__(self, scenario: Scenario, regions: Sequence[Region] | None = None,
                 handover: HandoverConfig | None = None, space: ActionSpace = ActionSpace(),
                 trace: IO[str] | None = None, kpi_stream: IO[str] | None = None):
        self.scenario = scenario
        self.graph = scenario.graph
        self.dual = build_dual_graph(self.graph)
        self.space = space
        self.regions = list(regions) if regions is not None else [centralized_region(self.graph)]
        self.sim = RadioSimulator(scenario, handover)
        self.horizon = scenario.epochs
        self.t = 0
        self.done = True
        self.state: GlobalState | None = None
        self.seed: int | None = None
        self.trace = trace
        self.last_ho: HoEventLog | None = None
        self._kpi_writer = None
        if kpi_stream is not None:
            self._kpi_writer = csv.writer(kpi_stream, lineterminator="\n")
            self._kpi_writer.writerow(["seed", *kpi_columns(scenario.radio.n_mcs_bins)])

    @property
    def n_agents(self) -> int:
        return self.dual.n_nodes

    @property
    def kpi_width(self) -> int:
        return HIST0 + self.scenario.radio.n_mcs_bins

    def features(self, kpi: np.ndarray) -> np.ndarray:
        return scale_features(kpi, self.scenario.throughput_ref_bps, self.scenario.n_ues)

    def reset(self, seed: int) -> GlobalState:
        """Fresh UE placement, neutral CIOs and one warm-up epoch."""
        self.seed = seed
        self.sim.reset(seed)
        kpi, _ = self.sim.step_control(CioAssignment.neutral(self.graph))
        self.state = GlobalState(kpi)
        self.t = 0
        self.done = False
        return self.state

    def reward(self, kpi: np.ndarray) -> RewardReport:
        per_cell = np.array(kpi[:, THROUGHPUT], dtype=float)
        team = float(sum(per_cell))
        dummy = np.zeros(self.graph.n_edges, dtype=int)
        regional = tuple(restrict(r, kpi, dummy, per_cell)[2] for r in self.regions)
        return RewardReport(team, regional, per_cell)

    def step(self, action: np.ndarray) -> tuple[GlobalState, RewardReport, bool]:
        if self.done:
            raise EpisodeFinished("episode has finished; call reset()")
        cio = apply(action, self.dual, self.space)
        kpi, ho = self.sim.step_control(cio)
        report = self.reward(kpi)
        self.t += 1
        self.done = self.t >= self.horizon
        prev, self.state = self.state, GlobalState(kpi)
        self.last_ho = ho
        if self._kpi_writer is not None:
            for row in kpi_rows(self.t - 1, kpi, self.graph.cells):
                self._kpi_writer.writerow([self.seed, *row])
        if self.trace is not None:
            self.trace.write(json.dumps({
                "epoch": self.t - 1, "seed": self.seed, "state": prev.kpi.tolist(),
                "action": [int(a) for a in action], "reward": report.team_reward,
                "region_returns": list(report.region_returns), "handovers": ho.handovers,
                "ping_pongs": ho.ping_pongs,
            }) + "\n")
        return self.state, report, self.done

    env_step = step

    def observe(self, m_hops: int, state: GlobalState | None = None) -> dict[Edge, Observation]:
        st = state if state is not None else self.state
        return observe(self.features(st.kpi), self.dual, m_hops, self.graph.cells)
