"""Seeded two-timescale downlink simulator with A3/CIO/TTT handover.

Measurement instants ``n`` advance mobility, radio, handover and scheduling;
control epochs ``t`` group ``N_m`` instants, install one CIO assignment and
report epoch-averaged per-cell KPIs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .scenario import HandoverConfig, RadioConfig, Scenario
from .topology import Edge, NetworkGraph

THERMAL_NOISE_DBM_HZ = -174.0
MIN_DISTANCE_M = 1.0

# KPI column layout: rho, throughput_bps, ue_count, then histogram bins
RHO, THROUGHPUT, UE_COUNT, HIST0 = 0, 1, 2, 3


def kpi_width(radio: RadioConfig) -> int:
    return HIST0 + radio.n_mcs_bins


@dataclass(frozen=True)
class CioAssignment:
    """One bias per canonical edge ``(i, j)``, ``i < j``: CIO_ij = b, CIO_ji = -b."""

    bias_per_edge: Mapping[Edge, float]

    def cio(self, serving: int, target: int) -> float:
        if serving < target:
            return float(self.bias_per_edge[(serving, target)])
        return -float(self.bias_per_edge[(target, serving)])

    def matrix(self, graph: NetworkGraph) -> np.ndarray:
        """Directed CIO matrix indexed by cell position; zero off the edge set."""
        missing = [e for e in graph.edges if e not in self.bias_per_edge]
        if missing:
            raise KeyError(f"missing CIO bias for edges {missing}")
        m = np.zeros((graph.n_cells, graph.n_cells))
        for e in graph.edges:
            i, j = graph.cell_index(e[0]), graph.cell_index(e[1])
            b = float(self.bias_per_edge[e])
            m[i, j] = b
            m[j, i] = -b
        return m

    @classmethod
    def neutral(cls, graph: NetworkGraph) -> "CioAssignment":
        return cls({e: 0.0 for e in graph.edges})

    @classmethod
    def from_vector(cls, graph: NetworkGraph, biases: Sequence[float]) -> "CioAssignment":
        if len(biases) != graph.n_edges:
            raise KeyError(f"expected {graph.n_edges} edge biases, got {len(biases)}")
        return cls({e: float(b) for e, b in zip(graph.edges, biases)})


@dataclass(frozen=True)
class CellKpi:
    rho: float
    throughput_bps: float
    ue_count: float
    mcs_hist: tuple[float, ...]

    @classmethod
    def from_row(cls, row: np.ndarray) -> "CellKpi":
        return cls(float(row[RHO]), float(row[THROUGHPUT]), float(row[UE_COUNT]),
                   tuple(float(v) for v in row[HIST0:]))

    def as_row(self) -> np.ndarray:
        return np.array([self.rho, self.throughput_bps, self.ue_count, *self.mcs_hist])


@dataclass
class HoEventLog:
    handovers: int = 0
    ping_pongs: int = 0
    per_edge: dict[tuple[int, int], int] = field(default_factory=dict)  # directed (from, to)


# -- radio primitives ------------------------------------------------------

def pathloss_db(distance_m, radio: RadioConfig):
    d = np.maximum(np.asarray(distance_m, dtype=float), MIN_DISTANCE_M)
    return radio.ref_loss_db + 10.0 * radio.pathloss_exponent * np.log10(d / radio.ref_distance_m)


def rsrp(tx_power_dbm: float, distance_m, radio: RadioConfig, shadow_db=0.0):
    """Received power in dBm under log-distance path loss and a shadowing sample."""
    return tx_power_dbm - pathloss_db(distance_m, radio) - shadow_db


def noise_dbm(radio: RadioConfig) -> float:
    return THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(radio.bandwidth_hz) + radio.noise_figure_db


def sinr_to_spectral_efficiency(sinr_db, eta_min: float = 0.15, eta_max: float = 7.4):
    """Shannon mapping clamped to ``[eta_min, eta_max]`` bit/s/Hz."""
    s = np.asarray(sinr_db, dtype=float)
    with np.errstate(over="ignore"):
        eta = np.log2(1.0 + np.power(10.0, s / 10.0))
    out = np.clip(eta, eta_min, eta_max)
    return float(out) if out.ndim == 0 else out


def a3_check(cio_ij: float, hysteresis_db: float, rsrp_serving: float, rsrp_neighbor: float) -> bool:
    """Neighbour is offset-better than serving: strict ``RSRP_j - RSRP_i > CIO_ij + H``."""
    return bool(rsrp_neighbor - rsrp_serving > cio_ij + hysteresis_db)


def ttt_step(counters: np.ndarray, a3: np.ndarray, rsrp_neighbors: np.ndarray,
             cio_to_neighbors: np.ndarray, n_ttt: int) -> tuple[np.ndarray, int | None]:
    """Advance one UE's per-neighbour TTT counters by one measurement instant.

    All arrays are aligned to the UE's candidate list, ordered by cell id.
    Returns the updated counters and the chosen target position (or ``None``).
    Counters are all reset when a handover fires.
    """
    a3 = np.asarray(a3, dtype=bool)
    counters = np.where(a3, np.minimum(np.asarray(counters) + 1, n_ttt), 0)
    eligible = counters >= n_ttt
    if not eligible.any():
        return counters, None
    score = np.where(eligible, np.asarray(rsrp_neighbors, float) + np.asarray(cio_to_neighbors, float), -np.inf)
    target = int(np.argmax(score))
    return np.zeros_like(counters), target


def round_robin_allocate(required: np.ndarray, n_prb: int, start: int = 0) -> np.ndarray:
    """Demand-capped round-robin: one PRB per UE per pass, starting at ``start``.

    Closed form of the pass-by-pass trace: every UE receives ``min(req, k)``
    for the largest full level ``k`` that fits, and the leftover PRBs go to the
    first UEs (in rotation order) still wanting more.
    """
    req = np.asarray(required, dtype=np.int64)
    m = len(req)
    if m == 0 or n_prb <= 0:
        return np.zeros(m, dtype=np.int64)
    if req.sum() <= n_prb:
        return req.copy()
    lo, hi = 0, int(req.max())
    while lo < hi:  # largest k with sum(min(req, k)) <= n_prb
        mid = (lo + hi + 1) // 2
        if np.minimum(req, mid).sum() <= n_prb:
            lo = mid
        else:
            hi = mid - 1
    alloc = np.minimum(req, lo)
    left = n_prb - int(alloc.sum())
    order = (np.arange(m) + start) % m
    for u in order:
        if left == 0:
            break
        if req[u] > lo:
            alloc[u] += 1
            left -= 1
    return alloc


def schedule(demand_bps: np.ndarray, eta: np.ndarray, radio: RadioConfig,
             start: int = 0, blocked: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """PRBs and rates for the UEs of one cell; ``blocked`` UEs (in HO interruption) get nothing."""
    demand_bps = np.asarray(demand_bps, dtype=float)
    eta = np.asarray(eta, dtype=float)
    per_prb = eta * radio.prb_bandwidth_hz
    req = np.ceil(np.round(demand_bps / per_prb, 9)).astype(np.int64)
    if blocked is not None:
        req = np.where(blocked, 0, req)
    req = np.minimum(req, radio.n_prb)
    alloc = round_robin_allocate(req, radio.n_prb, start)
    return alloc, alloc * per_prb


# -- simulator state -------------------------------------------------------

@dataclass
class SimState:
    instant: int
    epoch: int
    pos: np.ndarray  # (U, 2)
    heading: np.ndarray  # (U,) radians
    box: np.ndarray  # (U,) box index
    serving: np.ndarray  # (U,) cell position
    counters: np.ndarray  # (U, C) consecutive A3 successes per candidate cell
    interrupt: np.ndarray  # (U,) remaining zero-PRB instants
    demand_on: np.ndarray  # (U,) bool
    on_timer: np.ndarray  # (U,) seconds until on/off toggle
    shadow: np.ndarray  # (U, C) dB, redrawn every epoch
    cio: np.ndarray  # (C, C) directed CIO matrix
    last_from: np.ndarray  # (U,) source cell of previous HO, -1 if none
    last_ho: np.ndarray  # (U,) instant of previous HO
    rr_start: np.ndarray  # (C,) round-robin rotation pointer
    acc: np.ndarray  # (C, 3) running sums of rho, T, U over the epoch
    hist: np.ndarray  # (C, bins) spectral-efficiency counts
    n_acc: int
    ho_log: HoEventLog
    rate: np.ndarray  # (U,) last R_u
    prb: np.ndarray  # (U,) last l_u
    rng_mobility: np.random.Generator = field(repr=False)
    rng_shadow: np.random.Generator = field(repr=False)
    rng_traffic: np.random.Generator = field(repr=False)


class RadioSimulator:
    """Simulator bound to one scenario; ``reset`` starts a seeded episode."""

    def __init__(self, scenario: Scenario, handover: HandoverConfig | None = None):
        self.scenario = scenario
        self.graph = scenario.graph
        self.radio = scenario.radio
        self.handover = handover or scenario.handover
        self.n_cells = self.graph.n_cells
        self.cell_xy = np.array([scenario.positions[c] for c in self.graph.cells], dtype=float)
        self.tx = np.array([self.radio.tx_power(c) for c in self.graph.cells])
        self.neighbor_mask = self.graph.adjacency_matrix() > 0
        self.noise_mw = 10.0 ** (noise_dbm(self.radio) / 10.0)
        boxes = scenario.mobility.boxes
        self.box_lo = np.array([[b.x[0], b.y[0]] for b in boxes])
        self.box_hi = np.array([[b.x[1], b.y[1]] for b in boxes])
        self.ue_box = np.concatenate([np.full(b.n_ues, k) for k, b in enumerate(boxes)]).astype(int)
        prof = [scenario.profiles[boxes[k].profile] for k in self.ue_box]
        self.ue_rate = np.array([p.rate_bps for p in prof])
        self.ue_onoff = np.array([p.kind == "onoff" for p in prof])
        self.ue_mean_on = np.array([p.mean_on_s for p in prof])
        self.ue_mean_off = np.array([p.mean_off_s for p in prof])
        self.n_ues = len(self.ue_box)
        self.state: SimState | None = None

    # -- episode control --
    def reset(self, seed: int) -> SimState:
        ss = np.random.SeedSequence(seed)
        rm, rs, rt, rp = (np.random.default_rng(s) for s in ss.spawn(4))
        lo, hi = self.box_lo[self.ue_box], self.box_hi[self.ue_box]
        pos = lo + rp.random((self.n_ues, 2)) * (hi - lo)
        heading = rp.uniform(0.0, 2 * np.pi, self.n_ues)
        demand_on = np.where(self.ue_onoff, rp.random(self.n_ues) < 0.5, True)
        on_timer = np.where(demand_on, rp.exponential(self.ue_mean_on), rp.exponential(self.ue_mean_off))
        c = self.n_cells
        st = SimState(
            instant=0, epoch=0, pos=pos, heading=heading, box=self.ue_box.copy(),
            serving=np.zeros(self.n_ues, dtype=int), counters=np.zeros((self.n_ues, c), dtype=int),
            interrupt=np.zeros(self.n_ues, dtype=int), demand_on=demand_on, on_timer=on_timer,
            shadow=self._draw_shadow(rs), cio=np.zeros((c, c)),
            last_from=np.full(self.n_ues, -1), last_ho=np.full(self.n_ues, -10**9),
            rr_start=np.zeros(c, dtype=int), acc=np.zeros((c, 3)),
            hist=np.zeros((c, self.radio.n_mcs_bins)), n_acc=0, ho_log=HoEventLog(),
            rate=np.zeros(self.n_ues), prb=np.zeros(self.n_ues, dtype=int),
            rng_mobility=rm, rng_shadow=rs, rng_traffic=rt,
        )
        st.serving = np.argmax(self.rsrp_matrix(st) + 0.0, axis=1)
        self.state = st
        return st

    def _draw_shadow(self, rng: np.random.Generator) -> np.ndarray:
        sd = self.radio.shadowing_std_db
        if sd <= 0:
            return np.zeros((self.n_ues, self.n_cells))
        return rng.normal(0.0, sd, size=(self.n_ues, self.n_cells))

    def rsrp_matrix(self, st: SimState) -> np.ndarray:
        d = np.hypot(st.pos[:, None, 0] - self.cell_xy[None, :, 0], st.pos[:, None, 1] - self.cell_xy[None, :, 1])
        return rsrp(self.tx[None, :], d, self.radio, st.shadow)

    # -- measurement timescale --
    def _move(self, st: SimState) -> None:
        mob = self.scenario.mobility
        dt = self.scenario.timescale.delta_meas
        if mob.turn_interval_s > 0:
            turn = st.rng_mobility.random(self.n_ues) < min(1.0, dt / mob.turn_interval_s)
            new_heading = st.rng_mobility.uniform(0.0, 2 * np.pi, self.n_ues)
            st.heading = np.where(turn, new_heading, st.heading)
        step = mob.speed_mps * dt
        vx, vy = np.cos(st.heading), np.sin(st.heading)
        pos = st.pos + step * np.stack([vx, vy], axis=1)
        lo, hi = self.box_lo[st.box], self.box_hi[st.box]
        under, over = pos < lo, pos > hi
        pos = np.where(under, 2 * lo - pos, pos)
        pos = np.where(over, 2 * hi - pos, pos)
        pos = np.clip(pos, lo, hi)
        flip = under | over
        vx = np.where(flip[:, 0], -vx, vx)
        vy = np.where(flip[:, 1], -vy, vy)
        st.heading = np.arctan2(vy, vx)
        st.pos = pos

    def _traffic(self, st: SimState) -> np.ndarray:
        dt = self.scenario.timescale.delta_meas
        if self.ue_onoff.any():
            st.on_timer = st.on_timer - dt
            flip = self.ue_onoff & (st.on_timer <= 0)
            if flip.any():
                st.demand_on = np.where(flip, ~st.demand_on, st.demand_on)
                draw_on = st.rng_traffic.exponential(self.ue_mean_on)
                draw_off = st.rng_traffic.exponential(self.ue_mean_off)
                st.on_timer = np.where(flip, np.where(st.demand_on, draw_on, draw_off), st.on_timer)
        return np.where(st.demand_on, self.ue_rate, 0.0)

    def _handover(self, st: SimState, rx: np.ndarray) -> None:
        ho = self.handover
        u_idx = np.arange(self.n_ues)
        serv_rx = rx[u_idx, st.serving]
        cio_row = st.cio[st.serving]  # (U, C) CIO_{serving, j}
        cand = self.neighbor_mask[st.serving]
        a3 = cand & (rx - serv_rx[:, None] > cio_row + ho.hysteresis_db)
        st.counters = np.where(a3, np.minimum(st.counters + 1, ho.ttt_instants), 0)
        eligible = st.counters >= ho.ttt_instants
        fire = eligible.any(axis=1)
        if not fire.any():
            return
        score = np.where(eligible, rx + cio_row, -np.inf)
        target = np.argmax(score, axis=1)
        for u in np.nonzero(fire)[0]:
            src, dst = int(st.serving[u]), int(target[u])
            log = st.ho_log
            log.handovers += 1
            key = (self.graph.cells[src], self.graph.cells[dst])
            log.per_edge[key] = log.per_edge.get(key, 0) + 1
            if st.last_from[u] == dst and st.instant - st.last_ho[u] <= ho.ping_pong_window_instants:
                log.ping_pongs += 1
            st.last_from[u] = src
            st.last_ho[u] = st.instant
            st.serving[u] = dst
            st.counters[u] = 0
            st.interrupt[u] = ho.ho_interruption_instants

    def step_measurement(self) -> SimState:
        st = self.state
        self._move(st)
        demand = self._traffic(st)
        rx = self.rsrp_matrix(st)
        self._handover(st, rx)

        rx_mw = np.power(10.0, rx / 10.0)
        u_idx = np.arange(self.n_ues)
        sig = rx_mw[u_idx, st.serving]
        interf = rx_mw.sum(axis=1) - sig
        sinr_db = 10.0 * np.log10(sig / (self.noise_mw + interf))
        eta = sinr_to_spectral_efficiency(sinr_db, self.radio.eta_min, self.radio.eta_max)

        blocked = st.interrupt > 0
        prb = np.zeros(self.n_ues, dtype=int)
        rate = np.zeros(self.n_ues)
        cell_prb = np.zeros(self.n_cells)
        cell_tp = np.zeros(self.n_cells)
        cell_ue = np.bincount(st.serving, minlength=self.n_cells).astype(float)
        for c in range(self.n_cells):
            ues = np.nonzero(st.serving == c)[0]
            if len(ues) == 0:
                continue
            start = int(st.rr_start[c] % len(ues))
            l, r = schedule(demand[ues], eta[ues], self.radio, start, blocked[ues])
            prb[ues], rate[ues] = l, r
            cell_prb[c] = l.sum()
            cell_tp[c] = r.sum()
            st.rr_start[c] += 1
        nb = self.radio.n_mcs_bins
        span = self.radio.eta_max - self.radio.eta_min
        bins = np.clip(((eta - self.radio.eta_min) / span * nb).astype(int), 0, nb - 1)
        np.add.at(st.hist, (st.serving, bins), 1.0)
        st.interrupt = np.maximum(st.interrupt - 1, 0)
        st.prb, st.rate = prb, rate
        st.acc[:, 0] += cell_prb / self.radio.n_prb
        st.acc[:, 1] += cell_tp
        st.acc[:, 2] += cell_ue
        st.n_acc += 1
        st.instant += 1
        return st

    # -- control timescale --
    def step_control(self, cio: CioAssignment | np.ndarray) -> tuple[np.ndarray, HoEventLog]:
        """Run one control epoch under ``cio``; returns (C, K) KPI rows and the HO log."""
        st = self.state
        if st is None:
            raise RuntimeError("simulator not reset")
        st.cio = cio.matrix(self.graph) if isinstance(cio, CioAssignment) else np.asarray(cio, dtype=float)
        if st.epoch > 0 or st.instant > 0:
            st.shadow = self._draw_shadow(st.rng_shadow)
        st.ho_log = HoEventLog()
        st.acc[:] = 0.0
        st.hist[:] = 0.0
        st.n_acc = 0
        for _ in range(self.scenario.timescale.n_meas_per_control):
            self.step_measurement()
        kpi = np.zeros((self.n_cells, kpi_width(self.radio)))
        kpi[:, RHO] = st.acc[:, 0] / st.n_acc
        kpi[:, THROUGHPUT] = st.acc[:, 1] / st.n_acc
        kpi[:, UE_COUNT] = st.acc[:, 2] / st.n_acc
        tot = st.hist.sum(axis=1, keepdims=True)
        kpi[:, HIST0:] = np.divide(st.hist, tot, out=np.zeros_like(st.hist), where=tot > 0)
        st.epoch += 1
        return kpi, st.ho_log


def kpi_columns(n_bins: int) -> list[str]:
    return ["epoch", "cell", "rho", "throughput_bps", "ue_count"] + [f"m{k}" for k in range(n_bins)]


def kpi_rows(epoch: int, kpi: np.ndarray, cells: Sequence[int]) -> list[list]:
    """One row per cell in the KPI-stream layout of :func:`kpi_columns`."""
    return [[epoch, c, *(float(v) for v in row)] for c, row in zip(cells, kpi)]
