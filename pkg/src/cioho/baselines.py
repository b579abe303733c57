"""Non-learning controllers evaluated through the same environment interface as the learner."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .env import ActionSpace, GlobalState, HandoverEnv, scale_features
from .radiosim import RHO
from .scenario import HandoverConfig, Scenario, ttt_instants
from .topology import DualGraph

POLICIES = ("rrm", "son", "delta-cio", "random", "rl-checkpoint")
HEURISTICS = ("rrm", "son", "delta-cio")


@dataclass(frozen=True)
class HeuristicConfig:
    rrm_margin_db: float = 3.0
    son_margin_db: float = 3.0
    son_ttt_ms: float = 110.0
    delta_cio_db: float = 2.0
    load_diff_threshold: float = 0.15

    def __post_init__(self):
        if self.rrm_margin_db <= 0 or self.son_margin_db <= 0 or self.delta_cio_db <= 0:
            raise ValueError("margins must be positive")
        if not 0.0 < self.load_diff_threshold < 1.0:
            raise ValueError("load_diff_threshold must lie in (0, 1)")


def rrm_policy(base: HandoverConfig | None = None, hcfg: HeuristicConfig = HeuristicConfig()) -> HandoverConfig:
    """Instantaneous A3 with a fixed margin: one-instant TTT, neutral CIOs."""
    return replace(base or HandoverConfig(), hysteresis_db=hcfg.rrm_margin_db, ttt_instants=1)


def son_policy(delta_meas_s: float, base: HandoverConfig | None = None,
               hcfg: HeuristicConfig = HeuristicConfig()) -> HandoverConfig:
    return replace(base or HandoverConfig(), hysteresis_db=hcfg.son_margin_db,
                   ttt_instants=ttt_instants(hcfg.son_ttt_ms, delta_meas_s))


class DeltaCio:
    """Load-balancing CIO stepper; the bias memory is cleared by :meth:`reset`."""

    def __init__(self, dual: DualGraph, cell_order: Sequence[int], space: ActionSpace = ActionSpace(),
                 hcfg: HeuristicConfig = HeuristicConfig()):
        self.dual, self.space, self.hcfg = dual, space, hcfg
        pos = {c: k for k, c in enumerate(cell_order)}
        self._i = np.array([pos[i] for i, _ in dual.nodes], dtype=int)
        self._j = np.array([pos[j] for _, j in dual.nodes], dtype=int)
        self.reset()

    def reset(self) -> None:
        self.bias = np.zeros(self.dual.n_nodes)

    def __call__(self, state: GlobalState | np.ndarray) -> np.ndarray:
        kpi = state.kpi if isinstance(state, GlobalState) else np.asarray(state)
        rho = kpi[:, RHO]
        diff = rho[self._i] - rho[self._j]
        thr, step = self.hcfg.load_diff_threshold, self.hcfg.delta_cio_db
        # an overloaded endpoint i gets a lower b_e, which eases handovers i -> j
        self.bias = self.bias - step * (diff > thr) + step * (diff < -thr)
        self.bias = np.array([self.space.snap(b) for b in self.bias])
        return self.space.encode(self.bias)


def delta_cio_policy(state: GlobalState | np.ndarray, controller: DeltaCio) -> np.ndarray:
    return controller(state)


def random_policy(rng: np.random.Generator, n_edges: int, space: ActionSpace = ActionSpace()) -> np.ndarray:
    return rng.integers(0, space.n, size=n_edges)


class Controller:
    """Uniform episode interface: ``handover`` picks the simulator config, ``act`` the joint action."""

    name = "controller"

    def handover(self, scenario: Scenario) -> HandoverConfig:
        return scenario.handover

    def reset(self, seed: int) -> None:
        pass

    def act(self, state: GlobalState) -> np.ndarray:
        raise NotImplementedError


class NeutralController(Controller):
    def __init__(self, name: str, n_edges: int, space: ActionSpace, config):
        self.name, self._config = name, config
        self._action = np.full(n_edges, space.neutral_index, dtype=int)

    def handover(self, scenario: Scenario) -> HandoverConfig:
        return self._config(scenario)

    def act(self, state: GlobalState) -> np.ndarray:
        return self._action


class DeltaCioController(Controller):
    name = "delta-cio"

    def __init__(self, dual: DualGraph, cell_order: Sequence[int], space: ActionSpace, hcfg: HeuristicConfig):
        self.inner = DeltaCio(dual, cell_order, space, hcfg)

    def reset(self, seed: int) -> None:
        self.inner.reset()

    def act(self, state: GlobalState) -> np.ndarray:
        return self.inner(state)


class RandomController(Controller):
    name = "random"

    def __init__(self, n_edges: int, space: ActionSpace, master_seed: int = 0):
        self.n_edges, self.space, self.master_seed = n_edges, space, master_seed
        self.rng = np.random.default_rng(master_seed)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng(np.random.SeedSequence([self.master_seed, int(seed)]))

    def act(self, state: GlobalState) -> np.ndarray:
        return random_policy(self.rng, self.n_edges, self.space)


class ActorController(Controller):
    """Greedy rollouts of a trained actor."""

    name = "rl"

    def __init__(self, actor, throughput_ref_bps: float, n_ues: int):
        self.actor, self.ref, self.n_ues = actor, throughput_ref_bps, n_ues

    def act(self, state: GlobalState) -> np.ndarray:
        logits = self.actor.logits(scale_features(state.kpi, self.ref, self.n_ues)[None]).data[0]
        return np.argmax(logits, axis=-1)


def make_controller(policy: str, scenario: Scenario, dual: DualGraph, space: ActionSpace = ActionSpace(),
                    hcfg: HeuristicConfig = HeuristicConfig(), seed: int = 0) -> Controller:
    n_edges = dual.n_nodes
    if policy == "rrm":
        return NeutralController("rrm", n_edges, space, lambda sc: rrm_policy(sc.handover, hcfg))
    if policy == "son":
        return NeutralController("son", n_edges, space,
                                 lambda sc: son_policy(sc.timescale.delta_meas, sc.handover, hcfg))
    if policy == "delta-cio":
        return DeltaCioController(dual, scenario.graph.cells, space, hcfg)
    if policy == "random":
        return RandomController(n_edges, space, seed)
    raise ValueError(f"unknown policy {policy!r}; expected one of {', '.join(POLICIES)}")


def rollout(controller: Controller, scenario: Scenario, seeds: Sequence[int],
            env: HandoverEnv | None = None) -> list[float]:
    """Raw episode returns of ``controller`` on ``scenario``, one per seed."""
    env = env if env is not None else HandoverEnv(scenario, handover=controller.handover(scenario))
    out = []
    for s in seeds:
        controller.reset(int(s))
        state = env.reset(int(s))
        total, done = 0.0, False
        while not done:
            state, report, done = env.step(controller.act(state))
            total += report.team_reward
        out.append(total)
    return out
