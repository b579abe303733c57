"""Discrete multi-agent TD3 with a shared dual-graph actor and region-wise twin critics."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .env import HandoverEnv, Observation, dual_features, scale_features
from .nn import Adam, GnnLayerSpec, GraphOperators, ParamSet
from .tensor import Tensor
from .topology import DualGraph, NetworkGraph, Region

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "episode", "region_id", "critic1_loss", "critic2_loss", "actor_obj",
              "mean_q", "epsilon_uniform", "return")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    eta1: float = 0.05
    eta2: float = 0.5
    eta2_final: float | None = None  # linear decay target for eta2 (off when None)
    gumbel_temperature: float = 1.0
    huber_delta: float = 1.0
    actor_delay: int = 2
    polyak: float = 0.01
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    batch_size: int = 64
    n_min: int = 500
    capacity: int = 50_000
    total_steps: int = 20_000
    seed: int = 0
    actor_kind: str = "in"  # in | gcn | mlp (centralised MLP actor)
    critic_kind: str = "mlp"  # mlp | gnn
    hidden: int = 64
    mlp_layers: int = 2
    m_hops: int = 2
    reward_scale: float | None = None  # learner reward = r * scale; default 1 / (ref rate * C)

    def __post_init__(self):
        if not 0.0 <= self.eta1 <= self.eta2 <= 1.0:
            raise ValueError("need 0 <= eta1 <= eta2 <= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.actor_delay < 1:
            raise ValueError("actor_delay must be >= 1")
        if not 0.0 < self.polyak <= 1.0:
            raise ValueError("polyak rate must lie in (0, 1]")
        if self.gumbel_temperature <= 0 or self.huber_delta <= 0:
            raise ValueError("temperature and huber delta must be positive")
        if self.batch_size < 1 or self.capacity < self.batch_size:
            raise ValueError("capacity must be at least one batch")
        if self.actor_kind not in ("in", "gcn", "mlp") or self.critic_kind not in ("mlp", "gnn"):
            raise ValueError("unknown actor or critic kind")
        if self.m_hops < 1 or self.hidden < 1 or self.mlp_layers < 1:
            raise ValueError("network sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- action embeddings -----------------------------------------------------

def one_hot(actions: np.ndarray, n_levels: int) -> np.ndarray:
    """(..., E) level indices -> (..., E*L) concatenated one-hot blocks."""
    actions = np.asarray(actions, dtype=int)
    if actions.size and (actions.min() < 0 or actions.max() >= n_levels):
        raise ValueError("action index out of range")
    out = np.zeros(actions.shape + (n_levels,))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out.reshape(actions.shape[:-1] + (actions.shape[-1] * n_levels,))


def embed_actions(action, n_levels: int, n_edges: int | None = None) -> np.ndarray:
    """One-hot embedding for index vectors, flat concatenation for relaxed (E, L) blocks."""
    a = np.asarray(action)
    if a.dtype.kind in "iu":
        if n_edges is not None and a.shape[-1] != n_edges:
            raise ValueError(f"action has {a.shape[-1]} entries, expected {n_edges}")
        return one_hot(a, n_levels)
    if a.shape[-1] != n_levels or (n_edges is not None and a.shape[-2] != n_edges):
        raise ValueError("relaxed action must be (..., E, L)")
    return a.reshape(a.shape[:-2] + (a.shape[-2] * n_levels,))


def embedding_columns(edge_idx: np.ndarray, n_levels: int) -> np.ndarray:
    return (np.asarray(edge_idx, dtype=int)[:, None] * n_levels + np.arange(n_levels)[None, :]).ravel()


# -- models ----------------------------------------------------------------

class Actor:
    """Shared-parameter actor: message passing on the dual graph, MLP head to per-edge logits."""

    def __init__(self, graph: NetworkGraph, dual: DualGraph, kpi_width: int, n_levels: int,
                 cfg: TrainConfig, rng: np.random.Generator):
        self.graph, self.dual = graph, dual
        self.kind = cfg.actor_kind
        self.n_levels = n_levels
        self.cfg = cfg
        self.cell_index = {c: k for k, c in enumerate(graph.cells)}
        self.params = ParamSet()
        head = [cfg.hidden] * (cfg.mlp_layers - 1) + [n_levels]
        if self.kind == "mlp":
            nn.init_mlp(self.params, "head", [graph.n_cells * kpi_width, *([cfg.hidden] * (cfg.mlp_layers - 1)),
                                              dual.n_nodes * n_levels], rng)
        else:
            self.spec = GnnLayerSpec(self.kind, 2 * kpi_width, cfg.hidden, cfg.m_hops)
            self.ops = GraphOperators.from_adjacency(dual.adjacency_matrix())
            nn.init_gnn(self.params, "gnn", self.spec, rng)
            nn.init_mlp(self.params, "head", [cfg.hidden, *head], rng)

    def logits(self, feats: np.ndarray, params: ParamSet | None = None) -> Tensor:
        """Scaled cell features (B, C, K) -> logits (B, E, L)."""
        p = params or self.params
        n_layers = self.cfg.mlp_layers
        if self.kind == "mlp":
            flat = feats.reshape(feats.shape[0], -1)
            out = nn.mlp(p, "head", flat, n_layers)
            return T.reshape(out, (feats.shape[0], self.dual.n_nodes, self.n_levels))
        z = dual_features(feats, self.dual, self.cell_index)
        h = nn.message_pass(p, "gnn", self.spec, self.ops, z)
        return nn.mlp(p, "head", h, n_layers)

    def logits_for_observation(self, obs: Observation, params: ParamSet | None = None) -> np.ndarray:
        """Root logits computed from the rooted subgraph alone (decentralised execution)."""
        if self.kind == "mlp":
            raise ValueError("the centralised MLP actor has no local observation form")
        p = params or self.params
        n = len(obs.nodes)
        adj = np.zeros((n, n))
        for a, b in obs.edges:
            adj[a, b] = adj[b, a] = 1.0
        h = nn.message_pass(p, "gnn", self.spec, GraphOperators.from_adjacency(adj), obs.node_features)
        return nn.mlp(p, "head", h, self.cfg.mlp_layers).data[obs.root_index]


class Critic:
    """Q(s^(j), a^(j)) for one region; MLP over concatenated inputs or GCN readout."""

    def __init__(self, graph: NetworkGraph, region: Region | None, kpi_width: int, n_levels: int,
                 cfg: TrainConfig, rng: np.random.Generator):
        self.region = region
        n_cells = region.n_cells if region is not None else graph.n_cells
        n_edges = region.n_edges if region is not None else graph.n_edges
        self.kind = cfg.critic_kind
        self.n_layers = cfg.mlp_layers + 1
        self.params = ParamSet()
        width = [cfg.hidden] * cfg.mlp_layers
        if self.kind == "mlp":
            nn.init_mlp(self.params, "q", [n_cells * kpi_width + n_edges * n_levels, *width, 1], rng)
        else:
            cells = region.cells if region is not None else graph.cells
            sub = NetworkGraph.from_edges(cells, region.induced_edges if region is not None else graph.edges,
                                          require_connected=False)
            self.ops = GraphOperators.from_adjacency(sub.adjacency_matrix())
            self.spec = GnnLayerSpec("gcn", kpi_width, cfg.hidden, cfg.m_hops)
            nn.init_gnn(self.params, "gnn", self.spec, rng)
            nn.init_mlp(self.params, "q", [cfg.hidden + n_edges * n_levels, *width, 1], rng)

    def q(self, state: np.ndarray, action, params: ParamSet | None = None) -> Tensor:
        """state (B, C_j, K) region features, action (B, E_j*L) embedding -> (B,)."""
        p = params or self.params
        if self.kind == "mlp":
            x = T.concat([state.reshape(state.shape[0], -1), action], axis=-1)
        else:
            h = nn.message_pass(p, "gnn", self.spec, self.ops, state)
            x = T.concat([T.mean(h, axis=1), action], axis=-1)
        out = nn.mlp(p, "q", x, self.n_layers)
        return T.reshape(out, (state.shape[0],))


@dataclass
class CriticPair:
    region_id: int
    region: Region | None  # None on the dedicated centralised path
    q1: Critic
    q2: Critic
    target1: ParamSet
    target2: ParamSet
    opt1: Adam
    opt2: Adam
    state_idx: np.ndarray | None
    action_cols: np.ndarray | None


# -- replay ----------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray  # raw KPI rows (C, K)
    action: np.ndarray  # (E,) level indices
    team_return: float
    region_returns: tuple[float, ...]
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Ring buffer shared by all regions; restriction happens at sample time."""

    def __init__(self, capacity: int, state_shape: tuple[int, int], n_edges: int, n_regions: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, *state_shape))
        self.next_states = np.zeros((capacity, *state_shape))
        self.actions = np.zeros((capacity, n_edges), dtype=int)
        self.team = np.zeros(capacity)
        self.regional = np.zeros((capacity, n_regions))
        self.done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, tr: Transition) -> None:
        k = self.inserted % self.capacity
        self.states[k] = tr.state
        self.next_states[k] = tr.next_state
        self.actions[k] = tr.action
        self.team[k] = tr.team_return
        self.regional[k] = tr.region_returns
        self.done[k] = float(tr.done)
        self.inserted += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Indices drawn uniformly without replacement."""
        return rng.choice(len(self), size=batch_size, replace=False)


# -- exploration -----------------------------------------------------------

def select_actions(logits: np.ndarray, eta1: float, eta2: float, temperature: float,
                   rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Two-threshold exploration per agent; returns (indices, branch) with branch 0/1/2 =
    uniform / Gumbel / greedy. ``rng=None`` means greedy for everyone."""
    logits = np.asarray(logits, dtype=float)
    greedy = np.argmax(logits, axis=-1)
    if rng is None:
        return greedy, np.full(greedy.shape, 2)
    n_agents, n_levels = logits.shape
    u = rng.random(n_agents)
    uniform = rng.integers(0, n_levels, size=n_agents)
    _, gumbel = nn.gumbel_softmax_sample(logits, temperature, rng)
    branch = np.where(u < eta1, 0, np.where(u < eta2, 1, 2))
    actions = np.where(branch == 0, uniform, np.where(branch == 1, gumbel, greedy))
    return actions.astype(int), branch


# -- learner ---------------------------------------------------------------

class TD3DMA:
    """Actor, target actor, region critics and the update rules that tie them together."""

    def __init__(self, graph: NetworkGraph, dual: DualGraph, regions: Sequence[Region] | None,
                 kpi_width: int, n_levels: int, cfg: TrainConfig, throughput_ref_bps: float, n_ues: int,
                 centralized: bool = False):
        self.graph, self.dual, self.cfg = graph, dual, cfg
        self.kpi_width, self.n_levels = kpi_width, n_levels
        self.throughput_ref_bps, self.n_ues = throughput_ref_bps, n_ues
        self.centralized = centralized
        self.reward_scale = cfg.reward_scale if cfg.reward_scale is not None \
            else 1.0 / (throughput_ref_bps * graph.n_cells)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.init_rng = np.random.default_rng(seeds[0])
        self.act_rng = np.random.default_rng(seeds[1])
        self.sample_rng = np.random.default_rng(seeds[2])
        self.actor = Actor(graph, dual, kpi_width, n_levels, cfg, self.init_rng)
        self.actor_target = self.actor.params.clone()
        self.actor_opt = Adam(self.actor.params, cfg.actor_lr)
        if centralized:
            self.critics = [self._pair(0, None)]
        else:
            if not regions:
                raise ValueError("at least one region is required")
            self.critics = [self._pair(j, r) for j, r in enumerate(regions)]
        self.n_critic_updates = 0

    def _pair(self, j: int, region: Region | None) -> CriticPair:
        args = (self.graph, region, self.kpi_width, self.n_levels, self.cfg)
        q1 = Critic(*args, self.init_rng)
        q2 = Critic(*args, self.init_rng)
        return CriticPair(
            j, region, q1, q2, q1.params.clone(), q2.params.clone(),
            Adam(q1.params, self.cfg.critic_lr), Adam(q2.params, self.cfg.critic_lr),
            None if region is None else region.cell_idx,
            None if region is None else embedding_columns(region.edge_idx, self.n_levels),
        )

    @property
    def regions(self) -> list[Region | None]:
        return [c.region for c in self.critics]

    def features(self, kpi: np.ndarray) -> np.ndarray:
        return scale_features(kpi, self.throughput_ref_bps, self.n_ues)

    # restriction helpers: the centralised path never calls them
    def _state(self, pair: CriticPair, feats: np.ndarray) -> np.ndarray:
        return feats if pair.state_idx is None else feats[:, pair.state_idx]

    def _action(self, pair: CriticPair, emb):
        if pair.action_cols is None:
            return emb
        if isinstance(emb, Tensor):
            return T.take(emb, pair.action_cols, axis=1)
        return emb[:, pair.action_cols]

    def policy_logits(self, kpi: np.ndarray) -> np.ndarray:
        return self.actor.logits(self.features(kpi)[None]).data[0]

    def act(self, kpi: np.ndarray, explore: bool = True, eta2: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        logits = self.policy_logits(kpi)
        if not explore:
            return select_actions(logits, 0, 0, 1.0, None)
        return select_actions(logits, self.cfg.eta1, self.cfg.eta2 if eta2 is None else eta2,
                              self.cfg.gumbel_temperature, self.act_rng)

    # -- update rules --
    def target_relaxed(self, next_feats: np.ndarray) -> np.ndarray:
        """Softmax of target-actor logits, flattened to (B, E*L); no sampling, no tape."""
        logits = self.actor.logits(next_feats, self.actor_target).data
        return T.softmax_array(logits, axis=-1).reshape(len(next_feats), -1)

    def td_target(self, pair: CriticPair, rewards: np.ndarray, next_feats: np.ndarray,
                  next_relaxed: np.ndarray, done: np.ndarray,
                  target_q: Callable | None = None) -> np.ndarray:
        s2 = self._state(pair, next_feats)
        a2 = self._action(pair, next_relaxed)
        if target_q is None:
            q1 = pair.q1.q(s2, a2, pair.target1).data
            q2 = pair.q2.q(s2, a2, pair.target2).data
        else:
            q1, q2 = target_q(pair, s2, a2)
        return rewards + self.cfg.gamma * (1.0 - done) * np.minimum(q1, q2)

    def critic_update(self, pair: CriticPair, feats: np.ndarray, onehot: np.ndarray,
                      y: np.ndarray) -> tuple[float, float, float]:
        s = self._state(pair, feats)
        a = self._action(pair, onehot)
        out = []
        q_mean = 0.0
        for critic, opt in ((pair.q1, pair.opt1), (pair.q2, pair.opt2)):
            critic.params.zero_grad()
            q = critic.q(s, a)
            loss = T.mean(T.huber(q - y, self.cfg.huber_delta))
            loss.backward()
            opt.step()
            out.append(float(loss.data))
            if critic is pair.q1:
                q_mean = float(q.data.mean())
        return out[0], out[1], q_mean

    def actor_update(self, feats: np.ndarray) -> list[float]:
        """One ascent step on the sum of region surrogates (first critic, relaxed actions)."""
        self.actor.params.zero_grad()
        probs = T.softmax(self.actor.logits(feats), axis=-1)
        relaxed = T.reshape(probs, (feats.shape[0], -1))
        objectives = []
        for pair in self.critics:
            obj = T.mean(pair.q1.q(self._state(pair, feats), self._action(pair, relaxed)))
            T.mul(obj, -1.0).backward()
            objectives.append(float(obj.data))
        for pair in self.critics:
            pair.q1.params.zero_grad()
        self.actor_opt.step()
        return objectives

    def sync_targets(self) -> None:
        rate = self.cfg.polyak
        for pair in self.critics:
            nn.polyak_update(pair.target1, pair.q1.params, rate)
            nn.polyak_update(pair.target2, pair.q2.params, rate)
        nn.polyak_update(self.actor_target, self.actor.params, rate)

    def update(self, buffer: ReplayBuffer) -> list[dict]:
        """One full update cycle from a fresh minibatch; returns one log row per region."""
        cfg = self.cfg
        idx = buffer.sample(cfg.batch_size, self.sample_rng)
        feats = self.features(buffer.states[idx])
        next_feats = self.features(buffer.next_states[idx])
        onehot = one_hot(buffer.actions[idx], self.n_levels)
        done = buffer.done[idx]
        next_relaxed = self.target_relaxed(next_feats)
        rows = []
        for pair in self.critics:
            raw = buffer.team[idx] if pair.region is None else buffer.regional[idx, pair.region_id]
            y = self.td_target(pair, raw * self.reward_scale, next_feats, next_relaxed, done)
            l1, l2, qm = self.critic_update(pair, feats, onehot, y)
            rows.append({"region_id": pair.region_id, "critic1_loss": l1, "critic2_loss": l2, "mean_q": qm,
                         "actor_obj": None})
        self.n_critic_updates += 1
        if self.n_critic_updates % cfg.actor_delay == 0:
            for row, obj in zip(rows, self.actor_update(feats)):
                row["actor_obj"] = obj
            self.sync_targets()
        return rows

    # -- persistence --
    def param_groups(self) -> dict[str, ParamSet]:
        groups = {"actor": self.actor.params, "actor_target": self.actor_target}
        for pair in self.critics:
            j = pair.region_id
            groups.update({f"critic{j}.q1": pair.q1.params, f"critic{j}.q2": pair.q2.params,
                           f"critic{j}.target1": pair.target1, f"critic{j}.target2": pair.target2})
        return groups

    def save(self, path, meta: dict | None = None) -> None:
        m = {"config": self.cfg.to_dict(), "centralized": self.centralized,
             "throughput_ref_bps": self.throughput_ref_bps, "n_ues": self.n_ues}
        m.update(meta or {})
        nn.save_params(path, {"actor": self.actor.params}, m)


def load_actor(path, graph: NetworkGraph, dual: DualGraph, kpi_width: int, n_levels: int) -> tuple[Actor, dict]:
    groups, meta = nn.load_params(path)
    cfg = TrainConfig.from_dict(meta["config"])
    actor = Actor(graph, dual, kpi_width, n_levels, cfg, np.random.default_rng(0))
    groups["actor"].check_congruent(actor.params)
    for k, t in groups["actor"].items():
        actor.params[k].data = t.data
    return actor, meta


# -- training loop ---------------------------------------------------------

@dataclass
class TrainResult:
    learner: TD3DMA
    log_rows: list[dict]
    episode_returns: list[float]
    n_updates: int


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_log_csv(rows: Iterable[dict], fh, header_comment: str | None = None) -> None:
    if header_comment:
        fh.write(f"# {header_comment}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([format_value(r.get(k)) for k in LOG_FIELDS])


def log_text(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    write_log_csv(rows, buf)
    return buf.getvalue()


def train(envs: HandoverEnv | Sequence[HandoverEnv], cfg: TrainConfig, centralized: bool = False,
          episode_seeds: Iterable[int] | None = None, regions: Sequence[Region] | None = None,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Collect with exploration and learn off-policy (round-robin over ``envs`` per episode)."""
    envs = [envs] if isinstance(envs, HandoverEnv) else list(envs)
    base = envs[0]
    for e in envs[1:]:
        if e.graph.fingerprint() != base.graph.fingerprint():
            raise ValueError("all training scenarios must share one topology")
    regions = list(regions) if regions is not None else base.regions
    learner = TD3DMA(base.graph, base.dual, regions, base.kpi_width, base.space.n, cfg,
                     base.scenario.throughput_ref_bps, base.scenario.n_ues, centralized=centralized)
    buffer = ReplayBuffer(cfg.capacity, (base.graph.n_cells, base.kpi_width), base.graph.n_edges, len(regions))
    if episode_seeds is None:
        seed_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        episode_seeds = iter(lambda: int(seed_rng.integers(2**31)), None)
    seeds = iter(episode_seeds)
    rows: list[dict] = []
    returns: list[float] = []
    step = episode = 0
    last_return: float | None = None
    n_updates = 0
    while step < cfg.total_steps:
        env = envs[episode % len(envs)]
        state = env.reset(next(seeds))
        ep_return = 0.0
        done = False
        while not done and step < cfg.total_steps:
            eta2 = cfg.eta2
            if cfg.eta2_final is not None:
                eta2 = cfg.eta2 + (cfg.eta2_final - cfg.eta2) * step / max(cfg.total_steps - 1, 1)
            action, _ = learner.act(state.kpi, explore=True, eta2=eta2)
            next_state, report, done = env.step(action)
            buffer.add(Transition(state.kpi, action, report.team_reward,
                                  report.region_returns if not centralized else (report.team_reward,) * len(regions),
                                  next_state.kpi, done))
            ep_return += report.team_reward
            state = next_state
            step += 1
            if len(buffer) >= max(cfg.n_min, cfg.batch_size):
                for r in learner.update(buffer):
                    r.update(step=step, episode=episode, epsilon_uniform=cfg.eta1, **{"return": last_return})
                    rows.append(r)
                n_updates += 1
        if done:
            returns.append(ep_return)
            last_return = ep_return
            if progress:
                progress(step, ep_return)
        episode += 1
    return TrainResult(learner, rows, returns, n_updates)


def evaluate(actor_or_learner, env: HandoverEnv, seeds: Sequence[int]) -> list[float]:
    """Greedy rollouts; no exploration, no parameter updates."""
    if isinstance(actor_or_learner, TD3DMA):
        actor, ref, n_ues = actor_or_learner.actor, actor_or_learner.throughput_ref_bps, actor_or_learner.n_ues
    else:
        actor, ref, n_ues = actor_or_learner, env.scenario.throughput_ref_bps, env.scenario.n_ues
    out = []
    for s in seeds:
        state = env.reset(int(s))
        total, done = 0.0, False
        while not done:
            logits = actor.logits(scale_features(state.kpi, ref, n_ues)[None]).data[0]
            state, report, done = env.step(np.argmax(logits, axis=-1))
            total += report.team_reward
        out.append(total)
    return out
