"""Layers, parameter sets, optimisers and sampling utilities on top of :mod:`cioho.tensor`."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "cioho-params/1"


class ParamSet:
    """Ordered mapping of parameter name to :class:`Tensor`."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._t[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def values(self):
        return self._t.values()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._t.items()}

    def zero_grad(self) -> None:
        for p in self._t.values():
            p.grad = None

    def clone(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.copy(), requires_grad=True, name=k)
                         for k, v in self._t.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.data.ravel() for v in self._t.values()]) if self._t else np.zeros(0)

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()

    def check_congruent(self, other: "ParamSet") -> None:
        if self.shapes() != other.shapes():
            raise ValueError("parameter sets are not shape-congruent")


def init_linear(params: ParamSet, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    bound = np.sqrt(1.0 / fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                                 requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")


def linear(params: ParamSet, name: str, x) -> Tensor:
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def init_mlp(params: ParamSet, name: str, sizes: list[int], rng: np.random.Generator) -> None:
    for k in range(len(sizes) - 1):
        init_linear(params, f"{name}.{k}", sizes[k], sizes[k + 1], rng)


def mlp(params: ParamSet, name: str, x, n_layers: int) -> Tensor:
    """Affine-ReLU stack whose last layer is linear."""
    h = x
    for k in range(n_layers):
        h = linear(params, f"{name}.{k}", h)
        if k < n_layers - 1:
            h = T.relu(h)
    return h


def forward_mlp(params: ParamSet, x, name: str = "mlp") -> Tensor:
    n = sum(1 for k in params if k.startswith(f"{name}.") and k.endswith(".w"))
    if n == 0:
        raise KeyError(f"no layers named {name!r}")
    if np.shape(x.data if isinstance(x, Tensor) else x)[-1] != params[f"{name}.0.w"].shape[0]:
        raise ValueError("input width does not match first layer")
    return mlp(params, name, x, n)


@dataclass(frozen=True)
class GnnLayerSpec:
    kind: str  # "gcn" | "in"
    in_dim: int
    hidden: int
    n_layers: int

    def __post_init__(self):
        if self.kind not in ("gcn", "in"):
            raise ValueError(f"unknown message-passing kind {self.kind!r}")
        if self.n_layers < 1 or self.in_dim < 1 or self.hidden < 1:
            raise ValueError("layer count and widths must be positive")


@dataclass(frozen=True)
class GraphOperators:
    """Constant matrices implementing aggregation on a fixed graph."""

    mean_adj: np.ndarray  # row-normalised (A + I)
    gather_src: np.ndarray  # (D, N) one-hot rows, D directed edges
    gather_dst: np.ndarray
    scatter_dst: np.ndarray  # (N, D)

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> "GraphOperators":
        n = adj.shape[0]
        a_hat = adj + np.eye(n)
        mean_adj = a_hat / a_hat.sum(axis=1, keepdims=True)
        src, dst = np.nonzero(adj)
        d = len(src)
        gs = np.zeros((d, n))
        gd = np.zeros((d, n))
        gs[np.arange(d), src] = 1.0
        gd[np.arange(d), dst] = 1.0
        return cls(mean_adj, gs, gd, gd.T.copy())


def init_gnn(params: ParamSet, name: str, spec: GnnLayerSpec, rng: np.random.Generator) -> None:
    width = spec.in_dim
    for k in range(spec.n_layers):
        if spec.kind == "gcn":
            init_linear(params, f"{name}.{k}", width, spec.hidden, rng)
        else:
            init_mlp(params, f"{name}.{k}.msg", [2 * width, spec.hidden, spec.hidden], rng)
            init_mlp(params, f"{name}.{k}.upd", [width + spec.hidden, spec.hidden, spec.hidden], rng)
        width = spec.hidden


def message_pass(params: ParamSet, name: str, spec: GnnLayerSpec, ops: GraphOperators, h) -> Tensor:
    """Run ``spec.n_layers`` rounds of message passing on node features ``(..., N, F)``."""
    h = T.as_tensor(h)
    if h.shape[-1] != spec.in_dim or h.shape[-2] != ops.mean_adj.shape[0]:
        raise ValueError(f"node features {h.shape} do not match graph/spec")
    for k in range(spec.n_layers):
        if spec.kind == "gcn":
            h = T.relu(linear(params, f"{name}.{k}", T.matmul(ops.mean_adj, h)))
        else:
            if ops.gather_src.shape[0]:
                pair = T.concat([T.matmul(ops.gather_src, h), T.matmul(ops.gather_dst, h)], axis=-1)
                msg = mlp(params, f"{name}.{k}.msg", pair, 2)
                agg = T.matmul(ops.scatter_dst, msg)
            else:
                agg = np.zeros(h.shape[:-1] + (spec.hidden,))
            h = T.relu(mlp(params, f"{name}.{k}.upd", T.concat([h, agg], axis=-1), 2))
    return h


# -- categorical utilities -------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    return T.softmax_array(np.asarray(logits, dtype=float), axis=-1)


def gumbel_softmax_sample(logits: np.ndarray, temperature: float,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Relaxed sample ``softmax((logits + G) / tau)`` and its argmax."""
    if temperature <= 0:
        raise ValueError("Gumbel-Softmax temperature must be positive")
    logits = np.asarray(logits, dtype=float)
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=logits.shape)
    g = -np.log(-np.log(u))
    relaxed = T.softmax_array((logits + g) / temperature, axis=-1)
    return relaxed, np.argmax(relaxed, axis=-1)


# -- optimisation ----------------------------------------------------------

class Adam:
    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: Adam, lr: float | None = None) -> ParamSet:
    if lr is not None:
        state.lr = lr
    state.step(grads)
    return params


def polyak_update(target: ParamSet, source: ParamSet, rate: float) -> ParamSet:
    """In-place ``target <- (1 - rate) * target + rate * source``."""
    if not 0.0 < rate <= 1.0:
        raise ValueError("polyak rate must lie in (0, 1]")
    target.check_congruent(source)
    for k, t in target.items():
        s = source[k].data
        t.data = s.copy() if rate == 1.0 else (1.0 - rate) * t.data + rate * s
    return target


# -- checkpoints -----------------------------------------------------------

def save_params(path: str | Path, groups: Mapping[str, ParamSet], meta: Mapping | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": dict(meta or {}),
        "groups": {
            g: {k: {"shape": list(t.shape), "data": t.data.ravel().tolist()} for k, t in ps.items()}
            for g, ps in groups.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path, expected: Mapping[str, ParamSet] | None = None) -> tuple[dict[str, ParamSet], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    groups = {
        g: ParamSet({k: Tensor(np.asarray(v["data"], float).reshape(v["shape"]), requires_grad=True, name=k)
                     for k, v in ps.items()})
        for g, ps in doc["groups"].items()
    }
    if expected is not None:
        for g, ps in expected.items():
            if g not in groups:
                raise ValueError(f"checkpoint lacks parameter group {g!r}")
            groups[g].check_congruent(ps)
    return groups, doc.get("meta", {})
