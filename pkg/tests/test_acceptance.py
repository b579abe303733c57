"""Acceptance suite: one test per numbered criterion, summarised at the end of the run."""
import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats

from cioho import tensor as T
from cioho.baselines import make_controller, rollout
from cioho.env import HandoverEnv
from cioho.harness import ExperimentSpec, SeedPlan, heuristic_returns, run_experiment
from cioho.nn import gumbel_softmax_sample, softmax
from cioho.radiosim import a3_check, ttt_step
from cioho.scenario import load_scenario
from cioho.td3dma import TD3DMA, Actor, Critic, TrainConfig, embedding_columns, evaluate, log_text, one_hot, train
from cioho.topology import (NetworkGraph, build_dual_graph, centralized_region, decompose_regions,
                            greedy_centers, restrict)
from oracles import huber_scalar, line_graph_brute, numeric_grad, rel_error, td_target_scalar, ttt_fire_times

# learning settings shared by the two training criteria
SMOKE = dict(total_steps=5000, n_min=200, actor_lr=1e-5)
ORDERING = dict(total_steps=4000, n_min=200, actor_lr=1e-5, critic_kind="gnn")


@pytest.fixture
def criterion(record_property):
    def start(n, title):
        record_property("criterion", n)
        record_property("title", title)
        return lambda detail: record_property("detail", detail)
    return start


def random_connected_graph(rng, max_cells=12):
    n = int(rng.integers(2, max_cells + 1))
    edges = {(int(rng.integers(1, k)), k) for k in range(2, n + 1)}
    for _ in range(int(rng.integers(0, 2 * n))):
        a, b = rng.integers(1, n + 1, 2)
        if a != b:
            edges.add((int(min(a, b)), int(max(a, b))))
    return NetworkGraph.from_edges(range(1, n + 1), sorted(edges))


def test_c01_line_graph_oracle(criterion):
    detail = criterion(1, "line graph matches brute force on 200 random graphs")
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for _ in range(200):
        g = random_connected_graph(rng)
        d = build_dual_graph(g)
        nodes, pairs = line_graph_brute(g.edges)
        assert list(d.nodes) == nodes
        assert set(d.dual_edges) == pairs and len(d.dual_edges) == len(pairs)
        assert len(d.dual_edges) == sum(math.comb(g.degree(c), 2) for c in g.cells)
    dt = time.perf_counter() - t0
    detail(f"{dt:.2f} s")
    assert dt < 5.0


def test_c02_ttt_oracle(criterion):
    detail = criterion(2, "TTT firing instants match a sliding-window evaluator on 1e4 sequences")
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    fired = straddled = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 51))
        n_nb = int(rng.integers(1, 5))
        n_ttt = int(rng.integers(1, 6))
        hyst = float(rng.choice([0.0, 1.0, 3.0]))
        serving = rng.integers(-90, -70, n).astype(float)
        nb = serving[:, None] + rng.integers(-4, 8, (n, n_nb))
        # piecewise-constant CIOs with change points at arbitrary instants
        cio = np.empty((n, n_nb))
        for j in range(n_nb):
            cuts = np.sort(rng.choice(n, size=min(n, int(rng.integers(0, 4))), replace=False))
            levels = rng.choice(np.arange(-6.0, 7.0, 2.0), size=len(cuts) + 1)
            cio[:, j] = levels[np.searchsorted(cuts, np.arange(n), side="right")]
        counters = np.zeros(n_nb, dtype=int)
        got = []
        for k, (s_k, nb_k, cio_k) in enumerate(zip(serving.tolist(), nb.tolist(), cio.tolist())):
            a3 = [a3_check(c, hyst, s_k, r) for c, r in zip(cio_k, nb_k)]
            counters, t = ttt_step(counters, a3, nb_k, cio_k, n_ttt)
            if t is not None:
                got.append((k, t))
        flags = (nb - serving[:, None] > cio + hyst).tolist()
        want = ttt_fire_times(flags, n_ttt, (nb + cio).tolist())
        assert got == want
        fired += len(got)
        changed = [False, *np.any(cio[1:] != cio[:-1], axis=1).tolist()]
        straddled += sum(any(changed[max(0, k - n_ttt + 2):k + 1]) for k, _ in got)
    dt = time.perf_counter() - t0
    detail(f"{fired} firings, {straddled} across a CIO change, {dt:.2f} s")
    assert straddled > 0
    assert dt < 10.0


def _check_grads(params, loss, extra=()):
    worst = 0.0
    params.zero_grad()
    loss().backward()
    for _, p in [*params.items(), *extra]:
        worst = max(worst, rel_error(p.grad, numeric_grad(lambda: float(loss().data), p.data)))
    return worst


def test_c03_gradient_checks(criterion):
    detail = criterion(3, "actor (gcn, in) and critic (mlp, gnn) gradients match finite differences")
    sc = load_scenario("bench3")
    dual = build_dual_graph(sc.graph)
    region = decompose_regions(sc.graph, [1, 3], 1)[0]
    t0 = time.perf_counter()
    worst = {}
    for kind in ("gcn", "in"):
        actor = Actor(sc.graph, dual, 11, 7, TrainConfig(hidden=4, actor_kind=kind), np.random.default_rng(0))
        for k in range(20):
            rng = np.random.default_rng(100 + k)
            feats = rng.random((2, 3, 11))
            w = rng.normal(size=(2, 2, 7))
            err = _check_grads(actor.params, lambda: T.sum(T.mul(T.softmax(actor.logits(feats), axis=-1), w)))
            worst[f"actor-{kind}"] = max(worst.get(f"actor-{kind}", 0.0), err)
    for kind in ("mlp", "gnn"):
        critic = Critic(sc.graph, region, 11, 7, TrainConfig(hidden=4, critic_kind=kind), np.random.default_rng(0))
        for k in range(20):
            rng = np.random.default_rng(200 + k)
            state = rng.random((2, region.n_cells, 11))
            action = T.Tensor(rng.random((2, region.n_edges * 7)), requires_grad=True)
            y = rng.normal(size=2)
            err = _check_grads(critic.params, lambda: T.sum(T.huber(critic.q(state, action) - y, 1.0)),
                               [("action", action)])
            worst[f"critic-{kind}"] = max(worst.get(f"critic-{kind}", 0.0), err)
    dt = time.perf_counter() - t0
    detail(", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f} s")
    assert max(worst.values()) <= 1e-4
    assert dt < 60.0


def test_c04_gumbel_fidelity(criterion):
    detail = criterion(4, "Gumbel-Softmax hard samples follow softmax(logits) within 3 sigma")
    rng = np.random.default_rng(4)
    n, worst_z, worst_sum = 100_000, 0.0, 0.0
    for _ in range(10):
        logits = rng.normal(scale=1.5, size=7)
        p = softmax(logits)
        relaxed, idx = gumbel_softmax_sample(np.tile(logits, (n, 1)), 1.0, rng)
        worst_sum = max(worst_sum, float(np.max(np.abs(relaxed.sum(axis=1) - 1.0))))
        freq = np.bincount(idx, minlength=7) / n
        z = np.abs(freq - p) / np.sqrt(p * (1 - p) / n)
        worst_z = max(worst_z, float(z.max()))
    detail(f"max |z| {worst_z:.2f}, max |sum-1| {worst_sum:.1e}")
    assert worst_sum <= 1e-12
    assert worst_z <= 3.0


def test_c05_td_machinery(criterion):
    detail = criterion(5, "td_target with stub critics and Huber closed form to 1e-12")
    sc = load_scenario("bench3")
    env = HandoverEnv(sc)
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(20):
        gamma = float(rng.uniform(0.5, 0.999))
        ln = TD3DMA(env.graph, env.dual, env.regions, env.kpi_width, env.space.n,
                    TrainConfig(hidden=4, batch_size=8, capacity=64, gamma=gamma, seed=trial),
                    sc.throughput_ref_bps, sc.n_ues)
        b = 16
        feats = rng.random((b, 3, env.kpi_width))
        r = rng.normal(size=b)
        done = (rng.random(b) < 0.3).astype(float)
        q1, q2 = rng.normal(size=b), rng.normal(size=b)
        y = ln.td_target(ln.critics[0], r, feats, ln.target_relaxed(feats), done, lambda pair, s, a: (q1, q2))
        want = [td_target_scalar(*args) for args in zip(r, [gamma] * b, done, q1, q2)]
        worst = max(worst, float(np.max(np.abs(y - want))))
    delta = 1.0
    xs = np.array([-1e6, -3.0, -delta, -delta + 1e-9, 0.0, delta - 1e-9, delta, 3.0, 1e6])
    for d in (0.5, 1.0, 2.0):
        got = T.huber(T.Tensor(xs * d), d).data
        worst = max(worst, float(np.max(np.abs(got - [huber_scalar(x * d, d) for x in xs]))))
    detail(f"max abs error {worst:.1e}")
    assert worst <= 1e-12


def test_c06_centralized_matches_single_region(criterion):
    detail = criterion(6, "centralized path and one decomposed region give bit-identical logs")
    sc = load_scenario("bench8")
    cfg = TrainConfig(hidden=8, batch_size=8, n_min=8, capacity=256, total_steps=207, seed=6)
    whole = decompose_regions(sc.graph, [1], sc.graph.diameter())
    a = train(HandoverEnv(sc, regions=whole), cfg)
    b = train(HandoverEnv(sc, regions=[centralized_region(sc.graph)]), cfg, centralized=True)
    detail(f"{a.n_updates} updates")
    assert a.n_updates == b.n_updates == 200
    assert log_text(a.log_rows) == log_text(b.log_rows)


def _static_return(env, action, seeds):
    out = []
    for s in seeds:
        env.reset(s)
        total, done = 0.0, False
        while not done:
            _, rep, done = env.step(np.asarray(action))
            total += rep.team_reward
        out.append(total)
    return float(np.mean(out))


def test_c07_learning_smoke(criterion):
    detail = criterion(7, "bench3 learner recovers >= 90% of the best static improvement")
    env = HandoverEnv(load_scenario("bench3"))
    seeds = range(1000, 1010)
    sweep = {a: _static_return(env, a, seeds) for a in itertools.product(range(7), repeat=2)}
    base = sweep[(env.space.neutral_index,) * 2]
    best_action = max(sweep, key=sweep.get)
    gain = sweep[best_action] - base
    assert gain > 0
    fracs = []
    for seed in range(5):
        res = train(env, TrainConfig(**SMOKE, seed=seed))
        fracs.append((np.mean(evaluate(res.learner, env, seeds)) - base) / gain)
    detail(f"optimum {best_action}, fractions {np.round(fracs, 3).tolist()}, mean {np.mean(fracs):.3f}")
    assert np.mean(fracs) >= 0.9


def test_c08_ordering(criterion, tmp_path):
    detail = criterion(8, "bench8: best heuristic beats random; learner has r_bar > 0")
    spec = ExperimentSpec.from_dict(dict(train=["bench8"], train_config=ORDERING, regions="scenario",
                                         eval_episodes=6, master_seed=0, out_dir=str(tmp_path)))
    res = run_experiment(spec)
    (norm,) = res.normalized
    sc = load_scenario("bench8")
    seeds = SeedPlan.derive(0, 6, 1).eval_seeds
    heur = heuristic_returns(sc, seeds)
    best = max(heur, key=lambda p: np.mean(heur[p]))
    rand = rollout(make_controller("random", sc, build_dual_graph(sc.graph), seed=0), sc, seeds)
    p_value = stats.ttest_rel(heur[best], rand, alternative="greater").pvalue
    detail(f"{best} {np.mean(heur[best]) / 1e6:.1f} vs random {np.mean(rand) / 1e6:.1f} Mbit (p={p_value:.3g}); "
           f"R {norm.r / 1e6:.1f}, R_max {norm.r_max / 1e6:.1f}, r_bar {norm.r_bar:.3f}")
    assert np.isclose(norm.r_min, np.mean(heur[best]))
    assert p_value < 0.05
    assert norm.r_bar > 0


def test_c09_determinism(criterion, tmp_path):
    detail = criterion(9, "two run_experiment calls give byte-identical CSVs")
    doc = dict(train=["bench3"], train_config=dict(hidden=8, batch_size=8, n_min=16, capacity=256, total_steps=60),
               eval_episodes=2, master_seed=9)
    runs = [run_experiment(ExperimentSpec.from_dict({**doc, "out_dir": str(tmp_path / k)})) for k in "ab"]
    names = sorted(k for k, p in runs[0].files.items() if p.suffix == ".csv")
    detail(", ".join(names))
    assert names == sorted(k for k, p in runs[1].files.items() if p.suffix == ".csv")
    for k in names:
        assert runs[0].files[k].read_bytes() == runs[1].files[k].read_bytes(), k


def test_c10_restriction_algebra(criterion):
    detail = criterion(10, "grid30 restriction equals brute-force sums; embedding commutes with restriction")
    sc = load_scenario("grid30")
    g = sc.graph
    regions = [*decompose_regions(g, sc.region_centers, sc.region_hops, sc.sites),
               *decompose_regions(g, greedy_centers(g, 1, sc.sites), 1, sc.sites), centralized_region(g)]
    rng = np.random.default_rng(10)
    for _ in range(100):
        state = rng.normal(size=(g.n_cells, 11))
        action = rng.integers(0, 7, g.n_edges)
        tp = rng.random(g.n_cells) * 1e7
        emb = one_hot(action[None], 7)
        for r in regions:
            s, a, ret = restrict(r, state, action, tp)
            cells = [k for k, c in enumerate(g.cells) if c in set(r.cells)]
            edges = [k for k, (i, j) in enumerate(g.edges) if i in set(r.cells) and j in set(r.cells)]
            want = 0.0
            for k in cells:
                want += tp[k]
            assert ret == want
            assert np.array_equal(s, state[cells]) and np.array_equal(a, action[edges])
            assert np.array_equal(one_hot(a[None], 7), emb[:, embedding_columns(np.asarray(edges), 7)])
    detail(f"{len(regions)} regions x 100 draws")
