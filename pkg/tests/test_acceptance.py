"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible even when
pytest captures output) and then asserts at the stated tolerance,
runtime limit included. Run just these with

    pytest tests/test_acceptance.py -v
"""

import itertools
import time

import numpy as np
import pytest
import torch

from conftest import brute_force_effective_size, isomorphic, random_dag, random_digraph
from topodiff import cli
from topodiff.denoiser import (Denoiser, make_query, mixture_log_likelihood, predict_edges_mixture,
                               assignment_probability, step_log_likelihoods)
from topodiff.executor import (account_tokens, engineered_attack_suite, execute, liar_ancestors, mock_backends,
                               plan_schedule, scenario_utility, select_liars)
from topodiff.graph import FAMILIES, CommGraph, RoleVocabulary, baseline_topology, effective_size, graph_stats
from topodiff.nn import DTYPE, grad_check, uniform_init
from topodiff.ordering import MaskedGraph, OrderingNet, trajectory_log_prob
from topodiff.synthetic import SyntheticOracle, generate_task_suite, task_query
from topodiff.trainer import (DiffusionModel, DiffusionRecord, TrainConfig, build_diffusion_dataset,
                              sample_trajectories, train, trajectory_step_logliks, utility_policy_update)

VOCAB = RoleVocabulary()


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}")
        return ok
    return emit


def _diamond():
    return CommGraph.from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)], ["Planner", "Solver", "Critic", "Decider"])


def test_c01_effective_size_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        g = random_digraph(rng, int(rng.integers(1, 9)), p=float(rng.uniform(0.1, 0.9)))
        for v in range(g.n):
            for d in ("in", "out"):
                want = brute_force_effective_size(g, v, d)
                got = effective_size(g, v, d)
                worst = max(worst, abs(got - want) / max(abs(want), 1e-300) if want else abs(got))
    dt = time.perf_counter() - t0
    ok = worst < 1e-12 and dt < 5
    assert report(1, "effective-size oracle", ok, f"max rel err {worst:.2e}, {dt:.2f}s (limits 1e-12, 5s)")


def _small_denoiser(seed, C=3):
    m = Denoiser(len(VOCAB), query_dim=6, hidden=4, n_layers=2, n_components=C, pe_dim=4)
    uniform_init(m, np.random.default_rng(seed))
    return m


def test_c02_gradient_suite(report):
    t0 = time.perf_counter()
    g = _diamond()
    q = make_query("check the gradients", "g", dim=6)
    errs = {k: 0.0 for k in "abcde"}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = OrderingNet(len(VOCAB), hidden=4, n_layers=2, pe_dim=4)
        uniform_init(net, rng)
        order = [int(v) for v in rng.permutation(4)]
        errs["a"] = max(errs["a"], grad_check(lambda: trajectory_log_prob(net, g, order, 0.7), list(net.parameters())))
        m = _small_denoiser(seed)
        state = MaskedGraph(g, tuple(order), 2)
        batch = m.featurize([state], 0.7)
        h0 = m.node_in(batch.x).detach() + torch.as_tensor(rng.normal(size=(1, 4, 4)), dtype=DTYPE)
        mask = torch.ones(1, 4, 4, dtype=torch.bool) & ~torch.eye(4, dtype=torch.bool)
        layer = m.layers[0]
        errs["b"] = max(errs["b"], grad_check(lambda: layer(h0, mask).pow(2).sum(), list(layer.parameters())))
        ctx = torch.as_tensor(rng.normal(size=(1, 8)), dtype=DTYPE)
        errs["c"] = max(errs["c"], grad_check(lambda: m.role_log_probs(ctx)[0, 1], list(m.role_head.parameters())))
        h = torch.as_tensor(rng.normal(size=(1, 3, 4)), dtype=DTYPE)
        cats = torch.as_tensor(rng.integers(0, 4, size=(1, 3)))

        def mix():
            log_mix, log_pair = m.edge_log_probs(ctx, torch.tensor([2]), h)
            return mixture_log_likelihood(log_mix, log_pair, cats, torch.ones(1, 3, dtype=torch.bool))[0]

        head = list(m.mix_head.parameters()) + list(m.pair_head.parameters()) + [m.component_emb]
        errs["d"] = max(errs["d"], grad_check(mix, head))

        def step():
            lp_role, lp_edges = step_log_likelihoods(m, [state], q)
            return (lp_role + lp_edges).sum()

        errs["e"] = max(errs["e"], grad_check(step, list(m.parameters())))
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert report(2, "gradient suite", ok, f"{detail}; {dt:.1f}s (limits 1e-4, 60s)")


def test_c03_mixture_exhaustive(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for draw in range(50):
        k, C = int(rng.integers(0, 4)), int(rng.integers(1, 4))
        m = _small_denoiser(1000 + draw, C)
        with torch.no_grad():
            for p in m.parameters():
                p.mul_(3.0)
        mix, pair = predict_edges_mixture(m, rng.normal(size=8), int(rng.integers(len(VOCAB))), rng.normal(size=(k, 4)))
        total = sum(assignment_probability(mix, pair, c) for c in itertools.product(range(4), repeat=k))
        worst = max(worst, abs(total - 1.0))
    dt = time.perf_counter() - t0
    ok = worst < 1e-8 and dt < 10
    assert report(3, "mixture exhaustiveness", ok, f"max |sum-1| {worst:.1e}, {dt:.2f}s (limits 1e-8, 10s)")


def _mean_teacher_forced(model, g, q):
    # reconstruction log-likelihood along the model's own orderings, fixed draw
    rng = np.random.default_rng(7)
    with torch.no_grad():
        trajs = sample_trajectories(model, g, 64, rng)
        return float(trajectory_step_logliks(model, g, q, trajs).sum(1).mean())


def test_c04_memorization(report):
    t0 = time.perf_counter()
    g = _diamond()
    q = make_query("memorize this", "m")
    cfg = TrainConfig(epochs=200, lr_denoiser=5e-3, lr_ordering=5e-3, M=16, batch_size=1, use_utility=False,
                      metric_samples=0, seed=0, grad_clip=0.3)
    model = DiffusionModel(cfg)
    before = _mean_teacher_forced(model, g, q)
    model, _ = train([DiffusionRecord(g, q, True, 0.0)], cfg, model=model)
    after = _mean_teacher_forced(model, g, q)
    rng = np.random.default_rng(0)
    hits = sum(isomorphic(model.generate(q, rng).graph, g, with_roles=True) for _ in range(100))
    dt = time.perf_counter() - t0
    ok = after - before >= 2 and hits >= 80 and dt < 300
    assert report(4, "memorization", ok,
                  f"log-lik {before:.2f} -> {after:.2f} (+{after - before:.2f} nats), {hits}/100 exact, {dt:.0f}s "
                  "(limits +2 nats, 80%, 300s)")


def _is_star(g):
    if g.n != 4 or g.num_edges != 3:
        return False
    return any(len(g.out_neighbors(h)) == 3 for h in range(g.n))


def test_c05_star_recovery(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    q = make_query("star team", "star")
    ds = [DiffusionRecord(baseline_topology("star", 4, VOCAB, rng), q, True, 0.0) for _ in range(100)]
    cfg = TrainConfig(epochs=6, lr_denoiser=5e-3, lr_ordering=5e-3, M=8, batch_size=8, use_utility=False,
                      metric_samples=0, seed=0, grad_clip=0.3)
    model, _ = train(ds, cfg)
    r = np.random.default_rng(99)
    stars = sum(_is_star(model.generate(q, r).graph) for _ in range(200))
    dt = time.perf_counter() - t0
    ok = stars >= 180 and dt < 600
    assert report(5, "distribution recovery", ok, f"{stars}/200 stars, {dt:.0f}s (limits 90%, 600s)")


def test_c06_utility_shaping(report):
    t0 = time.perf_counter()
    gains = []
    for seed in range(5):
        tasks = generate_task_suite(10, seed=seed)
        oracle = SyntheticOracle(tasks)
        qs = [task_query(t) for t in tasks]
        model = DiffusionModel(TrainConfig(lr_denoiser=5e-3, alpha=0.1, seed=seed, grad_clip=0.3))

        def mean_utility():
            r = np.random.default_rng(123)
            return np.mean([oracle(model.generate(q, r).graph, q) for q in qs for _ in range(20)])

        u0 = mean_utility()
        rng = np.random.default_rng(seed)
        for s in range(300):
            utility_policy_update(model, qs[s % len(qs)], 8, oracle, 0.1, rng)
        gains.append(mean_utility() - u0)
    dt = time.perf_counter() - t0
    wins = sum(g_ >= 0.25 for g_ in gains)
    ok = wins >= 4 and dt < 600
    assert report(6, "utility shaping", ok,
                  f"gains {', '.join(f'{g_:.3f}' for g_ in gains)}, {wins}/5 >= 0.25, {dt:.0f}s (limits 4/5, 600s)")


def test_c07_redundancy_direction(report):
    t0 = time.perf_counter()
    pairs = []
    for seed in range(5):
        tasks = generate_task_suite(10, seed=seed)
        oracle = SyntheticOracle(tasks)
        qs = [task_query(t) for t in tasks]
        ds = build_diffusion_dataset(qs, oracle, families=FAMILIES, seed=seed, threshold=0.75)
        res = []
        for use_es in (True, False):
            cfg = TrainConfig(epochs=15, lr_denoiser=5e-3, lr_ordering=5e-3, M=4, batch_size=8, alpha=0.5,
                              utility_period=1, utility_fraction=0.5, utility_batch=8, use_es=use_es,
                              metric_samples=0, seed=seed, grad_clip=0.3)
            model, _ = train(ds, cfg, oracle)
            r = np.random.default_rng(1000 + seed)
            res.append(np.mean([graph_stats(model.generate(q, r).graph, 0.7).mean_effective_size
                                for q in qs for _ in range(10)]))
        pairs.append(tuple(res))
    dt = time.perf_counter() - t0
    wins = sum(a > b for a, b in pairs)
    ok = wins >= 4 and dt < 900
    shown = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in pairs)
    assert report(7, "redundancy direction", ok, f"ES/no-ES mean ES {shown}; {wins}/5 wins, {dt:.0f}s "
                  "(limits 4/5, 900s)")


def test_c08_adaptiveness(report):
    t0 = time.perf_counter()
    tasks = generate_task_suite(10, hard_fraction=0.5, seed=0)
    oracle = SyntheticOracle(tasks)
    qs = [task_query(t) for t in tasks]
    ds = build_diffusion_dataset(qs, oracle, seed=0, threshold=0.75)
    cfg = TrainConfig(epochs=30, lr_denoiser=5e-3, lr_ordering=5e-3, alpha=0.5, utility_period=1,
                      utility_fraction=1.0, metric_samples=0, seed=0, grad_clip=0.3)
    model, _ = train(ds, cfg, oracle)
    r = np.random.default_rng(77)
    sizes = {}
    for diff in ("easy", "hard"):
        group = [q for t, q in zip(tasks, qs) if t.difficulty == diff]
        sizes[diff] = np.mean([graph_stats(model.generate(group[i % len(group)], r).graph).active_size
                               for i in range(100)])
    dt = time.perf_counter() - t0
    gap = sizes["hard"] - sizes["easy"]
    ok = gap >= 0.5 and dt < 600
    assert report(8, "adaptiveness", ok, f"active size easy {sizes['easy']:.2f}, hard {sizes['hard']:.2f}, "
                  f"gap {gap:+.2f}, {dt:.0f}s (limits +0.5, 600s)")


def test_c09_executor_contract(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    q = task_query(generate_task_suite(1, seed=0)[0], dim=8)
    violations = 0
    for _ in range(100):
        g = random_dag(rng, int(rng.integers(1, 8)), p=float(rng.uniform(0.1, 0.8)))
        rounds = int(rng.integers(1, 3))
        a = execute(g, q, mock_backends(g, "role_scripted", {"truth": "7", "conform": True}), rounds=rounds)
        b = execute(g, q, mock_backends(g, "role_scripted", {"truth": "7", "conform": True}), rounds=rounds)
        idx = {(inv.round, inv.agent): inv.index for inv in a.invocations}
        for k in range(1, rounds + 1):
            for u, v in g.edges():
                if (k, u) in idx and (k, v) in idx and not idx[k, u] < idx[k, v]:
                    violations += 1
        tok = account_tokens(a)
        violations += tok.prompt != sum(i.prompt_tokens for i in a.invocations)
        violations += tok.completion != sum(i.completion_tokens for i in a.invocations)
        violations += a.dumps() != b.dumps()
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 30
    assert report(9, "executor contract", ok, f"{violations} violations over 100 DAGs, {dt:.2f}s (limits 0, 30s)")


def test_c10_attack_harness(report):
    t0 = time.perf_counter()
    suite = engineered_attack_suite(20, seed=0)
    clean, attacked, unchanged, liar_free = [], [], 0, 0
    for sc in suite:
        liars = select_liars(sc.graph)
        assert len(liars) == 2 and all(sc.graph.agents[i].role.label != "Decider" for i in liars)
        clean.append(scenario_utility(sc.graph, sc))
        attacked.append(scenario_utility(sc.graph, sc, liars))
        last = plan_schedule(sc.graph).order[-1]
        if not liar_ancestors(sc.graph, last, liars):
            liar_free += 1
            unchanged += scenario_utility(sc.graph, sc, aggregation="last_agent") == \
                scenario_utility(sc.graph, sc, liars, aggregation="last_agent")
    dt = time.perf_counter() - t0
    ok = np.mean(attacked) < np.mean(clean) and liar_free > 0 and unchanged == liar_free and dt < 30
    assert report(10, "attack harness", ok,
                  f"majority utility clean {np.mean(clean):.2f} -> liar {np.mean(attacked):.2f}; last-agent unchanged "
                  f"on {unchanged}/{liar_free} liar-free paths, {dt:.2f}s")


def _pipeline(tmp, config):
    out = str(tmp)
    steps = [["build-dataset"], ["train", "--epochs", "5"], ["generate", "--task-id", "task-000", "--n-samples", "2"],
             ["evaluate"]]
    for step in steps:
        rc = cli.main(step + ["--config", str(config), "--seed", "3", "--out", out])
        if rc != 0:
            return None
    return (tmp / "metrics.csv").read_bytes(), (tmp / "evaluation.csv").read_bytes()


def test_c11_end_to_end_determinism(report, tmp_path):
    t0 = time.perf_counter()
    config = tmp_path / "run.toml"
    config.write_text("metric_samples = 2\nhidden = 16\n\n[run]\nn_tasks = 4\nsamples_per_task = 3\n")
    a = _pipeline(tmp_path / "a", config)
    b = _pipeline(tmp_path / "b", config)
    dt = time.perf_counter() - t0
    ok = a is not None and a == b and dt < 300
    detail = "pipeline failed" if a is None else \
        f"metrics.csv {'identical' if a[0] == b[0] else 'differs'}, evaluation.csv {'identical' if a[1] == b[1] else 'differs'}"
    assert report(11, "end-to-end determinism", ok, f"{detail}, {dt:.0f}s (limit 300s)")
