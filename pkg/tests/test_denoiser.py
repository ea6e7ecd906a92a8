import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dags
from topodiff.denoiser import (BOTH, FWD, NONE, REV, Denoiser, ModelFlags, QueryContext, assignment_probability,
                               attention_propagate, denoise_step, edge_categories, fallback_embedding,
                               generate_topology, graph_log_prob, make_query, mixture_log_likelihood,
                               predict_edges_mixture, predict_role, reverse_states, step_log_likelihoods)
from topodiff.graph import CommGraph, RoleVocabulary, is_acyclic
from topodiff.nn import DTYPE, grad_check, uniform_init, zero_init
from topodiff.ordering import MaskedGraph

VOCAB = RoleVocabulary()
QDIM = 6


def random_model(seed=0, hidden=4, n_components=2, max_nodes=5, scale=1.0):
    m = Denoiser(len(VOCAB), query_dim=QDIM, hidden=hidden, n_layers=2, n_components=n_components, pe_dim=4,
                 max_nodes=max_nodes)
    uniform_init(m, np.random.default_rng(seed))
    if scale != 1.0:
        with torch.no_grad():
            for p in m.parameters():
                p.mul_(scale)
    return m


def query(text="solve the task", dim=QDIM):
    return make_query(text, "t0", dim=dim)


def diamond():
    return CommGraph.from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)], ["Solver", "Critic", "Verifier", "Decider"])


class TestAttention:
    def setup_method(self):
        self.W = torch.eye(2, dtype=DTYPE)
        self.a = torch.tensor([1.0, 0.0, 0.0, 1.0], dtype=DTYPE)

    def test_single_neighbour_gets_full_weight(self):
        h = torch.tensor([[1.0, 2.0], [0.5, -3.0]], dtype=DTYPE)
        mask = torch.tensor([[False, False], [True, False]])
        out = attention_propagate(h, mask, self.W, self.a)
        assert torch.allclose(out[1], torch.relu(h[0]))
        assert torch.all(out[0] == 0)

    def test_identical_neighbours_split_evenly(self):
        h = torch.tensor([[1.0, 2.0], [1.0, 2.0], [4.0, 0.0]], dtype=DTYPE)
        mask = torch.tensor([[False] * 3, [False] * 3, [True, True, False]])
        out = attention_propagate(h, mask, self.W, self.a)
        assert torch.allclose(out[2], torch.tensor([1.0, 2.0], dtype=DTYPE))

    def test_hand_instance(self):
        # node 2 listens to 0 and 1; scores relu(3 + h_j[1]) = 3 and 5
        h = torch.tensor([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]], dtype=DTYPE)
        mask = torch.tensor([[False] * 3, [False] * 3, [True, True, False]])
        out = attention_propagate(h, mask, self.W, self.a)
        assert out[2].tolist() == pytest.approx([0.11920292202211755, 1.7615941559557646], rel=1e-12)

    def test_large_scores_stable(self):
        h = torch.tensor([[500.0, 0.0], [0.0, 800.0], [1.0, 1.0]], dtype=DTYPE)
        mask = torch.tensor([[False] * 3, [False] * 3, [True, True, False]])
        out = attention_propagate(h, mask, self.W, self.a)
        assert torch.isfinite(out).all()
        assert out[2].tolist() == pytest.approx([0.0, 800.0])

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        h = torch.as_tensor(rng.normal(size=(2, 4, 3)), dtype=DTYPE)
        mask = torch.as_tensor(rng.random((2, 4, 4)) < 0.5)
        W = torch.as_tensor(rng.normal(size=(3, 3)), dtype=DTYPE)
        a = torch.as_tensor(rng.normal(size=6), dtype=DTYPE)
        both = attention_propagate(h, mask, W, a)
        for s in range(2):
            assert torch.allclose(both[s], attention_propagate(h[s], mask[s], W, a))


class TestEmbedding:
    def test_es_bias_shift(self):
        m = random_model(1)
        g = diamond()
        batch = m.featurize([MaskedGraph(g, (3, 1, 2, 0), 2)], 0.7, use_es=True)
        q = m.query_vector(query())
        delta = m.embed(batch, q, True) - m.embed(batch, q, False)
        assert torch.allclose(delta, batch.phi[..., None].expand_as(delta))
        assert batch.phi.abs().sum() > 0

    def test_featurize_without_es_has_zero_phi(self):
        m = random_model(1)
        batch = m.featurize([MaskedGraph(diamond(), (3, 1, 2, 0), 2)], 0.7, use_es=False)
        assert torch.all(batch.phi == 0)

    def test_zero_query(self):
        m = random_model(2)
        assert torch.all(m.query_vector(None) == 0)
        assert torch.all(m.query_vector(query(), use_query=False) == 0)

    def test_queries_differ(self):
        m = random_model(2)
        a = m.query_vector(query("write a sorting routine"))
        b = m.query_vector(query("prove the lemma about primes"))
        assert not torch.allclose(a, b)

    def test_query_dimension_checked(self):
        with pytest.raises(ValueError):
            random_model().query_vector(make_query("x", dim=QDIM + 1))

    def test_featurize_rejects_mixed_sizes(self):
        m = random_model()
        g3 = CommGraph.from_edges(3, [], ["Solver"] * 3)
        with pytest.raises(ValueError):
            m.featurize([MaskedGraph(diamond(), (0, 1, 2, 3), 1), MaskedGraph(g3, (0, 1, 2), 1)], 0.7)

    def test_featurize_rejects_finished_state(self):
        with pytest.raises(ValueError):
            random_model().featurize([MaskedGraph(diamond(), (0, 1, 2, 3), 0)], 0.7)


class TestRoleHead:
    def test_uniform_at_zero_init(self):
        m = random_model()
        zero_init(m)
        p = predict_role(m, np.zeros(2 * m.hidden))
        assert p == pytest.approx(np.full(len(VOCAB), 1 / len(VOCAB)), abs=1e-15)

    def test_sums_to_one(self):
        p = predict_role(random_model(4), np.random.default_rng(0).normal(size=8))
        assert p.sum() == pytest.approx(1.0, abs=1e-12) and np.all(p > 0)


def mixture_inputs(seed, k, C):
    m = random_model(seed, n_components=C, scale=3.0)
    rng = np.random.default_rng(seed + 100)
    return m, rng.normal(size=2 * m.hidden), int(rng.integers(len(VOCAB))), rng.normal(size=(k, m.hidden))


class TestMixture:
    def test_no_existing_nodes(self):
        m, ctx, r, _ = mixture_inputs(0, 0, 3)
        mix, pair = predict_edges_mixture(m, ctx, r, np.zeros((0, m.hidden)))
        assert pair.shape == (3, 0, 4)
        assert assignment_probability(mix, pair, []) == pytest.approx(1.0, abs=1e-12)

    def test_single_component_factorizes(self):
        m, ctx, r, h = mixture_inputs(1, 3, 1)
        mix, pair = predict_edges_mixture(m, ctx, r, h)
        assert mix == pytest.approx([1.0])
        for cats in itertools.product(range(4), repeat=3):
            expected = pair[0, 0, cats[0]] * pair[0, 1, cats[1]] * pair[0, 2, cats[2]]
            assert assignment_probability(mix, pair, cats) == pytest.approx(expected, rel=1e-12)

    def test_two_components_enumeration(self):
        m, ctx, r, h = mixture_inputs(2, 2, 2)
        mix, pair = predict_edges_mixture(m, ctx, r, h)
        probs = {}
        for cats in itertools.product(range(4), repeat=2):
            probs[cats] = assignment_probability(mix, pair, cats)
            by_hand = sum(mix[c] * pair[c, 0, cats[0]] * pair[c, 1, cats[1]] for c in range(2))
            assert probs[cats] == pytest.approx(by_hand, rel=1e-12)
        assert len(probs) == 16
        assert sum(probs.values()) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 3), st.integers(1, 3), st.integers(0, 10_000))
    def test_exhaustive_sum(self, k, C, seed):
        m, ctx, r, h = mixture_inputs(seed, k, C)
        mix, pair = predict_edges_mixture(m, ctx, r, h)
        total = sum(assignment_probability(mix, pair, cats) for cats in itertools.product(range(4), repeat=k))
        assert abs(total - 1.0) < 1e-8

    def test_torch_likelihood_matches_numpy(self):
        m, ctx, r, h = mixture_inputs(5, 3, 3)
        mix, pair = predict_edges_mixture(m, ctx, r, h)
        with torch.no_grad():
            log_mix, log_pair = m.edge_log_probs(torch.as_tensor(ctx)[None], torch.tensor([r]),
                                                 torch.as_tensor(h)[None])
            for cats in [(0, 1, 2), (3, 3, 0), (1, 1, 1)]:
                ll = mixture_log_likelihood(log_mix, log_pair, torch.tensor([cats]), torch.ones(1, 3, dtype=torch.bool))
                assert math.exp(ll.item()) == pytest.approx(assignment_probability(mix, pair, cats), rel=1e-12)

    def test_non_existing_nodes_ignored(self):
        m, ctx, r, h = mixture_inputs(6, 3, 2)
        with torch.no_grad():
            log_mix, log_pair = m.edge_log_probs(torch.as_tensor(ctx)[None], torch.tensor([r]),
                                                 torch.as_tensor(h)[None])
            existing = torch.tensor([[True, False, True]])
            a = mixture_log_likelihood(log_mix, log_pair, torch.tensor([[1, 0, 2]]), existing)
            b = mixture_log_likelihood(log_mix, log_pair, torch.tensor([[1, 3, 2]]), existing)
        assert a.item() == b.item()

    def test_needs_a_component(self):
        with pytest.raises(ValueError):
            Denoiser(len(VOCAB), n_components=0)


class TestEdgeCategories:
    def test_all_four(self):
        adj = np.zeros((4, 4), dtype=bool)
        adj[0, 1] = True  # 0 -> 1
        adj[2, 0] = True  # 2 -> 0
        adj[0, 3] = adj[3, 0] = True
        assert edge_categories(adj, 0).tolist() == [NONE, FWD, REV, BOTH]


class TestDenoiseStep:
    def test_single_node(self):
        g = CommGraph.from_edges(1, [], ["Critic"])
        nxt, rec = denoise_step(random_model(), MaskedGraph(g, (0,), 1), query(), None)
        assert nxt.step == 0
        assert rec.existing == [] and rec.categories == []
        assert rec.log_prob_edges == pytest.approx(0.0, abs=1e-12)
        assert rec.log_prob_role == pytest.approx(math.log(rec.role_probs[VOCAB.role("Critic").index]))

    def test_reveals_one_node(self):
        g = CommGraph.from_edges(4, [], ["Solver"] * 4)
        state = MaskedGraph(g, (3, 1, 2, 0), 3)
        nxt, rec = denoise_step(random_model(), state, query(), np.random.default_rng(0))
        assert rec.node == 2
        assert (~nxt.masked).sum() == (~state.masked).sum() + 1
        assert rec.existing == [0]
        # edges of the revealed node only touch previously visible nodes
        for a, b in nxt.base.edges():
            assert {a, b} == {0, 2}

    def test_exhausted(self):
        with pytest.raises(ValueError):
            denoise_step(random_model(), MaskedGraph(diamond(), (0, 1, 2, 3), 0), query(), None)

    @settings(max_examples=25)
    @given(dags(max_n=5, n_roles=len(VOCAB)), st.data())
    def test_compositional_consistency(self, g, data):
        m = random_model(7)
        order = tuple(data.draw(st.permutations(range(g.n))))
        q = query()
        total = 0.0
        state = MaskedGraph(g, order, g.n)
        while state.step > 0:
            state, rec = denoise_step(m, state, q, None)
            total += rec.log_prob
        with torch.no_grad():
            batched = graph_log_prob(m, g, order, q, include_size=False).item()
        assert abs(total - batched) < 1e-10

    def test_step_log_likelihoods_shapes(self):
        g = diamond()
        lp_role, lp_edges = step_log_likelihoods(random_model(), reverse_states(g, (0, 1, 2, 3)), query())
        assert lp_role.shape == (4,) and lp_edges.shape == (4,)
        assert torch.all(lp_role <= 0) and torch.all(lp_edges <= 0)
        assert lp_edges[0].item() == pytest.approx(0.0, abs=1e-12)  # first revealed node has no neighbours

    def test_size_term(self):
        m = random_model(3)
        g = diamond()
        with torch.no_grad():
            full = graph_log_prob(m, g, (0, 1, 2, 3), query()).item()
            part = graph_log_prob(m, g, (0, 1, 2, 3), query(), include_size=False).item()
            size = m.size_log_probs(m.query_vector(query()))[3].item()
        assert full == pytest.approx(part + size, abs=1e-12)

    def test_size_out_of_range(self):
        with pytest.raises(ValueError):
            graph_log_prob(random_model(max_nodes=3), diamond(), (0, 1, 2, 3), query())


def _params(*modules):
    return [p for mod in modules for p in mod.parameters()]


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_attention_layer(self, seed):
        m = random_model(seed)
        batch = m.featurize([MaskedGraph(diamond(), (3, 0, 1, 2), 1)], 0.7)
        h0 = m.node_in(batch.x).detach()
        layer = m.layers[0]
        assert grad_check(lambda: layer(h0, batch.in_mask).pow(2).sum(), _params(layer)) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_role_head(self, seed):
        m = random_model(seed)
        ctx = torch.as_tensor(np.random.default_rng(seed).normal(size=(1, 8)), dtype=DTYPE)
        assert grad_check(lambda: m.role_log_probs(ctx)[0, 2], _params(m.role_head)) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_mixture_head(self, seed):
        m = random_model(seed, n_components=3)
        rng = np.random.default_rng(seed)
        ctx = torch.as_tensor(rng.normal(size=(1, 8)), dtype=DTYPE)
        h = torch.as_tensor(rng.normal(size=(1, 3, 4)), dtype=DTYPE)
        cats = torch.tensor([[1, 0, 3]])
        existing = torch.ones(1, 3, dtype=torch.bool)

        def f():
            log_mix, log_pair = m.edge_log_probs(ctx, torch.tensor([2]), h)
            return mixture_log_likelihood(log_mix, log_pair, cats, existing)[0]

        assert grad_check(f, _params(m.mix_head, m.pair_head) + [m.component_emb]) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_step(self, seed):
        m = random_model(seed)
        states = [MaskedGraph(diamond(), (2, 0, 3, 1), 3)]
        q = query()

        def f():
            lp_role, lp_edges = step_log_likelihoods(m, states, q)
            return (lp_role + lp_edges).sum()

        assert grad_check(f, list(m.parameters())) < 1e-4


class TestGenerate:
    def test_single_node(self):
        gen = generate_topology(random_model(), query(), 1, np.random.default_rng(0))
        assert gen.graph.n == 1 and gen.graph.num_edges == 0
        assert len(gen.steps) == 1 and gen.ordering == [0]

    def test_deterministic(self):
        m = random_model(5)
        a = generate_topology(m, query(), None, np.random.default_rng(11))
        b = generate_topology(m, query(), None, np.random.default_rng(11))
        assert a.graph == b.graph and a.log_prob == b.log_prob

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_acyclic(self, seed, n):
        m = random_model(seed % 7, scale=4.0)
        gen = generate_topology(m, query(), n, np.random.default_rng(seed))
        assert is_acyclic(gen.graph)
        assert gen.graph.n == n
        assert set(gen.graph.edges()) <= set(gen.raw.edges())
        assert set(gen.removed) == set(gen.raw.edges()) - set(gen.graph.edges())

    def test_sampled_size_in_range(self):
        m = random_model(2, max_nodes=4)
        rng = np.random.default_rng(0)
        sizes = {generate_topology(m, query(), None, rng).graph.n for _ in range(50)}
        assert sizes <= {1, 2, 3, 4} and len(sizes) > 1

    def test_second_step_edge_frequency(self):
        # exact probability that the two-node sample has an edge, from teacher-forced steps
        m = random_model(9, scale=2.0)
        q = query()
        p_edge = 0.0
        for r0 in range(len(VOCAB)):
            for r1 in range(len(VOCAB)):
                g = CommGraph.from_edges(2, [], [r0, r1])
                s1, rec0 = denoise_step(m, MaskedGraph(g, (1, 0), 2), q, None)
                _, rec1 = denoise_step(m, s1, q, None)
                p_none = float(np.dot(rec1.mixture, rec1.pair_probs[:, 0, NONE]))
                p_edge += rec0.role_probs[r0] * rec1.role_probs[r1] * (1 - p_none)
        rng = np.random.default_rng(2024)
        N = 3000
        hits = sum(generate_topology(m, q, 2, rng).raw.num_edges > 0 for _ in range(N))
        sd = math.sqrt(p_edge * (1 - p_edge) / N)
        assert abs(hits / N - p_edge) < 4 * sd

    def test_raw_log_prob_matches_scoring(self):
        m = random_model(4)
        q = query()
        gen = generate_topology(m, q, 4, np.random.default_rng(8))
        with torch.no_grad():
            scored = graph_log_prob(m, gen.raw, gen.ordering, q).item()
        assert gen.log_prob == pytest.approx(scored, abs=1e-10)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            generate_topology(random_model(), query(), 0, np.random.default_rng(0))


class TestQuery:
    def test_fallback_range_and_determinism(self):
        a = fallback_embedding("Plan the route", 64)
        assert a.shape == (64,) and np.all(np.abs(a) <= 1)
        assert np.array_equal(a, fallback_embedding("plan   the ROUTE", 64))

    def test_fallback_shares_words(self):
        a = fallback_embedding("sort numbers", 256)
        b = fallback_embedding("sort strings", 256)
        c = fallback_embedding("bake bread", 256)
        assert np.dot(a, b) > np.dot(a, c)

    def test_empty_text(self):
        assert np.all(np.isfinite(fallback_embedding("", 8)))

    def test_make_query_uses_table(self):
        q = make_query("x", "id1", dim=3, embeddings={"id1": [1.0, 2.0, 3.0]})
        assert q.embedding.tolist() == [1.0, 2.0, 3.0]
        with pytest.raises(ValueError):
            make_query("x", "id1", dim=4, embeddings={"id1": [1.0, 2.0, 3.0]})

    def test_context_validation(self):
        with pytest.raises(ValueError):
            QueryContext("x", np.array([np.nan]))
        with pytest.raises(ValueError):
            QueryContext("x", np.zeros((2, 2)))

    def test_flags_default(self):
        assert ModelFlags() == ModelFlags(0.7, True, True)
