import itertools

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from topodiff.graph import CommGraph, RoleVocabulary

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

THREE_ROLES = RoleVocabulary(["Solver", "Critic", "Verifier"])


@st.composite
def digraphs(draw, max_n=8, n_roles=3, min_n=1):
    """Arbitrary directed graphs without self-loops (cycles allowed)."""
    n = draw(st.integers(min_n, max_n))
    bits = draw(st.lists(st.booleans(), min_size=n * n, max_size=n * n))
    adj = np.array(bits, dtype=bool).reshape(n, n)
    np.fill_diagonal(adj, False)
    roles = draw(st.lists(st.integers(0, n_roles - 1), min_size=n, max_size=n))
    vocab = RoleVocabulary(["Solver", "Critic", "Verifier", "Planner", "Decider"][:n_roles])
    return CommGraph.from_edges(n, list(zip(*np.nonzero(adj))), roles, vocab)


@st.composite
def dags(draw, max_n=7, n_roles=5, min_n=1):
    """Random DAGs: edges oriented along a drawn permutation."""
    g = draw(digraphs(max_n=max_n, n_roles=n_roles, min_n=min_n))
    perm = draw(st.permutations(range(g.n)))
    rank = {v: i for i, v in enumerate(perm)}
    edges = [(a, b) if rank[a] < rank[b] else (b, a) for a, b in g.edges()]
    return CommGraph.from_edges(g.n, sorted(set(edges)), g.roles.tolist(), g.vocabulary)


def random_digraph(rng, n, p=0.3, n_roles=3, vocab=THREE_ROLES):
    adj = rng.random((n, n)) < p
    np.fill_diagonal(adj, False)
    roles = rng.integers(0, n_roles, size=n).tolist()
    return CommGraph.from_edges(n, list(zip(*np.nonzero(adj))), roles, vocab)


def random_dag(rng, n, p=0.4, vocab=None):
    vocab = vocab or RoleVocabulary()
    perm = rng.permutation(n)
    edges = [(int(perm[i]), int(perm[j])) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    roles = rng.integers(0, len(vocab), size=n).tolist()
    return CommGraph.from_edges(n, edges, roles, vocab)


def brute_force_effective_size(g, node, direction):
    """Ordered-pair enumeration straight from the definition."""
    a = g.adjacency
    nbrs = [j for j in range(g.n) if (a[j, node] if direction == "in" else a[node, j])]
    if not nbrs:
        return 0.0
    redundant = 0
    for j, q in itertools.permutations(nbrs, 2):
        if a[j, q] and g.roles[j] == g.roles[q]:
            redundant += 1
    return len(nbrs) - redundant / len(nbrs)


def isomorphic(a, b, with_roles=False):
    if a.n != b.n or a.num_edges != b.num_edges:
        return False
    target = set(b.edges())
    for p in itertools.permutations(range(a.n)):
        if {(p[x], p[y]) for x, y in a.edges()} == target:
            if not with_roles or all(a.roles[i] == b.roles[p[i]] for i in range(a.n)):
                return True
    return False


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
