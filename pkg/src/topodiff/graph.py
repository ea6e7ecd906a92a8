"""Directed communication graphs over role-labelled agents.

Holds the graph value types, acyclicity machinery (topological order,
cycle breaking), effective-size redundancy metrics, the baseline topology
families and the JSON topology document format.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

DEFAULT_ROLES = ("Solver", "Critic", "Verifier", "Planner", "Decider")
FAMILIES = ("fully_connected", "mesh", "star", "layered", "random")


class GraphError(ValueError):
    """Malformed graph or topology document."""


class VocabularyError(GraphError):
    pass


class CycleError(GraphError):
    """Raised when a graph admits no topological order.

    ``cycle`` holds one witness cycle as a node list ``[a, b, ..., a]``.
    """

    def __init__(self, cycle: Sequence[int]):
        self.cycle = list(cycle)
        super().__init__("graph contains a cycle: " + " -> ".join(map(str, self.cycle)))


@dataclass(frozen=True)
class RoleId:
    index: int
    label: str


class RoleVocabulary:
    """Ordered set of role labels; a role's index is its position."""

    def __init__(self, labels: Iterable[str] = DEFAULT_ROLES):
        self.labels = tuple(labels)
        if not self.labels:
            raise VocabularyError("empty role vocabulary")
        if len(set(self.labels)) != len(self.labels):
            raise VocabularyError(f"duplicate role labels in {self.labels}")
        self._index = {label: i for i, label in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.role(i) for i in range(len(self)))

    def __eq__(self, other) -> bool:
        return isinstance(other, RoleVocabulary) and self.labels == other.labels

    def __hash__(self) -> int:
        return hash(self.labels)

    def __repr__(self) -> str:
        return f"RoleVocabulary({list(self.labels)!r})"

    def role(self, key: int | str) -> RoleId:
        if isinstance(key, str):
            if key not in self._index:
                raise VocabularyError(f"unknown role label {key!r}; vocabulary is {list(self.labels)}")
            return RoleId(self._index[key], key)
        key = int(key)
        if not 0 <= key < len(self.labels):
            raise VocabularyError(f"role index {key} out of range for vocabulary of size {len(self)}")
        return RoleId(key, self.labels[key])


@dataclass(frozen=True)
class AgentSpec:
    id: int
    role: RoleId
    base: str = "mock"
    state: str = ""
    plugins: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class CommGraph:
    """Directed agent graph. ``adjacency[j, q]`` is the edge j -> q."""

    adjacency: np.ndarray
    agents: tuple[AgentSpec, ...]
    vocabulary: RoleVocabulary = field(default_factory=RoleVocabulary)

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=bool, copy=True)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise GraphError(f"adjacency must be square, got shape {adj.shape}")
        if adj.shape[0] != len(self.agents):
            raise GraphError(f"{len(self.agents)} agents for {adj.shape[0]} nodes")
        if np.any(np.diag(adj)):
            i = int(np.flatnonzero(np.diag(adj))[0])
            raise GraphError(f"self-loop on node {i}")
        ids = [a.id for a in self.agents]
        if ids != list(range(len(ids))):
            raise GraphError(f"agent ids must be 0..n-1 in order, got {ids}")
        for a in self.agents:
            if self.vocabulary.role(a.role.index) != a.role:
                raise VocabularyError(f"agent {a.id} role {a.role} not in {self.vocabulary}")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "agents", tuple(self.agents))

    @classmethod
    def from_edges(
        cls,
        n: int,
        edges: Iterable[tuple[int, int]],
        roles: Sequence[int | str],
        vocabulary: RoleVocabulary | None = None,
    ) -> "CommGraph":
        vocabulary = vocabulary or RoleVocabulary()
        if len(roles) != n:
            raise GraphError(f"expected {n} roles, got {len(roles)}")
        adj = np.zeros((n, n), dtype=bool)
        for a, b in edges:
            if not (0 <= a < n and 0 <= b < n):
                raise GraphError(f"edge ({a}, {b}) out of range for n={n}")
            adj[a, b] = True
        agents = tuple(AgentSpec(i, vocabulary.role(r)) for i, r in enumerate(roles))
        return cls(adj, agents, vocabulary)

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def roles(self) -> np.ndarray:
        return np.array([a.role.index for a in self.agents], dtype=int)

    @property
    def role_labels(self) -> list[str]:
        return [a.role.label for a in self.agents]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum())

    def edges(self) -> list[tuple[int, int]]:
        return [(int(a), int(b)) for a, b in zip(*np.nonzero(self.adjacency))]

    def in_neighbors(self, node: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[:, node])]

    def out_neighbors(self, node: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[node])]

    def active_mask(self) -> np.ndarray:
        """Nodes with at least one incident edge."""
        return self.adjacency.any(axis=0) | self.adjacency.any(axis=1)

    def with_adjacency(self, adjacency: np.ndarray) -> "CommGraph":
        return CommGraph(adjacency, self.agents, self.vocabulary)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CommGraph):
            return NotImplemented
        return (
            self.vocabulary == other.vocabulary
            and self.agents == other.agents
            and np.array_equal(self.adjacency, other.adjacency)
        )

    def __hash__(self) -> int:
        return hash((self.agents, self.adjacency.tobytes()))

    def __repr__(self) -> str:
        return f"CommGraph(n={self.n}, roles={self.role_labels}, edges={self.edges()})"


@dataclass(frozen=True)
class GraphStats:
    active_size: int
    density: float
    mean_effective_size: float


def _find_cycle(adj: np.ndarray, nodes: Iterable[int]) -> list[int]:
    """Witness cycle within the subgraph induced by ``nodes`` (which must contain one)."""
    nodes = sorted(nodes)
    allowed = set(nodes)
    color = dict.fromkeys(nodes, 0)
    parent: dict[int, int] = {}
    for root in nodes:
        if color[root]:
            continue
        stack = [(root, iter(int(x) for x in np.flatnonzero(adj[root])))]
        color[root] = 1
        while stack:
            u, it = stack[-1]
            for v in it:
                if v not in allowed:
                    continue
                if color[v] == 0:
                    color[v] = 1
                    parent[v] = u
                    stack.append((v, iter(int(x) for x in np.flatnonzero(adj[v]))))
                    break
                if color[v] == 1:
                    cycle = [u]
                    while cycle[-1] != v:
                        cycle.append(parent[cycle[-1]])
                    cycle.reverse()
                    return cycle + [v]
            else:
                color[u] = 2
                stack.pop()
    raise AssertionError("no cycle found")


def topological_sort(g: CommGraph | np.ndarray) -> list[int]:
    """Kahn's algorithm, smallest ready index first.

    Raises :class:`CycleError` with a witness cycle when no order exists.
    """
    adj = g.adjacency if isinstance(g, CommGraph) else np.asarray(g, dtype=bool)
    n = adj.shape[0]
    indeg = adj.sum(axis=0).astype(int)
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in np.flatnonzero(adj[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, int(v))
    if len(order) < n:
        raise CycleError(_find_cycle(adj, set(range(n)) - set(order)))
    return order


def is_acyclic(g: CommGraph | np.ndarray) -> bool:
    try:
        topological_sort(g)
    except CycleError:
        return False
    return True


def effective_size(g: CommGraph, node: int, direction: str = "in") -> float:
    """Role-aware effective size of ``node``'s in- or out-ego network.

    |N| minus the number of connected same-role ordered pairs inside N,
    divided by |N|. An empty neighbourhood gives 0.
    """
    if not 0 <= node < g.n:
        raise IndexError(f"node {node} out of range for n={g.n}")
    if direction == "in":
        nbrs = np.flatnonzero(g.adjacency[:, node])
    elif direction == "out":
        nbrs = np.flatnonzero(g.adjacency[node])
    else:
        raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
    k = len(nbrs)
    if k == 0:
        return 0.0
    roles = g.roles[nbrs]
    same = roles[:, None] == roles[None, :]
    redundant = int((g.adjacency[np.ix_(nbrs, nbrs)] & same).sum())
    return k - redundant / k


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if not 0.0 <= beta <= 1.0 or math.isnan(beta):
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return beta


def combined_effective_size(g: CommGraph, node: int, beta: float = 0.7) -> float:
    beta = _check_beta(beta)
    return effective_size(g, node, "in") * (1.0 - beta) + effective_size(g, node, "out") * beta


def effective_sizes(adjacency: np.ndarray, roles: np.ndarray, beta: float, visible: np.ndarray | None = None) -> np.ndarray:
    """Vectorised combined effective size for every node of a (sub)graph.

    Nodes outside ``visible`` get 0 and their edges are ignored. Used on
    the hot path of the diffusion networks.
    """
    beta = _check_beta(beta)
    adj = np.asarray(adjacency, dtype=bool)
    if visible is not None:
        vis = np.asarray(visible, dtype=bool)
        adj = adj & vis[:, None] & vis[None, :]
    a = adj.astype(float)
    same = (roles[:, None] == roles[None, :]).astype(float)
    red = a * same  # red[j, q]: connected same-role ordered pair
    # in-neighbourhood of k is column k: pairs (j, q) with a[j,k] a[q,k]
    deg_in = a.sum(axis=0)
    deg_out = a.sum(axis=1)
    red_in = np.einsum("jk,jq,qk->k", a, red, a)
    red_out = np.einsum("kj,jq,kq->k", a, red, a)
    phi_in = np.where(deg_in > 0, deg_in - red_in / np.maximum(deg_in, 1), 0.0)
    phi_out = np.where(deg_out > 0, deg_out - red_out / np.maximum(deg_out, 1), 0.0)
    return phi_in * (1.0 - beta) + phi_out * beta


def _grid_edges(n: int) -> list[tuple[int, int]]:
    cols = math.ceil(math.sqrt(n))
    edges = []
    for i in range(n):
        r, c = divmod(i, cols)
        if c + 1 < cols and i + 1 < n:
            edges.append((i, i + 1))
        if i + cols < n:
            edges.append((i, i + cols))
    return edges


def baseline_topology(
    family: str,
    n: int,
    role_pool: RoleVocabulary | None = None,
    seed: int | np.random.Generator | None = None,
    edge_prob: float = 0.3,
) -> CommGraph:
    """One of the standard hand-designed topologies, oriented low -> high index."""
    if n < 2:
        raise GraphError(f"baseline topologies need n >= 2, got {n}")
    role_pool = role_pool or RoleVocabulary()
    rng = np.random.default_rng(seed)
    roles = rng.integers(0, len(role_pool), size=n).tolist()
    if family == "fully_connected":
        edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif family == "mesh":
        edges = _grid_edges(n)
    elif family == "star":
        edges = [(0, j) for j in range(1, n)]
    elif family == "layered":
        layers = [list(range(i, min(i + 2, n))) for i in range(0, n, 2)]
        edges = [(a, b) for lo, hi in zip(layers, layers[1:]) for a in lo for b in hi]
    elif family == "random":
        draws = rng.random((n, n))
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if draws[i, j] < edge_prob]
    else:
        raise ValueError(f"unknown topology family {family!r}; expected one of {FAMILIES}")
    return CommGraph.from_edges(n, edges, roles, role_pool)


def dag_project(g: CommGraph, edge_scores: dict[tuple[int, int], float] | np.ndarray) -> tuple[CommGraph, list[tuple[int, int]]]:
    """Break every cycle by deleting its lowest-scored edge.

    Returns the acyclic graph and the removed edges. After the greedy
    pass, removed edges are offered back highest score first and kept
    whenever they no longer close a cycle, so every edge that stays
    removed would recreate one.
    """
    adj = np.array(g.adjacency, copy=True)

    def score(e):
        if isinstance(edge_scores, dict):
            return float(edge_scores[e])
        return float(edge_scores[e[0], e[1]])

    for e in g.edges():
        score(e)  # every present edge must be scored

    removed = []
    while True:
        try:
            topological_sort(adj)
            break
        except CycleError as err:
            cyc = err.cycle
            cycle_edges = list(zip(cyc, cyc[1:]))
            worst = min(cycle_edges, key=lambda e: (score(e), e))
            adj[worst] = False
            removed.append(worst)

    kept_removed = []
    for e in sorted(removed, key=lambda e: (-score(e), e)):
        adj[e] = True
        if is_acyclic(adj):
            continue
        adj[e] = False
        kept_removed.append(e)
    return g.with_adjacency(adj), sorted(kept_removed)


def graph_stats(g: CommGraph, beta: float = 0.7) -> GraphStats:
    active = g.active_mask()
    n = g.n
    density = g.num_edges / (n * (n - 1)) if n > 1 else 0.0
    if not active.any():
        return GraphStats(0, density, 0.0)
    phi = effective_sizes(g.adjacency, g.roles, beta)
    return GraphStats(int(active.sum()), float(density), float(phi[active].mean()))


def to_document(g: CommGraph, meta: dict[str, Any] | None = None) -> dict[str, Any]:
    meta = dict(meta or {})
    meta["role_vocabulary"] = list(g.vocabulary.labels)
    extras = [
        {"base": a.base, "state": a.state, "plugins": list(a.plugins)}
        for a in g.agents
    ]
    if any(e != {"base": "mock", "state": "", "plugins": []} for e in extras):
        meta["agents"] = extras
    return {"n": g.n, "roles": g.role_labels, "edges": [list(e) for e in g.edges()], "meta": meta}


def from_document(doc: dict[str, Any], vocabulary: RoleVocabulary | None = None) -> CommGraph:
    try:
        n = doc["n"]
        labels = doc["roles"]
        edges = doc["edges"]
        meta = doc.get("meta", {})
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed topology document: {exc!r}") from None
    if not isinstance(n, int) or n < 0:
        raise GraphError(f"'n' must be a non-negative integer, got {n!r}")
    if not isinstance(labels, list) or len(labels) != n:
        raise GraphError(f"'roles' must list {n} labels")
    if vocabulary is None:
        vocabulary = RoleVocabulary(meta.get("role_vocabulary", DEFAULT_ROLES))
    pairs = []
    for e in edges:
        if not (isinstance(e, (list, tuple)) and len(e) == 2 and all(isinstance(x, int) for x in e)):
            raise GraphError(f"edge {e!r} is not an integer pair")
        if e[0] == e[1]:
            raise GraphError(f"self-loop on node {e[0]}")
        pairs.append(tuple(e))
    if len(set(pairs)) != len(pairs):
        raise GraphError("duplicate edges in document")
    g = CommGraph.from_edges(n, pairs, labels, vocabulary)
    extras = meta.get("agents")
    if extras is not None:
        if len(extras) != n:
            raise GraphError("meta.agents length does not match n")
        agents = tuple(
            AgentSpec(a.id, a.role, x.get("base", "mock"), x.get("state", ""), tuple(x.get("plugins", ())))
            for a, x in zip(g.agents, extras)
        )
        g = CommGraph(g.adjacency, agents, vocabulary)
    return g


def serialize(g: CommGraph, meta: dict[str, Any] | None = None) -> str:
    return json.dumps(to_document(g, meta), sort_keys=True)


def deserialize(text: str, vocabulary: RoleVocabulary | None = None) -> CommGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"topology document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise GraphError("topology document must be a JSON object")
    return from_document(doc, vocabulary)


def to_dot(g: CommGraph, name: str = "topology", active_only: bool = True) -> str:
    """Graphviz rendering. Isolated nodes are dropped unless ``active_only`` is off."""
    keep = g.active_mask() if active_only else np.ones(g.n, dtype=bool)
    lines = [f"digraph {name} {{"]
    for a in g.agents:
        if keep[a.id]:
            lines.append(f'  n{a.id} [label="{a.id}: {a.role.label}"];')
    for s, t in g.edges():
        lines.append(f"  n{s} -> n{t};")
    lines.append("}")
    return "\n".join(lines) + "\n"
