"""Reverse process: query-conditioned attention denoiser.

Each reverse step reveals one masked node, predicts its role, then
predicts how it connects to every visible node with a mixture of
independent 4-way categoricals (none / new->old / old->new / both).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .graph import CommGraph, RoleVocabulary, dag_project, effective_sizes
from .nn import DTYPE, MLP, Affine, positional_encoding
from .ordering import MaskedGraph

NONE, FWD, REV, BOTH = range(4)
EDGE_CATEGORIES = ("none", "fwd", "rev", "both")


@dataclass(frozen=True)
class QueryContext:
    text: str
    embedding: np.ndarray = field(repr=False)
    task_id: str = ""

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=float)
        if emb.ndim != 1 or not np.all(np.isfinite(emb)):
            raise ValueError("query embedding must be a finite vector")
        object.__setattr__(self, "embedding", emb)


def fallback_embedding(text: str, dim: int = 384) -> np.ndarray:
    """Feature-hashed bag of words; every entry lies in [-1, 1].

    Each lower-cased token seeds its own uniform vector from a SHA-256
    digest and the vectors are averaged, so queries sharing words share
    directions.
    """
    tokens = re.findall(r"\w+", text.lower()) or [""]
    acc = np.zeros(dim)
    for tok in tokens:
        seed = int.from_bytes(hashlib.sha256(tok.encode()).digest()[:8], "little")
        acc += np.random.default_rng(seed).uniform(-1.0, 1.0, dim)
    return acc / len(tokens)


def make_query(text: str, task_id: str = "", dim: int = 384, embeddings: dict | None = None) -> QueryContext:
    if embeddings is not None and task_id in embeddings:
        emb = np.asarray(embeddings[task_id], dtype=float)
        if emb.shape != (dim,):
            raise ValueError(f"embedding for {task_id!r} has shape {emb.shape}, expected ({dim},)")
        return QueryContext(text, emb, task_id)
    return QueryContext(text, fallback_embedding(text, dim), task_id)


def attention_propagate(h: torch.Tensor, in_mask: torch.Tensor, W: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """One GAT layer over in-neighbours.

    ``in_mask[..., i, j]`` is true when j -> i is a visible edge. Nodes
    without in-neighbours aggregate to zero.
    """
    Wh = h @ W.T
    H = Wh.shape[-1]
    e = torch.relu((Wh @ a[:H])[..., :, None] + (Wh @ a[H:])[..., None, :])
    mask = in_mask.to(DTYPE)
    # scores are >= 0 after ReLU, so filling non-neighbours with 0 keeps the row max over neighbours
    top = torch.where(in_mask, e, torch.zeros_like(e)).max(dim=-1, keepdim=True).values.detach()
    # mask before exp so non-neighbour scores cannot overflow
    w = torch.exp(torch.where(in_mask, e - top, torch.zeros_like(e))) * mask
    denom = w.sum(dim=-1, keepdim=True)
    alpha = w / torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.relu(alpha @ Wh)


class AttentionLayer(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.W = nn.Parameter(torch.zeros(hidden, hidden, dtype=DTYPE))
        self.a = nn.Parameter(torch.zeros(2 * hidden, dtype=DTYPE))

    def forward(self, h, in_mask):
        return attention_propagate(h, in_mask, self.W, self.a)


@dataclass
class StepBatch:
    """Featurised reverse-step states that share one node count."""

    x: torch.Tensor  # (S, n, F)
    in_mask: torch.Tensor  # (S, n, n) bool, [s, i, j] = j -> i visible
    phi: torch.Tensor  # (S, n)
    visible: torch.Tensor  # (S, n) bool
    new_idx: torch.Tensor  # (S,) long


class Denoiser(nn.Module):
    def __init__(self, n_roles: int, query_dim: int = 384, hidden: int = 32, n_layers: int = 3,
                 n_components: int = 3, pe_dim: int = 16, max_nodes: int = 5):
        super().__init__()
        if n_components < 1:
            raise ValueError("need at least one mixture component")
        self.n_roles = n_roles
        self.query_dim = query_dim
        self.hidden = hidden
        self.pe_dim = pe_dim
        self.n_components = n_components
        self.max_nodes = max_nodes
        self.node_in = Affine(n_roles + 1 + pe_dim, hidden)
        self.query_proj = Affine(query_dim, hidden)
        self.layers = nn.ModuleList(AttentionLayer(hidden) for _ in range(n_layers))
        ctx = 2 * hidden
        self.role_head = MLP(ctx, hidden, n_roles)
        self.mix_head = MLP(ctx + n_roles, hidden, n_components)
        self.component_emb = nn.Parameter(torch.zeros(n_components, hidden, dtype=DTYPE))
        self.pair_head = MLP(ctx + n_roles + 2 * hidden, hidden, 4)
        self.size_head = MLP(hidden, hidden, max_nodes)

    # -- featurisation -------------------------------------------------

    def featurize(self, states: Sequence[MaskedGraph], beta: float, use_es: bool = True) -> StepBatch:
        n = states[0].base.n
        S = len(states)
        x = np.zeros((S, n, self.n_roles + 1))
        pos = np.zeros((S, n))
        in_mask = np.zeros((S, n, n), dtype=bool)
        phi = np.zeros((S, n))
        visible = np.zeros((S, n), dtype=bool)
        new_idx = np.zeros(S, dtype=int)
        for s, st in enumerate(states):
            if st.base.n != n:
                raise ValueError("all states in a batch must share a node count")
            if st.step < 1:
                raise ValueError("no masked nodes remain")
            if len(st.ordering) != n:
                raise ValueError("reverse steps need the full masking order")
            vis = ~st.masked
            roles = st.base.roles
            x[s, vis, roles[vis]] = 1.0
            x[s, ~vis, self.n_roles] = 1.0
            pos[s, list(st.ordering)] = np.arange(1, n + 1)
            adj = st.visible_adjacency
            in_mask[s] = adj.T
            visible[s] = vis
            if use_es:
                phi[s] = effective_sizes(st.base.adjacency, roles, beta, visible=vis)
            new_idx[s] = st.ordering[st.step - 1]
        xt = torch.cat([torch.as_tensor(x, dtype=DTYPE), positional_encoding(pos, self.pe_dim)], dim=-1)
        return StepBatch(xt, torch.as_tensor(in_mask), torch.as_tensor(phi, dtype=DTYPE),
                         torch.as_tensor(visible), torch.as_tensor(new_idx, dtype=torch.long))

    def query_vector(self, q: QueryContext | None, use_query: bool = True) -> torch.Tensor:
        if q is None or not use_query:
            return torch.zeros(self.hidden, dtype=DTYPE)
        emb = torch.as_tensor(q.embedding, dtype=DTYPE)
        if emb.shape != (self.query_dim,):
            raise ValueError(f"query embedding has dimension {emb.shape[0]}, projection expects {self.query_dim}")
        return self.query_proj(emb)

    # -- network pieces ------------------------------------------------

    def embed(self, batch: StepBatch, qvec: torch.Tensor, es_bias: bool = True) -> torch.Tensor:
        """Final node vectors (S, n, H): input + query, residual attention rounds, then + phi * 1."""
        h = self.node_in(batch.x) + qvec
        for layer in self.layers:
            h = h + layer(h, batch.in_mask)
        if es_bias:
            h = h + batch.phi[..., None]
        return h

    def context(self, h: torch.Tensor, batch: StepBatch) -> torch.Tensor:
        S = h.shape[0]
        h_new = h[torch.arange(S), batch.new_idx]
        vis = batch.visible.to(DTYPE)[..., None]
        readout = (h * vis).sum(1) / vis.sum(1).clamp(min=1.0)
        return torch.cat([h_new, readout], dim=-1)

    def role_log_probs(self, ctx: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.role_head(ctx), dim=-1)

    def edge_log_probs(self, ctx: torch.Tensor, role_new: torch.Tensor, h: torch.Tensor):
        """Mixture log-weights (S, C) and per-component pair log-probs (S, C, n, 4)."""
        S, n, H = h.shape
        C = self.n_components
        ctx_e = torch.cat([ctx, nn.functional.one_hot(role_new, self.n_roles).to(DTYPE)], dim=-1)
        log_mix = torch.log_softmax(self.mix_head(ctx_e), dim=-1)
        pair_in = torch.cat([
            ctx_e[:, None, None, :].expand(S, C, n, ctx_e.shape[-1]),
            h[:, None, :, :].expand(S, C, n, H),
            self.component_emb[None, :, None, :].expand(S, C, n, H),
        ], dim=-1)
        log_pair = torch.log_softmax(self.pair_head(pair_in), dim=-1)
        return log_mix, log_pair

    def size_log_probs(self, qvec: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.size_head(qvec), dim=-1)


def mixture_log_likelihood(log_mix: torch.Tensor, log_pair: torch.Tensor, cats: torch.Tensor,
                           existing: torch.Tensor) -> torch.Tensor:
    """log sum_c pi_c prod_{j existing} p_c(cat_j); shapes (S,C), (S,C,n,4), (S,n), (S,n)."""
    picked = log_pair.gather(-1, cats[:, None, :, None].expand(*log_pair.shape[:3], 1)).squeeze(-1)
    per_comp = (picked * existing[:, None, :].to(DTYPE)).sum(-1)
    return torch.logsumexp(log_mix + per_comp, dim=-1)


def edge_categories(adjacency: np.ndarray, new: int) -> np.ndarray:
    """Category of each (new, j) pair read off a full adjacency."""
    fwd = adjacency[new].astype(int)
    rev = adjacency[:, new].astype(int)
    return fwd * FWD + rev * REV  # FWD + REV == BOTH


@dataclass
class ModelFlags:
    beta: float = 0.7
    use_es: bool = True
    use_query: bool = True


def step_log_likelihoods(model: Denoiser, states: Sequence[MaskedGraph], q: QueryContext | None,
                         flags: ModelFlags = ModelFlags()) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced (log p(role), log p(edges)) for each state, each shape (S,)."""
    batch = model.featurize(states, flags.beta, flags.use_es)
    qvec = model.query_vector(q, flags.use_query)
    h = model.embed(batch, qvec, flags.use_es)
    ctx = model.context(h, batch)
    S = len(states)
    roles = np.stack([st.base.roles for st in states])
    role_new = torch.as_tensor(roles[np.arange(S), batch.new_idx.numpy()], dtype=torch.long)
    lp_role = model.role_log_probs(ctx)[torch.arange(S), role_new]
    log_mix, log_pair = model.edge_log_probs(ctx, role_new, h)
    cats = torch.as_tensor(np.stack([
        edge_categories(st.base.adjacency, int(k)) for st, k in zip(states, batch.new_idx.tolist())
    ]), dtype=torch.long)
    lp_edges = mixture_log_likelihood(log_mix, log_pair, cats, batch.visible)
    return lp_role, lp_edges


def reverse_states(g0: CommGraph, ordering: Sequence[int]) -> list[MaskedGraph]:
    """States G_N ... G_1 visited while undoing ``ordering``."""
    order = tuple(ordering)
    return [MaskedGraph(g0, order, t) for t in range(len(order), 0, -1)]


def graph_log_prob(model: Denoiser, g: CommGraph, ordering: Sequence[int], q: QueryContext | None,
                   flags: ModelFlags = ModelFlags(), include_size: bool = True) -> torch.Tensor:
    """log p(G | Q) along one reverse order, optionally including the node-count term."""
    lp_role, lp_edges = step_log_likelihoods(model, reverse_states(g, ordering), q, flags)
    total = (lp_role + lp_edges).sum()
    if include_size:
        total = total + size_log_prob(model, g.n, q, flags)
    return total


def size_log_prob(model: Denoiser, n: int, q: QueryContext | None, flags: ModelFlags = ModelFlags()) -> torch.Tensor:
    if not 1 <= n <= model.max_nodes:
        raise ValueError(f"node count {n} outside 1..{model.max_nodes}")
    return model.size_log_probs(model.query_vector(q, flags.use_query))[n - 1]


# -- single-state operations ---------------------------------------------


def predict_role(model: Denoiser, ctx) -> np.ndarray:
    with torch.no_grad():
        return model.role_log_probs(torch.as_tensor(ctx, dtype=DTYPE)[None])[0].exp().numpy()


def predict_edges_mixture(model: Denoiser, ctx, role_new: int, h_existing) -> tuple[np.ndarray, np.ndarray]:
    """Mixture weights (C,) and per-component pair probabilities (C, k, 4) for k existing nodes."""
    h = torch.as_tensor(np.asarray(h_existing, dtype=float).reshape(-1, model.hidden), dtype=DTYPE)
    with torch.no_grad():
        log_mix, log_pair = model.edge_log_probs(
            torch.as_tensor(ctx, dtype=DTYPE)[None], torch.tensor([role_new]), h[None])
    return log_mix[0].exp().numpy(), log_pair[0].exp().numpy()


def assignment_probability(mix: np.ndarray, pair: np.ndarray, cats: Sequence[int]) -> float:
    """Joint probability of one category assignment under the mixture (plain numpy)."""
    cats = list(cats)
    total = 0.0
    for c in range(len(mix)):
        prod = mix[c]
        for j, cat in enumerate(cats):
            prod *= pair[c, j, cat]
        total += prod
    return float(total)


@dataclass
class StepRecord:
    node: int
    role: int
    role_probs: np.ndarray
    existing: list[int]
    categories: list[int]
    mixture: np.ndarray
    pair_probs: np.ndarray  # (C, n, 4), rows for non-existing nodes are meaningless
    log_prob_role: float
    log_prob_edges: float

    @property
    def log_prob(self) -> float:
        return self.log_prob_role + self.log_prob_edges


def denoise_step(model: Denoiser, state: MaskedGraph, q: QueryContext | None, rng: np.random.Generator | None,
                 flags: ModelFlags = ModelFlags()) -> tuple[MaskedGraph, StepRecord]:
    """Reveal ``state.ordering[step-1]``.

    With ``rng`` the role and edges are sampled and written into the
    returned graph; with ``rng=None`` the node's true role and edges are
    kept (teacher forcing) and only scored.
    """
    if state.step < 1:
        raise ValueError("no masked nodes remain")
    g = state.base
    node = state.ordering[state.step - 1]
    with torch.no_grad():
        batch = model.featurize([state], flags.beta, flags.use_es)
        h = model.embed(batch, model.query_vector(q, flags.use_query), flags.use_es)
        ctx = model.context(h, batch)
        role_logp = model.role_log_probs(ctx)[0]
        role_probs = role_logp.exp().numpy()
        if rng is None:
            role = int(g.roles[node])
        else:
            role = int(rng.choice(len(role_probs), p=role_probs / role_probs.sum()))
        log_mix, log_pair = model.edge_log_probs(ctx, torch.tensor([role]), h)
        mix = log_mix[0].exp().numpy()
        pair = log_pair[0].exp().numpy()
        existing = [int(j) for j in np.flatnonzero(batch.visible[0].numpy())]
        if rng is None:
            cats = edge_categories(g.adjacency, node)
        else:
            cats = np.zeros(g.n, dtype=int)
            if existing:
                c = int(rng.choice(len(mix), p=mix / mix.sum()))
                for j in existing:
                    p = pair[c, j]
                    cats[j] = int(rng.choice(4, p=p / p.sum()))
        lp_edges = mixture_log_likelihood(log_mix, log_pair, torch.as_tensor(cats[None], dtype=torch.long),
                                          batch.visible).item()
    record = StepRecord(node, role, role_probs, existing, [int(cats[j]) for j in existing], mix, pair,
                        float(role_logp[role]), lp_edges)
    if rng is None:
        return MaskedGraph(g, state.ordering, state.step - 1), record
    adj = np.array(g.adjacency, copy=True)
    for j in existing:
        adj[node, j] = cats[j] in (FWD, BOTH)
        adj[j, node] = cats[j] in (REV, BOTH)
    roles = g.roles.copy()
    roles[node] = role
    new_g = CommGraph.from_edges(g.n, list(zip(*np.nonzero(adj))), roles.tolist(), g.vocabulary)
    return MaskedGraph(new_g, state.ordering, state.step - 1), record


@dataclass
class Generation:
    raw: CommGraph  # as sampled, before cycle breaking
    graph: CommGraph  # acyclic
    edge_scores: np.ndarray  # (n, n) marginal probability of each sampled edge
    removed: list[tuple[int, int]]
    steps: list[StepRecord]
    size_log_prob: float

    @property
    def ordering(self) -> list[int]:
        """Forward masking order that this generation reverses."""
        return [s.node for s in reversed(self.steps)]

    @property
    def log_prob(self) -> float:
        return self.size_log_prob + sum(s.log_prob for s in self.steps)


def sample_size(model: Denoiser, q: QueryContext | None, rng: np.random.Generator,
                flags: ModelFlags = ModelFlags()) -> int:
    with torch.no_grad():
        p = model.size_log_probs(model.query_vector(q, flags.use_query)).exp().numpy()
    return int(rng.choice(len(p), p=p / p.sum())) + 1


def generate_topology(model: Denoiser, q: QueryContext | None, n_target: int | None, rng: np.random.Generator,
                      vocabulary: RoleVocabulary | None = None, flags: ModelFlags = ModelFlags()) -> Generation:
    """Grow a graph from ``n_target`` masked slots; node 0 is revealed first.

    ``n_target=None`` draws the node count from the size head.
    """
    vocabulary = vocabulary or RoleVocabulary()
    if n_target is None:
        n_target = sample_size(model, q, rng, flags)
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    with torch.no_grad():
        size_lp = size_log_prob(model, n_target, q, flags).item() if n_target <= model.max_nodes else float("nan")
    blank = CommGraph.from_edges(n_target, [], [0] * n_target, vocabulary)
    state = MaskedGraph(blank, tuple(range(n_target - 1, -1, -1)), n_target)
    steps = []
    scores = np.zeros((n_target, n_target))
    while state.step > 0:
        state, rec = denoise_step(model, state, q, rng, flags)
        marg = np.einsum("c,cjk->jk", rec.mixture, rec.pair_probs)
        for j in rec.existing:
            scores[rec.node, j] = marg[j, FWD] + marg[j, BOTH]
            scores[j, rec.node] = marg[j, REV] + marg[j, BOTH]
        steps.append(rec)
    raw = state.base
    graph, removed = dag_project(raw, scores)
    return Generation(raw, graph, scores * raw.adjacency, removed, steps, size_lp)
