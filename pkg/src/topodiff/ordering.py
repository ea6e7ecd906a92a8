"""Forward process: a relational GNN that picks which node to mask next."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .graph import CommGraph, effective_sizes
from .nn import DTYPE, Affine, masked_log_softmax, positional_encoding


@dataclass(frozen=True)
class MaskedGraph:
    """``base`` with the first ``step`` nodes of ``ordering`` masked.

    An edge is visible only when both endpoints are unmasked. ``ordering``
    may be a prefix of the full masking order; it must cover at least
    ``step`` nodes.
    """

    base: CommGraph
    ordering: tuple[int, ...]
    step: int

    def __post_init__(self):
        if len(set(self.ordering)) != len(self.ordering):
            raise ValueError(f"ordering has repeated nodes: {self.ordering}")
        if any(not 0 <= k < self.base.n for k in self.ordering):
            raise ValueError(f"ordering {self.ordering} references unknown nodes (n={self.base.n})")
        if not 0 <= self.step <= len(self.ordering):
            raise ValueError(f"step {self.step} outside 0..{len(self.ordering)}")

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.ordering[: self.step]

    @property
    def masked(self) -> np.ndarray:
        m = np.zeros(self.base.n, dtype=bool)
        m[list(self.prefix)] = True
        return m

    @property
    def visible_adjacency(self) -> np.ndarray:
        vis = ~self.masked
        return self.base.adjacency & vis[:, None] & vis[None, :]


@dataclass
class ForwardTrajectory:
    base: CommGraph
    ordering: list[int]
    selection_probs: list[float]

    @property
    def masked_graphs(self) -> list[MaskedGraph]:
        """G_1 ... G_N."""
        order = tuple(self.ordering)
        return [MaskedGraph(self.base, order, t) for t in range(1, len(order) + 1)]


class OrderingNet(nn.Module):
    """Three relational message-passing layers (in-edge, out-edge, self) and a scalar head."""

    def __init__(self, n_roles: int, hidden: int = 32, n_layers: int = 3, pe_dim: int = 16):
        super().__init__()
        self.n_roles = n_roles
        self.pe_dim = pe_dim
        d_in = n_roles + 1 + pe_dim
        self.layers = nn.ModuleList()
        for i in range(n_layers):
            d = d_in if i == 0 else hidden
            self.layers.append(nn.ModuleDict({
                "self": Affine(d, hidden),
                "in": Affine(d, hidden),
                "out": Affine(d, hidden),
            }))
        self.head = Affine(hidden, 1)

    def features(self, roles: np.ndarray, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
        n = len(roles)
        S = len(prefixes)
        onehot = np.zeros((n, self.n_roles))
        onehot[np.arange(n), roles] = 1.0
        flags = np.zeros((S, n))
        pos = np.zeros((S, n))
        for s, prefix in enumerate(prefixes):
            pos[s] = len(prefix) + 1
            for i, k in enumerate(prefix):
                flags[s, k] = 1.0
                pos[s, k] = i + 1
        x = np.concatenate([np.broadcast_to(onehot, (S, n, self.n_roles)), flags[..., None]], axis=-1)
        return torch.cat([torch.as_tensor(x, dtype=DTYPE), positional_encoding(pos, self.pe_dim)], dim=-1)

    def forward(self, adjacency: np.ndarray, roles: np.ndarray, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
        """Scores h_j, shape (len(prefixes), n)."""
        a = torch.as_tensor(np.asarray(adjacency, dtype=float), dtype=DTYPE)
        deg_in = a.sum(0).clamp(min=1.0)[:, None]
        deg_out = a.sum(1).clamp(min=1.0)[:, None]
        h = self.features(roles, prefixes)
        for layer in self.layers:
            msg_in = (a.T @ layer["in"](h)) / deg_in
            msg_out = (a @ layer["out"](h)) / deg_out
            h = torch.relu(layer["self"](h) + msg_in + msg_out)
        return self.head(h).squeeze(-1)


def _check_prefix(g0: CommGraph, prefix: Sequence[int]) -> None:
    if any(not 0 <= k < g0.n for k in prefix):
        raise ValueError(f"prefix {list(prefix)} references unknown node (n={g0.n})")
    if len(set(prefix)) != len(prefix):
        raise ValueError(f"prefix {list(prefix)} has repeated nodes")


def node_scores(net: OrderingNet, g0: CommGraph, prefix: Sequence[int]) -> np.ndarray:
    _check_prefix(g0, prefix)
    with torch.no_grad():
        return net(g0.adjacency, g0.roles, [list(prefix)])[0].numpy()


def ordering_bias(g0: CommGraph, prefixes: Sequence[Sequence[int]], beta: float,
                  use_es: bool = True, phi_on_g0: bool = False) -> np.ndarray:
    """Effective-size logit bias per state, shape (len(prefixes), n)."""
    S, n = len(prefixes), g0.n
    if not use_es:
        return np.zeros((S, n))
    if phi_on_g0:
        return np.broadcast_to(effective_sizes(g0.adjacency, g0.roles, beta), (S, n)).copy()
    out = np.zeros((S, n))
    for s, prefix in enumerate(prefixes):
        vis = np.ones(n, dtype=bool)
        vis[list(prefix)] = False
        out[s] = effective_sizes(g0.adjacency, g0.roles, beta, visible=vis)
    return out


def selection_log_probs(net: OrderingNet, g0: CommGraph, prefixes: Sequence[Sequence[int]],
                        beta: float, use_es: bool = True, phi_on_g0: bool = False) -> torch.Tensor:
    """log q(pi_t = j | G0, phi, prefix) for each state; -inf on masked nodes."""
    for p in prefixes:
        _check_prefix(g0, p)
    n = g0.n
    mask = np.ones((len(prefixes), n), dtype=bool)
    for s, p in enumerate(prefixes):
        mask[s, list(p)] = False
    if not mask.any(axis=1).all():
        raise ValueError("every node is already masked")
    logits = net(g0.adjacency, g0.roles, prefixes)
    logits = logits + torch.as_tensor(ordering_bias(g0, prefixes, beta, use_es, phi_on_g0), dtype=DTYPE)
    return masked_log_softmax(logits, torch.as_tensor(mask))


def selection_distribution(net: OrderingNet, g0: CommGraph, prefix: Sequence[int], beta: float,
                           use_es: bool = True, phi_on_g0: bool = False) -> np.ndarray:
    with torch.no_grad():
        logp = selection_log_probs(net, g0, [list(prefix)], beta, use_es, phi_on_g0)[0]
    return logp.exp().numpy()


def sample_forward_trajectory(net: OrderingNet, g0: CommGraph, beta: float, rng: np.random.Generator,
                              use_es: bool = True, phi_on_g0: bool = False) -> ForwardTrajectory:
    if g0.n == 0:
        raise ValueError("cannot diffuse an empty graph")
    prefix: list[int] = []
    probs: list[float] = []
    for _ in range(g0.n):
        p = selection_distribution(net, g0, prefix, beta, use_es, phi_on_g0)
        k = int(rng.choice(g0.n, p=p / p.sum()))
        prefix.append(k)
        probs.append(float(p[k]))
    return ForwardTrajectory(g0, prefix, probs)


def trajectory_log_prob(net: OrderingNet, g0: CommGraph, ordering: Sequence[int], beta: float,
                        use_es: bool = True, phi_on_g0: bool = False) -> torch.Tensor:
    """log q(pi | G0, phi) as a differentiable scalar."""
    prefixes = [list(ordering[:t]) for t in range(len(ordering))]
    logp = selection_log_probs(net, g0, prefixes, beta, use_es, phi_on_g0)
    idx = torch.as_tensor(list(ordering), dtype=torch.long)
    return logp[torch.arange(len(ordering)), idx].sum()
