"""Input checks shared by the estimator API and the CLI."""

from __future__ import annotations

from numbers import Integral
from typing import Sequence

import numpy as np

from .denoiser import QueryContext
from .graph import CommGraph, GraphError, is_acyclic


def check_random_state(seed) -> np.random.Generator:
    """Generator from None, an int seed or an existing Generator."""
    if seed is None or isinstance(seed, (Integral, np.integer)):
        return np.random.default_rng(seed)
    if isinstance(seed, np.random.Generator):
        return seed
    raise TypeError(f"cannot build a random generator from {seed!r}")


def check_graph(g, require_dag: bool = True, max_nodes: int | None = None) -> CommGraph:
    if not isinstance(g, CommGraph):
        raise TypeError(f"expected CommGraph, got {type(g).__name__}")
    if g.n == 0:
        raise GraphError("graph has no agents")
    if max_nodes is not None and g.n > max_nodes:
        raise GraphError(f"graph has {g.n} agents, model supports at most {max_nodes}")
    if require_dag and not is_acyclic(g):
        raise GraphError("graph must be acyclic")
    return g


def check_graphs(graphs: Sequence, **kwargs) -> list[CommGraph]:
    graphs = list(graphs)
    if not graphs:
        raise ValueError("expected at least one graph")
    vocab = graphs[0].vocabulary if isinstance(graphs[0], CommGraph) else None
    out = []
    for i, g in enumerate(graphs):
        try:
            check_graph(g, **kwargs)
        except (TypeError, GraphError) as exc:
            raise type(exc)(f"graph {i}: {exc}") from None
        if g.vocabulary != vocab:
            raise GraphError(f"graph {i} uses a different role vocabulary")
        out.append(g)
    return out


def check_query(q, dim: int | None = None) -> QueryContext:
    if not isinstance(q, QueryContext):
        raise TypeError(f"expected QueryContext, got {type(q).__name__}")
    if dim is not None and q.embedding.shape != (dim,):
        raise ValueError(f"query embedding has shape {q.embedding.shape}, expected ({dim},)")
    return q


def check_probability(x: float, name: str) -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {x}")
    return x


def check_is_fitted(est, attr: str = "model_") -> None:
    if getattr(est, attr, None) is None:
        raise RuntimeError(f"{type(est).__name__} is not fitted yet; call fit() first")
