"""scikit-learn style wrappers around the diffusion model."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .denoiser import QueryContext, make_query
from .graph import CommGraph, RoleVocabulary, graph_stats
from .trainer import (DiffusionModel, DiffusionRecord, Oracle, TrainConfig, sample_trajectories, train,
                      trajectory_step_logliks)
from .validation import check_graph, check_is_fitted, check_probability, check_query, check_random_state

DEFAULT_QUERY_TEXT = "generic task"


class TopologyDiffusion(BaseEstimator):
    """Learns a distribution over communication graphs conditioned on queries.

    ``fit`` takes either ``DiffusionRecord`` objects or bare graphs (paired
    with ``queries`` when given, else a shared default query).
    """

    def __init__(self, M=4, batch_size=8, epochs=10, lr_ordering=5e-4, lr_denoiser=1e-4, beta=0.7, alpha=0.5,
                 utility_period=5, utility_fraction=0.2, utility_batch=8, hidden=32, n_components=3,
                 max_nodes=5, use_es=True, use_query=True, use_utility=True, phi_on_g0=False,
                 reward_sign="pos", grad_clip=0.0, random_state=0):
        self.M = M
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_ordering = lr_ordering
        self.lr_denoiser = lr_denoiser
        self.beta = beta
        self.alpha = alpha
        self.utility_period = utility_period
        self.utility_fraction = utility_fraction
        self.utility_batch = utility_batch
        self.hidden = hidden
        self.n_components = n_components
        self.max_nodes = max_nodes
        self.use_es = use_es
        self.use_query = use_query
        self.use_utility = use_utility
        self.phi_on_g0 = phi_on_g0
        self.reward_sign = reward_sign
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        params = self.get_params()
        seed = params.pop("random_state")
        check_probability(params["beta"], "beta")
        return TrainConfig(seed=0 if seed is None else int(seed), metric_samples=0, **params)

    def _records(self, X, queries) -> list[DiffusionRecord]:
        X = list(X)
        if not X:
            raise ValueError("fit needs at least one sample")
        if all(isinstance(x, DiffusionRecord) for x in X):
            return X
        default = make_query(DEFAULT_QUERY_TEXT, "default")
        if queries is not None and len(queries) != len(X):
            raise ValueError(f"{len(X)} graphs but {len(queries)} queries")
        out = []
        for i, g in enumerate(X):
            check_graph(g, max_nodes=self.max_nodes)
            q = check_query(queries[i]) if queries is not None else default
            out.append(DiffusionRecord(g, q, True, 0.0))
        return out

    def fit(self, X, y=None, queries: Sequence[QueryContext] | None = None, oracle: Oracle | None = None):
        records = self._records(X, queries)
        cfg = self._config()
        self.vocabulary_: RoleVocabulary = records[0].graph.vocabulary
        self.model_, self.metrics_ = train(records, cfg, oracle=oracle, model=DiffusionModel(cfg, self.vocabulary_))
        self.default_query_ = records[0].query
        return self

    def sample(self, q: QueryContext | None = None, n_samples: int = 1, n_target: int | None = None,
               random_state=None) -> list[CommGraph]:
        check_is_fitted(self)
        rng = check_random_state(self.random_state if random_state is None else random_state)
        q = self.default_query_ if q is None else check_query(q)
        return [self.model_.generate(q, rng, n_target).graph for _ in range(n_samples)]

    def predict(self, queries: Sequence[QueryContext], random_state=None) -> list[CommGraph]:
        """One generated graph per query."""
        check_is_fitted(self)
        rng = check_random_state(self.random_state if random_state is None else random_state)
        return [self.model_.generate(check_query(q), rng).graph for q in queries]

    def score(self, X, y=None, queries: Sequence[QueryContext] | None = None) -> float:
        """Mean importance-weighted log-likelihood of the graphs (higher is better)."""
        check_is_fitted(self)
        rng = check_random_state(self.random_state)
        vals = []
        with torch.no_grad():
            for rec in self._records(X, queries):
                trajs = sample_trajectories(self.model_, rec.graph, self.M, rng)
                vals.append(trajectory_step_logliks(self.model_, rec.graph, rec.query, trajs).sum(1).mean().item())
        return float(np.mean(vals))


class EffectiveSizeTransformer(BaseEstimator, TransformerMixin):
    """Graphs to rows of (active size, density, mean combined effective size)."""

    def __init__(self, beta=0.7):
        self.beta = beta

    def fit(self, X, y=None):
        check_probability(self.beta, "beta")
        self.n_features_out_ = 3
        return self

    def transform(self, X) -> np.ndarray:
        rows = []
        for g in X:
            s = graph_stats(check_graph(g, require_dag=False), self.beta)
            rows.append((s.active_size, s.density, s.mean_effective_size))
        return np.asarray(rows, dtype=float).reshape(-1, 3)

    def get_feature_names_out(self, input_features=None):
        return np.array(["active_size", "density", "mean_effective_size"], dtype=object)
