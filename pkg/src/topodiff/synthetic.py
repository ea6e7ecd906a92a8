"""LLM-free task oracles: role coverage plus a required role-to-role path."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .denoiser import QueryContext, make_query
from .graph import CommGraph, RoleVocabulary


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    query: str
    required_roles: tuple[str, ...]
    required_path: tuple[str, str]
    difficulty: str

    def __post_init__(self):
        object.__setattr__(self, "required_roles", tuple(self.required_roles))
        object.__setattr__(self, "required_path", tuple(self.required_path))
        expected = {"easy": 2, "hard": 4}.get(self.difficulty)
        if expected is None:
            raise ValueError(f"difficulty must be 'easy' or 'hard', got {self.difficulty!r}")
        if len(self.required_roles) != expected:
            raise ValueError(f"{self.difficulty} tasks need {expected} roles, got {self.required_roles}")


def _reachable(adj: np.ndarray, sources: Iterable[int]) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    stack = []
    for s in sources:
        for v in np.flatnonzero(adj[s]):
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(adj[u]):
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    return seen


def role_coverage(g: CommGraph, required: Sequence[str]) -> float:
    """Fraction of the required role multiset held by active (non-isolated) agents."""
    if not required:
        return 1.0
    present: dict[str, int] = {}
    active = g.active_mask()
    for label, on in zip(g.role_labels, active):
        if on:
            present[label] = present.get(label, 0) + 1
    hit = 0
    for label in required:
        if present.get(label, 0) > 0:
            present[label] -= 1
            hit += 1
    return hit / len(required)


def has_role_path(g: CommGraph, source_role: str, sink_role: str) -> bool:
    labels = g.role_labels
    sources = [i for i, r in enumerate(labels) if r == source_role]
    reach = _reachable(g.adjacency, sources)
    return any(reach[i] for i, r in enumerate(labels) if r == sink_role)


def synthetic_utility(g: CommGraph, task: SyntheticTask, coverage_weight: float = 0.5) -> float:
    path = 1.0 if has_role_path(g, *task.required_path) else 0.0
    return coverage_weight * role_coverage(g, task.required_roles) + (1.0 - coverage_weight) * path


def synthetic_cost(g: CommGraph, normalizer: float = 10.0) -> float:
    if normalizer <= 0:
        raise ValueError("cost normalizer must be positive")
    return (g.num_edges + int(g.active_mask().sum())) / normalizer


def objective(g: CommGraph, task: SyntheticTask, alpha: float, normalizer: float = 10.0) -> float:
    """Loss to minimise: -u + alpha * c."""
    return -synthetic_utility(g, task) + alpha * synthetic_cost(g, normalizer)


def _query_text(roles: Sequence[str], path: tuple[str, str], difficulty: str) -> str:
    team = ", ".join(roles)
    return (f"{difficulty} task: assemble a team with {team}; "
            f"the {path[0]} must pass its findings on to the {path[1]}.")


def generate_task_suite(n: int, hard_fraction: float = 0.5, seed: int | None = 0,
                        vocabulary: RoleVocabulary | None = None) -> list[SyntheticTask]:
    if n < 1:
        raise ValueError("suite size must be >= 1")
    vocabulary = vocabulary or RoleVocabulary()
    rng = np.random.default_rng(seed)
    n_hard = int(round(hard_fraction * n))
    difficulties = ["hard"] * n_hard + ["easy"] * (n - n_hard)
    rng.shuffle(difficulties)
    tasks = []
    for i, diff in enumerate(difficulties):
        # a multiset: repeated roles need that many distinct agents
        picks = rng.choice(len(vocabulary), size=2 if diff == "easy" else 4, replace=True)
        roles = tuple(vocabulary.labels[j] for j in picks)
        path = (roles[0], roles[1])
        tasks.append(SyntheticTask(f"task-{i:03d}", _query_text(roles, path, diff), roles, path, diff))
    return tasks


class SyntheticOracle:
    """Callable utility oracle over a task suite, keyed by query task_id."""

    def __init__(self, tasks: Sequence[SyntheticTask], cost_normalizer: float = 10.0):
        self.tasks = {t.task_id: t for t in tasks}
        self.cost_normalizer = cost_normalizer

    def task(self, q: QueryContext) -> SyntheticTask:
        try:
            return self.tasks[q.task_id]
        except KeyError:
            raise KeyError(f"no synthetic task with id {q.task_id!r}") from None

    def __call__(self, g: CommGraph, q: QueryContext) -> float:
        return synthetic_utility(g, self.task(q))

    def cost(self, g: CommGraph, q: QueryContext) -> float:
        return synthetic_cost(g, self.cost_normalizer)


def task_query(task: SyntheticTask, dim: int = 384, embeddings: dict | None = None) -> QueryContext:
    return make_query(task.query, task.task_id, dim, embeddings)


def save_suite(tasks: Sequence[SyntheticTask], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([asdict(t) for t in tasks], fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_suite(path) -> list[SyntheticTask]:
    with open(path, encoding="utf-8") as fh:
        return [SyntheticTask(**rec) for rec in json.load(fh)]
