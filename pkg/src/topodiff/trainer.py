"""Joint training of the ordering network and the denoiser.

* denoiser: importance-weighted reconstruction likelihood along sampled
  masking orders (the ordering probabilities act as constant weights);
* ordering network: REINFORCE on the weighted reconstruction score;
* denoiser again: score-function updates on shaped task utility
  ``u - alpha * c`` of freshly generated graphs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .denoiser import (Denoiser, Generation, ModelFlags, QueryContext, generate_topology, graph_log_prob,
                       reverse_states, size_log_prob, step_log_likelihoods)
from .graph import (FAMILIES, CommGraph, RoleVocabulary, baseline_topology, from_document, graph_stats,
                    is_acyclic, to_document)
from .nn import Adam, Tape, config_hash, tensors_from_document, tensors_to_document, uniform_init
from .ordering import ForwardTrajectory, OrderingNet, sample_forward_trajectory, trajectory_log_prob

Oracle = Callable[[CommGraph, QueryContext], float]
CostFn = Callable[[CommGraph, QueryContext], float]

METRIC_COLUMNS = ("epoch", "vlb_loss", "mean_reward", "mean_utility", "mean_effective_size", "wall_ms")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    M: int = 4
    batch_size: int = 8
    epochs: int = 10
    lr_ordering: float = 5e-4
    lr_denoiser: float = 1e-4
    beta: float = 0.7
    alpha: float = 0.5
    utility_period: int = 5
    utility_fraction: float = 0.2
    utility_batch: int = 8
    seed: int = 0
    hidden: int = 32
    n_layers: int = 3
    ordering_layers: int = 3
    n_components: int = 3
    pe_dim: int = 16
    query_dim: int = 384
    max_nodes: int = 5
    use_es: bool = True
    use_query: bool = True
    use_utility: bool = True
    phi_on_g0: bool = False
    reward_sign: str = "pos"
    stale_neighbors: bool = False
    cost_normalizer: float = 10.0
    metric_samples: int = 8
    checkpoint_every: int = 0
    record_wall_time: bool = False
    grad_clip: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("M", self.M >= 1), ("batch_size", self.batch_size >= 1), ("epochs", self.epochs >= 0),
            ("utility_period", self.utility_period >= 1),
            ("utility_fraction", 0.0 < self.utility_fraction <= 1.0),
            ("utility_batch", self.utility_batch >= 1),
            ("beta", 0.0 <= self.beta <= 1.0), ("lr_ordering", self.lr_ordering > 0),
            ("lr_denoiser", self.lr_denoiser > 0), ("n_components", self.n_components >= 1),
            ("pe_dim", self.pe_dim > 0 and self.pe_dim % 2 == 0), ("max_nodes", self.max_nodes >= 1),
            ("reward_sign", self.reward_sign in ("pos", "neg")), ("cost_normalizer", self.cost_normalizer > 0),
            ("grad_clip", self.grad_clip >= 0), ("hidden", self.hidden >= 1), ("n_layers", self.n_layers >= 1),
            ("ordering_layers", self.ordering_layers >= 1), ("query_dim", self.query_dim >= 1),
            ("metric_samples", self.metric_samples >= 0), ("checkpoint_every", self.checkpoint_every >= 0),
            ("seed", self.seed >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {name}: {getattr(self, name)!r}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}")
            default = known[key].default
            try:
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise TypeError
                elif isinstance(default, int):
                    if isinstance(value, bool) or int(value) != value:
                        raise TypeError
                    value = int(value)
                elif isinstance(default, float):
                    value = float(value)
                elif isinstance(default, str) and not isinstance(value, str):
                    raise TypeError
            except (TypeError, ValueError):
                raise ConfigError(f"config field {key!r} has wrong type: {value!r}") from None
            kwargs[key] = value
        return cls(**kwargs)

    def flags(self) -> ModelFlags:
        return ModelFlags(self.beta, self.use_es, self.use_query)


class RunningBaseline:
    """Exponential running mean of rewards; ``value`` is None until the first update."""

    def __init__(self, momentum: float = 0.9, value: float | None = None):
        self.momentum = momentum
        self.value = value

    def update(self, rewards: Iterable[float]) -> None:
        r = float(np.mean(list(rewards)))
        self.value = r if self.value is None else self.momentum * self.value + (1 - self.momentum) * r


@dataclass
class DiffusionRecord:
    graph: CommGraph
    query: QueryContext
    correct: bool
    cost: float
    utility: float = float("nan")
    family: str = ""


class DiffusionModel:
    """Both networks, their optimisers and every piece of mutable training state."""

    def __init__(self, config: TrainConfig, vocabulary: RoleVocabulary | None = None):
        self.config = config
        self.vocabulary = vocabulary or RoleVocabulary()
        R = len(self.vocabulary)
        self.rng = np.random.default_rng(config.seed)
        self.ordering = OrderingNet(R, config.hidden, config.ordering_layers, config.pe_dim)
        self.denoiser = Denoiser(R, config.query_dim, config.hidden, config.n_layers, config.n_components,
                                 config.pe_dim, config.max_nodes)
        uniform_init(self.ordering, self.rng)
        uniform_init(self.denoiser, self.rng)
        self.opt_ordering = Adam(self.ordering.named_parameters(), config.lr_ordering, clip_norm=config.grad_clip)
        self.opt_denoiser = Adam(self.denoiser.named_parameters(), config.lr_denoiser, clip_norm=config.grad_clip)
        self.ordering_baseline = RunningBaseline()
        self.utility_baselines: dict[str, RunningBaseline] = {}
        self.epoch = 0
        self.utility_step = 0

    @property
    def flags(self) -> ModelFlags:
        return self.config.flags()

    def utility_baseline(self, q: QueryContext) -> RunningBaseline:
        """Running return baseline for one query; queries differ in attainable utility."""
        return self.utility_baselines.setdefault(q.task_id or q.text, RunningBaseline())

    def generate(self, q: QueryContext | None, rng: np.random.Generator, n_target: int | None = None) -> Generation:
        return generate_topology(self.denoiser, q, n_target, rng, self.vocabulary, self.flags)

    # -- checkpoints -----------------------------------------------------

    def to_document(self) -> dict:
        tensors = {}
        for prefix, module, opt in (("ordering", self.ordering, self.opt_ordering),
                                    ("denoiser", self.denoiser, self.opt_denoiser)):
            state = opt.state_dict()
            for name, p in module.named_parameters():
                tensors[f"{prefix}.{name}"] = p
                tensors[f"adam.m.{prefix}.{name}"] = state["m"][name]
                tensors[f"adam.v.{prefix}.{name}"] = state["v"][name]
        cfg = asdict(self.config)
        header = {
            "seed": self.config.seed,
            "step": self.epoch,
            "config_hash": config_hash(cfg),
            "config": cfg,
            "vocabulary": list(self.vocabulary.labels),
            "adam_steps": {"ordering": self.opt_ordering.step_count, "denoiser": self.opt_denoiser.step_count},
            "baselines": {"ordering": self.ordering_baseline.value, "utility": {k: b.value for k, b in sorted(self.utility_baselines.items())}},
            "utility_step": self.utility_step,
            "rng_state": self.rng.bit_generator.state,
        }
        return tensors_to_document(tensors, header)

    @classmethod
    def from_document(cls, doc: dict) -> "DiffusionModel":
        tensors, header = tensors_from_document(doc)
        model = cls(TrainConfig.from_mapping(header["config"]), RoleVocabulary(header["vocabulary"]))
        for prefix, module, opt in (("ordering", model.ordering, model.opt_ordering),
                                    ("denoiser", model.denoiser, model.opt_denoiser)):
            with torch.no_grad():
                for name, p in module.named_parameters():
                    p.copy_(tensors[f"{prefix}.{name}"])
            opt.load_state_dict({
                "step": header["adam_steps"][prefix],
                "m": {name: tensors[f"adam.m.{prefix}.{name}"] for name, _ in module.named_parameters()},
                "v": {name: tensors[f"adam.v.{prefix}.{name}"] for name, _ in module.named_parameters()},
            })
        model.ordering_baseline.value = header["baselines"]["ordering"]
        model.utility_baselines = {k: RunningBaseline(value=v) for k, v in header["baselines"]["utility"].items()}
        model.utility_step = header["utility_step"]
        model.epoch = header["step"]
        model.rng.bit_generator.state = header["rng_state"]
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_document(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_document(json.load(fh))


# -- dataset ---------------------------------------------------------------


def build_diffusion_dataset(queries: Sequence[QueryContext], oracle: Oracle, families: Sequence[str] = FAMILIES,
                            sizes: Sequence[int] = (3, 4), role_pool: RoleVocabulary | None = None,
                            seed: int | None = 0, threshold: float = 1.0,
                            cost_fn: CostFn | None = None) -> list[DiffusionRecord]:
    """Instantiate every (query, family, size) baseline and label it with the oracle."""
    role_pool = role_pool or RoleVocabulary()
    rng = np.random.default_rng(seed)
    cost_fn = cost_fn or getattr(oracle, "cost", None) or (lambda g, q: 0.0)
    records = []
    for qi, q in enumerate(queries):
        for family in families:
            for n in sizes:
                g = baseline_topology(family, n, role_pool, rng)
                try:
                    u = float(oracle(g, q))
                    c = float(cost_fn(g, q))
                except Exception as exc:
                    raise TrainingError(
                        f"oracle failed on record (query={q.task_id or qi!r}, family={family}, n={n}): {exc}"
                    ) from exc
                records.append(DiffusionRecord(g, q, u >= threshold, c, u, family))
    return records


def dataset_to_document(records: Sequence[DiffusionRecord]) -> dict:
    queries = {}
    rows = []
    for r in records:
        key = r.query.task_id or r.query.text
        queries.setdefault(key, {"text": r.query.text, "task_id": r.query.task_id,
                                 "embedding": r.query.embedding.tolist()})
        rows.append({"graph": to_document(r.graph), "query": key, "correct": r.correct,
                     "cost": r.cost, "utility": r.utility, "family": r.family})
    return {"queries": queries, "records": rows}


def dataset_from_document(doc: dict) -> list[DiffusionRecord]:
    queries = {k: QueryContext(v["text"], np.asarray(v["embedding"]), v["task_id"]) for k, v in doc["queries"].items()}
    out = []
    for row in doc["records"]:
        g = from_document(row["graph"])
        if not is_acyclic(g):
            raise TrainingError("dataset graphs must be acyclic")
        out.append(DiffusionRecord(g, queries[row["query"]], bool(row["correct"]), float(row["cost"]),
                                   float(row["utility"]), row.get("family", "")))
    return out


# -- likelihood estimator ------------------------------------------------------


def sample_trajectories(model: DiffusionModel, g0: CommGraph, M: int, rng: np.random.Generator) -> list[ForwardTrajectory]:
    cfg = model.config
    return [sample_forward_trajectory(model.ordering, g0, cfg.beta, rng, cfg.use_es, cfg.phi_on_g0) for _ in range(M)]


def trajectory_step_logliks(model: DiffusionModel, g0: CommGraph, q: QueryContext | None,
                            trajectories: Sequence[ForwardTrajectory]) -> torch.Tensor:
    """Per-step log-likelihoods, shape (M, N); column t is the reveal of ordering[t]."""
    states = []
    for tr in trajectories:
        # reverse_states runs t = N..1; reorder so column t matches ordering[t]
        states.extend(reversed(reverse_states(g0, tr.ordering)))
    lp_role, lp_edges = step_log_likelihoods(model.denoiser, states, q, model.flags)
    return (lp_role + lp_edges).reshape(len(trajectories), g0.n)


def _weights(trajectories: Sequence[ForwardTrajectory]) -> torch.Tensor:
    return torch.as_tensor([tr.selection_probs for tr in trajectories], dtype=torch.float64)


def vlb_loss(model: DiffusionModel, g0: CommGraph, q: QueryContext | None,
             trajectories: Sequence[ForwardTrajectory]) -> tuple[torch.Tensor, torch.Tensor]:
    """(weighted NLL averaged over trajectories, per-step log-liks)."""
    lp = trajectory_step_logliks(model, g0, q, trajectories)
    return -(_weights(trajectories) * lp).sum(dim=1).mean(), lp


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(value).all()):
        raise TrainingError(f"non-finite {what}; update skipped")


def denoiser_vlb_update(model: DiffusionModel, g0: CommGraph, q: QueryContext | None, M: int,
                        rng: np.random.Generator, trajectories: Sequence[ForwardTrajectory] | None = None) -> float:
    """One Adam step on the denoiser (plus the node-count head); returns the weighted NLL."""
    if g0.n == 0 or not is_acyclic(g0):
        raise ValueError("training graphs must be nonempty and acyclic")
    trajectories = trajectories or sample_trajectories(model, g0, M, rng)
    params = list(model.denoiser.parameters())
    with Tape(params) as tape:
        loss, _ = vlb_loss(model, g0, q, trajectories)
        _check_finite(loss, "reconstruction loss")
        size_nll = -size_log_prob(model.denoiser, g0.n, q, model.flags) if g0.n <= model.config.max_nodes else 0.0
        tape.backward(loss + size_nll)
    model.opt_denoiser.step()
    return float(loss.item())


def ordering_reward(weights: Sequence[float], step_logliks: Sequence[float], reward_sign: str = "neg") -> float:
    """Weighted reconstruction score of one trajectory.

    ``"neg"`` returns -sum_t w_t log p_t (higher for orderings that are
    hard to reconstruct); ``"pos"`` flips the sign so that easy-to-
    reconstruct orderings score higher.
    """
    if len(weights) != len(step_logliks):
        raise ValueError(f"{len(weights)} weights for {len(step_logliks)} step log-likelihoods")
    total = float(sum(w * lp for w, lp in zip(weights, step_logliks)))
    if reward_sign == "neg":
        return -total
    if reward_sign == "pos":
        return total
    raise ValueError(f"reward_sign must be 'pos' or 'neg', got {reward_sign!r}")


def ordering_reinforce_update(model: DiffusionModel, g0: CommGraph, q: QueryContext | None, M: int,
                              baseline: RunningBaseline, rng: np.random.Generator,
                              trajectories: Sequence[ForwardTrajectory] | None = None,
                              step_logliks: np.ndarray | None = None) -> float:
    """REINFORCE step on the ordering network, centred on the batch mean reward."""
    if M < 2 and trajectories is None:
        raise ValueError("ordering REINFORCE needs M >= 2 trajectories for baseline subtraction")
    trajectories = trajectories or sample_trajectories(model, g0, M, rng)
    if step_logliks is None:
        with torch.no_grad():
            step_logliks = trajectory_step_logliks(model, g0, q, trajectories).numpy()
    rewards = np.array([ordering_reward(tr.selection_probs, lp, model.config.reward_sign)
                        for tr, lp in zip(trajectories, step_logliks)])
    if not np.all(np.isfinite(rewards)):
        raise TrainingError("non-finite ordering reward")
    b = float(rewards.mean())
    cfg = model.config
    params = list(model.ordering.parameters())
    with Tape(params) as tape:
        loss = sum(-(r - b) * trajectory_log_prob(model.ordering, g0, tr.ordering, cfg.beta, cfg.use_es, cfg.phi_on_g0)
                   for r, tr in zip(rewards, trajectories))
        tape.backward(loss)
    model.opt_ordering.step()
    baseline.update(rewards)
    return float(rewards.mean())


# -- utility estimator ----------------------------------------------------------


def utility_policy_update(model: DiffusionModel, q: QueryContext, B: int, oracle: Oracle, alpha: float,
                          rng: np.random.Generator, step: int = 0, period: int = 1, fraction: float = 1.0,
                          cost_fn: CostFn | None = None, baseline: RunningBaseline | None = None) -> dict | None:
    """Score-function step on the denoiser toward high ``u - alpha * c``.

    Returns None without touching anything when ``step`` is off-period.
    Only ``ceil(fraction * B)`` of the B sampled graphs are scored and
    contribute to the gradient.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if step % period:
        return None
    if baseline is None:
        baseline = model.utility_baseline(q)
    cost_fn = cost_fn or getattr(oracle, "cost", None) or (lambda g, qq: 0.0)
    gens = [model.generate(q, rng) for _ in range(B)]
    k = max(1, math.ceil(fraction * B))
    chosen = sorted(rng.choice(B, size=k, replace=False).tolist()) if k < B else list(range(B))
    utilities, returns = [], []
    for i in chosen:
        try:
            u = float(oracle(gens[i].graph, q))
            c = float(cost_fn(gens[i].graph, q))
        except Exception as exc:
            raise TrainingError(f"oracle failed on generated sample {i}; batch update aborted: {exc}") from exc
        utilities.append(u)
        returns.append(u - alpha * c)
    returns_arr = np.array(returns)
    b = baseline.value if baseline.value is not None else float(returns_arr.mean())
    adv = returns_arr - b
    params = list(model.denoiser.parameters())
    with Tape(params) as tape:
        loss = sum(-float(a) * graph_log_prob(model.denoiser, gens[i].raw, gens[i].ordering, q, model.flags)
                   for a, i in zip(adv, chosen)) / len(chosen)
        tape.backward(loss)
    model.opt_denoiser.step()
    baseline.update(returns)
    return {
        "mean_utility": float(np.mean(utilities)),
        "mean_return": float(returns_arr.mean()),
        "graphs": [gens[i].graph for i in chosen],
    }


# -- loop ----------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def metrics_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [_fmt(r[c]) for c in METRIC_COLUMNS[1:-1]] + [int(r["wall_ms"])])
    return buf.getvalue()


def _mean(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else float("nan")


def train(dataset: Sequence[DiffusionRecord], config: TrainConfig, oracle: Oracle | None = None,
          model: DiffusionModel | None = None, cost_fn: CostFn | None = None,
          on_epoch: Callable[[DiffusionModel, dict], None] | None = None) -> tuple[DiffusionModel, list[dict]]:
    """Epoch loop over correct-labelled records; resumes from ``model.epoch`` when a model is passed."""
    if not dataset:
        raise ValueError("dataset is empty")
    vocab = dataset[0].graph.vocabulary
    model = model or DiffusionModel(config, vocab)
    cfg = model.config
    records = [r for r in dataset if r.correct]
    if not records:
        raise ValueError("dataset has no correct-labelled records to learn from")
    queries = list({(r.query.task_id or r.query.text): r.query for r in dataset}.values())
    metrics = []
    rng = model.rng
    while model.epoch < cfg.epochs:
        epoch = model.epoch
        t0 = time.perf_counter()
        losses, rewards, utilities = [], [], []
        order = rng.permutation(len(records))
        for start in range(0, len(order), cfg.batch_size):
            batch = [records[i] for i in order[start:start + cfg.batch_size]]
            d_params = list(model.denoiser.parameters())
            o_params = list(model.ordering.parameters())
            with Tape(d_params + o_params) as tape:
                d_loss = 0.0
                o_loss = 0.0
                for rec in batch:
                    trajs = sample_trajectories(model, rec.graph, cfg.M, rng)
                    loss, lp = vlb_loss(model, rec.graph, rec.query, trajs)
                    _check_finite(loss, f"reconstruction loss at epoch {epoch}")
                    size_nll = -size_log_prob(model.denoiser, rec.graph.n, rec.query, model.flags)
                    d_loss = d_loss + loss + size_nll
                    losses.append(loss.item())
                    lp_np = lp.detach().numpy()
                    r = np.array([ordering_reward(tr.selection_probs, row, cfg.reward_sign)
                                  for tr, row in zip(trajs, lp_np)])
                    rewards.extend(r.tolist())
                    if cfg.M >= 2:
                        b = r.mean()
                        for ri, tr in zip(r, trajs):
                            o_loss = o_loss - (ri - b) * trajectory_log_prob(
                                model.ordering, rec.graph, tr.ordering, cfg.beta, cfg.use_es, cfg.phi_on_g0)
                        model.ordering_baseline.update(r)
                total = d_loss / len(batch) + (o_loss / len(batch) if torch.is_tensor(o_loss) else 0.0)
                tape.backward(total)
            model.opt_denoiser.step()
            if cfg.M >= 2:
                model.opt_ordering.step()
        ran_utility = False
        if cfg.use_utility and oracle is not None:
            n_pick = max(1, math.ceil(cfg.utility_fraction * len(queries)))
            if model.utility_step % cfg.utility_period == 0:
                picks = sorted(rng.choice(len(queries), size=n_pick, replace=False).tolist())
                for i in picks:
                    out = utility_policy_update(model, queries[i], cfg.utility_batch, oracle, cfg.alpha, rng,
                                                cost_fn=cost_fn)
                    utilities.append(out["mean_utility"])
                ran_utility = True
            model.utility_step += 1
        mrng = np.random.default_rng([cfg.seed, epoch, 7])
        es = []
        for i in range(cfg.metric_samples):
            g = model.generate(queries[i % len(queries)], mrng).graph
            es.append(graph_stats(g, cfg.beta).mean_effective_size)
        wall = (time.perf_counter() - t0) * 1000 if cfg.record_wall_time else 0
        row = {"epoch": epoch, "vlb_loss": _mean(losses), "mean_reward": _mean(rewards),
               "mean_utility": _mean(utilities) if ran_utility else float("nan"),
               "mean_effective_size": _mean(es), "wall_ms": wall}
        metrics.append(row)
        model.epoch += 1
        if on_epoch is not None:
            on_epoch(model, row)
    return model, metrics
