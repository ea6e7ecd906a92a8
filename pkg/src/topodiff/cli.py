"""Command-line entry point: ``topodiff <command> [options]``.

Every command writes ``manifest.json`` into ``--out`` with the resolved
configuration, hashes of inputs and outputs, and an ``errors`` list; the
exit status is nonzero exactly when that list is non-empty.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .denoiser import make_query
from .executor import (AGGREGATIONS, HttpBackend, MockBackend, account_tokens, execute, mock_backends,
                       scenario_suite, scenario_utility, select_liars, structure_noise)
from .graph import from_document, graph_stats, serialize, to_dot
from .synthetic import SyntheticOracle, generate_task_suite, load_suite, save_suite, task_query
from .trainer import (ConfigError, DiffusionModel, TrainConfig, build_diffusion_dataset, dataset_from_document,
                      dataset_to_document, metrics_to_csv, train)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("topodiff")

RUN_DEFAULTS = {
    "n_tasks": 50,
    "hard_fraction": 0.5,
    "sizes": [3, 4],
    "threshold": 0.75,
    "samples_per_task": 10,
    "n_scenarios": 20,
    "token_budget": 1000.0,
    "rounds": 1,
}
EVAL_COLUMNS = ("task_id", "difficulty", "utility", "cost", "active_size", "density", "mean_effective_size", "tokens")


class CommandError(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping shared by all commands."""

    def __init__(self, command: str, out: Path, config: TrainConfig, run_params: dict):
        self.command = command
        self.out = out
        self.config = config
        self.params = run_params
        self.inputs: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}
        self.extra: dict = {}
        self.errors: list[dict] = []

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise CommandError(f"input file not found: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        self.artifacts[name] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return path

    def manifest(self) -> str:
        doc = {
            "command": self.command,
            "config": asdict(self.config),
            "run": self.params,
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": dict(sorted(self.artifacts.items())),
            "errors": self.errors,
        }
        doc.update(self.extra)
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# -- config resolution -------------------------------------------------------------


def load_config_file(path) -> tuple[dict, dict]:
    """(TrainConfig overrides, run parameters) from a TOML file.

    Top-level keys are TrainConfig fields; an optional ``[run]`` table
    holds command parameters.
    """
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    run = doc.pop("run", {})
    if not isinstance(run, dict):
        raise ConfigError("config field 'run' must be a table")
    for key, value in run.items():
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"unknown config field 'run.{key}'")
        default = RUN_DEFAULTS[key]
        if isinstance(default, list):
            ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, type(default)) and not isinstance(value, bool)
        if not ok:
            raise ConfigError(f"config field 'run.{key}' has wrong type: {value!r}")
    return doc, run


def resolve_config(args) -> tuple[TrainConfig, dict]:
    overrides, run = ({}, {})
    if args.config:
        overrides, run = load_config_file(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if args.no_es:
        overrides["use_es"] = False
    if args.no_utility:
        overrides["use_utility"] = False
    if args.no_query:
        overrides["use_query"] = False
    if args.phi_on_g0:
        overrides["phi_on_g0"] = True
    if args.stale_neighbors:
        overrides["stale_neighbors"] = True
    if args.beta is not None:
        overrides["beta"] = args.beta
    if args.reward_sign is not None:
        overrides["reward_sign"] = args.reward_sign
    cfg = TrainConfig.from_mapping(overrides)
    params = dict(RUN_DEFAULTS)
    params.update(run)
    for key in RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    return cfg, params


# -- commands -------------------------------------------------------------------------


def cmd_build_dataset(run: Run, args) -> None:
    p = run.params
    tasks = generate_task_suite(p["n_tasks"], p["hard_fraction"], seed=run.config.seed)
    buf = run.out / "suite.json"
    buf.parent.mkdir(parents=True, exist_ok=True)
    save_suite(tasks, buf)
    run.artifacts["suite.json"] = sha256_file(buf)
    oracle = SyntheticOracle(tasks, run.config.cost_normalizer)
    queries = [task_query(t, run.config.query_dim) for t in tasks]
    records = build_diffusion_dataset(queries, oracle, sizes=p["sizes"], seed=run.config.seed,
                                      threshold=p["threshold"])
    run.write("dataset.json", json.dumps(dataset_to_document(records), sort_keys=True) + "\n")
    run.extra["dataset"] = {"records": len(records), "correct": sum(r.correct for r in records)}


def _load_model(run: Run, path) -> DiffusionModel:
    return DiffusionModel.load(run.input(path))


def cmd_train(run: Run, args) -> None:
    dataset_path = run.input(args.dataset or run.out / "dataset.json")
    suite_path = run.input(args.suite or run.out / "suite.json")
    records = dataset_from_document(json.loads(dataset_path.read_text(encoding="utf-8")))
    oracle = SyntheticOracle(load_suite(suite_path), run.config.cost_normalizer)
    rows: list[dict] = []
    if args.resume:
        model = _load_model(run, args.resume)
        model.config = TrainConfig.from_mapping({**asdict(model.config), "epochs": run.config.epochs})
        old = run.out / "metrics.csv"
        if old.exists():
            with open(old, newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) < model.epoch]
            rows = [{k: (int(v) if k in ("epoch", "wall_ms") else float(v)) for k, v in r.items()} for r in rows]
    else:
        vocab = records[0].graph.vocabulary if records else None
        model = DiffusionModel(run.config, vocab)

    def on_epoch(m: DiffusionModel, row: dict) -> None:
        every = m.config.checkpoint_every
        if every and m.epoch % every == 0:
            run.write(f"checkpoint-{m.epoch:04d}.json", json.dumps(m.to_document(), sort_keys=True))

    try:
        model, metrics = train(records, model.config, oracle, model=model, on_epoch=on_epoch)
    except Exception as exc:
        raise CommandError(f"training failed at epoch {model.epoch}: {exc}") from exc
    run.write("model.json", json.dumps(model.to_document(), sort_keys=True))
    run.write("metrics.csv", metrics_to_csv(rows + metrics))


def _query_for(run: Run, args):
    if args.task_id:
        suite_path = run.input(args.suite or run.out / "suite.json")
        tasks = {t.task_id: t for t in load_suite(suite_path)}
        if args.task_id not in tasks:
            raise CommandError(f"task {args.task_id!r} not in suite")
        return task_query(tasks[args.task_id], run.config.query_dim)
    if args.query is None:
        raise CommandError("pass --query or --task-id")
    return make_query(args.query, "", run.config.query_dim)


def cmd_generate(run: Run, args) -> None:
    model = _load_model(run, args.checkpoint or run.out / "model.json")
    run.config = model.config
    q = _query_for(run, args)
    rng = np.random.default_rng(run.config.seed)
    for i in range(args.n_samples):
        gen = model.generate(q, rng, args.n_target)
        meta = {"query": q.text, "task_id": q.task_id, "removed_edges": [list(e) for e in gen.removed]}
        run.write(f"topology-{i:03d}.json", serialize(gen.graph, meta) + "\n")
        run.write(f"topology-{i:03d}.dot", to_dot(gen.graph, f"topology_{i:03d}"))


def _backends(args, g):
    if args.backend == "http":
        if not args.base_url:
            raise CommandError("--base-url is required for the http backend")
        return [HttpBackend(args.base_url, args.model) for _ in range(g.n)]
    if args.backend == "mock-echo":
        return [MockBackend("echo", a.role.label) for a in g.agents]
    script = {"truth": args.truth, "conform": True}
    return mock_backends(g, "role_scripted", script)


def cmd_execute(run: Run, args) -> None:
    path = run.input(args.topology)
    g = from_document(json.loads(path.read_text(encoding="utf-8")))
    q = _query_for(run, args)
    backends = _backends(args, g)
    trace = execute(g, q, backends, rounds=run.params["rounds"], aggregation=args.aggregation,
                    stale_neighbors=run.config.stale_neighbors)
    run.write("trace.json", trace.dumps() + "\n")
    tokens = account_tokens(trace)
    run.extra["execution"] = {"solution": trace.solution, "prompt_tokens": tokens.prompt,
                              "completion_tokens": tokens.completion,
                              "backends": [b.identifier for b in backends]}


def _fmt(x) -> str:
    return repr(float(x))


def evaluation_rows(model: DiffusionModel, tasks, samples: int, budget: float, seed: int) -> list[dict]:
    oracle = SyntheticOracle(tasks, model.config.cost_normalizer)
    rows = []
    for task in sorted(tasks, key=lambda t: t.task_id):
        q = task_query(task, model.config.query_dim)
        rng = np.random.default_rng([seed, int(hashlib.sha256(task.task_id.encode()).hexdigest()[:8], 16)])
        acc = {c: [] for c in EVAL_COLUMNS[2:]}
        for _ in range(samples):
            g = model.generate(q, rng).graph
            s = graph_stats(g, model.config.beta)
            trace = execute(g, q, mock_backends(g, "role_scripted", {"truth": "0"}), aggregation="last_agent")
            acc["utility"].append(oracle(g, q))
            acc["cost"].append(oracle.cost(g, q))
            acc["active_size"].append(s.active_size)
            acc["density"].append(s.density)
            acc["mean_effective_size"].append(s.mean_effective_size)
            acc["tokens"].append(account_tokens(trace).total / budget)
        row = {"task_id": task.task_id, "difficulty": task.difficulty}
        row.update({k: float(np.mean(v)) for k, v in acc.items()})
        rows.append(row)
    return rows


def evaluation_csv(rows: list[dict]) -> str:
    """Per-task rows, then ``mean`` and ``std`` aggregate rows (header only when empty)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in rows:
        w.writerow([r["task_id"], r["difficulty"]] + [_fmt(r[c]) for c in EVAL_COLUMNS[2:]])
    if rows:
        for name, fn in (("mean", np.mean), ("std", np.std)):
            w.writerow([name, "all"] + [_fmt(fn([r[c] for r in rows])) for c in EVAL_COLUMNS[2:]])
    return buf.getvalue()


def cmd_evaluate(run: Run, args) -> None:
    model = _load_model(run, args.checkpoint or run.out / "model.json")
    tasks = load_suite(run.input(args.suite or run.out / "suite.json"))
    rows = evaluation_rows(model, tasks, run.params["samples_per_task"], run.params["token_budget"],
                           run.config.seed)
    run.write("evaluation.csv", evaluation_csv(rows))


def cmd_attack(run: Run, args) -> None:
    model = _load_model(run, args.checkpoint or run.out / "model.json")
    scenarios = scenario_suite(run.params["n_scenarios"], run.config.seed)
    rng = np.random.default_rng(run.config.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("scenario_id", "mode", "edges_before", "edges_noisy", "edges_after", "utility_before",
                "utility_after"))
    changed = []
    for sc in scenarios:
        q = make_query(sc.query, sc.scenario_id, model.config.query_dim)
        g = model.generate(q, rng, n_target=5).graph
        before = scenario_utility(g, sc, rounds=run.params["rounds"])
        attacked, liars, noisy_edges = g, [], g.num_edges
        if args.mode in ("structure_noise", "both"):
            noisy, attacked = structure_noise(g, rng)
            noisy_edges = noisy.num_edges
        if args.mode in ("prompt_liar", "both"):
            liars = select_liars(attacked)
        after = scenario_utility(attacked, sc, liars, rounds=run.params["rounds"])
        changed.append({"scenario_id": sc.scenario_id, "liar_agents": liars})
        w.writerow((sc.scenario_id, args.mode, g.num_edges, noisy_edges, attacked.num_edges, _fmt(before),
                    _fmt(after)))
    run.write("attack.csv", buf.getvalue())
    run.extra["attack"] = {"mode": args.mode, "liar_backends": changed}


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "generate": cmd_generate,
    "execute": cmd_execute,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with TrainConfig fields and an optional [run] table")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--no-es", action="store_true", help="drop the effective-size bias")
    common.add_argument("--no-utility", action="store_true", help="skip utility-shaping updates")
    common.add_argument("--no-query", action="store_true", help="ignore the query embedding")
    common.add_argument("--beta", type=float)
    common.add_argument("--phi-on-g0", action="store_true", help="compute ordering bias on the clean graph")
    common.add_argument("--reward-sign", choices=("pos", "neg"))
    common.add_argument("--stale-neighbors", action="store_true", help="agents read last round's messages")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="topodiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", parents=[common], help="label baseline topologies on a task suite")
    p.add_argument("--n-tasks", dest="n_tasks", type=int)
    p.add_argument("--hard-fraction", dest="hard_fraction", type=float)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("train", parents=[common], help="fit the diffusion model")
    p.add_argument("--dataset")
    p.add_argument("--suite")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    for name, helptext in (("generate", "sample topologies"), ("execute", "run a topology with agents")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--query")
        p.add_argument("--task-id")
        p.add_argument("--suite")
        if name == "generate":
            p.add_argument("--checkpoint")
            p.add_argument("--n-samples", type=int, default=1)
            p.add_argument("--n-target", type=int)
        else:
            p.add_argument("--topology", required=True)
            p.add_argument("--backend", choices=("mock-echo", "mock-scripted", "http"), default="mock-scripted")
            p.add_argument("--base-url")
            p.add_argument("--model", default="gpt-4o-mini")
            p.add_argument("--truth", default="42", help="answer given by scripted mocks")
            p.add_argument("--aggregation", choices=AGGREGATIONS, default="majority_vote")
            p.add_argument("--rounds", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score generated topologies per task")
    p.add_argument("--checkpoint")
    p.add_argument("--suite")
    p.add_argument("--samples-per-task", dest="samples_per_task", type=int)

    p = sub.add_parser("attack", parents=[common], help="compare utility before and after an attack")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=("none", "prompt_liar", "structure_noise", "both"), default="prompt_liar")
    p.add_argument("--n-scenarios", dest="n_scenarios", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg, params = resolve_config(args)
    except ConfigError as exc:
        cfg, params = TrainConfig(), dict(RUN_DEFAULTS)
        run = Run(args.command, out, cfg, params)
        run.errors.append({"type": "ConfigError", "message": str(exc)})
    else:
        run = Run(args.command, out, cfg, params)
        try:
            COMMANDS[args.command](run, args)
        except Exception as exc:
            log.debug("command failed", exc_info=True)
            run.errors.append({"type": type(exc).__name__, "message": str(exc)})
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(run.manifest(), encoding="utf-8")
    except OSError as exc:
        run.errors.append({"type": type(exc).__name__, "message": str(exc)})
    for err in run.errors:
        print(f"error: {err['message']}", file=sys.stderr)
    return 1 if run.errors else 0


if __name__ == "__main__":
    sys.exit(main())
