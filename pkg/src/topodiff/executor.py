"""Run a communication graph as a multi-agent pipeline.

Agents fire in topological order each round. An agent's user prompt is
the query followed by its in-neighbours' responses. After K rounds the
final-round responses are aggregated into one solution.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .denoiser import QueryContext
from .graph import AgentSpec, CommGraph, dag_project, topological_sort

log = logging.getLogger(__name__)

AGGREGATIONS = ("majority_vote", "consolidate", "last_agent")

ROLE_PROMPTS = {
    "Solver": "You are a Solver. Work the problem step by step and state a final answer.",
    "Critic": "You are a Critic. Check the reasoning you receive and point out mistakes before answering.",
    "Verifier": "You are a Verifier. Independently verify the candidate answers and report the correct one.",
    "Planner": "You are a Planner. Break the task into steps and outline how to reach the answer.",
    "Decider": "You are a Decider. Weigh every response you receive and commit to one final answer.",
}
ANSWER_FORMAT = "End your reply with a line of the form 'Answer: <answer>'."


class ExecutionError(RuntimeError):
    def __init__(self, message: str, trace: "ExecutionTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int


class AgentBackend(Protocol):
    identifier: str
    single_flight: bool

    def invoke(self, system_prompt: str, user_prompt: str) -> AgentResponse: ...


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def extract_answer(text: str) -> str:
    hits = re.findall(r"answer\s*:\s*(.+)", text, flags=re.IGNORECASE)
    return hits[-1] if hits else text


def normalize_answer(text: str) -> str:
    return extract_answer(text).strip().casefold().rstrip(".,;:!?").strip()


def liar_answer(truth: str) -> str:
    try:
        return str(int(truth) + 1)
    except ValueError:
        return f"not {truth}"


@dataclass
class MockBackend:
    """Deterministic stand-in for an LLM.

    ``echo`` returns the user prompt. ``role_scripted`` answers from
    ``script`` (``{"truth": ..., "answers": {role: answer}, "conform": bool}``);
    with ``conform`` it adopts any strict majority among the answers it
    reads in its prompt. ``liar`` always answers ``liar_answer(truth)``.
    """

    mode: str = "echo"
    role: str = "Solver"
    script: Mapping = field(default_factory=dict)
    seed: int = 0
    single_flight: bool = False

    def __post_init__(self):
        if self.mode not in ("echo", "role_scripted", "liar"):
            raise ValueError(f"unknown mock mode {self.mode!r}")

    @property
    def identifier(self) -> str:
        return f"mock:{self.mode}:{self.role}"

    def _answer(self, user_prompt: str) -> str:
        truth = str(self.script.get("truth", "42"))
        if self.mode == "liar":
            return liar_answer(truth)
        own = str(self.script.get("answers", {}).get(self.role, truth))
        if self.script.get("conform", False):
            heard = [normalize_answer(a) for a in re.findall(r"^Answer:\s*(.+)$", user_prompt, flags=re.M)]
            if heard:
                top, count = Counter(heard).most_common(1)[0]
                if count * 2 > len(heard):
                    return top
        return own

    def invoke(self, system_prompt: str, user_prompt: str) -> AgentResponse:
        if not user_prompt:
            raise ValueError("empty prompt")
        if self.mode == "echo":
            text = user_prompt
        else:
            text = f"{self.role} considered the task.\nAnswer: {self._answer(user_prompt)}"
        return AgentResponse(text, whitespace_tokens(system_prompt) + whitespace_tokens(user_prompt),
                             whitespace_tokens(text))


@dataclass
class HttpBackend:
    """OpenAI-compatible chat-completions client with retry and exponential backoff."""

    base_url: str
    model: str = "gpt-4o-mini"
    temperature: float = 0.2
    max_tokens: int = 1000
    max_retries: int = 3
    backoff: float = 0.5
    timeout: float = 60.0
    api_key: str | None = None
    transport: httpx.BaseTransport | None = None
    single_flight: bool = False

    @property
    def identifier(self) -> str:
        return f"http:{self.model}"

    def _client(self) -> httpx.Client:
        key = self.api_key if self.api_key is not None else os.environ.get("RADAR_API_KEY", "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        return httpx.Client(base_url=self.base_url.rstrip("/"), headers=headers, timeout=self.timeout,
                            transport=self.transport)

    def request_body(self, system_prompt: str, user_prompt: str) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "system", "content": system_prompt}, {"role": "user", "content": user_prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def invoke(self, system_prompt: str, user_prompt: str) -> AgentResponse:
        body = self.request_body(system_prompt, user_prompt)
        delay = self.backoff
        last: Exception | None = None
        with self._client() as client:
            for attempt in range(self.max_retries + 1):
                try:
                    resp = client.post("/v1/chat/completions", json=body)
                    if resp.status_code == 429 or resp.status_code >= 500:
                        raise httpx.HTTPStatusError(f"HTTP {resp.status_code}", request=resp.request, response=resp)
                    resp.raise_for_status()
                    return self._parse(resp.json())
                except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                    retriable = isinstance(exc, httpx.TransportError) or exc.response.status_code == 429 \
                        or exc.response.status_code >= 500
                    if not retriable or attempt == self.max_retries:
                        last = exc
                        break
                    log.warning("chat completion failed (%s); retrying in %.2fs", exc, delay)
                    time.sleep(delay)
                    delay *= 2
                except ValueError as exc:
                    raise ProviderError(f"provider returned invalid JSON: {exc}") from exc
        raise ProviderError(f"chat completion failed after {self.max_retries + 1} attempts: {last}") from last

    @staticmethod
    def _parse(payload) -> AgentResponse:
        try:
            text = payload["choices"][0]["message"]["content"]
            usage = payload["usage"]
            pt, ct = int(usage["prompt_tokens"]), int(usage["completion_tokens"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed chat completion payload: {exc!r}") from None
        if not isinstance(text, str) or pt < 0 or ct < 0:
            raise ProviderError("malformed chat completion payload")
        return AgentResponse(text, pt, ct)


@dataclass
class Schedule:
    order: list[int]
    depth: dict[int, int]

    @property
    def levels(self) -> list[list[int]]:
        """Nodes grouped by depth; nodes in one level may run in parallel."""
        out: dict[int, list[int]] = {}
        for v in self.order:
            out.setdefault(self.depth[v], []).append(v)
        return [out[d] for d in sorted(out)]


def executing_nodes(g: CommGraph) -> list[int]:
    """Isolated agents sit out unless the graph has no edges at all."""
    if g.num_edges == 0:
        return list(range(g.n))
    return [int(i) for i in np.flatnonzero(g.active_mask())]


def plan_schedule(g: CommGraph) -> Schedule:
    order = topological_sort(g)
    depth: dict[int, int] = {}
    for v in order:
        preds = g.in_neighbors(v)
        depth[v] = 1 + max(depth[p] for p in preds) if preds else 0
    return Schedule(order, depth)


def system_prompt(agent: AgentSpec) -> str:
    base = ROLE_PROMPTS.get(agent.role.label, f"You are a {agent.role.label}.")
    parts = [base, ANSWER_FORMAT]
    if agent.state:
        parts.append(f"Your notes so far:\n{agent.state}")
    return "\n".join(parts)


def assemble_prompt(agent: AgentSpec, q: QueryContext, neighbor_responses: Sequence[tuple[int, str, str]],
                    round: int = 1) -> tuple[str, str]:
    """(system prompt, user prompt).

    ``neighbor_responses`` holds ``(agent_id, role_label, text)`` in
    schedule order; with none the user prompt is exactly the query.
    """
    if round < 1:
        raise ValueError("rounds are numbered from 1")
    user = q.text
    if neighbor_responses:
        blocks = [f"[Message from agent {j} ({role})]\n{text}" for j, role, text in neighbor_responses]
        user = user + "\n\n" + "\n\n".join(blocks)
    return system_prompt(agent), user


@dataclass
class Invocation:
    index: int
    round: int
    agent: int
    role: str
    backend: str
    system_prompt: str
    user_prompt: str
    response: str = ""
    prompt_tokens: int = 0
    completion_tokens: int = 0
    error: str | None = None


@dataclass
class ExecutionTrace:
    schedule: list[list[int]] = field(default_factory=list)
    invocations: list[Invocation] = field(default_factory=list)
    solution: str | None = None
    aggregation: str = ""
    errors: list[str] = field(default_factory=list)

    def final_responses(self) -> list[tuple[int, str]]:
        if not self.invocations:
            return []
        last = max(inv.round for inv in self.invocations)
        return [(inv.agent, inv.response) for inv in self.invocations if inv.round == last and inv.error is None]

    def to_document(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=1, sort_keys=True)


@dataclass(frozen=True)
class TokenTotals:
    prompt: int
    completion: int
    per_agent: dict

    @property
    def total(self) -> int:
        return self.prompt + self.completion


def account_tokens(trace: ExecutionTrace) -> TokenTotals:
    per_agent: dict[int, list[int]] = {}
    for inv in trace.invocations:
        acc = per_agent.setdefault(inv.agent, [0, 0])
        acc[0] += inv.prompt_tokens
        acc[1] += inv.completion_tokens
    prompt = sum(v[0] for v in per_agent.values())
    completion = sum(v[1] for v in per_agent.values())
    return TokenTotals(prompt, completion, {k: tuple(v) for k, v in sorted(per_agent.items())})


def invoke_agent(backend: AgentBackend, prompts: tuple[str, str]) -> AgentResponse:
    system, user = prompts
    if not system and not user:
        raise ValueError("prompts must not be empty")
    return backend.invoke(system, user)


def aggregate(responses: Sequence[tuple[int, str]] | Sequence[str], strategy: str = "majority_vote",
              decider: AgentBackend | None = None, q: QueryContext | None = None) -> str:
    """Final solution from final-round responses given in schedule order."""
    items = [r if isinstance(r, tuple) else (i, r) for i, r in enumerate(responses)]
    if not items:
        raise ValueError("no responses to aggregate")
    if strategy == "majority_vote":
        answers = [normalize_answer(text) for _, text in items]
        counts = Counter(answers)
        best = max(counts.values())
        return next(a for a in answers if counts[a] == best)
    if strategy == "last_agent":
        return items[-1][1]
    if strategy == "consolidate":
        if decider is None:
            raise ValueError("consolidate aggregation needs a decider backend")
        body = "\n\n".join(f"[Response from agent {j}]\n{text}" for j, text in items)
        user = (q.text + "\n\n" if q is not None else "") + body
        return decider.invoke(ROLE_PROMPTS["Decider"] + "\n" + ANSWER_FORMAT, user).text
    raise ValueError(f"unknown aggregation {strategy!r}; expected one of {AGGREGATIONS}")


def execute(g: CommGraph, q: QueryContext, backends: Sequence[AgentBackend], rounds: int = 1,
            aggregation: str = "majority_vote", decider: AgentBackend | None = None,
            stale_neighbors: bool = False, max_workers: int = 1) -> ExecutionTrace:
    """Run ``rounds`` passes over the graph and aggregate the last one.

    In round k an agent reads its in-neighbours' round-k responses, or
    their round k-1 responses with ``stale_neighbors``. Each agent's
    state carries its own previous response into the next round.
    """
    if len(backends) != g.n:
        raise ValueError(f"need one backend per agent: {len(backends)} for {g.n}")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    sched = plan_schedule(g)
    running = set(executing_nodes(g))
    order = [v for v in sched.order if v in running]
    levels = [[v for v in lvl if v in running] for lvl in sched.levels]
    levels = [lvl for lvl in levels if lvl]
    trace = ExecutionTrace(aggregation=aggregation)
    states = {v: g.agents[v].state for v in order}
    prev: dict[int, str] = {}
    pos = {v: i for i, v in enumerate(order)}
    for k in range(1, rounds + 1):
        trace.schedule.append(list(order))
        current: dict[int, str] = {}
        base_index = len(trace.invocations)
        slots: dict[int, Invocation] = {}

        def run(v: int) -> Invocation:
            agent = g.agents[v]
            source = prev if stale_neighbors else current
            nbrs = sorted((p for p in g.in_neighbors(v) if p in running and p in source), key=pos.get)
            spec = AgentSpec(agent.id, agent.role, agent.base, states[v], agent.plugins)
            sys_p, user_p = assemble_prompt(spec, q, [(p, g.agents[p].role.label, source[p]) for p in nbrs], k)
            inv = Invocation(base_index + pos[v], k, v, agent.role.label, backends[v].identifier, sys_p, user_p)
            try:
                resp = invoke_agent(backends[v], (sys_p, user_p))
                inv.response, inv.prompt_tokens, inv.completion_tokens = resp.text, resp.prompt_tokens, resp.completion_tokens
            except Exception as exc:  # recorded, then surfaced below
                inv.error = f"{type(exc).__name__}: {exc}"
            return inv

        for lvl in levels:
            parallel = [v for v in lvl if not backends[v].single_flight]
            serial = [v for v in lvl if backends[v].single_flight]
            if max_workers > 1 and len(parallel) > 1:
                with ThreadPoolExecutor(max_workers=max_workers) as pool:
                    done = list(pool.map(run, parallel))
            else:
                done = [run(v) for v in parallel]
            done += [run(v) for v in serial]
            for inv in done:
                slots[inv.agent] = inv
                if inv.error is None:
                    current[inv.agent] = inv.response
        for v in order:
            trace.invocations.append(slots[v])
        failed = [inv for v, inv in slots.items() if inv.error]
        if failed:
            trace.errors.extend(f"round {k}, agent {inv.agent}: {inv.error}" for inv in failed)
            raise ExecutionError(f"{len(failed)} agent invocation(s) failed in round {k}", trace)
        for v in order:
            states[v] = f"Round {k} response:\n{current[v]}"
        prev = current
    finals = trace.final_responses()
    if finals:
        trace.solution = aggregate(finals, aggregation, decider, q)
    return trace


def select_liars(g: CommGraph, k: int = 2, protected_role: str = "Decider") -> list[int]:
    """Lowest-index agents whose role is not ``protected_role``."""
    return [a.id for a in g.agents if a.role.label != protected_role][:k]


def mock_backends(g: CommGraph, mode: str = "role_scripted", script: Mapping | None = None,
                  liars: Sequence[int] = (), seed: int = 0) -> list[MockBackend]:
    script = dict(script or {})
    return [MockBackend("liar" if a.id in liars else mode, a.role.label, script, seed) for a in g.agents]


def execution_cost(g: CommGraph, q: QueryContext, budget: float = 1000.0, rounds: int = 1) -> float:
    """Mock-run token count divided by ``budget``."""
    trace = execute(g, q, mock_backends(g, script={"truth": "0"}), rounds=rounds, aggregation="last_agent")
    return account_tokens(trace).total / budget


# -- adversarial scenarios ----------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """A mock task: query text plus the answer truthful agents give."""

    scenario_id: str
    query: str
    truth: str
    graph: CommGraph | None = None


def scenario_suite(n: int, seed: int | None = 0) -> list[Scenario]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        a, b = (int(x) for x in rng.integers(10, 99, size=2))
        out.append(Scenario(f"scenario-{i:03d}", f"What is {a} + {b}?", str(a + b)))
    return out


_ATTACK_ROLES = ["Solver", "Critic", "Verifier", "Planner", "Decider"]


def engineered_attack_suite(n: int, seed: int | None = 0) -> list[Scenario]:
    """Five-agent scenarios where agents 0 and 1 are the liar candidates.

    Even scenarios funnel both candidates into the two truthful middle
    agents, which then feed the Decider. Odd scenarios keep the liars on
    a side chain so the last scheduled agent only hears truthful agents.
    """
    funnel = [(0, 2), (1, 2), (0, 3), (1, 3), (2, 4), (3, 4)]
    split = [(0, 1), (2, 3), (3, 4)]
    out = []
    for i, sc in enumerate(scenario_suite(n, seed)):
        g = CommGraph.from_edges(5, funnel if i % 2 == 0 else split, _ATTACK_ROLES)
        out.append(Scenario(sc.scenario_id, sc.query, sc.truth, g))
    return out


def liar_ancestors(g: CommGraph, node: int, liars: Sequence[int]) -> bool:
    """True when some liar can reach ``node`` along edges (or is ``node``)."""
    seen, stack = {node}, [node]
    while stack:
        for p in g.in_neighbors(stack.pop()):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return bool(seen & set(liars))


def scenario_utility(g: CommGraph, sc: Scenario, liars: Sequence[int] = (), aggregation: str = "majority_vote",
                     rounds: int = 1) -> float:
    """1.0 when the aggregated answer equals the scenario truth, else 0.0."""
    q = QueryContext(sc.query, np.zeros(1), sc.scenario_id)
    script = {"truth": sc.truth, "conform": True}
    trace = execute(g, q, mock_backends(g, "role_scripted", script, liars), rounds=rounds, aggregation=aggregation)
    return float(normalize_answer(trace.solution or "") == normalize_answer(sc.truth))


def structure_noise(g: CommGraph, rng: np.random.Generator, fraction: float = 0.5) -> tuple[CommGraph, CommGraph]:
    """Add ``ceil(fraction * |E|)`` random new edges; returns (noisy graph, acyclic projection).

    Original edges outrank injected ones during cycle breaking.
    """
    n = g.n
    candidates = [(i, j) for i in range(n) for j in range(n) if i != j and not g.adjacency[i, j]]
    k = min(len(candidates), int(np.ceil(fraction * g.num_edges)))
    picks = rng.choice(len(candidates), size=k, replace=False) if k else []
    added = [candidates[int(i)] for i in picks]
    adj = g.adjacency.copy()
    for i, j in added:
        adj[i, j] = True
    noisy = g.with_adjacency(adj)
    scores = g.adjacency.astype(float) + 0.5 * (adj & ~g.adjacency)
    projected, _ = dag_project(noisy, scores)
    return noisy, projected
