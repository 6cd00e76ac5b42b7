"""
Synthetic multi-turn workloads and trace files.

A workload is a list of sessions, each a list of turns. The prompt of turn k
repeats the whole conversation so far (earlier prompts and answers) followed by a
new question, so consecutive turns share prefixes. Only the first turn of every
session gets an arrival time here; later turns arrive after the previous response,
which the simulator decides.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from kvpool.core.exceptions import ConfigError
from kvpool.core.types import ModelConfig, Request, as_number
from kvpool.core.utils.logging_utils import logger

WORKLOAD_KINDS = ("chat", "docqa", "agent", "fixed")

# Approximate shapes of the public chat, long-document QA and tool-agent workloads.
KIND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "chat": {
        "min_turns": 1,
        "max_turns": 5,
        "min_input": 32,
        "max_input": 512,
        "min_output": 32,
        "max_output": 256,
    },
    "docqa": {
        "doc_len": 1024,
        "num_questions": 5,
        "min_input": 16,
        "max_input": 64,
        "min_output": 16,
        "max_output": 64,
    },
    "agent": {
        "prefix_len": 1500,
        "min_turns": 1,
        "max_turns": 3,
        "min_input": 32,
        "max_input": 128,
        "min_output": 128,
        "max_output": 512,
    },
    "fixed": {"prompt_len": 1024, "gen_len": 32},
}

TRACE_COLUMNS = ["session_id", "turn", "prompt_tokens", "gen_len"]


@dataclass(frozen=True)
class WorkloadSpec:
    """
    Parameters
    ----------
    kind: str
        One of chat, docqa, agent, fixed; ignored when trace_file is set.
    trace_file: str, optional
    num_sessions: int
    request_rate: float
        New sessions per simulated second and per instance.
    share_ratio: int
        Every session is present share_ratio times, with fresh session ids and
        identical tokens.
    think_time_mean: float
        Mean of the exponential pause between a response and the next turn.
    vocab_size: int
    params: dict
        Length parameters of the synthetic kind, see KIND_DEFAULTS.
    """

    kind: str = "chat"
    trace_file: Optional[str] = None
    num_sessions: int = 16
    request_rate: float = 1.0
    share_ratio: int = 1
    think_time_mean: float = 0.0
    vocab_size: int = 32000
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.trace_file is None and self.kind not in WORKLOAD_KINDS:
            raise ConfigError(
                f"{self.kind!r} is not a workload kind (expected one of {', '.join(WORKLOAD_KINDS)})",
                path="workload.kind",
            )
        if self.num_sessions < 1:
            raise ConfigError(f"must be positive, got {self.num_sessions}", path="workload.num_sessions")
        if self.request_rate <= 0:
            raise ConfigError(f"must be positive, got {self.request_rate}", path="workload.request_rate")
        if self.share_ratio < 1:
            raise ConfigError(f"must be a positive integer, got {self.share_ratio}", path="workload.share_ratio")
        if self.think_time_mean < 0:
            raise ConfigError(
                f"must be non-negative, got {self.think_time_mean}", path="workload.think_time_mean"
            )
        if self.vocab_size < 2:
            raise ConfigError(f"must be at least 2, got {self.vocab_size}", path="workload.vocab_size")

    @property
    def kind_params(self) -> Dict[str, Any]:
        if self.trace_file is not None:
            return {}
        defaults = KIND_DEFAULTS[self.kind]
        unknown = sorted(set(self.params) - set(defaults))
        if unknown:
            raise ConfigError(
                f"unknown parameter(s) {', '.join(unknown)} for kind {self.kind}",
                path="workload.params",
            )
        return {**defaults, **self.params}


def build_workload_spec(settings: dict) -> WorkloadSpec:
    section = settings["workload"]
    unknown = sorted(set(section) - set(WorkloadSpec.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(unknown)}", path="workload")
    spec = WorkloadSpec(
        kind=section["kind"],
        trace_file=section.get("trace_file"),
        num_sessions=as_number(section["num_sessions"], "workload.num_sessions", integer=True),
        request_rate=as_number(section["request_rate"], "workload.request_rate"),
        share_ratio=as_number(section["share_ratio"], "workload.share_ratio", integer=True),
        think_time_mean=as_number(section["think_time_mean"], "workload.think_time_mean"),
        vocab_size=as_number(section["vocab_size"], "workload.vocab_size", integer=True),
        params=dict(section.get("params") or {}),
    )
    spec.kind_params
    return spec


@dataclass
class Session:
    session_id: str
    turns: List[Request]


@dataclass
class Workload:
    sessions: List[Session]
    think_time_mean: float = 0.0

    @property
    def num_requests(self) -> int:
        return sum(len(s.turns) for s in self.sessions)

    def requests(self) -> List[Request]:
        return [r for s in self.sessions for r in s.turns]


def _uniform(rng, lo, hi) -> int:
    return int(rng.integers(lo, hi + 1))


def _conversation(rng, vocab, prefix, n_turns, p) -> List[tuple]:
    """(prompt, answer) token arrays of one conversation."""
    history = np.asarray(prefix, dtype=np.int64)
    turns = []
    for _ in range(n_turns):
        question = rng.integers(1, vocab, size=_uniform(rng, p["min_input"], p["max_input"]))
        answer = rng.integers(1, vocab, size=_uniform(rng, p["min_output"], p["max_output"]))
        prompt = np.concatenate([history, question])
        turns.append((prompt, answer))
        history = np.concatenate([prompt, answer])
    return turns


def _synthetic_sessions(spec: WorkloadSpec, rng) -> List[List[tuple]]:
    p = spec.kind_params
    vocab = spec.vocab_size
    sessions = []
    if spec.kind == "agent":
        shared = rng.integers(1, vocab, size=p["prefix_len"])
    for _ in range(spec.num_sessions):
        if spec.kind == "chat":
            n = _uniform(rng, p["min_turns"], p["max_turns"])
            sessions.append(_conversation(rng, vocab, [], n, p))
        elif spec.kind == "docqa":
            doc = rng.integers(1, vocab, size=p["doc_len"])
            sessions.append(_conversation(rng, vocab, doc, p["num_questions"], p))
        elif spec.kind == "agent":
            n = _uniform(rng, p["min_turns"], p["max_turns"])
            sessions.append(_conversation(rng, vocab, shared, n, p))
        else:
            prompt = rng.integers(1, vocab, size=p["prompt_len"])
            answer = rng.integers(1, vocab, size=p["gen_len"])
            sessions.append([(prompt, answer)])
    return sessions


def _fit_context(session_id, turns, model_cfg):
    """Drop the turns that no longer fit into the context window."""
    kept = []
    for prompt, answer in turns:
        if len(prompt) + len(answer) > model_cfg.context_window:
            logger.warning(
                f"session {session_id}: dropping turns from {len(kept)} on, "
                f"they exceed the context window of {model_cfg.context_window}"
            )
            break
        kept.append((prompt, answer))
    return kept


def generate_workload(
    spec: WorkloadSpec, model_cfg: ModelConfig, n_instances: int = 1, seed: int = 0
) -> Workload:
    """
    Build the request stream.

    Sessions are duplicated share_ratio times and shuffled; first turns arrive as a
    Poisson process of rate request_rate * n_instances starting at t = 0.

    Returns
    -------
    Workload
    """
    rng = np.random.default_rng(seed)
    if spec.trace_file is not None:
        base = load_trace(spec.trace_file)
    else:
        base = [(f"s{i}", turns) for i, turns in enumerate(_synthetic_sessions(spec, rng))]

    entries = []
    for session_id, turns in base:
        turns = _fit_context(session_id, turns, model_cfg)
        if not turns:
            continue
        for r in range(spec.share_ratio):
            entries.append((session_id if r == 0 else f"{session_id}-r{r}", turns))
    order = rng.permutation(len(entries))

    rate = spec.request_rate * n_instances
    gaps = rng.exponential(1.0 / rate, size=len(entries))
    arrivals = np.concatenate([[0.0], np.cumsum(gaps[1:])]) if len(entries) else []

    sessions = []
    request_id = 0
    for position, index in enumerate(order):
        session_id, turns = entries[index]
        requests = []
        for k, (prompt, answer) in enumerate(turns):
            requests.append(
                Request(
                    request_id=request_id,
                    session_id=session_id,
                    turn_index=k,
                    prompt=tuple(int(t) for t in prompt),
                    gen_len=len(answer),
                    arrival_time=float(arrivals[position]) if k == 0 else 0.0,
                    response_tokens=tuple(int(t) for t in answer),
                )
            )
            request_id += 1
        sessions.append(Session(session_id, requests))
    return Workload(sessions, spec.think_time_mean)


def load_trace(file_name: str) -> List[tuple]:
    """
    Read a trace of one JSON record per line with fields session_id, turn,
    prompt_tokens and gen_len.

    Returns
    -------
    list of (session_id, [(prompt, answer), ...]) in order of first appearance. An
    answer is taken from the next turn's prompt where that prompt continues the
    current one, else it is a run of zeros.
    """
    try:
        df = pd.read_json(file_name, lines=True)
    except ValueError as e:
        raise ConfigError(f"can not read trace: {e}", file_name=file_name)
    missing = [c for c in TRACE_COLUMNS if c not in df.columns]
    if missing:
        raise ConfigError(f"trace lacks column(s) {', '.join(missing)}", file_name=file_name)
    df["session_id"] = df["session_id"].astype(str)
    sessions = []
    for session_id, group in df.groupby("session_id", sort=False):
        group = group.sort_values("turn", kind="stable")
        prompts = [tuple(int(t) for t in p) for p in group["prompt_tokens"]]
        gen_lens = [int(g) for g in group["gen_len"]]
        turns = []
        for k, (prompt, gen_len) in enumerate(zip(prompts, gen_lens)):
            answer = (0,) * gen_len
            if k + 1 < len(prompts):
                following = prompts[k + 1]
                if following[: len(prompt)] == prompt:
                    tail = following[len(prompt) : len(prompt) + gen_len]
                    answer = tuple(tail) + (0,) * (gen_len - len(tail))
            turns.append((np.asarray(prompt, dtype=np.int64), np.asarray(answer, dtype=np.int64)))
        sessions.append((session_id, turns))
    return sessions


def write_trace(workload: Workload, file_name: str):
    """Write the turns of workload in the trace format read by load_trace."""
    records = [
        {
            "session_id": r.session_id,
            "turn": r.turn_index,
            "prompt_tokens": list(r.prompt),
            "gen_len": r.gen_len,
        }
        for r in workload.requests()
    ]
    pd.DataFrame(records, columns=TRACE_COLUMNS).to_json(file_name, orient="records", lines=True)
