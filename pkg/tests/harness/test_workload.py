import numpy as np
import pytest

from kvpool.core.exceptions import ConfigError
from kvpool.core.settings import resolve_settings
from kvpool.core.types import ModelConfig
from kvpool.harness import WorkloadSpec, build_workload_spec, generate_workload, write_trace


@pytest.fixture
def model_cfg():
    return ModelConfig(context_window=4096)


def test_docqa_sessions_share_the_document(model_cfg):
    spec = WorkloadSpec(kind="docqa", num_sessions=1)
    workload = generate_workload(spec, model_cfg, seed=0)
    requests = workload.requests()
    assert len(requests) == 5
    doc = requests[0].prompt[:1024]
    assert all(r.prompt[:1024] == doc for r in requests)
    assert [r.turn_index for r in requests] == [0, 1, 2, 3, 4]


def test_turns_repeat_the_conversation(model_cfg):
    workload = generate_workload(WorkloadSpec(kind="chat", num_sessions=8), model_cfg, seed=3)
    for session in workload.sessions:
        for earlier, later in zip(session.turns, session.turns[1:]):
            history = earlier.prompt + earlier.response_tokens
            assert later.prompt[: len(history)] == history
            assert len(later.prompt) > len(history)
            assert len(earlier.response_tokens) == earlier.gen_len


def test_share_ratio_duplicates_sessions(model_cfg):
    single = generate_workload(WorkloadSpec(kind="docqa", num_sessions=3), model_cfg, seed=1)
    shared = generate_workload(
        WorkloadSpec(kind="docqa", num_sessions=3, share_ratio=2), model_cfg, seed=1
    )
    assert shared.num_requests == 2 * single.num_requests
    by_id = {s.session_id: s for s in shared.sessions}
    for session_id, session in by_id.items():
        if session_id.endswith("-r1"):
            original = by_id[session_id[: -len("-r1")]]
            assert [r.prompt for r in session.turns] == [r.prompt for r in original.turns]


def test_arrivals_are_poisson_from_zero(model_cfg):
    spec = WorkloadSpec(kind="fixed", num_sessions=400, request_rate=2.0, params={"prompt_len": 64})
    workload = generate_workload(spec, model_cfg, n_instances=2, seed=5)
    arrivals = np.array([s.turns[0].arrival_time for s in workload.sessions])
    assert arrivals[0] == 0.0
    assert np.all(np.diff(arrivals) >= 0)
    # two instances at 2 sessions per second each
    assert np.mean(np.diff(arrivals)) == pytest.approx(0.25, rel=0.2)
    ids = [r.request_id for r in workload.requests()]
    assert ids == list(range(len(ids)))


def test_same_seed_same_workload(model_cfg):
    spec = WorkloadSpec(kind="agent", num_sessions=6)
    a = generate_workload(spec, model_cfg, seed=11)
    b = generate_workload(spec, model_cfg, seed=11)
    assert [(r.session_id, r.prompt, r.arrival_time) for r in a.requests()] == [
        (r.session_id, r.prompt, r.arrival_time) for r in b.requests()
    ]


def test_agent_sessions_share_the_tool_prefix(model_cfg):
    workload = generate_workload(WorkloadSpec(kind="agent", num_sessions=4), model_cfg, seed=2)
    prefixes = {r.prompt[:1500] for r in workload.requests()}
    assert len(prefixes) == 1


def test_turns_beyond_the_context_window_are_dropped():
    spec = WorkloadSpec(kind="fixed", num_sessions=2, params={"prompt_len": 1000, "gen_len": 100})
    assert generate_workload(spec, ModelConfig(context_window=1024), seed=0).num_requests == 0
    assert generate_workload(spec, ModelConfig(context_window=2048), seed=0).num_requests == 2


def test_trace_file(tmp_path, model_cfg):
    workload = generate_workload(WorkloadSpec(kind="chat", num_sessions=4), model_cfg, seed=7)
    trace = str(tmp_path / "trace.jsonl")
    write_trace(workload, trace)

    spec = WorkloadSpec(trace_file=trace, num_sessions=1)
    replayed = generate_workload(spec, model_cfg, seed=7)
    n_turns = {s.session_id: len(s.turns) for s in workload.sessions}
    original = {(r.session_id, r.turn_index): r for r in workload.requests()}
    assert replayed.num_requests == workload.num_requests
    for r in replayed.requests():
        o = original[(r.session_id, r.turn_index)]
        assert r.prompt == o.prompt
        assert r.gen_len == o.gen_len
        if r.turn_index + 1 < n_turns[r.session_id]:
            assert r.response_tokens == o.response_tokens


def test_invalid_workloads():
    with pytest.raises(ConfigError, match="workload.kind"):
        WorkloadSpec(kind="poetry")
    with pytest.raises(ConfigError, match="share_ratio"):
        WorkloadSpec(share_ratio=0)
    settings = resolve_settings({"workload": {"kind": "docqa", "params": {"doc_length": 10}}})
    with pytest.raises(ConfigError, match="doc_length"):
        build_workload_spec(settings)
