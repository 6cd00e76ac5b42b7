from kvpool.core.types import Request
from kvpool.engine import RequestState, admit_batch


def queued(*prompt_lens):
    return [
        RequestState(Request(i, f"s{i}", 0, (1,) * n, 4), prefill_instance="i0")
        for i, n in enumerate(prompt_lens)
    ]


def test_empty_queue():
    assert admit_batch([], 250, 4) == []


def test_fills_up_to_token_budget():
    queue = queued(100, 100, 100)
    batch = admit_batch(queue, max_batch_tokens=250, max_batch_size=8)
    assert [s.request_id for s in batch] == [0, 1]
    assert len(queue) == 3


def test_oversized_head_is_admitted_alone():
    queue = queued(400, 10)
    assert [s.request_id for s in admit_batch(queue, 250, 8)] == [0]


def test_batch_size_limit():
    queue = queued(1, 1, 1, 1, 1)
    assert len(admit_batch(queue, 4096, 4)) == 4


def test_no_skipping_ahead():
    queue = queued(100, 200, 10)
    assert [s.request_id for s in admit_batch(queue, 250, 8)] == [0]
