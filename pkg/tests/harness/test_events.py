import pytest

from kvpool.harness import EventKind, EventQueue


def test_events_pop_in_time_then_push_order():
    queue = EventQueue()
    queue.push(2.0, EventKind.DecodeStep, "late")
    queue.push(1.0, EventKind.Arrival, "a")
    queue.push(1.0, "PrefillDone", "b")
    queue.push(1.0, EventKind.Arrival, "c")
    assert queue.count(EventKind.Arrival) == 2
    assert queue.peek().payload == "a"
    popped = [queue.pop() for _ in range(len(queue))]
    assert [e.payload for e in popped] == ["a", "b", "c", "late"]
    assert popped[1].kind == EventKind.PrefillDone
    assert not queue


def test_unknown_event_kind():
    with pytest.raises(ValueError):
        EventQueue().push(0.0, "Explode")
