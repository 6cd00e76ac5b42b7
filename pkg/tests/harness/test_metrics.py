import numpy as np
import pandas as pd
import pytest

from kvpool.harness import RequestRecord, compute_metrics, percentile_nearest_rank


def record(request_id, ttft=1.0, jct=5.0, gen_len=5, status="ok", reused=0, prompt_len=100):
    ok = status == "ok"
    return RequestRecord(
        request_id=request_id,
        session_id=f"s{request_id}",
        turn=0,
        arrival=0.0,
        ttft=ttft,
        ttst=ttft + 1.0 if gen_len > 1 else None,
        jct=jct if ok else None,
        tpot=(jct - ttft) / (gen_len - 1) if ok and gen_len > 1 else None,
        prefill_tokens_computed=prompt_len - reused,
        tokens_reused=reused,
        matched_tokens=reused,
        bytes_transferred=10.0,
        decision="None",
        status=status,
        prefill_instance="p0",
        decode_instance="d0",
        prompt_len=prompt_len,
        gen_len=gen_len,
    )


def test_nearest_rank_percentile():
    assert percentile_nearest_rank([3.0]) == 3.0
    assert percentile_nearest_rank(list(range(1, 101))) == 99.0
    assert percentile_nearest_rank(list(range(1, 11)), 50) == 5.0
    assert np.isnan(percentile_nearest_rank([]))


def test_single_request_metrics():
    report = compute_metrics([record(0, ttft=1.0, jct=5.0, gen_len=5)])
    assert report["mean_tpot"] == 1.0
    for metric in ("ttft", "ttst", "jct", "tpot"):
        assert report[f"mean_{metric}"] == report[f"p99_{metric}"]


def test_failed_requests_are_counted_not_averaged():
    report = compute_metrics([record(0, jct=5.0), record(1, jct=50.0, status="InstanceFailed")])
    assert report["num_requests"] == 2
    assert report["num_completed"] == 1
    assert report["num_failed"] == 1
    assert report["mean_jct"] == 5.0


def test_single_token_requests_have_no_tpot():
    report = compute_metrics([record(0, jct=1.0, gen_len=1)])
    assert np.isnan(report["mean_tpot"])
    assert report["mean_jct"] == 1.0


def test_reuse_ratio():
    report = compute_metrics([record(0, reused=0), record(1, reused=96)])
    assert report["prompt_tokens"] == 200
    assert report["tokens_reused"] == 96
    assert report["reuse_ratio"] == pytest.approx(0.48)
    assert report["prefill_tokens_computed"] == 104


def test_order_independent():
    records = [record(i, ttft=0.1 * i, jct=1.0 + i) for i in range(20)]
    forward = compute_metrics(records)
    backward = compute_metrics(list(reversed(records)))
    assert forward.summary == backward.summary
    pd.testing.assert_frame_equal(forward.requests, backward.requests)


def test_transfer_totals_only_count_completed_transfers():
    transfers = pd.DataFrame(
        {"status": ["done", "aborted", "done"], "n_calls": [4, 8, 2], "bytes": [10.0, 20.0, 5.0]}
    )
    report = compute_metrics([record(0)], transfers)
    assert report["transfer_calls"] == 6
    assert report["transfer_bytes"] == 15.0
