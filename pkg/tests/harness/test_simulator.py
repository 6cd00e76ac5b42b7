from os.path import abspath, dirname, join

import numpy as np
import pandas as pd
import pytest

from kvpool.core.types import AllocType, BlockAddr, Medium, Request
from kvpool.engine import EngineTimingModel
from kvpool.harness import (
    Session,
    SimulationResult,
    Simulator,
    Workload,
    build_simulation_config,
    run_simulation,
)

SETTINGS_DIR = join(dirname(abspath(__file__)), "..", "..", "settings")
TIMING = EngineTimingModel()


def single_requests(*prompts, gen_len=5, gap=1.0):
    """One single-turn session per prompt, arriving gap seconds apart."""
    sessions = []
    for i, prompt in enumerate(prompts):
        request = Request(i, f"s{i}", 0, tuple(prompt), gen_len, arrival_time=i * gap)
        sessions.append(Session(f"s{i}", [request]))
    return Workload(sessions)


def colocated_with_dram(hbm=256, dram=128):
    return build_simulation_config(
        {
            "cluster": {
                "instances": [
                    {
                        "instance_id": "i0",
                        "kind": "PDColocated",
                        "caching_enabled": True,
                        "hbm_capacity_blocks": hbm,
                        "dram_capacity_blocks": dram,
                    }
                ]
            }
        }
    )


def test_single_request_closed_form():
    prompt = range(1, 1001)
    result = run_simulation({"cluster": {"setting": "1PD"}}, workload=single_requests(prompt))
    row = result.requests.iloc[0]
    ttft = TIMING.prefill_cost(1000, 1000)
    step = TIMING.decode_step_cost(1)
    assert row["status"] == "ok"
    assert row["ttft"] == pytest.approx(ttft)
    assert row["ttst"] == pytest.approx(ttft + step)
    assert row["jct"] == pytest.approx(ttft + 4 * step)
    assert row["tpot"] == pytest.approx(step)
    assert row["decision"] == "None"
    assert result["num_completed"] == 1


def test_repeated_prompt_reuses_all_full_blocks():
    prompt = range(1, 1001)
    result = run_simulation(
        {"cluster": {"setting": "1PD-CC"}}, workload=single_requests(prompt, prompt, gen_len=4)
    )
    first, second = result.requests.iloc[0], result.requests.iloc[1]
    assert first["prefill_tokens_computed"] == 1000
    assert second["decision"] == "Reuse"
    assert second["tokens_reused"] == 992
    assert second["prefill_tokens_computed"] == 8
    assert second["ttft"] < first["ttft"]
    assert result["reuse_ratio"] == pytest.approx(992 / 2000)


def test_prompt_is_never_fully_reused():
    prompt = range(1, 1025)
    result = run_simulation(
        {"cluster": {"setting": "1PD-CC"}}, workload=single_requests(prompt, prompt, gen_len=2)
    )
    assert result.requests.iloc[1]["tokens_reused"] == 1008
    assert result.requests.iloc[1]["prefill_tokens_computed"] == 16


def prepopulate_dram(sim, tokens, n_blocks):
    pool = sim.pools["i0"]
    addrs = pool.alloc_mem(n_blocks, AllocType.DRAM)
    pool.insert(tokens[: n_blocks * 16], addrs)
    return addrs


def test_reuse_from_dram_beats_recompute():
    prompt = tuple(range(1, 1025))
    sim = Simulator(colocated_with_dram(), single_requests(prompt, gen_len=1))
    prepopulate_dram(sim, prompt, 58)
    row = sim.run().requests.iloc[0]

    expected = (
        TIMING.dram_fetch_overhead
        + 58 * TIMING.swap_cost_per_block
        + TIMING.prefill_cost(1024 - 928, 1024)
    )
    assert row["decision"] == "Reuse"
    assert row["tokens_reused"] == 928
    assert row["ttft"] == pytest.approx(expected)
    assert row["ttft"] < TIMING.prefill_cost(1024, 1024)
    assert sim.pools["i0"].num_free(Medium.DRAM) == 128
    sim.pools["i0"].check_invariants()


def test_small_dram_hit_is_recomputed():
    prompt = tuple(range(1, 1025))
    sim = Simulator(colocated_with_dram(), single_requests(prompt, gen_len=1))
    prepopulate_dram(sim, prompt, 10)
    row = sim.run().requests.iloc[0]
    assert row["decision"] == "Recompute"
    assert row["matched_tokens"] == 160
    assert row["tokens_reused"] == 0
    assert row["ttft"] == pytest.approx(TIMING.prefill_cost(1024, 1024))


def behind_a_blocker(prompt, copies=2):
    """A short unrelated request occupies the instance while copies of prompt
    queue up, so the copies are admitted into one prefill batch."""
    blocker = Request(0, "blocker", 0, tuple(range(5001, 5301)), 1)
    sessions = [Session("blocker", [blocker])]
    for i in range(1, copies + 1):
        sessions.append(Session(f"s{i}", [Request(i, f"s{i}", 0, tuple(prompt), 1)]))
    return Workload(sessions)


def test_batch_shares_a_dram_prefix():
    prompt = tuple(range(1, 1025))
    sim = Simulator(colocated_with_dram(hbm=512, dram=128), behind_a_blocker(prompt))
    prepopulate_dram(sim, prompt, 58)
    requests = sim.run().requests.set_index("request_id")

    blocker_done = TIMING.prefill_cost(300, 300)
    expected = (
        blocker_done
        + TIMING.dram_fetch_overhead
        + 58 * TIMING.swap_cost_per_block
        + 2 * TIMING.prefill_cost(1024 - 928, 2048)
    )
    for request_id in (1, 2):
        row = requests.loc[request_id]
        assert row["status"] == "ok"
        assert row["decision"] == "Reuse"
        assert row["tokens_reused"] == 928
        assert row["ttft"] == pytest.approx(expected)
    pool = sim.pools["i0"]
    assert pool.num_free(Medium.DRAM) == 128
    pool.check_invariants()


def test_batch_shares_an_hbm_prefix():
    prompt = tuple(range(1, 1001))
    sim = Simulator(colocated_with_dram(hbm=512, dram=0), behind_a_blocker(prompt, copies=3))
    pool = sim.pools["i0"]
    pool.insert(prompt[:992], pool.alloc_mem(62))
    requests = sim.run().requests.set_index("request_id")

    expected = TIMING.prefill_cost(300, 300) + 3 * TIMING.prefill_cost(8, 3000)
    for request_id in (1, 2, 3):
        row = requests.loc[request_id]
        assert row["status"] == "ok"
        assert row["tokens_reused"] == 992
        assert row["prefill_tokens_computed"] == 8
        assert row["ttft"] == pytest.approx(expected)
    pool.check_invariants()


def test_empty_prompt_matches_nothing():
    result = run_simulation(
        {"cluster": {"setting": "1PD-CC"}}, workload=single_requests((), gen_len=3)
    )
    row = result.requests.iloc[0]
    assert row["status"] == "ok"
    assert row["matched_tokens"] == 0
    assert row["tokens_reused"] == 0
    assert row["prefill_tokens_computed"] == 0
    assert row["jct"] == pytest.approx(2 * TIMING.decode_step_cost(1))


def test_oversized_prompt_is_aborted():
    sim = Simulator(colocated_with_dram(hbm=8, dram=0), single_requests(range(1, 501)))
    result = sim.run()
    assert result.requests.iloc[0]["status"] == "CapacityAbort"
    assert result["num_failed"] == 1
    assert pd.isna(result.requests.iloc[0]["jct"])


def test_disaggregated_request_is_transferred():
    result = run_simulation({"cluster": {"setting": "1P1D"}}, workload=single_requests(range(1, 1001)))
    row = result.requests.iloc[0]
    assert (row["prefill_instance"], row["decode_instance"]) == ("p0", "d0")
    transfers = result.transfers
    assert list(transfers["kind"]) == ["p2d"]
    assert transfers.iloc[0]["status"] == "done"
    # 63 blocks of 16 tokens, K and V of 40 layers each
    assert transfers.iloc[0]["n_calls"] == 63 * 80
    assert row["bytes_transferred"] == transfers.iloc[0]["bytes"]
    assert row["ttst"] > row["ttft"] + TIMING.decode_step_cost(1)


def test_transfer_carries_request_metadata(monkeypatch):
    prompt = tuple(range(1, 101))
    sim = Simulator(build_simulation_config({"cluster": {"setting": "1P1D"}}), single_requests(prompt))
    delivered = []
    complete = sim.transfers.complete

    def recording_complete(handle, now):
        delivered.append(handle.private)
        return complete(handle, now)

    monkeypatch.setattr(sim.transfers, "complete", recording_complete)
    sim.run()
    assert delivered == [{"request_id": 0, "sampling_params": {}, "prompt": prompt}]


def test_think_time_delays_follow_up_turns():
    config = build_simulation_config(
        {
            "cluster": {"setting": "1P1D"},
            "workload": {"kind": "chat", "num_sessions": 4, "think_time_mean": 5.0},
        }
    )
    result = Simulator(config).run()
    requests = result.requests
    for _, group in requests.groupby("session_id"):
        group = group.sort_values("turn")
        finishes = (group["arrival"] + group["jct"]).to_numpy()
        arrivals = group["arrival"].to_numpy()
        assert np.all(arrivals[1:] >= finishes[:-1])


def test_same_seed_same_bytes(tmp_path):
    settings = {
        "cluster": {"setting": "2P1D-CC", "dram_capacity_blocks": 256, "hbm_capacity_blocks": 1024},
        "workload": {"kind": "chat", "num_sessions": 6, "request_rate": 2.0},
        "scheduler": {"policy": "PromptTree"},
    }
    for name in ("a", "b"):
        run_simulation(settings).to_directory(str(tmp_path / name))
    for table in ("requests", "transfers", "routing", "summary"):
        a = (tmp_path / "a" / f"{table}.csv").read_bytes()
        b = (tmp_path / "b" / f"{table}.csv").read_bytes()
        assert a == b, table


def allocated_by(pool, instance_id):
    """Non-indexed blocks of pool whose allocating instance is instance_id."""
    return [
        BlockAddr(pool.instance_id, medium, idx)
        for medium in Medium
        for idx, meta in pool.pools[medium].allocated.items()
        if meta.allocating_instance == instance_id
        and BlockAddr(pool.instance_id, medium, idx) not in pool.index
    ]


def test_failure_cleanup(monkeypatch):
    config = build_simulation_config(
        {
            "seed": 3,
            "cluster": {
                "setting": "2P2D-CC",
                "heartbeat_interval": 0.5,
                "failure_timeout": 1.5,
                "failures": [{"time": 2.0, "instance_id": "d1"}],
            },
            "workload": {"kind": "chat", "num_sessions": 16, "request_rate": 1.0},
        }
    )
    sim = Simulator(config)
    # receiver allocations d1 made on the prefill instances and never used
    for prefill in ("p0", "p1"):
        sim.transfers.allocate_at_receiver("d1", prefill, 6)

    outstanding = {}
    handle_failure = sim.cluster.handle_failure

    def counting_handle_failure(instance_id, now, pools, *args):
        for other, pool in pools.items():
            if other != instance_id:
                outstanding[other] = len(allocated_by(pool, instance_id))
        return handle_failure(instance_id, now, pools, *args)

    monkeypatch.setattr(sim.cluster, "handle_failure", counting_handle_failure)
    result = sim.run()

    assert len(result.requests) == sim.workload.num_requests
    assert set(result.requests["status"]) <= {"ok", "InstanceFailed", "DstUnreachable"}
    [report] = sim.cluster.reports
    assert report.instance_id == "d1"
    assert report.time >= 2.0 + 1.0
    assert sum(outstanding.values()) >= 12
    assert report.freed_blocks == outstanding
    assert report.freed_blocks["p0"] >= 6 and report.freed_blocks["p1"] >= 6

    routed = result.routing.merge(result.requests[["request_id", "arrival"]], on="request_id")
    after = routed[routed["arrival"] > report.time]
    assert "d1" not in set(after["decode_instance"])

    for instance_id, pool in sim.pools.items():
        if instance_id == "d1":
            continue
        pool.check_invariants()
        assert allocated_by(pool, "d1") == []
        for medium in Medium:
            for index in pool.pools[medium].allocated:
                assert BlockAddr(instance_id, medium, index) in pool.index, (
                    f"{instance_id} leaked {medium.value} block {index}"
                )


def test_result_round_trip(tmp_path):
    result = run_simulation(
        {"cluster": {"setting": "1P1D-CC"}}, workload=single_requests(range(1, 301), range(1, 301))
    )
    result.to_directory(str(tmp_path))
    loaded = SimulationResult(directory=str(tmp_path))
    pd.testing.assert_frame_equal(loaded.requests, result.requests, check_dtype=False)
    assert loaded.settings["cluster"]["setting"] == "1P1D-CC"
    assert loaded.version.startswith("kvpool=")
    assert loaded["mean_jct"] == pytest.approx(result["mean_jct"])
    assert "requests completed" in loaded.summary_line()


LADDER = ["PDBasic", "PDCaching1", "PDCaching2", "PDCaching3"]


@pytest.fixture(scope="module")
def ladder():
    runs = {}
    for design in LADDER:
        settings = {
            "seed": 4,
            "cluster": {"setting": "1P1D"},
            "engine": {"design": design},
            "mempool": {"eviction": False},
            "workload": {"kind": "docqa", "num_sessions": 6, "request_rate": 0.5},
        }
        runs[design] = run_simulation(settings)
    return runs


def test_ladder_prefill_tokens(ladder):
    computed = {d: ladder[d]["prefill_tokens_computed"] for d in LADDER}
    assert computed["PDCaching3"] < computed["PDCaching1"]
    assert computed["PDCaching1"] == computed["PDCaching2"]
    assert computed["PDCaching2"] < computed["PDBasic"]
    assert computed["PDBasic"] == ladder["PDBasic"]["prompt_tokens"]


def test_ladder_transfer_bytes(ladder):
    sent = {d: ladder[d]["p2d_bytes"] for d in LADDER}
    assert sent["PDCaching2"] == sent["PDCaching3"]
    assert sent["PDCaching3"] < sent["PDCaching1"]
    assert sent["PDCaching1"] == sent["PDBasic"]


def test_returned_decode_cache_grows_with_the_conversation(ladder):
    requests = ladder["PDCaching3"].requests
    assert (requests["status"] == "ok").all()
    for _, session in requests.groupby("session_id"):
        matched = session.sort_values("turn")["matched_tokens"].to_numpy()
        assert matched[0] == 0
        assert np.all(np.diff(matched) > 0)
    # only the returned decode cache adds returned transfers
    kinds = set(ladder["PDCaching3"].transfers["kind"])
    assert kinds == {"p2d", "d2p"}
    assert set(ladder["PDCaching2"].transfers["kind"]) == {"p2d"}


def test_aggregated_layout_cuts_calls_by_two_per_layer():
    base = {
        "seed": 2,
        "cluster": {"setting": "1P1D"},
        "workload": {"kind": "fixed", "num_sessions": 8, "params": {"prompt_len": 2048, "gen_len": 4}},
    }
    discrete = run_simulation(base)
    aggregated = run_simulation(
        {**base, "block": {"layout": "Aggregated"}, "transfer": {"mode": "ByRequestAgg"}}
    )
    assert discrete["transfer_calls"] == 80 * aggregated["transfer_calls"]
    assert aggregated["transfer_calls"] == 8 * 128
    assert discrete["transfer_bytes"] == pytest.approx(aggregated["transfer_bytes"])


def test_layerwise_transfer_lowers_ttst_when_idle():
    base = {
        "seed": 5,
        "cluster": {"setting": "1P1D"},
        "workload": {
            "kind": "fixed",
            "num_sessions": 4,
            "request_rate": 0.05,
            "params": {"prompt_len": 1500, "gen_len": 8},
        },
    }
    by_request = run_simulation(base)
    by_layer = run_simulation({**base, "transfer": {"mode": "ByLayer"}})
    assert by_layer["mean_ttst"] < by_request["mean_ttst"]
    assert by_layer["mean_ttft"] == pytest.approx(by_request["mean_ttft"])
    assert set(by_layer.transfers["mode"]) == {"ByLayer"}


@pytest.mark.slow
def test_aggregated_transfer_beats_layerwise_under_load():
    # one 2048-token prefill takes ~0.082 s, so 10 requests/s is ~0.8 of the
    # prefill throughput
    base = {
        "seed": 6,
        "cluster": {"setting": "1P1D"},
        "network": {"per_call_overhead": 2.0e-5},
        "workload": {
            "kind": "fixed",
            "num_sessions": 24,
            "request_rate": 5.0,
            "params": {"prompt_len": 2048, "gen_len": 4},
        },
    }
    by_layer = run_simulation({**base, "transfer": {"mode": "ByLayer"}})
    aggregated = run_simulation(
        {**base, "block": {"layout": "Aggregated"}, "transfer": {"mode": "ByRequestAgg"}}
    )
    assert by_layer["num_failed"] == aggregated["num_failed"] == 0
    assert aggregated["mean_jct"] < by_layer["mean_jct"]


@pytest.mark.slow
def test_prompt_tree_routing_reuses_most():
    reused = {}
    for policy in ("PromptTree", "SessionId", "LeastLoad"):
        result = run_simulation(
            join(SETTINGS_DIR, "docqa_3p1d.yaml"), [f"scheduler.policy={policy}"]
        )
        assert result["num_failed"] == 0
        reused[policy] = result["tokens_reused"]
    assert reused["PromptTree"] >= reused["SessionId"] >= reused["LeastLoad"]
    assert reused["PromptTree"] > reused["LeastLoad"]


@pytest.mark.slow
def test_caching_settings_are_faster():
    def summary(setting):
        return run_simulation(
            join(SETTINGS_DIR, "chat_1p1d.yaml"), [f"cluster.setting={setting}"]
        )

    assert summary("1P1D-CC")["mean_jct"] < summary("1P1D")["mean_jct"]
    assert summary("PD-CC")["mean_ttft"] < summary("PD")["mean_ttft"]


@pytest.mark.slow
def test_prompt_tree_routing_lowers_tail_ttft():
    # one shared 3000-token prompt: prompt-tree routing computes it once, session
    # hashing once per prefill instance it lands on
    p99 = {}
    for policy in ("PromptTree", "SessionId"):
        workload = single_requests(*[range(1, 3001)] * 200, gen_len=2, gap=1.0)
        result = run_simulation(
            join(SETTINGS_DIR, "docqa_3p1d.yaml"), [f"scheduler.policy={policy}"], workload=workload
        )
        assert result["num_failed"] == 0
        p99[policy] = result["p99_ttft"]
    assert p99["PromptTree"] < TIMING.prefill_cost(3000, 3000)
    assert p99["SessionId"] >= TIMING.prefill_cost(3000, 3000)
    assert p99["PromptTree"] < p99["SessionId"]
