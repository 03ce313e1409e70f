import dataclasses
import json

import pytest

from gimbalsim.balancer import ROUND_ROBIN
from gimbalsim.config import POLICIES, MoeConfig, PlacementConfig, SimConfig
from gimbalsim.engine import CostModel
from gimbalsim.sim import Simulation, compare, queue_service_ratio, run, saturating_rps
from gimbalsim.workload import Request, gen_arrivals, shape_distribution, synthetic_trace

SMALL_MOE = MoeConfig(n_layers=4, n_experts=8, reference_tokens=3000, window_tokens=1024)


@pytest.fixture(scope="module")
def workload():
    recs = synthetic_trace(2000, seed=2, n_users=30)
    return gen_arrivals(shape_distribution(recs, "Random", 300, 1), 2.0, 1)


def cfg(**kw):
    kw.setdefault("moe", SMALL_MOE)
    return SimConfig(**kw)


def test_single_request_closed_form():
    c = SimConfig(n_engines=1, moe=None, cost=CostModel(prefill_rate=1000, decode_time_per_token=0.02))
    rep = run(c, [Request(0, 1.0, 200, 6)])
    row = rep.per_request[0]
    assert row["ttft"] == pytest.approx(0.2)
    assert row["tpot"] == pytest.approx(0.02)


def test_empty_workload():
    rep = run(cfg(), [])
    assert rep.per_request == [] and rep["ttft_mean"] == 0 and rep["throughput_rps"] == 0


def test_unsorted_arrivals_rejected():
    with pytest.raises(ValueError):
        run(cfg(), [Request(0, 2.0, 10, 2), Request(1, 1.0, 10, 2)])
    with pytest.raises(ValueError):
        run(cfg(), [Request(0, 1.0, 10, 2), Request(0, 2.0, 10, 2)])


@pytest.mark.parametrize("policy", sorted(POLICIES))
def test_conservation_and_consistency(workload, policy):
    rep = run(cfg(policy=policy), workload)
    rows = rep.per_request
    assert sorted(r["id"] for r in rows) == [r.id for r in workload]
    assert rep["decoded_tokens"] == sum(r.output_tokens for r in workload)
    for r in rows:
        assert r["ttft"] >= 0 and r["tpot"] >= 0
        span = r["completion_time"] - r["arrival_time"]
        assert r["ttft"] + (r["output_tokens"] - 1) * r["tpot"] == pytest.approx(span, rel=1e-12, abs=1e-12)
    a = rep.aggregates
    assert a["hit_rate"] == (a["prefix_hits"] / a["prefix_probes"] if a["prefix_probes"] else 0)
    assert a["throughput_rps"] == pytest.approx(len(rows) / a["makespan"])


def test_policies_decode_same_tokens(workload):
    a = run(cfg(policy="baseline"), workload)
    b = run(cfg(policy="gimbal"), workload)
    assert a["decoded_tokens"] == b["decoded_tokens"] and a["completed"] == b["completed"]


def test_byte_identical_reports(workload):
    assert run(cfg(), workload).to_json() == run(cfg(), workload).to_json()


def test_event_log_deterministic_and_monotone(workload):
    s1 = Simulation(cfg(), workload, keep_log=True)
    s1.run()
    s2 = Simulation(cfg(), workload, keep_log=True)
    s2.run()
    assert s1.log == s2.log
    times = [t for t, _, _ in s1.log]
    assert all(b >= a for a, b in zip(times, times[1:]))


def test_simultaneous_event_ranks():
    # an arrival at the exact end of an iteration sees the finished state
    c = SimConfig(n_engines=1, moe=None, cost=CostModel(prefill_rate=100, decode_time_per_token=0.5))
    s = Simulation(c, [Request(0, 0.0, 50, 1), Request(1, 0.5, 10, 1)], keep_log=True)
    s.run()
    at = [kind for t, kind, _ in s.log if t == pytest.approx(0.5)]
    assert at.index("step_end") < at.index("arrival")


def test_ablation_composition(workload):
    reps = {p: run(cfg(policy=p), workload) for p in POLICIES}
    g = POLICIES["gimbal"]
    assert g.load_aware_dispatch == POLICIES["dplb_only"].load_aware_dispatch
    assert g.sjf_queue == POLICIES["sjfs_only"].sjf_queue
    assert g.dynamic_placement == POLICIES["edr_only"].dynamic_placement
    for p in ("baseline_rr_fcfs", "sjfs_only", "edr_only"):
        n = len(reps[p].decisions)
        assert [d[1] for d in reps[p].decisions] == [i % 2 for i in range(n)]
        assert {d[2] for d in reps[p].decisions} == {ROUND_ROBIN}
    for p in ("gimbal", "dplb_only"):
        assert {d[2] for d in reps[p].decisions} != {ROUND_ROBIN}
    for p, rep in reps.items():
        assert (rep["relocations"] > 0) == POLICIES[p].dynamic_placement


def test_relocation_steps_and_anchor(workload):
    c = cfg(placement=PlacementConfig(tau=500, top_e=3))
    rep = run(c, workload)
    steps = [r["step"] for r in rep.relocations]
    assert steps == list(range(0, rep["steps"] + 1, 500))[: len(steps)]
    assert steps[-1] + 500 > rep["steps"]
    assert all(r["anchor_ok"] for r in rep.relocations)


def test_migration_stall_slows_run(workload):
    fast = run(cfg(placement=PlacementConfig(tau=200)), workload)
    slow = run(cfg(placement=PlacementConfig(tau=200, migration_stall=0.05)), workload)
    assert slow["migrations"] > 0
    assert slow["makespan"] > fast["makespan"]


def test_moe_disabled():
    rep = run(SimConfig(moe=None), [Request(0, 0.0, 100, 5)])
    assert rep["moe_multiplier"] == 1.0 and rep.expert_load == []


def test_expert_load_per_gpu(workload):
    rep = run(cfg(), workload)
    assert len(rep.expert_load) == SMALL_MOE.n_gpus and all(x > 0 for x in rep.expert_load)


def test_report_exports(tmp_path, workload):
    rep = run(cfg(), workload[:20])
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["aggregates"]["completed"] == 20
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("id,engine") and len(lines) == 21


def test_compare(workload):
    base = cfg(policy="baseline")
    same = compare(base, base, workload)
    assert all(row["delta"] == 0 and row["rel_delta"] == 0 for row in same)
    assert compare(base, base, []) == []
    with pytest.raises(ValueError):
        compare(base, base, workload, workload[:-1])
    with pytest.raises(ValueError):
        compare(base, dataclasses.replace(base, kv_capacity=1000), workload)


def test_compare_saturated_gimbal_lowers_ttft():
    recs = synthetic_trace(2000, seed=1)
    reqs = gen_arrivals(shape_distribution(recs, "Average", 400, 0), 3.0, 0)
    base = cfg(policy="baseline", kv_capacity=40000)
    table = {r["metric"]: r for r in compare(base, base.with_policy("gimbal"), reqs)}
    assert table["ttft_mean"]["delta"] < 0


def test_saturating_rps_reaches_target():
    recs = synthetic_trace(1000, seed=1)
    sampled = shape_distribution(recs, "Average", 200, 0)
    c = cfg(policy="baseline", kv_capacity=40000)
    rps, rep = saturating_rps(c, lambda r: gen_arrivals(sampled, r, 0), target=2.0, lo=1.0, hi=6.0, step=0.25)
    assert queue_service_ratio(rep) >= 2.0
    below = run(c, gen_arrivals(sampled, rps - 0.25, 0))
    assert queue_service_ratio(below) < 2.0
    with pytest.raises(ValueError):
        saturating_rps(c, lambda r: gen_arrivals(sampled, r, 0), target=1e9, lo=1.0, hi=1.5)
