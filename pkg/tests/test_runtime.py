import pytest

from cnetsched.harness import render_gantt, render_trace, run_scenario
from cnetsched.runtime import KernelConfig, RunTimeout, run_kernel
from cnetsched.scenario import build_runtime, load_scenario, parse_scenario
from cnetsched.timebase import TimeInterval, hhmm, minutes


# ---------------------------------------------------------------------------
# reference runs: the two bundled scenarios


def test_flowshop_reference_run(flowshop_report):
    r = flowshop_report
    assert r.mode == "deterministic"
    assert r.all_done
    assert {oid: a.status for oid, a in r.agents.items() if hasattr(a, "status")} == {
        "order-A": "done",
        "order-B": "done",
    }
    assert r.counter.total() == 108
    assert r.events == 130

    a = r.agents["order-A"]
    # second production step buffers: two crane movements bracket the stay
    stage = a.committed[1]
    assert stage.route_kind == "buffered"
    assert [iv for _, iv in stage.transport_slots] == [
        TimeInterval(64_800, 66_120),
        TimeInterval(102_840, 104_100),
    ]
    assert hhmm(stage.transport_slots[0][1].start) == "18:00"
    assert hhmm(stage.transport_slots[1][1].start) == "1.04:34"
    assert stage.buffer_slot is not None
    assert a.committed[-1].op_slot.end == 130_860  # 1.12:21
    assert r.agents["order-B"].committed[-1].op_slot.end == 113_160  # 1.07:26


def test_jobshop_reference_run(jobshop_report):
    r = jobshop_report
    assert r.all_done
    assert r.counter.total() == 158
    assert r.events == 189
    ends = {
        oid: a.committed[-1].op_slot.end
        for oid, a in r.agents.items()
        if hasattr(a, "committed") and a.committed
    }
    assert ends == {"job-A": 45_120, "job-C": 55_200, "job-B": 76_080}
    finals = {
        oid: a.committed[-1].resource_id
        for oid, a in r.agents.items()
        if hasattr(a, "committed") and a.committed
    }
    assert finals == {"job-A": "Forging", "job-C": "Milling2", "job-B": "Quality"}


def test_deterministic_runs_are_byte_identical(flowshop_scenario):
    a = run_scenario(flowshop_scenario, "deterministic")
    b = run_scenario(flowshop_scenario, "deterministic")
    assert render_trace(a) == render_trace(b)
    assert render_gantt(a) == render_gantt(b)


# ---------------------------------------------------------------------------
# kernel mechanics


def single_responder_doc():
    """One resource per role so arrival order cannot change the outcome."""
    return {
        "format_version": 1,
        "name": "single-responder",
        "params": {"t_buffer_min": 15},
        "machines": [
            {"id": "M1", "operation": "cutting", "location": [10, 5], "op_duration": {"A": 60}},
            {"id": "M2", "operation": "forging", "location": [40, 5], "op_duration": {"A": 90}},
        ],
        "buffers": [{"id": "Buf1", "location": [25, 15]}],
        "transports": [
            {"id": "Crane1", "segment": [0, 60], "speed": 5, "load": 10, "unload": 10}
        ],
        "products": [{"id": "A", "steps": ["cutting", "forging"]}],
        "orders": [{"id": "o1", "product": "A"}],
    }


def test_concurrent_mode_matches_deterministic_schedule():
    from cnetsched.harness import gantt_rows

    s = parse_scenario(single_responder_doc(), source="t")
    det = run_scenario(s, "deterministic")
    conc = run_scenario(s, "concurrent")
    assert det.all_done and conc.all_done
    assert gantt_rows(det) == gantt_rows(conc)


def test_event_cap_raises_run_timeout(flowshop_scenario):
    b = build_runtime(flowshop_scenario)
    with pytest.raises(RunTimeout):
        run_kernel("deterministic", b.directory, b.agents, b.releases, KernelConfig(max_events=10))


def test_unknown_mode_rejected(flowshop_scenario):
    b = build_runtime(flowshop_scenario)
    with pytest.raises(ValueError):
        run_kernel("async", b.directory, b.agents, b.releases)


def test_concurrent_kernel_with_latency_completes():
    s = parse_scenario(single_responder_doc(), source="t")
    b = build_runtime(s)
    cfg = KernelConfig.concurrent(message_latency=0.002)
    report = run_kernel("concurrent", b.directory, b.agents, b.releases, cfg)
    assert report.all_done
    assert report.agents["o1"].committed[-1].resource_id == "M2"
    assert report.wall_seconds > 0


def test_trace_records_every_event(flowshop_report):
    # one line per delivered event; protocol envelopes carry a conversation
    r = flowshop_report
    assert len(r.trace) == r.events
    envelopes = [ln for ln in r.trace if ln.split()[2] not in ("StartOrder", "DeadlineExpired")]
    assert len(envelopes) == r.counter.total()
    assert all(line.split()[1].count(">") == 1 for line in r.trace)


def test_lead_time_and_schedules_views(flowshop_report):
    r = flowshop_report
    lead = r.lead_time("order-A")
    assert lead == r.agents["order-A"].t_end - r.agents["order-A"].t_start
    scheds = r.schedules()
    assert set(scheds) >= {"Cutting", "Forging", "Buffer1", "Crane1"}
    for sched in scheds.values():
        sched.check_invariants()


def test_commit_log_matches_final_calendars(flowshop_report):
    # every commit the kernel observed still sits in the owner's calendar
    from cnetsched.oracle import stability_check

    assert stability_check(flowshop_report.commits, flowshop_report.schedules()) == []


def test_releases_stagger_start_times():
    doc = single_responder_doc()
    doc["orders"] = [
        {"id": "o1", "product": "A", "release": 0},
        {"id": "o2", "product": "A", "release": 500},
    ]
    s = parse_scenario(doc, source="t")
    r = run_scenario(s, "deterministic")
    assert r.all_done
    assert r.agents["o1"].t_start < r.agents["o2"].t_start
    assert r.agents["o2"].t_start >= 500
