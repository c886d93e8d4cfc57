"""Shared fixtures and generators for the test suite."""

from __future__ import annotations

import itertools
import random
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from cnetsched.agents import BufferAgent, ProductionAgent, TransportAgent
from cnetsched.harness import run_scenario
from cnetsched.protocol import BUFFER, PRODUCTION, TRANSPORT, LegRef, Proposal
from cnetsched.scenario import (
    BufferSpec,
    InitialBooking,
    MachineSpec,
    MaintenanceWindow,
    OrderSpec,
    ProductSpec,
    Scenario,
    ScenarioParams,
    TransportSpec,
    load_scenario,
)
from cnetsched.timebase import Slack, TimeInterval

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")

REPO = Path(__file__).resolve().parent.parent
SCENARIOS = REPO / "scenarios"
FLOWSHOP = SCENARIOS / "section6_flowshop.json"
JOBSHOP = SCENARIOS / "tableV_jobshop.json"


@pytest.fixture(scope="session")
def flowshop_scenario():
    return load_scenario(FLOWSHOP)


@pytest.fixture(scope="session")
def flowshop_report(flowshop_scenario):
    """One deterministic run of the bundled flow-shop scenario, reused read-only."""
    return run_scenario(flowshop_scenario, mode="deterministic")


@pytest.fixture(scope="session")
def jobshop_report():
    return run_scenario(load_scenario(JOBSHOP), mode="deterministic")


def agent_kinds(report) -> dict[str, str]:
    """resource id -> machine | buffer | transport, from the live agents."""
    kinds = {}
    for aid, agent in report.agents.items():
        if isinstance(agent, ProductionAgent):
            kinds[aid] = "machine"
        elif isinstance(agent, BufferAgent):
            kinds[aid] = "buffer"
        elif isinstance(agent, TransportAgent):
            kinds[aid] = "transport"
    return kinds


# ---------------------------------------------------------------------------
# randomized whole scenarios (invariant sweeps)


def random_scenario(seed: int) -> Scenario:
    """A small random floor: <= 8 resources, <= 6 orders, whole-minute data.

    Deliberately rough around the edges — some machines cannot make some
    products, floors may lack a capability a plan needs, releases may all
    collide at tick zero.  Failed orders are a legal outcome; the invariants
    must hold regardless.
    """
    rng = random.Random(seed)
    n_transports = rng.randint(1, 2)
    n_buffers = rng.randint(1, 2)
    n_machines = rng.randint(1, 8 - n_transports - n_buffers)
    ops = [f"op{i + 1}" for i in range(rng.randint(1, min(3, n_machines)))]
    product_ids = ["A", "B", "C"][: rng.randint(1, 3)]
    xs = [float(x) for x in range(5, 50, 5)]

    machines = []
    for i in range(n_machines):
        durations = tuple(
            (p, rng.randrange(30, 151) * 60)
            for p in product_ids
            if len(product_ids) == 1 or rng.random() > 0.1
        ) or ((product_ids[0], rng.randrange(30, 151) * 60),)
        setup = tuple(
            (a, b, rng.randrange(0, 31) * 60)
            for a in product_ids
            for b in product_ids
            if a != b and rng.random() < 0.8
        )
        bookings, windows = [], []
        t = 0
        for _ in range(rng.randint(0, 2)):
            t += rng.randrange(10, 180) * 60
            end = t + rng.randrange(30, 120) * 60
            if rng.random() < 0.5:
                bookings.append(
                    InitialBooking(
                        order_id=f"pre-{i}",
                        start=t,
                        end=end,
                        end_state=rng.choice(product_ids),
                    )
                )
            else:
                windows.append(
                    MaintenanceWindow(start=t, end=end, state=rng.choice(product_ids))
                )
            t = end
        machines.append(
            MachineSpec(
                id=f"M{i + 1}",
                operation=ops[i % len(ops)],
                location=(rng.choice(xs), float(rng.randrange(0, 20))),
                op_duration=durations,
                setup=setup,
                initial_state=rng.choice(product_ids),
                initial_bookings=tuple(bookings),
                maintenance=tuple(windows),
            )
        )

    buffers = tuple(
        BufferSpec(id=f"Buf{j + 1}", location=(rng.choice(xs), 12.0))
        for j in range(n_buffers)
    )
    transports = tuple(
        TransportSpec(
            id=f"T{j + 1}",
            segment=(0.0, 50.0),
            speed=5.0,
            load=rng.randrange(5, 11) * 60,
            unload=rng.randrange(5, 11) * 60,
            initial_x=rng.choice(xs),
        )
        for j in range(n_transports)
    )
    products = tuple(
        ProductSpec(
            id=p, steps=tuple(rng.choice(ops) for _ in range(rng.randint(1, 4)))
        )
        for p in product_ids
    )
    gap = rng.choice([0.0, 3.0, 25.0, 400.0])
    orders = tuple(
        OrderSpec(
            id=f"o{k + 1:02d}",
            product=rng.choice(product_ids),
            arrival=0,
            release=k * gap,
        )
        for k in range(rng.randint(1, 6))
    )
    return Scenario(
        name=f"fuzz-{seed}",
        params=ScenarioParams(t_buffer_min=15 * 60),
        machines=tuple(machines),
        buffers=buffers,
        transports=transports,
        products=products,
        orders=orders,
    )


# ---------------------------------------------------------------------------
# randomized single-stage proposal instances (selector vs enumeration)


def random_stage_instance(seed: int):
    """(production, buffers, transports, ctx) wired like a live stage.

    Slots are generated loosely, so a good share of combinations is
    temporally infeasible — that is the point.
    """
    from cnetsched.selector import StageContext

    rng = random.Random(seed)
    pid = itertools.count(1)
    f_prev = rng.randrange(0, 2000) * 60
    prev_resource = "M-prev"

    def slack() -> Slack:
        return (
            Slack.UNBOUNDED
            if rng.random() < 0.3
            else Slack(rng.randrange(0, 240) * 60)
        )

    production: list[Proposal] = []
    buffers: list[Proposal] = []
    transports: list[Proposal] = []
    buffered: set[str] = set()

    for i in range(rng.randint(1, 3)):
        stay = rng.random() < 0.15
        start = f_prev + rng.randrange(10, 900) * 60
        dur = rng.randrange(30, 180) * 60
        p = Proposal(
            proposal_id=f"P#{next(pid)}",
            kind=PRODUCTION,
            resource_id=prev_resource if stay else f"M{i + 1}",
            location=(10.0 * (i + 1), 5.0),
            slot=TimeInterval(start, start + dur),
            slack_before=Slack(0),
            slack_after=slack(),
            op_duration=dur,
            load_time=600,
            unload_time=600,
            price=rng.randrange(1, 500),
        )
        production.append(p)
        if not stay and rng.random() < 0.55:
            buffered.add(p.proposal_id)

    leg_idx = itertools.count()

    def leg(from_r, to_r, realizes, via=None, required=None, lo=0, hi=1200):
        start = f_prev + rng.randrange(lo, hi) * 60
        dur = rng.randrange(20, 40) * 60
        return Proposal(
            proposal_id=f"T#{next(pid)}",
            kind=TRANSPORT,
            resource_id=rng.choice(("Crane1", "Crane2")),
            location=(0.0, 0.0),
            slot=TimeInterval(start, start + dur),
            slack_before=Slack(0),
            slack_after=slack(),
            op_duration=dur,
            load_time=600,
            unload_time=600,
            price=rng.randrange(1, 100),
            leg=LegRef(next(leg_idx), from_r, to_r, realizes, via),
            required_operation=required,
        )

    for p in production:
        if p.proposal_id in buffered:
            for _ in range(rng.randint(0, 2)):
                bstart = f_prev + rng.randrange(0, 400) * 60
                bend = bstart + rng.randrange(0, 600) * 60
                b = Proposal(
                    proposal_id=f"B#{next(pid)}",
                    kind=BUFFER,
                    resource_id=f"Buf{rng.randint(1, 2)}",
                    location=(20.0, 12.0),
                    slot=TimeInterval(bstart, bend),
                    slack_before=Slack(0),
                    slack_after=slack(),
                    op_duration=bend - bstart,
                    load_time=600,
                    unload_time=600,
                    price=0,
                    connected_operations=(p.proposal_id,),
                )
                buffers.append(b)
                ins = [
                    leg(prev_resource, b.resource_id, b.proposal_id, hi=600)
                    for _ in range(rng.randint(0, 2))
                ]
                transports.extend(ins)
                for _ in range(rng.randint(0, 2)):
                    required = (
                        rng.choice(ins).proposal_id
                        if ins and rng.random() < 0.4
                        else None
                    )
                    transports.append(
                        leg(
                            b.resource_id,
                            p.resource_id,
                            p.proposal_id,
                            via=b.proposal_id,
                            required=required,
                            lo=200,
                        )
                    )
        elif p.resource_id != prev_resource:
            for _ in range(rng.randint(0, 2)):
                transports.append(leg(prev_resource, p.resource_id, p.proposal_id))

    ctx = StageContext(
        f_prev=f_prev, prev_resource=prev_resource, buffered=frozenset(buffered)
    )
    return production, buffers, transports, ctx
