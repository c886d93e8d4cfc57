"""Window calculus tying production, buffer, and transport stages together.

Every stage-i negotiation starts from the committed finish of stage i-1 and the
already-proposed slot of stage i+1(-ish) and derives earliest/latest bounds for
the activities in between. All functions here are pure: agents feed committed
or proposed slots in, CFP window sets come out. Unbounded slack terms simply
drop out of minima; an empty candidate set leaves the bound unbounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .timebase import Seconds, Slack, min_bound


class CalculusError(Exception):
    pass


class InfeasibleWindow(CalculusError):
    """Derived window has its latest bound before its earliest."""


class NoTransport(CalculusError):
    """Parameter derivation needs at least one transport resource."""


class OutOfSegment(CalculusError):
    """A transport was asked to travel outside its reachable segment."""


@dataclass(frozen=True)
class ScheduleParams:
    """System-wide scheduling floors: minimal transport and buffer durations."""

    t_transport_min: Seconds
    t_buffer_min: Seconds

    def __post_init__(self) -> None:
        if self.t_transport_min <= 0 or self.t_buffer_min <= 0:
            raise ValueError("scheduling floors must be positive")


@dataclass(frozen=True)
class StageWindows:
    """ES/EF/LS/LF bounds exchanged in CFPs; None encodes an unbounded bound.

    ``(es, ls)`` bound an activity's start and ``(ef, lf)`` its finish; for a
    buffering activity the two pairs are the entry and exit windows.
    """

    es: Seconds
    ef: Seconds
    ls: Optional[Seconds] = None
    lf: Optional[Seconds] = None

    def __post_init__(self) -> None:
        if self.ls is not None and self.ls < self.es:
            raise InfeasibleWindow(f"LS {self.ls} before ES {self.es}")
        if self.lf is not None and self.lf < self.ef:
            raise InfeasibleWindow(f"LF {self.lf} before EF {self.ef}")

    @property
    def start_window(self) -> tuple[Seconds, Optional[Seconds]]:
        return (self.es, self.ls)

    @property
    def finish_window(self) -> tuple[Seconds, Optional[Seconds]]:
        return (self.ef, self.lf)


@dataclass(frozen=True)
class SlotCommitment:
    """A committed or proposed slot another stage hangs its windows on."""

    start: Seconds
    finish: Seconds
    slack_after: Slack = Slack.UNBOUNDED

    def __post_init__(self) -> None:
        if self.finish < self.start:
            raise ValueError("slot finish precedes start")

    @property
    def latest_start(self) -> Optional[Seconds]:
        return self.slack_after.bound_from(self.start)

    @property
    def latest_finish(self) -> Optional[Seconds]:
        return self.slack_after.bound_from(self.finish)


@dataclass(frozen=True)
class TransportGeometry:
    """Kinematics of one transport: speed, handling times, reachable x-segment."""

    speed: float  # metres per second
    load_time: Seconds
    unload_time: Seconds
    x_min: float
    x_max: float

    def __post_init__(self) -> None:
        if self.speed <= 0:
            raise ValueError("transport speed must be positive")
        if self.x_max < self.x_min:
            raise ValueError("segment upper bound below lower bound")

    def covers(self, x: float) -> bool:
        return self.x_min <= x <= self.x_max

    def travel_seconds(self, x_from: float, x_to: float) -> Seconds:
        """Pure x-direction travel time, rounded up to whole seconds."""
        return math.ceil(abs(x_to - x_from) / self.speed - 1e-9)


def derive_t_transport_min(
    locations: Sequence[tuple[float, float]],
    transports: Sequence[TransportGeometry],
) -> Seconds:
    """System-wide floor for a transport operation.

    Best-case handling (min load+unload over the fleet) plus the shortest real
    move: the minimal positive pairwise x-distance among the given locations at
    the fleet's maximum speed. Locations sharing an x-coordinate are one place
    as far as x-travel is concerned, so zero distances never count; if no two
    locations differ in x the travel share is zero.
    """
    if not transports:
        raise NoTransport("cannot derive a transport floor without transports")
    if len(locations) < 2:
        raise ValueError("need at least two locations")
    handling = min(t.load_time + t.unload_time for t in transports)
    top_speed = max(t.speed for t in transports)
    xs = [loc[0] for loc in locations]
    deltas = [
        abs(a - b)
        for i, a in enumerate(xs)
        for b in xs[i + 1 :]
        if abs(a - b) > 1e-9
    ]
    travel = math.ceil(min(deltas) / top_speed - 1e-9) if deltas else 0
    return handling + travel


def transport_duration(
    frm: tuple[float, float], to: tuple[float, float], geom: TransportGeometry
) -> Seconds:
    """load + x-travel + unload for one concrete leg of one transport."""
    for x in (frm[0], to[0]):
        if not geom.covers(x):
            raise OutOfSegment(
                f"x={x} outside segment [{geom.x_min}; {geom.x_max}]"
            )
    return geom.load_time + geom.travel_seconds(frm[0], to[0]) + geom.unload_time


def buffer_windows(
    f_prev: Seconds, prod: SlotCommitment, params: ScheduleParams
) -> StageWindows:
    """Entry/exit windows for buffering between a finished step and a proposed next step.

    Entry may happen in [ES_B, LS_B]; the workpiece must be taken for onward
    transport within [EF_B, LF_B] = [S_next - T_T,min, EF_B + ST_next], with
    LS_B = LF_B - T_B,min. An unbounded next-step slack leaves the late bounds
    unbounded.
    """
    es = f_prev
    ef = prod.start - params.t_transport_min
    if ef < es:
        raise InfeasibleWindow(
            "next operation starts too early to leave room for buffering"
        )
    lf = None if prod.slack_after.unbounded else ef + prod.slack_after.seconds
    ls = None if lf is None else lf - params.t_buffer_min
    return StageWindows(es=es, ef=ef, ls=ls, lf=lf)


def transport_to_buffer_windows(
    f_prev: Seconds,
    prev_slack: Slack,
    buf: SlotCommitment,
    prod: SlotCommitment,
    params: ScheduleParams,
) -> StageWindows:
    """Windows for the leg bringing a workpiece from resource i-1 into a buffer.

    LS is the tightest of: the previous commitment's latest finish, the
    buffer's latest entry, and the next operation's latest start minus the two
    remaining minimal transports and the minimal buffering. LF tracks LS by
    the minimal transport duration.
    """
    es = f_prev
    ef = max(f_prev, buf.start)
    ls = min_bound(
        prev_slack.bound_from(f_prev),
        None
        if (b := buf.slack_after.bound_from(buf.start)) is None
        else b - params.t_transport_min,
        None
        if (p := prod.slack_after.bound_from(prod.start)) is None
        else p - 2 * params.t_transport_min - params.t_buffer_min,
    )
    if ls is not None and ls < es:
        raise InfeasibleWindow("no room left to reach the buffer in time")
    lf = None if ls is None else ls + params.t_transport_min
    return StageWindows(es=es, ef=ef, ls=ls, lf=lf)


def transport_from_buffer_windows(
    f_prev: Seconds,
    buf: SlotCommitment,
    prod: SlotCommitment,
    params: ScheduleParams,
) -> StageWindows:
    """Windows for the leg taking a workpiece out of a buffer to resource i.

    ES leaves room for the minimal inbound transport and minimal buffering
    after f_prev; the leg must finish exactly when the next operation can
    start, i.e. within [S_next, S_next + ST_next].
    """
    es = f_prev + params.t_transport_min + params.t_buffer_min
    ef = prod.start
    ls = min_bound(
        buf.slack_after.bound_from(buf.finish),
        None
        if (p := prod.slack_after.bound_from(prod.start)) is None
        else p - params.t_transport_min,
    )
    if ls is not None and ls < es:
        raise InfeasibleWindow("buffer exit window closes before the leg can start")
    lf = prod.slack_after.bound_from(prod.start)
    if lf is not None and lf < ef:
        raise InfeasibleWindow("next operation window closes before arrival")
    return StageWindows(es=es, ef=ef, ls=ls, lf=lf)


def transport_direct_windows(
    f_prev: Seconds,
    prev_slack: Slack,
    prod: SlotCommitment,
    params: ScheduleParams,
) -> StageWindows:
    """Windows for a direct resource-to-resource leg (no buffering in between)."""
    es = f_prev
    ef = prod.start
    ls = min_bound(
        prev_slack.bound_from(f_prev),
        None
        if (p := prod.slack_after.bound_from(prod.start)) is None
        else p - params.t_transport_min,
    )
    if ls is not None and ls < es:
        raise InfeasibleWindow("direct leg window closes before the workpiece is free")
    lf = prod.slack_after.bound_from(prod.start)
    if lf is not None and lf < ef:
        raise InfeasibleWindow("next operation window closes before arrival")
    return StageWindows(es=es, ef=ef, ls=ls, lf=lf)


def proposal_price(op_duration: Seconds, setup: Seconds, ti_next: Seconds = 0) -> int:
    """Price of a proposal: operation time + own setup + signed successor increment."""
    return int(op_duration) + int(setup) + int(ti_next)


def needs_buffering(
    f_prev: Seconds,
    s_next: Seconds,
    direct_transport: Seconds,
    params: ScheduleParams,
) -> bool:
    """True when the idle gap after a direct transport would exceed the buffering floor.

    Strictly greater: a gap of exactly t_buffer_min stays on the machine /
    transport chain rather than paying two extra handling operations.
    """
    return (s_next - (f_prev + direct_transport)) > params.t_buffer_min
