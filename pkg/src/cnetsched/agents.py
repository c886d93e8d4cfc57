"""Agent roles: order, production resource, buffer place, transport, directory.

Each schedule-owning agent keeps its calendar private and talks only through
the protocol vocabulary. Handlers are plain functions from one inbound event
to a list of outbound envelopes, so the same classes run unchanged under the
deterministic and the concurrent kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from . import calculus
from .calculus import (
    InfeasibleWindow,
    ScheduleParams,
    SlotCommitment,
    StageWindows,
    TransportGeometry,
    proposal_price,
)
from .protocol import (
    BUFFER,
    PRODUCTION,
    TRANSPORT,
    AcceptProposal,
    Cfp,
    CfpAlternative,
    DeadlineExpired,
    HoldBook,
    InformDeparture,
    InformFailure,
    LegRef,
    Message,
    OfferHold,
    Phase,
    Proposal,
    RejectProposal,
    RoundPlan,
    StageDecision,
    StageFailure,
    StageNegotiation,
    StartStage,
    TransportLeg,
    WorkpieceInfo,
    advance_stage,
    conversation_id,
    parse_conversation,
)
from .selector import StageContext, build_ocs, select
from .timebase import (
    BookingEntry,
    NoOpenTail,
    OverlapError,
    ResourceSchedule,
    Seconds,
    Slack,
    TimeInterval,
)

log = logging.getLogger(__name__)

#: upper edge of every placement scan; a gap reaching it counts as unbounded
HORIZON: Seconds = 10**9
_ALL = TimeInterval(0, HORIZON)


@dataclass(frozen=True)
class StartOrder:
    """Kernel-injected event that wakes an order agent."""

    order_id: str


class DirectoryService:
    """In-process capability registry (yellow pages)."""

    def __init__(self) -> None:
        self._by_capability: dict[str, set[str]] = {}

    def register(self, capability: str, agent_id: str) -> None:
        self._by_capability.setdefault(capability, set()).add(agent_id)

    def deregister(self, capability: str, agent_id: str) -> None:
        self._by_capability.get(capability, set()).discard(agent_id)

    def search(self, capability: str) -> tuple[str, ...]:
        return tuple(sorted(self._by_capability.get(capability, ())))


# ---------------------------------------------------------------------------
# shared helpers


def _envelope(sender: str, receiver: str, conv: str, parts: Sequence) -> Message:
    return Message(sender=sender, receiver=receiver, conversation_id=conv, parts=tuple(parts))


def _failure(sender: str, receiver: str, conv: str, proposal_id: str, reason: str) -> Message:
    return _envelope(sender, receiver, conv, [InformFailure(proposal_id, reason)])


@dataclass
class _Gap:
    """A placement gap with successor-aware bookkeeping."""

    start: Seconds
    end: Seconds  # already adjusted for the successor's recomputed setup
    from_state: str
    ti_next: Seconds  # signed successor setup change a booking here would cause
    bounded: bool  # False when the gap runs to the scan horizon


def _slack_from(
    gap: _Gap, nominal_end: Seconds, *caps: Optional[Seconds]
) -> Slack:
    """Shift room for a slot ending at ``nominal_end`` inside ``gap``, window-capped."""
    candidates: list[Optional[Seconds]] = [None if not gap.bounded else gap.end - nominal_end]
    candidates.extend(c - nominal_end if c is not None else None for c in caps)
    finite = [c for c in candidates if c is not None]
    if not finite:
        return Slack.UNBOUNDED
    return Slack(max(0, min(finite)))


@dataclass
class _Offer:
    """What a resource remembers about a proposal it has outstanding."""

    proposal: Proposal
    conv: str
    step_label: str
    product: str = ""
    setup: Seconds = 0
    unload: Seconds = 0
    # transport-only geometry
    pickup_x: float = 0.0
    drop_x: float = 0.0


# ---------------------------------------------------------------------------
# production resource agent


@dataclass
class ProductionConfig:
    agent_id: str
    capability: str
    location: tuple[float, float]
    op_duration: dict[str, Seconds]
    setup: dict[str, dict[str, Seconds]]
    initial_state: str = ""
    unload_estimate: Seconds = 0
    load_estimate: Seconds = 0
    max_slots_per_cfp: int = 2


class ProductionAgent:
    """Owns one machine calendar; proposes, commits, blocks, defers."""

    def __init__(self, config: ProductionConfig):
        self.config = config
        self.agent_id = config.agent_id
        self.schedule = ResourceSchedule()
        self.holds = HoldBook()
        self._offers: dict[str, _Offer] = {}
        self._deferred: list[Message] = []
        self._seq = 0

    # -- state ------------------------------------------------------------

    @property
    def blocked(self) -> bool:
        return bool(self.schedule.open_tail_entries())

    def _engaged_elsewhere(self, order_id: str, now) -> bool:
        """True while another order's negotiation could still claim this machine.

        A booked workpiece blocks the machine until its departure is known,
        and an outstanding offer may yet turn into such a booking whose tail
        would run into anything promised after it.  Either way the machine
        serves one order at a time and queues the rest.
        """
        if self.blocked and self.schedule.open_tail_for(order_id) is None:
            return True
        self.holds.purge(now)
        self._offers = {pid: o for pid, o in self._offers.items() if pid in self.holds}
        return any(
            parse_conversation(o.conv)[0] != order_id for o in self._offers.values()
        )

    def _setup(self, from_state: str, to_state: str) -> Seconds:
        return self.config.setup.get(from_state, {}).get(to_state, 0)

    def _succ_setup(self, new_state: str, succ: BookingEntry) -> Seconds:
        # a maintenance window demands its end_state just like a job does, so
        # finishing in the wrong state in front of one costs a changeover too
        return self._setup(new_state, succ.end_state)

    def _state_before(self, t: Seconds, assume_closed: frozenset[str]) -> str:
        state = self.config.initial_state
        for e in self.schedule.entries:
            end = e.span_end
            if e.open_tail and e.order_id not in assume_closed:
                break
            if end <= t:
                state = e.end_state
            else:
                break
        return state

    def _gaps(self, product: str, conv: str, now, assume_closed: frozenset[str]) -> list[_Gap]:
        extra = self.holds.active_spans(now, exclude_conversation=conv)
        free = self.schedule.free_intervals(_ALL, extra_busy=extra, assume_closed=assume_closed)
        out = []
        for iv in free:
            succ = self.schedule.entry_at_or_after(iv.end)
            end, ti = iv.end, 0
            if succ is not None:
                setup_iv = succ.setup_interval
                if setup_iv is not None and setup_iv.start == iv.end:
                    # gap bounded by the successor's movable changeover
                    new_setup = self._setup(product, succ.end_state)
                    ti = new_setup - setup_iv.duration
                    end = succ.core_start - new_setup
                elif setup_iv is None and succ.span_start == iv.end:
                    # successor currently needs no changeover; booking this
                    # product before it may introduce one
                    new_setup = self._setup(product, succ.end_state)
                    if new_setup:
                        ti = new_setup
                        end = succ.span_start - new_setup
            if end <= iv.start:
                continue
            out.append(
                _Gap(
                    start=iv.start,
                    end=end,
                    from_state=self._state_before(iv.start, assume_closed),
                    ti_next=ti,
                    bounded=end < HORIZON,
                )
            )
        return out

    # -- event handling ----------------------------------------------------

    def handle(self, event, ctx) -> list[Message]:
        if isinstance(event, Message):
            out: list[Message] = []
            released = False
            for part in event.parts:
                if isinstance(part, Cfp):
                    out.extend(self._on_cfp(event, part, ctx))
                elif isinstance(part, AcceptProposal):
                    out.extend(self._on_accept(event, part, ctx))
                elif isinstance(part, RejectProposal):
                    self._release(part.proposal_id)
                    released = True
                elif isinstance(part, InformDeparture):
                    out.extend(self._on_departure(event, part, ctx))
                else:
                    log.warning("%s: unexpected %s", self.agent_id, type(part).__name__)
            if released:
                out.extend(self._drain(ctx))
            return out
        return []

    def _on_cfp(self, msg: Message, cfp: Cfp, ctx) -> list[Message]:
        if cfp.deadline and cfp.deadline <= ctx.now():
            return []  # answered too late to matter (e.g. drained after blocking)
        if self._engaged_elsewhere(cfp.workpiece.order_id, ctx.now()):
            # blocked for further negotiations: queue, answer after the
            # engagement resolves (departure, rejection, or hold expiry)
            self._deferred.append(msg)
            return []
        proposals = self._make_proposals(cfp, msg.conversation_id, ctx)
        if not proposals:
            return []  # absence is refusal; the order's deadline handles it
        return [_envelope(self.agent_id, msg.sender, msg.conversation_id, proposals)]

    def _make_proposals(self, cfp: Cfp, conv: str, ctx) -> list[Proposal]:
        product = cfp.workpiece.product
        op_dur = self.config.op_duration.get(product)
        if op_dur is None:
            return []
        order_id = cfp.workpiece.order_id
        tail = self.schedule.open_tail_for(order_id)
        own = tail is not None
        assume = frozenset({order_id}) if own else frozenset()
        entry_stage = cfp.workpiece.location is None
        unload = 0 if (entry_stage or own) else self.config.unload_estimate
        load_est = self.config.load_estimate
        _order, stage = parse_conversation(conv)
        step_label = str((stage or 0) + 1)
        now = ctx.now()
        proposals: list[Proposal] = []
        for alt_idx, alt in enumerate(cfp.alternatives):
            # the requested es includes a transport estimate; when the piece is
            # already sitting on this machine it is available at operation end
            es = tail.operation_end if own and tail is not None else alt.windows.es
            ls, lf = alt.windows.ls, alt.windows.lf
            emitted = 0
            for gap in self._gaps(product, conv, now, assume):
                if own and tail is not None and gap.start != tail.operation_end:
                    # the workpiece sits on this machine and can only wait in
                    # place: any slot beyond the next booking is unreachable
                    continue
                setup = self._setup(gap.from_state, product)
                prefix = setup + unload
                op_start = max(es, gap.start + prefix)
                if ls is not None and op_start > ls:
                    break
                op_end = op_start + op_dur
                if lf is not None and op_end > lf:
                    break
                if op_end + load_est > gap.end:
                    continue
                slack_after = _slack_from(
                    gap,
                    op_end + load_est,
                    ls + op_dur + load_est if ls is not None else None,
                    lf + load_est if lf is not None else None,
                )
                self._seq += 1
                pid = f"{self.agent_id}#p{self._seq}"
                block_start = op_start - prefix
                proposal = Proposal(
                    proposal_id=pid,
                    kind=PRODUCTION,
                    resource_id=self.agent_id,
                    location=self.config.location,
                    slot=TimeInterval(op_start, op_end),
                    slack_before=Slack(block_start - gap.start),
                    slack_after=slack_after,
                    op_duration=op_dur,
                    load_time=load_est,
                    unload_time=unload,
                    price=proposal_price(op_dur, setup, gap.ti_next),
                    alternative=alt_idx,
                )
                proposals.append(proposal)
                self._offers[pid] = _Offer(
                    proposal, conv, step_label, product=product, setup=setup, unload=unload
                )
                self.holds.add(
                    OfferHold(
                        proposal_id=pid,
                        span=TimeInterval(block_start, op_end + load_est),
                        conversation_id=conv,
                        deadline=now + ctx.hold_deadline,
                    )
                )
                emitted += 1
                if emitted >= self.config.max_slots_per_cfp:
                    break
        return proposals

    def _on_accept(self, msg: Message, acc: AcceptProposal, ctx) -> list[Message]:
        offer = self._offers.pop(acc.proposal_id, None)
        hold = self.holds.take(acc.proposal_id, ctx.now())
        if offer is None or hold is None:
            return [
                _failure(
                    self.agent_id,
                    msg.sender,
                    msg.conversation_id,
                    acc.proposal_id,
                    "offer unknown or hold expired",
                )
            ]
        p = offer.proposal
        booked = acc.booked_slot
        order_id, _ = parse_conversation(msg.conversation_id)

        def fail(reason: str) -> list[Message]:
            return [
                _failure(self.agent_id, msg.sender, msg.conversation_id, acc.proposal_id, reason)
            ]

        if booked.duration != p.op_duration:
            return fail("operation duration mismatch")
        if booked.start < p.slot.start:
            return fail("booked earlier than offered")
        latest = p.slack_after.bound_from(p.slot.start)
        if latest is not None and booked.start > latest:
            return fail("booked outside the offered slack")

        # close our own tail first when the workpiece stays on this machine
        tail = self.schedule.open_tail_for(order_id)
        unload = acc.actual_unload_time if offer.unload else 0
        from_state = self._state_before(
            booked.start, frozenset({order_id}) if tail else frozenset()
        )
        setup = self._setup(from_state, offer.product)
        block_start = booked.start - unload - setup
        if tail is not None:
            try:
                self.schedule.close_open_tail(order_id, block_start, 0)
            except (OverlapError, NoOpenTail) as exc:
                return fail(str(exc))
        segments: list[tuple[str, TimeInterval]] = []
        t = block_start
        if setup:
            segments.append(("setup", TimeInterval(t, t + setup)))
            t += setup
        if unload:
            segments.append(("unload", TimeInterval(t, t + unload)))
            t += unload
        segments.append(("operation", booked))
        entry = BookingEntry(
            order_id=order_id,
            step_label=offer.step_label,
            segments=segments,
            open_tail=True,
            end_state=offer.product,
        )
        try:
            self.schedule.insert_booking(entry, successor_setup=self._succ_setup)
        except (OverlapError, ValueError) as exc:
            return fail(str(exc))
        if hasattr(ctx, "record_commit"):
            ctx.record_commit(self.agent_id, entry)
        return []

    def _on_departure(self, msg: Message, info: InformDeparture, ctx) -> list[Message]:
        try:
            self.schedule.close_open_tail(info.order_id, info.departure, info.loading_time)
        except NoOpenTail:
            pass  # e.g. a stay-on-machine accept already closed it
        except OverlapError as exc:
            log.warning("%s: departure rejected: %s", self.agent_id, exc)
            return []
        return self._drain(ctx)

    def _drain(self, ctx) -> list[Message]:
        """Re-run queued calls once an engagement resolves; still-engaged ones requeue."""
        if self.blocked or not self._deferred:
            return []
        pending, self._deferred = self._deferred, []
        out: list[Message] = []
        for queued in pending:
            for part in queued.parts:
                if isinstance(part, Cfp):
                    out.extend(self._on_cfp(queued, part, ctx))
        return out

    def _release(self, proposal_id: str) -> None:
        self._offers.pop(proposal_id, None)
        self.holds.release(proposal_id)


# ---------------------------------------------------------------------------
# buffer agent


@dataclass
class BufferConfig:
    agent_id: str
    location: tuple[float, float]
    capacity: int = 1
    unload_estimate: Seconds = 0
    load_estimate: Seconds = 0


class BufferAgent:
    """A capacity-1 buffer place offering decoupling slots."""

    def __init__(self, config: BufferConfig):
        if config.capacity != 1:
            raise ValueError("buffer places have capacity 1; model more places instead")
        self.config = config
        self.agent_id = config.agent_id
        self.schedule = ResourceSchedule()
        self.holds = HoldBook()
        self._offers: dict[str, _Offer] = {}
        self._seq = 0

    def handle(self, event, ctx) -> list[Message]:
        if not isinstance(event, Message):
            return []
        out: list[Message] = []
        for part in event.parts:
            if isinstance(part, Cfp):
                proposals = self._make_proposals(event, part, ctx)
                if proposals:
                    out.append(
                        _envelope(self.agent_id, event.sender, event.conversation_id, proposals)
                    )
            elif isinstance(part, AcceptProposal):
                out.extend(self._on_accept(event, part, ctx))
            elif isinstance(part, RejectProposal):
                self._offers.pop(part.proposal_id, None)
                self.holds.release(part.proposal_id)
        return out

    def _make_proposals(self, msg: Message, cfp: Cfp, ctx) -> list[Proposal]:
        now = ctx.now()
        conv = msg.conversation_id
        self.holds.purge(now)
        self._offers = {pid: o for pid, o in self._offers.items() if pid in self.holds}
        _order, stage = parse_conversation(conv)
        step_label = f"B{(stage or 0) + 1}"
        u_est, l_est = self.config.unload_estimate, self.config.load_estimate
        extra = self.holds.active_spans(now, exclude_conversation=conv)
        free = self.schedule.free_intervals(_ALL, extra_busy=extra)
        proposals: list[Proposal] = []
        for alt_idx, alt in enumerate(cfp.alternatives):
            w = alt.windows
            for iv in free:
                start = max(w.es, iv.start + u_est)
                if w.ls is not None and start > w.ls:
                    break
                end = max(w.ef, start)
                if w.lf is not None and end > w.lf:
                    break
                if end + l_est > iv.end:
                    continue
                gap = _Gap(iv.start, iv.end, "", 0, bounded=iv.end < HORIZON)
                slack_after = _slack_from(
                    gap, end + l_est, w.lf + l_est if w.lf is not None else None
                )
                self._seq += 1
                pid = f"{self.agent_id}#p{self._seq}"
                proposal = Proposal(
                    proposal_id=pid,
                    kind=BUFFER,
                    resource_id=self.agent_id,
                    location=self.config.location,
                    slot=TimeInterval(start, end),
                    slack_before=Slack(start - u_est - iv.start),
                    slack_after=slack_after,
                    op_duration=end - start,
                    load_time=l_est,
                    unload_time=u_est,
                    price=0,
                    alternative=alt_idx,
                    connected_operations=(alt.realizes,) if alt.realizes else (),
                )
                proposals.append(proposal)
                self._offers[pid] = _Offer(proposal, conv, step_label)
                self.holds.add(
                    OfferHold(
                        proposal_id=pid,
                        span=TimeInterval(max(0, start - u_est), end + l_est),
                        conversation_id=conv,
                        deadline=now + ctx.hold_deadline,
                    )
                )
                break  # earliest feasible slot per alternative
        return proposals

    def _on_accept(self, msg: Message, acc: AcceptProposal, ctx) -> list[Message]:
        offer = self._offers.pop(acc.proposal_id, None)
        hold = self.holds.take(acc.proposal_id, ctx.now())
        if offer is None or hold is None:
            return [
                _failure(
                    self.agent_id,
                    msg.sender,
                    msg.conversation_id,
                    acc.proposal_id,
                    "offer unknown or hold expired",
                )
            ]
        p = offer.proposal
        resident = acc.booked_slot

        def fail(reason: str) -> list[Message]:
            return [
                _failure(self.agent_id, msg.sender, msg.conversation_id, acc.proposal_id, reason)
            ]

        if resident.start < p.slot.start:
            return fail("arrival earlier than the offered slot")
        latest = p.slack_after.bound_from(p.slot.end)
        if latest is not None and resident.end > latest:
            return fail("pickup outside the offered slack")
        u, l = acc.actual_unload_time, acc.actual_load_time
        order_id, _ = parse_conversation(msg.conversation_id)
        segments: list[tuple[str, TimeInterval]] = []
        if u:
            segments.append(("unload", TimeInterval(resident.start - u, resident.start)))
        if not resident.is_empty():
            segments.append(("buffer-hold", resident))
        if l:
            segments.append(("load", TimeInterval(resident.end, resident.end + l)))
        if not segments:
            return fail("empty buffering interval")
        entry = BookingEntry(
            order_id=order_id,
            step_label=offer.step_label,
            segments=segments,
            open_tail=False,
            end_state="",
        )
        try:
            self.schedule.insert_booking(entry)
        except (OverlapError, ValueError) as exc:
            return fail(str(exc))
        if hasattr(ctx, "record_commit"):
            ctx.record_commit(self.agent_id, entry)
        return []


# ---------------------------------------------------------------------------
# transport agent


@dataclass
class TransportConfig:
    agent_id: str
    geometry: TransportGeometry
    initial_x: float = 0.0


class TransportAgent:
    """One crane/vehicle on a 1-D segment; prices setup travel explicitly."""

    def __init__(self, config: TransportConfig):
        self.config = config
        self.agent_id = config.agent_id
        self.schedule = ResourceSchedule()
        self.holds = HoldBook()
        self._offers: dict[str, _Offer] = {}
        self._pickup_x: dict[tuple[str, str], float] = {}
        self._committed_pids: set[str] = set()
        self._seq = 0

    # crane position after the bookings preceding t
    def _x_before(self, t: Seconds) -> float:
        x = self.config.initial_x
        for e in self.schedule.entries:
            if e.span_end <= t:
                try:
                    x = float(e.end_state)
                except ValueError:
                    pass
            else:
                break
        return x

    def _succ_setup(self, new_state: str, succ: BookingEntry) -> Seconds:
        pickup = self._pickup_x.get((succ.order_id, succ.step_label))
        if pickup is None:
            return succ.setup_interval.duration if succ.setup_interval else 0
        return self.config.geometry.travel_seconds(float(new_state), pickup)

    def _gaps(self, drop_x: float, conv: str, now) -> list[_Gap]:
        extra = self.holds.active_spans(now, exclude_conversation=conv)
        free = self.schedule.free_intervals(_ALL, extra_busy=extra)
        out = []
        for iv in free:
            succ = self.schedule.entry_at_or_after(iv.end)
            end, ti = iv.end, 0
            boundary = succ is not None and (
                succ.span_start == iv.end
                or (succ.setup_interval is not None and succ.setup_interval.start == iv.end)
            )
            if succ is not None and boundary:
                pickup = self._pickup_x.get((succ.order_id, succ.step_label))
                if pickup is not None:
                    new_setup = self.config.geometry.travel_seconds(drop_x, pickup)
                    old = succ.setup_interval.duration if succ.setup_interval else 0
                    ti = new_setup - old
                    end = succ.core_start - new_setup
            if end <= iv.start:
                continue
            out.append(
                _Gap(iv.start, end, "", ti, bounded=end < HORIZON)
            )
        return out

    def handle(self, event, ctx) -> list[Message]:
        if not isinstance(event, Message):
            return []
        out: list[Message] = []
        accept_failed = False
        for part in event.parts:
            if isinstance(part, Cfp):
                proposals = self._make_proposals(event, part, ctx)
                if proposals:
                    out.append(
                        _envelope(self.agent_id, event.sender, event.conversation_id, proposals)
                    )
            elif isinstance(part, AcceptProposal):
                if accept_failed:
                    # linked accepts in one envelope commit or fail as a unit
                    self._offers.pop(part.proposal_id, None)
                    self.holds.release(part.proposal_id)
                    out.append(
                        _failure(
                            self.agent_id,
                            event.sender,
                            event.conversation_id,
                            part.proposal_id,
                            "a linked movement in the same commit failed",
                        )
                    )
                    continue
                failures = self._on_accept(event, part, ctx)
                accept_failed = accept_failed or bool(failures)
                out.extend(failures)
            elif isinstance(part, RejectProposal):
                self._offers.pop(part.proposal_id, None)
                self.holds.release(part.proposal_id)
        return out

    def _make_proposals(self, msg: Message, cfp: Cfp, ctx) -> list[Proposal]:
        geom = self.config.geometry
        now = ctx.now()
        conv = msg.conversation_id
        self.holds.purge(now)
        self._offers = {pid: o for pid, o in self._offers.items() if pid in self.holds}
        _order, stage = parse_conversation(conv)
        i = (stage or 0) + 1
        # legs that some other leg chains onto head into a buffer
        chain_targets = {leg.chain_after for leg in cfp.legs if leg.chain_after is not None}
        proposals: list[Proposal] = []
        emitted_by_leg: dict[int, Proposal] = {}
        for leg_idx, leg in enumerate(cfp.legs):
            fx, tx = leg.from_location[0], leg.to_location[0]
            if not (geom.covers(fx) and geom.covers(tx)):
                continue
            if leg.via is not None:
                label = f"T:B{i},{i}"
            elif leg_idx in chain_targets:
                label = f"T:{i - 1},B{i}"
            else:
                label = f"T:{i - 1},{i}"
            travel = geom.travel_seconds(fx, tx)
            dur = geom.load_time + travel + geom.unload_time
            made = self._place_leg(leg, leg_idx, label, dur, fx, tx, conv, now, ctx)
            if made is not None:
                proposals.append(made)
                emitted_by_leg[leg_idx] = made
            # chained variant: departing right where a partner leg drops off
            if leg.chain_after is not None:
                partner = emitted_by_leg.get(leg.chain_after)
                if partner is not None and abs(
                    self._offers[partner.proposal_id].drop_x - fx
                ) < 1e-9:
                    chained = self._place_leg(
                        leg, leg_idx, label, dur, fx, tx, conv, now, ctx, after=partner
                    )
                    if chained is not None and (
                        made is None or chained.slot != made.slot or chained.price != made.price
                    ):
                        proposals.append(chained)
        return proposals

    def _place_leg(
        self,
        leg: TransportLeg,
        leg_idx: int,
        step_label: str,
        dur: Seconds,
        fx: float,
        tx: float,
        conv: str,
        now,
        ctx,
        after: Optional[Proposal] = None,
    ) -> Optional[Proposal]:
        geom = self.config.geometry
        w = leg.windows
        for gap in self._gaps(tx, conv, now):
            if after is not None:
                if not (gap.start <= after.slot.start and after.slot.end <= gap.end):
                    continue
                setup = 0
                floor = after.slot.end
            else:
                pred_x = self._x_before(gap.start)
                setup = geom.travel_seconds(pred_x, fx)
                floor = gap.start + setup
            load_start = max(w.es, w.ef - dur, floor)
            if w.ls is not None and load_start > w.ls:
                break
            end = load_start + dur
            if w.lf is not None and end > w.lf:
                break
            if end > gap.end:
                continue
            slack_after = _slack_from(
                gap,
                end,
                w.ls + dur if w.ls is not None else None,
                w.lf,
            )
            self._seq += 1
            pid = f"{self.agent_id}#p{self._seq}"
            proposal = Proposal(
                proposal_id=pid,
                kind=TRANSPORT,
                resource_id=self.agent_id,
                location=(fx, leg.from_location[1]),
                slot=TimeInterval(load_start, end),
                slack_before=Slack(max(0, load_start - setup - gap.start)),
                slack_after=slack_after,
                op_duration=dur,
                load_time=geom.load_time,
                unload_time=geom.unload_time,
                price=proposal_price(dur, setup, gap.ti_next),
                alternative=0,
                leg=LegRef(leg_idx, leg.from_resource, leg.to_resource, leg.realizes, leg.via),
                required_operation=after.proposal_id if after is not None else None,
            )
            self._offers[pid] = _Offer(
                proposal,
                conv,
                step_label,
                setup=setup,
                pickup_x=fx,
                drop_x=tx,
            )
            self.holds.add(
                OfferHold(
                    proposal_id=pid,
                    span=TimeInterval(max(0, load_start - setup), end),
                    conversation_id=conv,
                    deadline=now + ctx.hold_deadline,
                )
            )
            return proposal
        return None

    def _on_accept(self, msg: Message, acc: AcceptProposal, ctx) -> list[Message]:
        offer = self._offers.pop(acc.proposal_id, None)
        hold = self.holds.take(acc.proposal_id, ctx.now())
        if offer is None or hold is None:
            return [
                _failure(
                    self.agent_id,
                    msg.sender,
                    msg.conversation_id,
                    acc.proposal_id,
                    "offer unknown or hold expired",
                )
            ]
        p = offer.proposal
        booked = acc.booked_slot

        def fail(reason: str) -> list[Message]:
            return [
                _failure(self.agent_id, msg.sender, msg.conversation_id, acc.proposal_id, reason)
            ]

        if booked.duration != p.op_duration:
            return fail("transport duration mismatch")
        if booked.start < p.slot.start:
            return fail("booked earlier than offered")
        latest = p.slack_after.bound_from(p.slot.start)
        if latest is not None and booked.start > latest:
            return fail("booked outside the offered slack")
        if p.required_operation is not None:
            if (
                p.required_operation not in self._committed_pids
                and p.required_operation not in acc.dependent_proposal_ids
            ):
                return fail("required preceding movement was not committed")

        geom = self.config.geometry
        order_id, _ = parse_conversation(msg.conversation_id)
        pred_x = self._x_before(booked.start)
        setup = geom.travel_seconds(pred_x, offer.pickup_x)
        travel = geom.travel_seconds(offer.pickup_x, offer.drop_x)
        segments: list[tuple[str, TimeInterval]] = []
        t = booked.start - setup
        if setup:
            segments.append(("travel", TimeInterval(t, booked.start)))
        t = booked.start
        segments.append(("load", TimeInterval(t, t + geom.load_time)))
        t += geom.load_time
        if travel:
            segments.append(("travel", TimeInterval(t, t + travel)))
            t += travel
        segments.append(("unload", TimeInterval(t, t + geom.unload_time)))
        entry = BookingEntry(
            order_id=order_id,
            step_label=offer.step_label,
            segments=segments,
            open_tail=False,
            end_state=f"{offer.drop_x:g}",
        )
        try:
            self.schedule.insert_booking(
                entry, successor_setup=self._succ_setup
            )
        except (OverlapError, ValueError) as exc:
            return fail(str(exc))
        self._pickup_x[(order_id, offer.step_label)] = offer.pickup_x
        self._committed_pids.add(acc.proposal_id)
        if hasattr(ctx, "record_commit"):
            ctx.record_commit(self.agent_id, entry)
        return []


# ---------------------------------------------------------------------------
# order agent


@dataclass
class StageCommit:
    resource_id: str
    location: tuple[float, float]
    op_slot: TimeInterval
    slack_after: Slack
    route_kind: str
    transport_slots: tuple[tuple[str, TimeInterval], ...] = ()
    buffer_slot: Optional[tuple[str, TimeInterval]] = None


@dataclass
class OrderConfig:
    order_id: str
    product: str
    plan: tuple[str, ...]  # operation names, in order
    arrival: Seconds = 0


class _NegCtx:
    """Context handed to the stage machine: timers plus the kernel services."""

    def __init__(self, oa: "OrderAgent", kernel_ctx):
        self.oa = oa
        self.kernel = kernel_ctx

    def now(self):
        return self.kernel.now()

    def set_timer_for_stage(self, neg: StageNegotiation) -> int:
        return self.kernel.set_timer(self.kernel.cfp_deadline)


class OrderAgent:
    """Drives one order through its plan, stage by stage."""

    def __init__(self, config: OrderConfig, params: ScheduleParams):
        self.config = config
        self.params = params
        self.agent_id = config.order_id
        self.status = "pending"  # pending -> running -> done | failed
        self.stage_index = 0
        self.committed: list[StageCommit] = []
        self.neg: Optional[StageNegotiation] = None
        self.t_start = None
        self.t_end = None
        self.diagnostic: Optional[str] = None
        self._buffered: frozenset[str] = frozenset()
        self._selection = None

    # -- kernel event entry -------------------------------------------------

    def handle(self, event, ctx) -> list[Message]:
        if self.status in ("done", "failed"):
            return []
        if isinstance(event, StartOrder):
            self.status = "running"
            self.t_start = ctx.now()
            return self._start_stage(ctx)
        if isinstance(event, DeadlineExpired):
            return self._drive(event, ctx)
        if isinstance(event, Message):
            for part in event.parts:
                if isinstance(part, InformFailure):
                    _, failed_stage = parse_conversation(event.conversation_id)
                    if failed_stage is not None and len(self.committed) > failed_stage:
                        # that stage's decision was recorded before the refusal
                        # came back; drop it (and anything chained on top) so
                        # the abort frees the machine actually holding the piece
                        del self.committed[failed_stage:]
                    return self._abort(
                        ctx, f"commit refused by {event.sender}: {part.reason}"
                    )
            return self._drive(event, ctx)
        return []

    def _start_stage(self, ctx) -> list[Message]:
        self.neg = StageNegotiation(order_id=self.agent_id, stage_index=self.stage_index)
        self._buffered = frozenset()
        self._selection = None
        return self._drive(StartStage(), ctx)

    def _drive(self, event, ctx) -> list[Message]:
        if self.neg is None:
            return []
        out = advance_stage(self.neg, event, self, _NegCtx(self, ctx))
        neg = self.neg
        if neg is not None and neg.is_terminal():
            if neg.phase is Phase.FAILED:
                out.extend(self._on_stage_failed(ctx))
            else:
                # chains into the next stage (recursing through _start_stage)
                out.extend(self._on_stage_done(ctx))
        return out

    def _on_stage_done(self, ctx) -> list[Message]:
        self.stage_index += 1
        if self.stage_index >= len(self.config.plan):
            self.status = "done"
            self.t_end = ctx.now()
            self.neg = None
            return []
        return self._start_stage(ctx)

    def _on_stage_failed(self, ctx) -> list[Message]:
        reason = self.neg.failure_reason if self.neg else "unknown"
        return self._abort(ctx, f"stage {self.stage_index + 1}: {reason}")

    def _abort(self, ctx, reason: str) -> list[Message]:
        self.status = "failed"
        self.diagnostic = reason
        self.t_end = ctx.now()
        self.neg = None
        out: list[Message] = []
        if self.committed:
            # free the machine still holding (or believed to hold) the piece;
            # a resource without a matching open tail simply ignores this
            last_stage = len(self.committed) - 1
            commit = self.committed[-1]
            out.append(
                _envelope(
                    self.agent_id,
                    commit.resource_id,
                    conversation_id(self.agent_id, last_stage),
                    [
                        InformDeparture(
                            order_id=self.agent_id,
                            departure=commit.op_slot.end,
                            loading_time=0,
                        )
                    ],
                )
            )
        log.info("order %s failed: %s", self.agent_id, reason)
        return out

    # -- planner interface (called by advance_stage) -------------------------

    @property
    def _prev(self) -> Optional[StageCommit]:
        return self.committed[-1] if self.committed else None

    @property
    def _f_prev(self) -> Seconds:
        prev = self._prev
        return prev.op_slot.end if prev is not None else self.config.arrival

    @property
    def _st_prev(self) -> Slack:
        prev = self._prev
        return prev.slack_after if prev is not None else Slack.UNBOUNDED

    def plan_production(self, neg: StageNegotiation, nctx: _NegCtx) -> RoundPlan:
        ctx = nctx.kernel
        operation = self.config.plan[neg.stage_index]
        responders = ctx.directory.search(operation)
        if not responders:
            return RoundPlan([], set())
        prev = self._prev
        if prev is None:
            es = self.config.arrival
            location = None
        else:
            es = self._f_prev + self.params.t_transport_min
            location = prev.location
        windows = StageWindows(es=es, ef=es)
        cfp = Cfp(
            kind=PRODUCTION,
            workpiece=self._workpiece(location),
            operation=operation,
            alternatives=(CfpAlternative(windows=windows),),
            deadline=ctx.now() + ctx.cfp_deadline,
        )
        msgs = [
            _envelope(self.agent_id, rid, neg.conversation, [cfp]) for rid in responders
        ]
        return RoundPlan(msgs, set(responders))

    def _workpiece(self, location):
        return WorkpieceInfo(
            order_id=self.agent_id, product=self.config.product, location=location
        )

    def plan_buffer(self, neg: StageNegotiation, nctx: _NegCtx) -> Optional[RoundPlan]:
        ctx = nctx.kernel
        prev = self._prev
        if prev is None:
            return None
        buffered = set()
        alternatives = []
        for p in neg.proposals[PRODUCTION]:
            if p.resource_id == prev.resource_id:
                continue  # stays on the machine, nothing to buffer
            if calculus.needs_buffering(
                self._f_prev, p.slot.start, self.params.t_transport_min, self.params
            ):
                buffered.add(p.proposal_id)
                try:
                    windows = calculus.buffer_windows(
                        self._f_prev,
                        SlotCommitment(p.slot.start, p.slot.end, p.slack_after),
                        self.params,
                    )
                except InfeasibleWindow:
                    buffered.discard(p.proposal_id)
                    continue
                alternatives.append(CfpAlternative(windows=windows, realizes=p.proposal_id))
        self._buffered = frozenset(buffered)
        if not alternatives:
            return None
        responders = ctx.directory.search("buffer")
        if not responders:
            return None
        cfp = Cfp(
            kind=BUFFER,
            workpiece=self._workpiece(prev.location),
            operation="buffer",
            alternatives=tuple(alternatives),
            deadline=ctx.now() + ctx.cfp_deadline,
        )
        msgs = [
            _envelope(self.agent_id, rid, neg.conversation, [cfp]) for rid in responders
        ]
        return RoundPlan(msgs, set(responders))

    def plan_transport(self, neg: StageNegotiation, nctx: _NegCtx) -> Optional[RoundPlan]:
        ctx = nctx.kernel
        prev = self._prev
        if prev is None:
            return None
        legs: list[TransportLeg] = []
        buffers_by_realizes: dict[str, list[Proposal]] = {}
        for b in neg.proposals[BUFFER]:
            if b.connected_operations:
                buffers_by_realizes.setdefault(b.connected_operations[0], []).append(b)
        for p in neg.proposals[PRODUCTION]:
            if p.resource_id == prev.resource_id:
                continue
            prod_slot = SlotCommitment(p.slot.start, p.slot.end, p.slack_after)
            if p.proposal_id in self._buffered:
                for b in buffers_by_realizes.get(p.proposal_id, []):
                    buf_slot = SlotCommitment(b.slot.start, b.slot.end, b.slack_after)
                    try:
                        w_in = calculus.transport_to_buffer_windows(
                            self._f_prev, self._st_prev, buf_slot, prod_slot, self.params
                        )
                        w_out = calculus.transport_from_buffer_windows(
                            self._f_prev, buf_slot, prod_slot, self.params
                        )
                    except InfeasibleWindow:
                        continue
                    inbound_idx = len(legs)
                    legs.append(
                        TransportLeg(
                            from_resource=prev.resource_id,
                            to_resource=b.resource_id,
                            from_location=prev.location,
                            to_location=b.location,
                            windows=w_in,
                            realizes=b.proposal_id,
                        )
                    )
                    legs.append(
                        TransportLeg(
                            from_resource=b.resource_id,
                            to_resource=p.resource_id,
                            from_location=b.location,
                            to_location=p.location,
                            windows=w_out,
                            realizes=p.proposal_id,
                            via=b.proposal_id,
                            chain_after=inbound_idx,
                        )
                    )
            else:
                try:
                    w = calculus.transport_direct_windows(
                        self._f_prev, self._st_prev, prod_slot, self.params
                    )
                except InfeasibleWindow:
                    continue
                legs.append(
                    TransportLeg(
                        from_resource=prev.resource_id,
                        to_resource=p.resource_id,
                        from_location=prev.location,
                        to_location=p.location,
                        windows=w,
                        realizes=p.proposal_id,
                    )
                )
        if not legs:
            return None
        responders = ctx.directory.search("transport")
        if not responders:
            return None
        cfp = Cfp(
            kind=TRANSPORT,
            workpiece=self._workpiece(prev.location),
            operation="transport",
            legs=tuple(legs),
            deadline=ctx.now() + ctx.cfp_deadline,
        )
        msgs = [
            _envelope(self.agent_id, rid, neg.conversation, [cfp]) for rid in responders
        ]
        return RoundPlan(msgs, set(responders))

    def decide(self, neg: StageNegotiation, nctx: _NegCtx):
        sctx = StageContext(
            f_prev=self._f_prev,
            prev_resource=self._prev.resource_id if self._prev else None,
            buffered=self._buffered,
        )
        ocs = build_ocs(
            neg.proposals[PRODUCTION], neg.proposals[BUFFER], neg.proposals[TRANSPORT], sctx
        )
        selection = select(ocs, sctx)
        if selection is None:
            return StageFailure("no feasible operation combination")
        p = selection.winner.production
        route = selection.route
        arrival = route.arrival
        op_start = p.slot.start if arrival is None else max(p.slot.start, arrival)
        op_slot = TimeInterval(op_start, op_start + p.op_duration)

        accepts: list[Message] = []
        transport_slots: list[tuple[str, TimeInterval]] = []
        buffer_slot = None
        inbound_unload = 0
        by_resource: dict[str, list[AcceptProposal]] = {}

        if route.kind == "buffered":
            leg_in, leg_out = route.legs
            buf = route.buffer
            assert buf is not None
            inbound_unload = leg_out.unload_time
            resident = TimeInterval(leg_in.slot.end, leg_out.slot.start)
            by_resource.setdefault(leg_in.resource_id, []).append(
                AcceptProposal(leg_in.proposal_id, leg_in.slot)
            )
            by_resource.setdefault(leg_out.resource_id, []).append(
                AcceptProposal(
                    leg_out.proposal_id,
                    leg_out.slot,
                    dependent_proposal_ids=(leg_in.proposal_id,)
                    if leg_out.required_operation
                    else (),
                )
            )
            by_resource.setdefault(buf.resource_id, []).append(
                AcceptProposal(
                    buf.proposal_id,
                    resident,
                    actual_unload_time=leg_in.unload_time,
                    actual_load_time=leg_out.load_time,
                )
            )
            transport_slots = [
                (leg_in.resource_id, leg_in.slot),
                (leg_out.resource_id, leg_out.slot),
            ]
            buffer_slot = (buf.resource_id, resident)
        elif route.kind == "direct":
            (leg,) = route.legs
            inbound_unload = leg.unload_time
            by_resource.setdefault(leg.resource_id, []).append(
                AcceptProposal(leg.proposal_id, leg.slot)
            )
            transport_slots = [(leg.resource_id, leg.slot)]

        by_resource.setdefault(p.resource_id, []).append(
            AcceptProposal(
                p.proposal_id,
                op_slot,
                actual_unload_time=inbound_unload,
            )
        )
        for rid in sorted(by_resource):
            accepts.append(_envelope(self.agent_id, rid, neg.conversation, by_resource[rid]))

        reject_by_resource: dict[str, list[RejectProposal]] = {}
        accepted_ids = {a.proposal_id for parts in by_resource.values() for a in parts}
        for prop in neg.all_proposals():
            if prop.proposal_id not in accepted_ids:
                reject_by_resource.setdefault(prop.resource_id, []).append(
                    RejectProposal(prop.proposal_id)
                )
        rejects = [
            _envelope(self.agent_id, rid, neg.conversation, parts)
            for rid, parts in sorted(reject_by_resource.items())
        ]

        informs: list[Message] = []
        prev = self._prev
        if prev is not None:
            if route.kind == "stay-on-machine":
                informs.append(
                    _envelope(
                        self.agent_id,
                        prev.resource_id,
                        neg.conversation,
                        [
                            InformDeparture(
                                order_id=self.agent_id,
                                departure=op_slot.start,
                                loading_time=0,
                                stay_on_machine=True,
                            )
                        ],
                    )
                )
            else:
                first_leg = route.legs[0]
                informs.append(
                    _envelope(
                        self.agent_id,
                        prev.resource_id,
                        neg.conversation,
                        [
                            InformDeparture(
                                order_id=self.agent_id,
                                departure=first_leg.slot.start + first_leg.load_time,
                                loading_time=first_leg.load_time,
                            )
                        ],
                    )
                )

        informs_post: list[Message] = []
        if neg.stage_index == len(self.config.plan) - 1:
            # final stage: the workpiece leaves the system at operation end
            informs_post.append(
                _envelope(
                    self.agent_id,
                    p.resource_id,
                    neg.conversation,
                    [
                        InformDeparture(
                            order_id=self.agent_id,
                            departure=op_slot.end,
                            loading_time=0,
                        )
                    ],
                )
            )

        latest = p.slack_after.bound_from(p.slot.start)
        slack_after = Slack.UNBOUNDED if latest is None else Slack(latest - op_start)
        self.committed.append(
            StageCommit(
                resource_id=p.resource_id,
                location=p.location,
                op_slot=op_slot,
                slack_after=slack_after,
                route_kind=route.kind,
                transport_slots=tuple(transport_slots),
                buffer_slot=buffer_slot,
            )
        )
        return StageDecision(
            accepts=accepts, rejects=rejects, informs=informs, informs_post=informs_post
        )
