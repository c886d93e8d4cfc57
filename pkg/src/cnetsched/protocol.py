"""Extended contract-net vocabulary and the per-stage negotiation state machine.

Six payload kinds travel between agents: Cfp, Proposal, AcceptProposal,
RejectProposal, InformDeparture, InformFailure. An envelope (Message) carries
one or more payloads of one kind to one receiver; aggregation is what keeps
message growth linear in the number of contacted resources.

StageNegotiation is a deterministic state machine: feeding it the same event
sequence always yields the same transitions and the same outgoing envelopes.
The decision logic itself (which CFPs to send, what to select) is supplied by
a planner object so the machine stays independent of agent internals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Union

from .calculus import StageWindows
from .timebase import Seconds, Slack, TimeInterval

log = logging.getLogger(__name__)

PRODUCTION = "production"
BUFFER = "buffer"
TRANSPORT = "transport"


# ---------------------------------------------------------------------------
# payloads


@dataclass(frozen=True)
class WorkpieceInfo:
    """What the receiver needs to know about the workpiece being negotiated.

    ``location is None`` marks a workpiece entering the system from outside:
    the first operation then has no inbound handling.
    """

    order_id: str
    product: str
    location: Optional[tuple[float, float]] = None


@dataclass(frozen=True)
class CfpAlternative:
    """One requested window set; ``realizes`` ties buffer requests to the
    production proposal they would serve."""

    windows: StageWindows
    realizes: Optional[str] = None


@dataclass(frozen=True)
class TransportLeg:
    """One requested transport movement inside a transport CFP.

    ``realizes`` names the proposal whose arrival this leg enables (a buffer
    proposal for inbound legs, a production proposal otherwise); ``via`` names
    the buffer proposal the workpiece departs from, if any. ``chain_after``
    points at the index of the leg this one may directly follow on the same
    transport, enabling a reduced-price chained proposal.
    """

    from_resource: str
    to_resource: str
    from_location: tuple[float, float]
    to_location: tuple[float, float]
    windows: StageWindows
    realizes: str
    via: Optional[str] = None
    chain_after: Optional[int] = None


@dataclass(frozen=True)
class Cfp:
    kind: str  # PRODUCTION | BUFFER | TRANSPORT
    workpiece: WorkpieceInfo
    operation: str
    alternatives: tuple[CfpAlternative, ...] = ()
    legs: tuple[TransportLeg, ...] = ()
    deadline: Seconds = 0


@dataclass(frozen=True)
class LegRef:
    """Echo of the CFP leg a transport proposal answers."""

    index: int
    from_resource: str
    to_resource: str
    realizes: str
    via: Optional[str] = None


@dataclass(frozen=True)
class Proposal:
    proposal_id: str
    kind: str
    resource_id: str
    location: tuple[float, float]
    slot: TimeInterval
    slack_before: Slack
    slack_after: Slack
    op_duration: Seconds
    load_time: Seconds
    unload_time: Seconds
    price: int
    alternative: int = 0
    leg: Optional[LegRef] = None
    required_operation: Optional[str] = None
    connected_operations: tuple[str, ...] = ()

    @property
    def latest_end(self) -> Optional[Seconds]:
        return self.slack_after.bound_from(self.slot.end)


@dataclass(frozen=True)
class AcceptProposal:
    """Binding commitment to (a possibly shifted variant of) an offered slot.

    ``actual_unload_time``/``actual_load_time`` replace the estimates used at
    proposal time once the real transport choice is known; dependent proposal
    ids travel along so linked offers commit or fail as a unit.
    """

    proposal_id: str
    booked_slot: TimeInterval
    actual_unload_time: Seconds = 0
    actual_load_time: Seconds = 0
    dependent_proposal_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class RejectProposal:
    proposal_id: str


@dataclass(frozen=True)
class InformDeparture:
    order_id: str
    departure: Seconds
    loading_time: Seconds
    stay_on_machine: bool = False


@dataclass(frozen=True)
class InformFailure:
    proposal_id: str
    reason: str


Payload = Union[Cfp, Proposal, AcceptProposal, RejectProposal, InformDeparture, InformFailure]


@dataclass(frozen=True)
class Message:
    """Envelope: one sender, one receiver, homogeneous payload parts.

    Several CFPs (or proposals, or rejects) to the same receiver ride in one
    envelope and count as one message.
    """

    sender: str
    receiver: str
    conversation_id: str
    parts: tuple[Payload, ...]

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("empty envelope")
        kinds = {type(p).__name__ for p in self.parts}
        if len(kinds) > 1:
            raise ValueError(f"mixed payload kinds in one envelope: {kinds}")

    @property
    def variant(self) -> str:
        return type(self.parts[0]).__name__


def conversation_id(order_id: str, stage_index: int) -> str:
    return f"{order_id}/s{stage_index}"


def parse_conversation(conv: str) -> tuple[str, Optional[int]]:
    """(order_id, stage index) from a conversation id; stage None if malformed."""
    head, sep, tail = conv.rpartition("/s")
    if sep and tail.isdigit():
        return head, int(tail)
    return conv, None


# ---------------------------------------------------------------------------
# offer holds


@dataclass
class OfferHold:
    """A timeslot promised to one order and therefore withheld from others."""

    proposal_id: str
    span: TimeInterval
    conversation_id: str
    deadline: Seconds


class HoldBook:
    """Per-resource registry of outstanding offer holds."""

    def __init__(self) -> None:
        self._holds: dict[str, OfferHold] = {}

    def add(self, hold: OfferHold) -> None:
        self._holds[hold.proposal_id] = hold

    def release(self, proposal_id: str) -> Optional[OfferHold]:
        return self._holds.pop(proposal_id, None)

    def take(self, proposal_id: str, now: Seconds) -> Optional[OfferHold]:
        """Pop the hold if it exists and has not expired; expired holds vanish."""
        self.purge(now)
        return self._holds.pop(proposal_id, None)

    def purge(self, now: Seconds) -> None:
        dead = [pid for pid, h in self._holds.items() if h.deadline < now]
        for pid in dead:
            del self._holds[pid]

    def __contains__(self, proposal_id: str) -> bool:
        return proposal_id in self._holds

    def active_spans(
        self, now: Seconds, exclude_conversation: Optional[str] = None
    ) -> list[TimeInterval]:
        """Spans other negotiations must treat as busy.

        Holds of the same conversation are excluded: alternatives offered to
        one order may overlap each other, the indecision problem is about two
        *different* orders claiming one slot.
        """
        self.purge(now)
        return [
            h.span
            for h in self._holds.values()
            if h.conversation_id != exclude_conversation
        ]

    def __len__(self) -> int:
        return len(self._holds)


# ---------------------------------------------------------------------------
# message accounting


class MessageCounter:
    """Append-only envelope counts keyed by (order, stage, variant)."""

    def __init__(self) -> None:
        self._counts: dict[tuple[str, Optional[int], str], int] = {}

    def count(self, msg: Message) -> None:
        order_id, stage = parse_conversation(msg.conversation_id)
        key = (order_id, stage, msg.variant)
        self._counts[key] = self._counts.get(key, 0) + 1

    def total(self) -> int:
        return sum(self._counts.values())

    def per_order(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for (order_id, _stage, _variant), n in self._counts.items():
            out[order_id] = out.get(order_id, 0) + n
        return out

    def per_variant(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for (_o, _s, variant), n in self._counts.items():
            out[variant] = out.get(variant, 0) + n
        return out

    def for_order_stage(self, order_id: str, stage: int) -> int:
        return sum(
            n
            for (o, s, _v), n in self._counts.items()
            if o == order_id and s == stage
        )

    def snapshot(self) -> dict[str, dict[str, int]]:
        """JSON-friendly view: {"order/stage": {variant: n}}."""
        out: dict[str, dict[str, int]] = {}
        for (order_id, stage, variant), n in sorted(self._counts.items(), key=str):
            key = f"{order_id}/s{stage}" if stage is not None else order_id
            out.setdefault(key, {})[variant] = n
        return out


# ---------------------------------------------------------------------------
# stage negotiation state machine


class Phase(str, Enum):
    QUERY_DIRECTORY = "query-directory"
    AWAIT_PRODUCTION = "await-production"
    AWAIT_SHARED_RESOURCE = "await-shared-resource"  # reserved, never entered
    AWAIT_BUFFER = "await-buffer"
    AWAIT_TRANSPORT = "await-transport"
    SELECT = "select"
    COMMIT = "commit"
    DONE = "done"
    FAILED = "failed"


_AWAIT_KIND = {
    Phase.AWAIT_PRODUCTION: PRODUCTION,
    Phase.AWAIT_BUFFER: BUFFER,
    Phase.AWAIT_TRANSPORT: TRANSPORT,
}


@dataclass(frozen=True)
class StartStage:
    pass


@dataclass(frozen=True)
class DeadlineExpired:
    token: int


StageEvent = Union[StartStage, DeadlineExpired, Message]


@dataclass
class RoundPlan:
    """CFP envelopes for one phase plus the responders they await."""

    messages: list[Message]
    awaiting: set[str]


@dataclass
class StageDecision:
    """Commit bundle produced by the planner's selection step.

    ``informs`` go out before the accepts (freeing the previous machine),
    ``informs_post`` after them (e.g. the final-stage departure, which needs
    the accepted booking to exist first).
    """

    accepts: list[Message]
    rejects: list[Message]
    informs: list[Message]
    informs_post: list[Message] = field(default_factory=list)


@dataclass
class StageFailure:
    reason: str


class StagePlanner(Protocol):
    """Decision logic a StageNegotiation delegates to (implemented by the order agent)."""

    def plan_production(self, neg: "StageNegotiation", ctx) -> RoundPlan: ...

    def plan_buffer(self, neg: "StageNegotiation", ctx) -> Optional[RoundPlan]: ...

    def plan_transport(self, neg: "StageNegotiation", ctx) -> Optional[RoundPlan]: ...

    def decide(self, neg: "StageNegotiation", ctx) -> Union[StageDecision, StageFailure]: ...


@dataclass
class StageNegotiation:
    """State of one stage-i negotiation run by one order agent."""

    order_id: str
    stage_index: int
    phase: Phase = Phase.QUERY_DIRECTORY
    awaiting: set[str] = field(default_factory=set)
    proposals: dict[str, list[Proposal]] = field(
        default_factory=lambda: {PRODUCTION: [], BUFFER: [], TRANSPORT: []}
    )
    deadline_token: Optional[int] = None
    failure_reason: Optional[str] = None
    history: list[Phase] = field(default_factory=list)

    @property
    def conversation(self) -> str:
        return conversation_id(self.order_id, self.stage_index)

    def all_proposals(self) -> list[Proposal]:
        return [p for kind in (PRODUCTION, BUFFER, TRANSPORT) for p in self.proposals[kind]]

    def _enter(self, phase: Phase) -> None:
        self.phase = phase
        self.history.append(phase)

    def is_terminal(self) -> bool:
        return self.phase in (Phase.DONE, Phase.FAILED)


def advance_stage(
    neg: StageNegotiation, event: StageEvent, planner: StagePlanner, ctx
) -> list[Message]:
    """Feed one event into the stage machine; returns the envelopes to send.

    ``ctx`` must provide ``now()`` and ``set_timer(delay, token_payload) -> token``
    plus whatever the planner needs. Out-of-phase or unknown events are dropped
    with a protocol-violation log line, never an exception.
    """
    if neg.is_terminal():
        return []

    if isinstance(event, StartStage):
        if neg.phase is not Phase.QUERY_DIRECTORY:
            log.warning("protocol violation: StartStage in phase %s", neg.phase)
            return []
        neg._enter(Phase.AWAIT_PRODUCTION)
        plan = planner.plan_production(neg, ctx)
        if not plan.awaiting:
            return _fail(neg, planner, ctx, "no capable production resource registered")
        neg.awaiting = set(plan.awaiting)
        neg.deadline_token = ctx.set_timer_for_stage(neg)
        return plan.messages

    if isinstance(event, DeadlineExpired):
        if event.token != neg.deadline_token:
            return []  # stale timer from an already-finished phase
        neg.awaiting.clear()
        return _advance_round(neg, planner, ctx)

    if isinstance(event, Message):
        if event.conversation_id != neg.conversation:
            log.warning(
                "protocol violation: stray conversation %s in %s",
                event.conversation_id,
                neg.conversation,
            )
            return []
        if neg.phase not in _AWAIT_KIND:
            log.warning(
                "protocol violation: %s from %s arrived in phase %s",
                event.variant,
                event.sender,
                neg.phase,
            )
            return []
        expected = _AWAIT_KIND[neg.phase]
        for part in event.parts:
            if not isinstance(part, Proposal):
                log.warning(
                    "protocol violation: %s inside a proposal round", type(part).__name__
                )
                return []
            if part.kind != expected:
                log.warning(
                    "protocol violation: %s proposal during %s round", part.kind, expected
                )
                return []
            neg.proposals[expected].append(part)
        neg.awaiting.discard(event.sender)
        if neg.awaiting:
            return []
        return _advance_round(neg, planner, ctx)

    log.warning("protocol violation: unknown event %r", event)
    return []


def _advance_round(neg: StageNegotiation, planner: StagePlanner, ctx) -> list[Message]:
    """Move past the just-finished await phase into the next one (or select)."""
    neg.deadline_token = None
    if neg.phase is Phase.AWAIT_PRODUCTION:
        if not neg.proposals[PRODUCTION]:
            return _fail(neg, planner, ctx, "no production proposals received")
        plan = planner.plan_buffer(neg, ctx)
        if plan is not None and plan.awaiting:
            neg._enter(Phase.AWAIT_BUFFER)
            neg.awaiting = set(plan.awaiting)
            neg.deadline_token = ctx.set_timer_for_stage(neg)
            return plan.messages
        neg.phase = Phase.AWAIT_BUFFER  # passed through silently, not recorded
        return _after_buffer(neg, planner, ctx, [])
    if neg.phase is Phase.AWAIT_BUFFER:
        return _after_buffer(neg, planner, ctx, [])
    if neg.phase is Phase.AWAIT_TRANSPORT:
        return _select(neg, planner, ctx)
    log.warning("protocol violation: round advance in phase %s", neg.phase)
    return []


def _after_buffer(
    neg: StageNegotiation, planner: StagePlanner, ctx, carried: list[Message]
) -> list[Message]:
    plan = planner.plan_transport(neg, ctx)
    if plan is not None and plan.awaiting:
        neg._enter(Phase.AWAIT_TRANSPORT)
        neg.awaiting = set(plan.awaiting)
        neg.deadline_token = ctx.set_timer_for_stage(neg)
        return carried + plan.messages
    return carried + _select(neg, planner, ctx)


def _select(neg: StageNegotiation, planner: StagePlanner, ctx) -> list[Message]:
    neg._enter(Phase.SELECT)
    decision = planner.decide(neg, ctx)
    if isinstance(decision, StageFailure):
        return _fail(neg, planner, ctx, decision.reason)
    neg._enter(Phase.COMMIT)
    neg._enter(Phase.DONE)
    # departures first: a stay-on-machine accept lands on the same resource
    # and must find the previous tail already closed
    return decision.informs + decision.accepts + decision.rejects + decision.informs_post


def _fail(neg: StageNegotiation, planner: StagePlanner, ctx, reason: str) -> list[Message]:
    neg.failure_reason = reason
    rejects = _reject_everything(neg)
    neg._enter(Phase.FAILED)
    return rejects


def _reject_everything(neg: StageNegotiation) -> list[Message]:
    """On failure no partial bookings may remain: reject every held offer."""
    by_resource: dict[str, list[RejectProposal]] = {}
    for p in neg.all_proposals():
        by_resource.setdefault(p.resource_id, []).append(RejectProposal(p.proposal_id))
    return [
        Message(
            sender=neg.order_id,
            receiver=rid,
            conversation_id=neg.conversation,
            parts=tuple(parts),
        )
        for rid, parts in sorted(by_resource.items())
    ]
