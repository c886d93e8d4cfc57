import pytest

from cnetsched.calculus import StageWindows
from cnetsched.protocol import (
    BUFFER,
    PRODUCTION,
    AcceptProposal,
    Cfp,
    DeadlineExpired,
    HoldBook,
    Message,
    MessageCounter,
    OfferHold,
    Phase,
    Proposal,
    RejectProposal,
    RoundPlan,
    StageDecision,
    StageFailure,
    StageNegotiation,
    StartStage,
    WorkpieceInfo,
    advance_stage,
    conversation_id,
    parse_conversation,
)
from cnetsched.timebase import Slack, TimeInterval


def mk_proposal(pid, resource, kind=PRODUCTION, start=100, dur=60):
    return Proposal(
        proposal_id=pid,
        kind=kind,
        resource_id=resource,
        location=(0.0, 0.0),
        slot=TimeInterval(start, start + dur),
        slack_before=Slack(0),
        slack_after=Slack.UNBOUNDED,
        op_duration=dur,
        load_time=10,
        unload_time=10,
        price=dur,
    )


def mk_cfp():
    return Cfp(
        kind=PRODUCTION,
        workpiece=WorkpieceInfo(order_id="o1", product="A"),
        operation="cutting",
        deadline=60,
    )


def proposal_msg(resource, conv, *proposals):
    return Message(
        sender=resource, receiver="o1", conversation_id=conv, parts=tuple(proposals)
    )


class FakeCtx:
    def __init__(self):
        self._now = 0
        self._tokens = 0
        self.timers = []

    def now(self):
        return self._now

    def set_timer_for_stage(self, neg):
        self._tokens += 1
        self.timers.append(self._tokens)
        return self._tokens


class ScriptPlanner:
    """Planner with scripted rounds; the default decision accepts the first
    production proposal and rejects everything else."""

    def __init__(self, responders=("M1", "M2"), fail=False):
        self.responders = tuple(responders)
        self.fail = fail

    def plan_production(self, neg, ctx):
        msgs = [
            Message(neg.order_id, r, neg.conversation, (mk_cfp(),))
            for r in self.responders
        ]
        return RoundPlan(msgs, set(self.responders))

    def plan_buffer(self, neg, ctx):
        return None

    def plan_transport(self, neg, ctx):
        return None

    def decide(self, neg, ctx):
        if self.fail:
            return StageFailure("scripted failure")
        props = neg.all_proposals()
        winner, losers = props[0], props[1:]
        accepts = [
            Message(
                neg.order_id,
                winner.resource_id,
                neg.conversation,
                (AcceptProposal(winner.proposal_id, winner.slot),),
            )
        ]
        by_resource = {}
        for p in losers:
            by_resource.setdefault(p.resource_id, []).append(
                RejectProposal(p.proposal_id)
            )
        rejects = [
            Message(neg.order_id, rid, neg.conversation, tuple(parts))
            for rid, parts in sorted(by_resource.items())
        ]
        return StageDecision(accepts=accepts, rejects=rejects, informs=[])


# ---------------------------------------------------------------------------
# envelopes and ids


def test_envelope_rejects_empty_and_mixed_parts():
    with pytest.raises(ValueError):
        Message("a", "b", "o1/s0", ())
    with pytest.raises(ValueError):
        Message(
            "a", "b", "o1/s0", (RejectProposal("p"), AcceptProposal("q", TimeInterval(0, 1)))
        )
    m = Message("a", "b", "o1/s0", (RejectProposal("p"), RejectProposal("q")))
    assert m.variant == "RejectProposal"


def test_conversation_id_round_trip():
    conv = conversation_id("order-7", 3)
    assert conv == "order-7/s3"
    assert parse_conversation(conv) == ("order-7", 3)
    assert parse_conversation("order/with/slashes/s12") == ("order/with/slashes", 12)
    assert parse_conversation("no-stage-here") == ("no-stage-here", None)
    assert parse_conversation("order/sX") == ("order/sX", None)


# ---------------------------------------------------------------------------
# offer holds


def test_holdbook_add_release_take():
    book = HoldBook()
    h = OfferHold("p1", TimeInterval(0, 50), "o1/s0", deadline=100)
    book.add(h)
    assert "p1" in book and len(book) == 1
    assert book.take("p1", now=50) is h
    assert "p1" not in book
    assert book.take("p1", now=50) is None


def test_holdbook_expiry():
    book = HoldBook()
    book.add(OfferHold("p1", TimeInterval(0, 50), "o1/s0", deadline=100))
    assert book.take("p1", now=101) is None  # expired before being taken
    book.add(OfferHold("p2", TimeInterval(0, 50), "o1/s0", deadline=100))
    assert book.take("p2", now=100) is not None  # deadline itself still honors


def test_holdbook_active_spans_ignore_same_conversation():
    book = HoldBook()
    book.add(OfferHold("p1", TimeInterval(0, 50), "o1/s0", deadline=100))
    book.add(OfferHold("p2", TimeInterval(40, 90), "o1/s0", deadline=100))
    book.add(OfferHold("p3", TimeInterval(200, 250), "o2/s1", deadline=100))
    spans = book.active_spans(now=0, exclude_conversation="o1/s0")
    assert spans == [TimeInterval(200, 250)]
    assert len(book.active_spans(now=0)) == 3
    assert book.active_spans(now=150) == []  # all expired


# ---------------------------------------------------------------------------
# message accounting


def test_message_counter_views():
    c = MessageCounter()
    c.count(Message("o1", "M1", "o1/s0", (mk_cfp(),)))
    c.count(Message("o1", "M2", "o1/s0", (mk_cfp(),)))
    c.count(proposal_msg("M1", "o1/s0", mk_proposal("M1#1", "M1")))
    c.count(Message("o2", "M1", "o2/s1", (mk_cfp(),)))
    assert c.total() == 4
    assert c.per_order() == {"o1": 3, "o2": 1}
    assert c.per_variant() == {"Cfp": 3, "Proposal": 1}
    assert c.for_order_stage("o1", 0) == 3
    assert c.snapshot()["o1/s0"] == {"Cfp": 2, "Proposal": 1}


# ---------------------------------------------------------------------------
# stage machine: happy path, deadlines, failure


def test_stage_happy_path_and_phase_history():
    neg = StageNegotiation("o1", 0)
    planner, ctx = ScriptPlanner(), FakeCtx()

    out = advance_stage(neg, StartStage(), planner, ctx)
    assert [m.receiver for m in out] == ["M1", "M2"]
    assert neg.phase is Phase.AWAIT_PRODUCTION
    assert neg.deadline_token == 1

    assert advance_stage(
        neg, proposal_msg("M1", "o1/s0", mk_proposal("M1#1", "M1")), planner, ctx
    ) == []
    assert neg.awaiting == {"M2"}

    out = advance_stage(
        neg, proposal_msg("M2", "o1/s0", mk_proposal("M2#1", "M2", start=90)), planner, ctx
    )
    assert neg.phase is Phase.DONE
    assert neg.history == [
        Phase.AWAIT_PRODUCTION,
        Phase.SELECT,
        Phase.COMMIT,
        Phase.DONE,
    ]
    # commit completeness: every received proposal is accepted or rejected
    accepted = [p.proposal_id for m in out if m.variant == "AcceptProposal" for p in m.parts]
    rejected = [p.proposal_id for m in out if m.variant == "RejectProposal" for p in m.parts]
    assert sorted(accepted + rejected) == ["M1#1", "M2#1"]
    assert set(accepted).isdisjoint(rejected)


def test_stage_deadline_closes_round_with_partial_answers():
    neg = StageNegotiation("o1", 0)
    planner, ctx = ScriptPlanner(), FakeCtx()
    advance_stage(neg, StartStage(), planner, ctx)
    advance_stage(neg, proposal_msg("M1", "o1/s0", mk_proposal("M1#1", "M1")), planner, ctx)

    out = advance_stage(neg, DeadlineExpired(token=1), planner, ctx)
    assert neg.phase is Phase.DONE  # absence of M2's answer counted as refusal
    assert any(m.variant == "AcceptProposal" for m in out)


def test_stage_stale_deadline_token_ignored():
    neg = StageNegotiation("o1", 0)
    planner, ctx = ScriptPlanner(), FakeCtx()
    advance_stage(neg, StartStage(), planner, ctx)
    assert advance_stage(neg, DeadlineExpired(token=99), planner, ctx) == []
    assert neg.phase is Phase.AWAIT_PRODUCTION
    assert neg.awaiting == {"M1", "M2"}


def test_stage_fails_without_any_production_proposal():
    neg = StageNegotiation("o1", 0)
    planner, ctx = ScriptPlanner(), FakeCtx()
    advance_stage(neg, StartStage(), planner, ctx)
    out = advance_stage(neg, DeadlineExpired(token=1), planner, ctx)
    assert neg.phase is Phase.FAILED
    assert neg.failure_reason == "no production proposals received"
    assert out == []  # nothing was offered, nothing to reject


def test_stage_failure_rejects_every_held_offer():
    neg = StageNegotiation("o1", 0)
    planner, ctx = ScriptPlanner(fail=True), FakeCtx()
    advance_stage(neg, StartStage(), planner, ctx)
    advance_stage(
        neg,
        proposal_msg("M1", "o1/s0", mk_proposal("M1#1", "M1"), mk_proposal("M1#2", "M1")),
        planner,
        ctx,
    )
    out = advance_stage(
        neg, proposal_msg("M2", "o1/s0", mk_proposal("M2#1", "M2")), planner, ctx
    )
    assert neg.phase is Phase.FAILED
    assert neg.failure_reason == "scripted failure"
    assert [m.receiver for m in out] == ["M1", "M2"]  # grouped, sorted
    assert all(m.variant == "RejectProposal" for m in out)
    rejected = sorted(p.proposal_id for m in out for p in m.parts)
    assert rejected == ["M1#1", "M1#2", "M2#1"]


def test_stage_drops_out_of_phase_events():
    neg = StageNegotiation("o1", 0)
    planner, ctx = ScriptPlanner(), FakeCtx()

    # proposal before the stage started
    assert advance_stage(
        neg, proposal_msg("M1", "o1/s0", mk_proposal("M1#1", "M1")), planner, ctx
    ) == []
    assert neg.phase is Phase.QUERY_DIRECTORY

    advance_stage(neg, StartStage(), planner, ctx)
    # duplicate StartStage
    assert advance_stage(neg, StartStage(), planner, ctx) == []
    # stray conversation
    assert advance_stage(
        neg, proposal_msg("M1", "o9/s4", mk_proposal("X#1", "M1")), planner, ctx
    ) == []
    # wrong proposal kind for the current round: dropped, sender still awaited
    assert advance_stage(
        neg, proposal_msg("M1", "o1/s0", mk_proposal("B#1", "B1", kind=BUFFER)), planner, ctx
    ) == []
    assert neg.awaiting == {"M1", "M2"}
    assert neg.proposals[PRODUCTION] == []


def test_terminal_stage_ignores_everything():
    neg = StageNegotiation("o1", 0)
    planner, ctx = ScriptPlanner(responders=("M1",)), FakeCtx()
    advance_stage(neg, StartStage(), planner, ctx)
    advance_stage(neg, proposal_msg("M1", "o1/s0", mk_proposal("M1#1", "M1")), planner, ctx)
    assert neg.is_terminal()
    assert advance_stage(neg, StartStage(), planner, ctx) == []
    assert advance_stage(neg, DeadlineExpired(token=1), planner, ctx) == []


def test_stage_machine_is_deterministic():
    def run():
        neg = StageNegotiation("o1", 0)
        planner, ctx = ScriptPlanner(), FakeCtx()
        outs = []
        outs += advance_stage(neg, StartStage(), planner, ctx)
        outs += advance_stage(
            neg, proposal_msg("M2", "o1/s0", mk_proposal("M2#1", "M2")), planner, ctx
        )
        outs += advance_stage(
            neg, proposal_msg("M1", "o1/s0", mk_proposal("M1#1", "M1")), planner, ctx
        )
        return neg.history, [
            (m.sender, m.receiver, m.variant, tuple(p for p in m.parts)) for m in outs
        ]

    assert run() == run()
