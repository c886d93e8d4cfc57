import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnetsched.timebase import (
    BookingEntry,
    NoOpenTail,
    OverlapError,
    ResourceSchedule,
    Slack,
    TimeInterval,
    hhmm,
    min_bound,
    minutes,
)


def op_entry(order, start, end, step="1", end_state="", open_tail=False, setup=0):
    segments = []
    if setup:
        segments.append(("setup", TimeInterval(start - setup, start)))
    segments.append(("operation", TimeInterval(start, end)))
    return BookingEntry(order, step, segments, open_tail=open_tail, end_state=end_state)


# ---------------------------------------------------------------------------
# units


def test_minutes_whole_seconds():
    assert minutes(1) == 60
    assert minutes(2.5) == 150
    assert minutes(0) == 0


def test_minutes_rejects_fractional_seconds():
    with pytest.raises(ValueError):
        minutes(0.0001)


def test_hhmm_rendering():
    assert hhmm(0) == "00:00"
    assert hhmm(64800) == "18:00"
    assert hhmm(64815) == "18:00:15"
    assert hhmm(86400 + 4 * 3600 + 34 * 60) == "1.04:34"


# ---------------------------------------------------------------------------
# intervals


def test_interval_validation():
    with pytest.raises(ValueError):
        TimeInterval(-1, 5)
    with pytest.raises(ValueError):
        TimeInterval(5, 4)
    assert TimeInterval(5, 5).is_empty()


def test_interval_relations():
    a = TimeInterval(10, 20)
    assert a.duration == 10
    assert a.contains_point(10) and not a.contains_point(20)
    assert a.overlaps(TimeInterval(19, 30)) and not a.overlaps(TimeInterval(20, 30))
    assert a.intersect(TimeInterval(15, 30)) == TimeInterval(15, 20)
    assert a.intersect(TimeInterval(20, 30)) is None
    assert a.contains(TimeInterval(10, 20))
    assert not a.contains(TimeInterval(9, 20))
    assert a.shift(5) == TimeInterval(15, 25)


# ---------------------------------------------------------------------------
# slack


def test_slack_semantics():
    assert Slack.UNBOUNDED.unbounded
    assert Slack.UNBOUNDED.bound_from(100) is None
    assert Slack(50).bound_from(100) == 150
    with pytest.raises(ValueError):
        Slack(-1)


def test_slack_capped():
    assert Slack.UNBOUNDED.capped(None) is Slack.UNBOUNDED
    assert Slack.UNBOUNDED.capped(40) == Slack(40)
    assert Slack(30).capped(40) == Slack(30)
    assert Slack(30).capped(20) == Slack(20)
    assert Slack.finite(7) == Slack(7)


def test_min_bound_drops_unbounded_terms():
    assert min_bound(None, 10, None, 4) == 4
    assert min_bound(None, None) is None
    assert min_bound() is None


# ---------------------------------------------------------------------------
# booking entries


def test_entry_validation_rules():
    with pytest.raises(ValueError):
        BookingEntry("o", "1", []).validate()
    with pytest.raises(ValueError):
        BookingEntry("o", "1", [("sorcery", TimeInterval(0, 5))]).validate()
    with pytest.raises(ValueError):
        BookingEntry("o", "1", [("operation", TimeInterval(5, 5))]).validate()
    with pytest.raises(ValueError):
        BookingEntry(
            "o",
            "1",
            [("setup", TimeInterval(0, 5)), ("operation", TimeInterval(6, 9))],
        ).validate()


def test_entry_geometry():
    e = BookingEntry(
        "o",
        "1",
        [
            ("setup", TimeInterval(0, 5)),
            ("unload", TimeInterval(5, 8)),
            ("operation", TimeInterval(8, 20)),
            ("load", TimeInterval(20, 23)),
        ],
    )
    e.validate()
    assert e.span == TimeInterval(0, 23)
    assert e.setup_interval == TimeInterval(0, 5)
    assert e.core_start == 5
    assert e.segment("unload") == TimeInterval(5, 8)
    assert e.segment("buffer-hold") is None
    assert e.operation_end == 20


def test_entry_without_setup_core_is_span_start():
    e = op_entry("o", 10, 20)
    assert e.core_start == 10
    assert e.operation_end == 20


# ---------------------------------------------------------------------------
# resource schedule mutations


def test_insert_keeps_time_order():
    s = ResourceSchedule()
    s.insert_booking(op_entry("b", 100, 200))
    s.insert_booking(op_entry("a", 0, 50))
    s.insert_booking(op_entry("c", 300, 400))
    assert [e.order_id for e in s.entries] == ["a", "b", "c"]
    s.check_invariants()


def test_insert_rejects_overlap_with_predecessor_and_successor():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 100, 200))
    with pytest.raises(OverlapError):
        s.insert_booking(op_entry("x", 150, 180))
    with pytest.raises(OverlapError):
        s.insert_booking(op_entry("x", 50, 101))
    s.insert_booking(op_entry("x", 50, 100))  # flush fit is fine
    s.check_invariants()


def test_insert_after_open_tail_rejected():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 0, 100, open_tail=True))
    with pytest.raises(OverlapError):
        s.insert_booking(op_entry("b", 500, 600))


def test_second_open_tail_for_same_order_rejected():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 0, 100, open_tail=True))
    with pytest.raises(OverlapError):
        s.insert_booking(op_entry("a", 200, 300, open_tail=True))


def test_successor_setup_reshaped_on_insert():
    setup_table = {"A": 0, "B": 30}

    def setup_of(end_state, succ):
        return setup_table[end_state]

    s = ResourceSchedule()
    succ = op_entry("later", 200, 300, setup=30)  # setup [170, 200)
    s.insert_booking(succ)

    report = s.insert_booking(op_entry("now", 0, 170, end_state="A"), setup_of)
    assert report.ti == -30
    assert report.successor_order_id == "later"
    assert succ.setup_interval is None  # shrank to nothing
    assert succ.segments[0] == ("operation", TimeInterval(200, 300))
    s.check_invariants()


def test_insert_rejected_when_successor_setup_no_longer_fits():
    def setup_of(end_state, succ):
        return 50

    s = ResourceSchedule()
    s.insert_booking(op_entry("later", 200, 300, setup=30))
    with pytest.raises(OverlapError):
        # would end at 160, but the successor setup must now start at 150
        s.insert_booking(op_entry("now", 0, 160, end_state="C"), setup_of)


def test_insert_accounts_for_unmaterialized_successor_setup():
    def setup_of(end_state, succ):
        return 20 if end_state == "B" else 0

    s = ResourceSchedule()
    s.insert_booking(op_entry("later", 200, 300))  # no setup segment recorded
    with pytest.raises(OverlapError):
        s.insert_booking(op_entry("now", 0, 190, end_state="B"), setup_of)
    report = s.insert_booking(op_entry("now", 0, 180, end_state="B"), setup_of)
    assert report.ti == 20  # successor effectively starts 20s of work earlier
    s.check_invariants()


def test_close_open_tail_adds_hold_and_load():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 0, 100, open_tail=True))
    entry = s.close_open_tail("a", departure=160, load_time=10)
    assert not entry.open_tail
    assert entry.segment("buffer-hold") == TimeInterval(100, 150)
    assert entry.segment("load") == TimeInterval(150, 160)
    assert entry.span_end == 160
    assert entry.operation_end == 100
    s.check_invariants()


def test_close_open_tail_immediate_departure_has_no_hold():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 0, 100, open_tail=True))
    entry = s.close_open_tail("a", departure=110, load_time=10)
    assert entry.segment("buffer-hold") is None
    assert entry.segment("load") == TimeInterval(100, 110)


def test_close_open_tail_errors():
    s = ResourceSchedule()
    with pytest.raises(NoOpenTail):
        s.close_open_tail("ghost", 100, 10)
    s.insert_booking(op_entry("a", 0, 100, open_tail=True))
    with pytest.raises(OverlapError):
        s.close_open_tail("a", departure=105, load_time=10)  # load inside operation


def test_close_open_tail_cannot_run_into_successor():
    s = ResourceSchedule()
    tail = op_entry("a", 0, 100, open_tail=True)
    s.insert_booking(tail)
    # a successor placed while the tail's order was assumed closed
    tail.open_tail = False
    s.insert_booking(op_entry("b", 120, 200))
    tail.open_tail = True
    with pytest.raises(OverlapError):
        s.close_open_tail("a", departure=130, load_time=5)


# ---------------------------------------------------------------------------
# free intervals and gaps


def test_free_intervals_simple_and_windowed():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 100, 200))
    s.insert_booking(op_entry("b", 300, 400))
    assert s.free_intervals(TimeInterval(0, 500)) == [
        TimeInterval(0, 100),
        TimeInterval(200, 300),
        TimeInterval(400, 500),
    ]
    assert s.free_intervals(TimeInterval(150, 350)) == [TimeInterval(200, 300)]


def test_free_intervals_open_tail_blocks_suffix():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 100, 200, open_tail=True))
    assert s.free_intervals(TimeInterval(0, 10_000)) == [TimeInterval(0, 100)]
    # ... unless the reasoning assumes that workpiece departs at operation end
    assert s.free_intervals(
        TimeInterval(0, 10_000), assume_closed={"a"}
    ) == [TimeInterval(0, 100), TimeInterval(200, 10_000)]


def test_free_intervals_extra_busy():
    s = ResourceSchedule()
    free = s.free_intervals(
        TimeInterval(0, 100), extra_busy=[TimeInterval(20, 30), TimeInterval(30, 40)]
    )
    assert free == [TimeInterval(0, 20), TimeInterval(40, 100)]


def test_placement_gaps_respect_successor_setup():
    def setup_of(end_state, succ):
        return 40 if end_state == "B" else 10

    s = ResourceSchedule()
    s.insert_booking(op_entry("later", 200, 300, setup=20))  # setup [180, 200)
    gaps_b = s.placement_gaps(TimeInterval(0, 1000), "B", setup_of)
    assert gaps_b[0] == TimeInterval(0, 160)  # 40s setup now needed before 200
    gaps_a = s.placement_gaps(TimeInterval(0, 1000), "A", setup_of)
    assert gaps_a[0] == TimeInterval(0, 190)  # setup shrinks, gap stretches


def test_entry_at_or_after():
    s = ResourceSchedule()
    s.insert_booking(op_entry("a", 100, 200))
    s.insert_booking(op_entry("b", 300, 400))
    assert s.entry_at_or_after(0).order_id == "a"
    assert s.entry_at_or_after(101).order_id == "b"
    assert s.entry_at_or_after(301) is None


# ---------------------------------------------------------------------------
# properties


attempts = st.lists(
    st.tuples(st.integers(0, 500), st.integers(1, 60), st.integers(0, 20)),
    max_size=12,
)


@given(attempts)
def test_property_entries_stay_pairwise_disjoint(tries):
    s = ResourceSchedule()
    for i, (start, dur, setup) in enumerate(tries):
        e = op_entry(f"o{i}", start + setup, start + setup + dur, setup=setup)
        try:
            s.insert_booking(e)
        except OverlapError:
            continue
    s.check_invariants()
    spans = [e.span for e in s.entries]
    for a, b in zip(spans, spans[1:]):
        assert a.end <= b.start


@given(attempts)
def test_property_booked_cores_never_move(tries):
    def setup_of(end_state, succ):
        return 5

    s = ResourceSchedule()
    cores: list[tuple[str, int, int]] = []
    for i, (start, dur, setup) in enumerate(tries):
        e = op_entry(f"o{i}", start + setup, start + setup + dur, setup=setup)
        try:
            s.insert_booking(e, setup_of)
        except OverlapError:
            continue
        cores.append((f"o{i}", e.core_start, e.operation_end))
        # every previously accepted core must be exactly where it was booked
        for order, core_start, op_end in cores:
            entry = next(x for x in s.entries if x.order_id == order)
            assert entry.core_start == core_start
            assert entry.operation_end == op_end


@st.composite
def prebuilt_schedule(draw):
    """A valid schedule built directly: sorted disjoint entries, maybe one tail."""
    s = ResourceSchedule()
    cursor = 0
    n = draw(st.integers(0, 10))
    for i in range(n):
        cursor += draw(st.integers(0, 40))
        dur = draw(st.integers(1, 40))
        s.entries.append(op_entry(f"o{i}", cursor, cursor + dur))
        cursor += dur
    if s.entries and draw(st.booleans()):
        s.entries[-1].open_tail = True
    return s


@given(prebuilt_schedule(), st.integers(0, 50), st.integers(400, 700))
def test_property_free_intervals_match_per_second_scan(s, w_start, w_end):
    free = s.free_intervals(TimeInterval(w_start, w_end))
    got = set()
    for iv in free:
        got.update(range(iv.start, iv.end))
    busy = set()
    for start, end in s.busy_spans():
        busy.update(range(start, w_end if end is None else min(end, w_end)))
    expected = set(range(w_start, w_end)) - busy
    assert got == expected
    # free intervals are maximal: sorted with busy time strictly between them
    for a, b in zip(free, free[1:]):
        assert a.end < b.start


@given(prebuilt_schedule(), st.integers(0, 600), st.integers(1, 50))
def test_property_insert_with_zero_ti_only_removes_its_own_span(s, start, dur):
    window = TimeInterval(0, 1000)
    before = s.free_intervals(window)
    entry = op_entry("new", start, start + dur)
    try:
        report = s.insert_booking(entry)
    except OverlapError:
        return
    assert report.ti == 0
    after = s.free_intervals(window)
    before_secs = set()
    for iv in before:
        before_secs.update(range(iv.start, iv.end))
    after_secs = set()
    for iv in after:
        after_secs.update(range(iv.start, iv.end))
    assert after_secs == before_secs - set(range(start, start + dur))
