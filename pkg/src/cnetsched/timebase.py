"""Integer-second time primitives and the free/busy booking calendar of a resource.

Everything downstream (window calculus, proposal generation, commit validation)
sits on top of two guarantees made here:

* all intervals are half-open ``[start, end)`` over non-negative integer seconds,
  so adjacent segments never double-count an instant;
* a calendar is a time-sorted list of pairwise disjoint booking entries, where an
  entry with an *open tail* (departure not yet negotiated) blocks its whole
  suffix to +infinity instead of pretending to know when the workpiece leaves.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Iterable, Optional, Sequence

Seconds = int  # engine-wide unit: integer seconds from the scenario epoch

#: segment kinds a booking entry may be composed of
SEGMENT_KINDS = frozenset(
    {"setup", "unload", "operation", "load", "travel", "maintenance", "buffer-hold"}
)


class ScheduleError(Exception):
    """Base class for calendar violations."""


class OverlapError(ScheduleError):
    """A booking (or its induced setup shift) would collide with existing entries."""


class NoOpenTail(ScheduleError):
    """close_open_tail was asked to close a tail that does not exist."""


def minutes(m: float) -> Seconds:
    """Convert scenario minutes to engine seconds (must land on a whole second)."""
    s = m * 60
    out = int(round(s))
    if abs(s - out) > 1e-9:
        raise ValueError(f"{m} minutes is not a whole number of seconds")
    return out


def hhmm(t: Seconds) -> str:
    """Render seconds-from-epoch as d.HH:MM for logs and error messages."""
    m, s = divmod(t, 60)
    h, m = divmod(m, 60)
    d, h = divmod(h, 24)
    base = f"{h:02d}:{m:02d}" + (f":{s:02d}" if s else "")
    return f"{d}.{base}" if d else base


@dataclass(frozen=True, order=True)
class TimeInterval:
    """Half-open interval [start, end) in whole seconds."""

    start: Seconds
    end: Seconds

    def __post_init__(self) -> None:
        if self.start < 0:
            raise ValueError(f"interval start {self.start} is negative")
        if self.end < self.start:
            raise ValueError(f"interval end {self.end} precedes start {self.start}")

    @property
    def duration(self) -> Seconds:
        return self.end - self.start

    def is_empty(self) -> bool:
        return self.end == self.start

    def contains_point(self, t: Seconds) -> bool:
        return self.start <= t < self.end

    def contains(self, other: "TimeInterval") -> bool:
        return self.start <= other.start and other.end <= self.end

    def overlaps(self, other: "TimeInterval") -> bool:
        return self.start < other.end and other.start < self.end

    def intersect(self, other: "TimeInterval") -> Optional["TimeInterval"]:
        lo = max(self.start, other.start)
        hi = min(self.end, other.end)
        return TimeInterval(lo, hi) if lo < hi else None

    def shift(self, delta: Seconds) -> "TimeInterval":
        return TimeInterval(self.start + delta, self.end + delta)

    def __str__(self) -> str:  # pragma: no cover - debugging sugar
        return f"[{hhmm(self.start)}; {hhmm(self.end)})"


@dataclass(frozen=True)
class Slack:
    """Shift room after a committed or proposed slot.

    ``seconds=None`` is the explicit unbounded variant ("large number" in
    operator speak); it drops out of any minimum instead of pretending to be a
    big sentinel integer.
    """

    seconds: Optional[Seconds] = None

    UNBOUNDED: ClassVar["Slack"]

    def __post_init__(self) -> None:
        if self.seconds is not None and self.seconds < 0:
            raise ValueError("slack cannot be negative")

    @classmethod
    def finite(cls, seconds: Seconds) -> "Slack":
        return cls(int(seconds))

    @property
    def unbounded(self) -> bool:
        return self.seconds is None

    def bound_from(self, point: Seconds) -> Optional[Seconds]:
        """point + slack, or None when the slack is unbounded."""
        return None if self.seconds is None else point + self.seconds

    def capped(self, limit: Optional[Seconds]) -> "Slack":
        """Slack reduced to at most ``limit`` (None limit keeps it as is)."""
        if limit is None:
            return self
        if self.seconds is None:
            return Slack(limit)
        return Slack(min(self.seconds, limit))

    def __str__(self) -> str:  # pragma: no cover
        return "unbounded" if self.seconds is None else f"{self.seconds}s"


Slack.UNBOUNDED = Slack(None)


def min_bound(*candidates: Optional[Seconds]) -> Optional[Seconds]:
    """Minimum over mixed finite/unbounded bounds; unbounded terms drop out."""
    finite = [c for c in candidates if c is not None]
    return min(finite) if finite else None


@dataclass
class BookingEntry:
    """One committed activity on a resource: an ordered run of contiguous segments.

    ``open_tail=True`` marks a production booking whose workpiece departure is
    still unknown; the resource stays blocked from the entry's start onwards
    until :meth:`ResourceSchedule.close_open_tail` attaches the real load
    segment. ``end_state`` is the state tag the resource is left in (product
    type for machines, drop x-position for transports) and drives successor
    setup recomputation.
    """

    order_id: str
    step_label: str
    segments: list[tuple[str, TimeInterval]]
    open_tail: bool = False
    end_state: str = ""

    def validate(self) -> None:
        if not self.segments:
            raise ValueError("booking entry needs at least one segment")
        prev_end = None
        for kind, iv in self.segments:
            if kind not in SEGMENT_KINDS:
                raise ValueError(f"unknown segment kind {kind!r}")
            if iv.is_empty():
                raise ValueError("zero-length segments must be omitted")
            if prev_end is not None and iv.start != prev_end:
                raise ValueError("segments must be contiguous and time-ordered")
            prev_end = iv.end

    @property
    def span_start(self) -> Seconds:
        return self.segments[0][1].start

    @property
    def span_end(self) -> Seconds:
        return self.segments[-1][1].end

    @property
    def span(self) -> TimeInterval:
        return TimeInterval(self.span_start, self.span_end)

    @property
    def setup_interval(self) -> Optional[TimeInterval]:
        kind, iv = self.segments[0]
        return iv if kind in ("setup", "travel") else None

    @property
    def core_start(self) -> Seconds:
        """Start of the immovable part: everything after the leading setup/travel."""
        setup = self.setup_interval
        return setup.end if setup is not None else self.span_start

    def segment(self, kind: str) -> Optional[TimeInterval]:
        for k, iv in self.segments:
            if k == kind:
                return iv
        return None

    @property
    def operation_end(self) -> Seconds:
        op = self.segment("operation")
        return op.end if op is not None else self.span_end


@dataclass(frozen=True)
class AdjustmentReport:
    """Outcome of an insertion: the signed time increment applied to the successor.

    ``ti`` is new-setup minus old-setup of the booking that now follows the
    inserted entry (0 when there is no successor or its setup is fixed).
    """

    ti: Seconds = 0
    successor_order_id: Optional[str] = None
    successor_step: Optional[str] = None


# callback: (new predecessor end_state, successor entry) -> required setup duration
SetupFn = Callable[[str, BookingEntry], Seconds]

_INF = None  # suffix sentinel used in busy spans: (start, None) means [start, +inf)


@dataclass
class ResourceSchedule:
    """Time-sorted, pairwise disjoint booking calendar of one resource."""

    entries: list[BookingEntry] = field(default_factory=list)

    # -- queries ---------------------------------------------------------

    def open_tail_entries(self) -> list[BookingEntry]:
        return [e for e in self.entries if e.open_tail]

    def open_tail_for(self, order_id: str) -> Optional[BookingEntry]:
        for e in self.entries:
            if e.open_tail and e.order_id == order_id:
                return e
        return None

    def find(self, order_id: str, step_label: str) -> Optional[BookingEntry]:
        for e in self.entries:
            if e.order_id == order_id and e.step_label == step_label:
                return e
        return None

    def busy_spans(
        self, assume_closed: frozenset[str] | set[str] = frozenset()
    ) -> list[tuple[Seconds, Optional[Seconds]]]:
        """(start, end) busy spans; end=None encodes an open tail's infinite suffix.

        ``assume_closed`` names orders whose open tail should be treated as
        ending at its operation end (used by a resource reasoning about the
        follow-up operation of the workpiece it currently holds).
        """
        spans: list[tuple[Seconds, Optional[Seconds]]] = []
        for e in self.entries:
            if e.open_tail and e.order_id not in assume_closed:
                spans.append((e.span_start, _INF))
            else:
                spans.append((e.span_start, e.span_end))
        return spans

    def free_intervals(
        self,
        window: TimeInterval,
        extra_busy: Iterable[TimeInterval] = (),
        assume_closed: frozenset[str] | set[str] = frozenset(),
    ) -> list[TimeInterval]:
        """Maximal free intervals intersected with ``window``, sorted.

        Open-tail entries block from their span start to +infinity. The union
        of the result and the busy spans partitions the window exactly.
        """
        blocked: list[tuple[Seconds, Optional[Seconds]]] = list(
            self.busy_spans(assume_closed)
        )
        blocked.extend((iv.start, iv.end) for iv in extra_busy if not iv.is_empty())
        blocked.sort(key=lambda s: (s[0], s[1] is not None, s[1] or 0))

        free: list[TimeInterval] = []
        cursor = window.start
        for start, end in blocked:
            if end is not None and end <= cursor:
                continue
            if start >= window.end:
                break
            if start > cursor:
                free.append(TimeInterval(cursor, min(start, window.end)))
            if end is None:
                return free  # everything after an open tail is blocked
            cursor = max(cursor, end)
            if cursor >= window.end:
                return free
        if cursor < window.end:
            free.append(TimeInterval(cursor, window.end))
        return free

    def placement_gaps(
        self,
        window: TimeInterval,
        new_end_state: str,
        setup_of: Optional[SetupFn] = None,
        extra_busy: Iterable[TimeInterval] = (),
        assume_closed: frozenset[str] | set[str] = frozenset(),
    ) -> list[TimeInterval]:
        """Free intervals whose right edge accounts for the successor's setup shift.

        A slot placed in a gap must leave room for the *recomputed* setup of
        the booking that follows the gap (its setup depends on the new entry's
        end state). Each plain free interval is trimmed or stretched at its
        end accordingly; the interior of the gap is untouched.
        """
        plain = self.free_intervals(window, extra_busy, assume_closed)
        if setup_of is None:
            return plain
        out: list[TimeInterval] = []
        for gap in plain:
            succ = self.entry_at_or_after(gap.end)
            limit = gap.end
            if succ is not None and succ.setup_interval is not None:
                if succ.setup_interval.start == gap.end:
                    # the gap is bounded by this successor's movable setup
                    new_setup = setup_of(new_end_state, succ)
                    limit = succ.core_start - new_setup
            hold_end = min(limit, window.end)
            if hold_end > gap.start:
                out.append(TimeInterval(gap.start, hold_end))
        return out

    def entry_at_or_after(self, t: Seconds) -> Optional[BookingEntry]:
        for e in self.entries:
            if e.span_start >= t:
                return e
        return None

    # -- mutations -------------------------------------------------------

    def insert_booking(
        self, entry: BookingEntry, successor_setup: Optional[SetupFn] = None
    ) -> AdjustmentReport:
        """Insert ``entry``, shifting the successor's setup segment if needed.

        Raises OverlapError when the entry (or the successor setup it forces)
        cannot fit. On success only the successor's setup segment may have
        moved; every other previously booked segment is untouched.
        """
        entry.validate()
        if entry.open_tail and any(
            e.open_tail and e.order_id == entry.order_id for e in self.entries
        ):
            raise OverlapError(
                f"order {entry.order_id} already has an open tail on this resource"
            )

        starts = [e.span_start for e in self.entries]
        idx = bisect.bisect_left(starts, entry.span_start)

        if idx > 0:
            pred = self.entries[idx - 1]
            if pred.open_tail:
                raise OverlapError(
                    f"cannot book after the open tail of order {pred.order_id}"
                )
            if entry.span_start < pred.span_end:
                raise OverlapError(
                    f"booking {entry.order_id}/{entry.step_label} starts inside "
                    f"{pred.order_id}/{pred.step_label}"
                )

        ti = 0
        succ: Optional[BookingEntry] = None
        new_setup_iv: Optional[TimeInterval] = None
        if idx < len(self.entries):
            succ = self.entries[idx]
            setup_iv = succ.setup_interval
            if setup_iv is not None and successor_setup is not None:
                new_setup = successor_setup(entry.end_state, succ)
                if new_setup < 0:
                    raise ValueError("setup duration cannot be negative")
                ti = new_setup - setup_iv.duration
                new_start = succ.core_start - new_setup
                if entry.span_end > new_start:
                    raise OverlapError(
                        f"booking {entry.order_id}/{entry.step_label} would force "
                        f"the setup of {succ.order_id}/{succ.step_label} to start "
                        f"before {hhmm(entry.span_end)}"
                    )
                if new_setup > 0:
                    new_setup_iv = TimeInterval(new_start, succ.core_start)
            else:
                bound = succ.span_start
                if setup_iv is None and successor_setup is not None:
                    # the successor had no setup recorded (it previously started
                    # from the right state/position); the new end state may force
                    # one, which must fit in the remaining gap even though it is
                    # not materialized as a segment
                    new_setup = successor_setup(entry.end_state, succ)
                    if new_setup < 0:
                        raise ValueError("setup duration cannot be negative")
                    if new_setup:
                        ti = new_setup
                        bound = succ.span_start - new_setup
                if entry.span_end > bound:
                    raise OverlapError(
                        f"booking {entry.order_id}/{entry.step_label} overlaps "
                        f"{succ.order_id}/{succ.step_label} (or the setup room "
                        f"it now needs)"
                    )

        # all checks passed: apply
        if succ is not None and succ.setup_interval is not None and successor_setup is not None:
            kind, _old = succ.segments[0]
            if new_setup_iv is None:
                succ.segments.pop(0)  # setup shrank to zero
            else:
                succ.segments[0] = (kind, new_setup_iv)
        self.entries.insert(idx, entry)
        if succ is not None and ti != 0:
            return AdjustmentReport(ti, succ.order_id, succ.step_label)
        return AdjustmentReport(0, None, None)

    def close_open_tail(
        self, order_id: str, departure: Seconds, load_time: Seconds
    ) -> BookingEntry:
        """Attach the real departure to an open-tail booking.

        The tail becomes ``[operation end, departure)``: a buffer-hold segment
        if the workpiece waited on the machine, then a load segment of
        ``load_time`` ending exactly at ``departure``. Afterwards the time
        beyond ``departure`` is free again.
        """
        entry = self.open_tail_for(order_id)
        if entry is None:
            raise NoOpenTail(f"no open tail for order {order_id}")
        op_end = entry.span_end
        loading_start = departure - load_time
        if loading_start < op_end:
            raise OverlapError(
                f"loading at {hhmm(loading_start)} would overlap the operation "
                f"ending {hhmm(op_end)}"
            )
        # the successor (if any) must still start after the closed tail
        idx = self.entries.index(entry)
        if idx + 1 < len(self.entries):
            succ = self.entries[idx + 1]
            bound = succ.span_start
            if departure > bound:
                raise OverlapError(
                    f"departure {hhmm(departure)} runs into "
                    f"{succ.order_id}/{succ.step_label} at {hhmm(bound)}"
                )
        if loading_start > op_end:
            entry.segments.append(
                ("buffer-hold", TimeInterval(op_end, loading_start))
            )
        if load_time > 0:
            entry.segments.append(("load", TimeInterval(loading_start, departure)))
        entry.open_tail = False
        return entry

    # -- invariant helper (used heavily by tests) -------------------------

    def check_invariants(self) -> None:
        prev: Optional[BookingEntry] = None
        open_orders: set[str] = set()
        for e in self.entries:
            e.validate()
            if prev is not None:
                if e.span_start < prev.span_end:
                    raise ScheduleError(
                        f"entries {prev.order_id}/{prev.step_label} and "
                        f"{e.order_id}/{e.step_label} overlap"
                    )
            if e.open_tail:
                if e.order_id in open_orders:
                    raise ScheduleError(
                        f"two open tails for order {e.order_id}"
                    )
                open_orders.add(e.order_id)
            prev = e
