"""Scenario files: schema, validation, normalization, agent instantiation.

A scenario is a JSON document describing one shop floor: machines, buffer
places, transports, the product process plans, and the orders to run.  All
durations and calendar instants in the file are **minutes**; the engine works
in whole seconds, so every minute value must land on a whole second.  The
normative field reference lives in ``docs/formats.md``.

``load_scenario`` validates aggressively and reports *every* violation with
its field path, because scenario files are written by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from .agents import (
    BufferAgent,
    BufferConfig,
    DirectoryService,
    OrderAgent,
    OrderConfig,
    ProductionAgent,
    ProductionConfig,
    TransportAgent,
    TransportConfig,
)
from .calculus import ScheduleParams, TransportGeometry, derive_t_transport_min
from .timebase import BookingEntry, Seconds, TimeInterval, minutes

FORMAT_VERSION = 1

BUFFER_CAPABILITY = "buffer"
TRANSPORT_CAPABILITY = "transport"


class ValidationError(ValueError):
    """The scenario document violates the schema; one line per field path."""

    def __init__(self, problems: Sequence[str]):
        self.problems = tuple(problems)
        super().__init__("\n".join(self.problems))


# ---------------------------------------------------------------------------
# scenario model


@dataclass(frozen=True)
class InitialBooking:
    """A pre-existing busy block on a machine (seconds, half-open)."""

    order_id: str
    start: Seconds
    end: Seconds
    end_state: str = ""


@dataclass(frozen=True)
class MaintenanceWindow:
    """A fixed maintenance block; ``state`` is the machine state it demands."""

    start: Seconds
    end: Seconds
    state: str = ""


@dataclass(frozen=True)
class MachineSpec:
    id: str
    operation: str
    location: tuple[float, float]
    op_duration: tuple[tuple[str, Seconds], ...]  # (product, seconds)
    setup: tuple[tuple[str, str, Seconds], ...]  # (from, to, seconds)
    initial_state: str = ""
    initial_bookings: tuple[InitialBooking, ...] = ()
    maintenance: tuple[MaintenanceWindow, ...] = ()

    def durations(self) -> dict[str, Seconds]:
        return dict(self.op_duration)

    def setup_matrix(self) -> dict[str, dict[str, Seconds]]:
        out: dict[str, dict[str, Seconds]] = {}
        for frm, to, dur in self.setup:
            out.setdefault(frm, {})[to] = dur
        return out


@dataclass(frozen=True)
class BufferSpec:
    id: str
    location: tuple[float, float]
    capacity: int = 1


@dataclass(frozen=True)
class TransportInitialBooking:
    order_id: str
    start: Seconds
    end: Seconds
    end_x: float = 0.0


@dataclass(frozen=True)
class TransportSpec:
    id: str
    segment: tuple[float, float]
    speed: float  # metres per minute, as written in the file
    load: Seconds
    unload: Seconds
    initial_x: float = 0.0
    initial_bookings: tuple[TransportInitialBooking, ...] = ()

    def geometry(self) -> TransportGeometry:
        return TransportGeometry(
            speed=self.speed / 60.0,  # the engine computes in metres per second
            load_time=self.load,
            unload_time=self.unload,
            x_min=self.segment[0],
            x_max=self.segment[1],
        )


@dataclass(frozen=True)
class ProductSpec:
    id: str
    steps: tuple[str, ...]  # operation names, in process-plan order


@dataclass(frozen=True)
class OrderSpec:
    id: str
    product: str
    arrival: Seconds = 0  # calendar instant the workpiece is available
    release: float = 0.0  # negotiation-clock instant the order agent starts


@dataclass(frozen=True)
class ScenarioParams:
    t_buffer_min: Seconds
    t_transport_min: Optional[Seconds] = None  # override; derived when None
    cfp_deadline: Optional[float] = None
    hold_deadline: Optional[float] = None


@dataclass(frozen=True)
class Scenario:
    name: str
    params: ScenarioParams
    machines: tuple[MachineSpec, ...]
    buffers: tuple[BufferSpec, ...]
    transports: tuple[TransportSpec, ...]
    products: tuple[ProductSpec, ...]
    orders: tuple[OrderSpec, ...]

    def product(self, product_id: str) -> ProductSpec:
        for p in self.products:
            if p.id == product_id:
                return p
        raise KeyError(product_id)

    @property
    def t_transport_min(self) -> Seconds:
        if self.params.t_transport_min is not None:
            return self.params.t_transport_min
        locations = [m.location for m in self.machines] + [
            b.location for b in self.buffers
        ]
        return derive_t_transport_min(locations, [t.geometry() for t in self.transports])

    def schedule_params(self) -> ScheduleParams:
        return ScheduleParams(
            t_transport_min=self.t_transport_min,
            t_buffer_min=self.params.t_buffer_min,
        )


# ---------------------------------------------------------------------------
# parsing / validation

_MISSING = object()


class _Reader:
    """Walks a parsed JSON tree collecting problems instead of failing fast."""

    def __init__(self) -> None:
        self.problems: list[str] = []

    def fail(self, path: str, message: str) -> None:
        self.problems.append(f"{path}: {message}")

    def obj(self, value: Any, path: str) -> dict:
        if not isinstance(value, dict):
            self.fail(path, f"expected an object, got {type(value).__name__}")
            return {}
        return value

    def array(self, value: Any, path: str) -> list:
        if not isinstance(value, list):
            self.fail(path, f"expected an array, got {type(value).__name__}")
            return []
        return value

    def string(self, parent: Mapping, key: str, path: str, default: Any = _MISSING) -> str:
        value = parent.get(key, _MISSING)
        if value is _MISSING:
            if default is not _MISSING:
                return default
            self.fail(f"{path}.{key}", "required field is missing")
            return ""
        if not isinstance(value, str):
            self.fail(f"{path}.{key}", "expected a string")
            return ""
        return value

    def number(
        self,
        parent: Mapping,
        key: str,
        path: str,
        default: Any = _MISSING,
        minimum: Optional[float] = None,
    ) -> float:
        value = parent.get(key, _MISSING)
        if value is _MISSING:
            if default is not _MISSING:
                return default
            self.fail(f"{path}.{key}", "required field is missing")
            return 0.0
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"{path}.{key}", "expected a number")
            return 0.0
        if minimum is not None and value < minimum:
            self.fail(f"{path}.{key}", f"must be >= {minimum}, got {value}")
            return minimum
        return value

    def duration(self, parent: Mapping, key: str, path: str, default: Any = _MISSING,
                 minimum: float = 0) -> Seconds:
        """A minutes field converted to engine seconds."""
        raw = self.number(parent, key, path, default=default, minimum=minimum)
        try:
            return minutes(raw)
        except ValueError as exc:
            self.fail(f"{path}.{key}", str(exc))
            return 0

    def xy(self, parent: Mapping, key: str, path: str) -> tuple[float, float]:
        value = parent.get(key, _MISSING)
        if value is _MISSING:
            self.fail(f"{path}.{key}", "required field is missing")
            return (0.0, 0.0)
        if (
            not isinstance(value, list)
            or len(value) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        ):
            self.fail(f"{path}.{key}", "expected [x, y] numbers")
            return (0.0, 0.0)
        return (float(value[0]), float(value[1]))

    def no_shared_resources(self, parent: Mapping, path: str) -> None:
        for key in ("shared_resources", "sr_demands", "tools"):
            if parent.get(key):
                self.fail(
                    f"{path}.{key}",
                    "shared-resource demands are not supported by this engine",
                )


def _check_disjoint(spans: list[tuple[Seconds, Seconds, str]], r: _Reader) -> None:
    spans = sorted(spans)
    for (s0, e0, p0), (s1, _e1, p1) in zip(spans, spans[1:]):
        if s1 < e0:
            r.fail(p1, f"overlaps {p0} ([{s0}, {e0}) vs start {s1})")


def parse_scenario(doc: Any, source: str = "<scenario>") -> Scenario:
    r = _Reader()
    root = r.obj(doc, source)

    version = root.get("format_version")
    if version != FORMAT_VERSION:
        r.fail(f"{source}.format_version", f"expected {FORMAT_VERSION}, got {version!r}")

    name = r.string(root, "name", source, default="unnamed")

    pdoc = r.obj(root.get("params", {}), f"{source}.params")
    t_buffer = r.duration(pdoc, "t_buffer_min", f"{source}.params", minimum=0)
    if t_buffer <= 0:
        r.fail(f"{source}.params.t_buffer_min", "must be a positive number of minutes")
    t_transport: Optional[Seconds] = None
    if pdoc.get("t_transport_min") is not None:
        t_transport = r.duration(pdoc, "t_transport_min", f"{source}.params", minimum=0)
    cfp_deadline = pdoc.get("cfp_deadline")
    hold_deadline = pdoc.get("hold_deadline")
    for key, value in (("cfp_deadline", cfp_deadline), ("hold_deadline", hold_deadline)):
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0):
            r.fail(f"{source}.params.{key}", "must be a positive number when given")

    seen_ids: dict[str, str] = {}

    def claim_id(kind: str, agent_id: str, path: str) -> None:
        if not agent_id:
            return
        if agent_id in seen_ids:
            r.fail(path, f"id {agent_id!r} already used by {seen_ids[agent_id]}")
        else:
            seen_ids[agent_id] = kind

    machines: list[MachineSpec] = []
    for i, mdoc_raw in enumerate(r.array(root.get("machines", []), f"{source}.machines")):
        path = f"{source}.machines[{i}]"
        mdoc = r.obj(mdoc_raw, path)
        mid = r.string(mdoc, "id", path)
        claim_id("machine", mid, f"{path}.id")
        operation = r.string(mdoc, "operation", path)
        r.no_shared_resources(mdoc, path)
        location = r.xy(mdoc, "location", path)

        durations: list[tuple[str, Seconds]] = []
        ddoc = r.obj(mdoc.get("op_duration", {}), f"{path}.op_duration")
        if not ddoc:
            r.fail(f"{path}.op_duration", "must map at least one product to a duration")
        for product, _ in sorted(ddoc.items()):
            dur = r.duration(ddoc, product, f"{path}.op_duration", minimum=0)
            if dur <= 0:
                r.fail(f"{path}.op_duration.{product}", "operation duration must be positive")
            durations.append((product, dur))

        setups: list[tuple[str, str, Seconds]] = []
        sdoc = r.obj(mdoc.get("setup", {}), f"{path}.setup")
        for frm in sorted(sdoc):
            row = r.obj(sdoc[frm], f"{path}.setup.{frm}")
            for to in sorted(row):
                setups.append((frm, to, r.duration(row, to, f"{path}.setup.{frm}", minimum=0)))

        bookings: list[InitialBooking] = []
        spans: list[tuple[Seconds, Seconds, str]] = []
        for j, bdoc_raw in enumerate(
            r.array(mdoc.get("initial_bookings", []), f"{path}.initial_bookings")
        ):
            bpath = f"{path}.initial_bookings[{j}]"
            bdoc = r.obj(bdoc_raw, bpath)
            start = r.duration(bdoc, "start", bpath, minimum=0)
            end = r.duration(bdoc, "end", bpath, minimum=0)
            if end <= start:
                r.fail(bpath, f"end ({end}s) must be after start ({start}s)")
            booking = InitialBooking(
                order_id=r.string(bdoc, "order_id", bpath, default=f"{mid}-init-{j}"),
                start=start,
                end=end,
                end_state=r.string(bdoc, "end_state", bpath, default=""),
            )
            bookings.append(booking)
            spans.append((start, end, bpath))

        windows: list[MaintenanceWindow] = []
        for j, wdoc_raw in enumerate(r.array(mdoc.get("maintenance", []), f"{path}.maintenance")):
            wpath = f"{path}.maintenance[{j}]"
            wdoc = r.obj(wdoc_raw, wpath)
            start = r.duration(wdoc, "start", wpath, minimum=0)
            end = r.duration(wdoc, "end", wpath, minimum=0)
            if end <= start:
                r.fail(wpath, f"end ({end}s) must be after start ({start}s)")
            windows.append(
                MaintenanceWindow(start=start, end=end, state=r.string(wdoc, "state", wpath, default=""))
            )
            spans.append((start, end, wpath))

        _check_disjoint(spans, r)
        machines.append(
            MachineSpec(
                id=mid,
                operation=operation,
                location=location,
                op_duration=tuple(durations),
                setup=tuple(setups),
                initial_state=r.string(mdoc, "initial_state", path, default=""),
                initial_bookings=tuple(bookings),
                maintenance=tuple(windows),
            )
        )

    buffers: list[BufferSpec] = []
    for i, bdoc_raw in enumerate(r.array(root.get("buffers", []), f"{source}.buffers")):
        path = f"{source}.buffers[{i}]"
        bdoc = r.obj(bdoc_raw, path)
        bid = r.string(bdoc, "id", path)
        claim_id("buffer", bid, f"{path}.id")
        capacity = r.number(bdoc, "capacity", path, default=1, minimum=1)
        if capacity != 1:
            r.fail(f"{path}.capacity", "buffer places have capacity 1; model more places instead")
        buffers.append(BufferSpec(id=bid, location=r.xy(bdoc, "location", path), capacity=1))

    transports: list[TransportSpec] = []
    for i, tdoc_raw in enumerate(r.array(root.get("transports", []), f"{source}.transports")):
        path = f"{source}.transports[{i}]"
        tdoc = r.obj(tdoc_raw, path)
        tid = r.string(tdoc, "id", path)
        claim_id("transport", tid, f"{path}.id")
        seg = tdoc.get("segment")
        if (
            not isinstance(seg, list)
            or len(seg) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in seg)
            or seg[1] < seg[0]
        ):
            r.fail(f"{path}.segment", "expected [lo, hi] with lo <= hi")
            seg = [0.0, 0.0]
        speed = r.number(tdoc, "speed", path)
        if speed <= 0:
            r.fail(f"{path}.speed", "must be positive (metres per minute)")
            speed = 1.0
        initial_x = r.number(tdoc, "initial_x", path, default=float(seg[0]))
        if not seg[0] <= initial_x <= seg[1]:
            r.fail(f"{path}.initial_x", f"{initial_x} lies outside segment {seg}")

        bookings_t: list[TransportInitialBooking] = []
        spans = []
        for j, ibdoc_raw in enumerate(
            r.array(tdoc.get("initial_bookings", []), f"{path}.initial_bookings")
        ):
            bpath = f"{path}.initial_bookings[{j}]"
            ibdoc = r.obj(ibdoc_raw, bpath)
            start = r.duration(ibdoc, "start", bpath, minimum=0)
            end = r.duration(ibdoc, "end", bpath, minimum=0)
            if end <= start:
                r.fail(bpath, f"end ({end}s) must be after start ({start}s)")
            end_x = r.number(ibdoc, "end_x", bpath, default=initial_x)
            if not seg[0] <= end_x <= seg[1]:
                r.fail(f"{bpath}.end_x", f"{end_x} lies outside segment {seg}")
            bookings_t.append(
                TransportInitialBooking(
                    order_id=r.string(ibdoc, "order_id", bpath, default=f"{tid}-init-{j}"),
                    start=start,
                    end=end,
                    end_x=float(end_x),
                )
            )
            spans.append((start, end, bpath))
        _check_disjoint(spans, r)

        transports.append(
            TransportSpec(
                id=tid,
                segment=(float(seg[0]), float(seg[1])),
                speed=float(speed),
                load=r.duration(tdoc, "load", path, minimum=0),
                unload=r.duration(tdoc, "unload", path, minimum=0),
                initial_x=float(initial_x),
                initial_bookings=tuple(bookings_t),
            )
        )

    products: list[ProductSpec] = []
    product_ids: set[str] = set()
    for i, pdoc_raw in enumerate(r.array(root.get("products", []), f"{source}.products")):
        path = f"{source}.products[{i}]"
        pdoc2 = r.obj(pdoc_raw, path)
        pid = r.string(pdoc2, "id", path)
        if pid in product_ids:
            r.fail(f"{path}.id", f"duplicate product id {pid!r}")
        product_ids.add(pid)
        steps: list[str] = []
        raw_steps = r.array(pdoc2.get("steps", []), f"{path}.steps")
        if not raw_steps:
            r.fail(f"{path}.steps", "a product needs at least one step")
        for j, step in enumerate(raw_steps):
            spath = f"{path}.steps[{j}]"
            if isinstance(step, str):
                steps.append(step)
            elif isinstance(step, dict):
                r.no_shared_resources(step, spath)
                steps.append(r.string(step, "operation", spath))
            else:
                r.fail(spath, "expected an operation name or an object with one")
        products.append(ProductSpec(id=pid, steps=tuple(steps)))

    orders: list[OrderSpec] = []
    for i, odoc_raw in enumerate(r.array(root.get("orders", []), f"{source}.orders")):
        path = f"{source}.orders[{i}]"
        odoc = r.obj(odoc_raw, path)
        oid = r.string(odoc, "id", path, default=f"order-{i + 1}")
        claim_id("order", oid, f"{path}.id")
        product = r.string(odoc, "product", path)
        if product and product_ids and product not in product_ids:
            r.fail(f"{path}.product", f"unknown product {product!r}")
        orders.append(
            OrderSpec(
                id=oid,
                product=product,
                arrival=r.duration(odoc, "arrival", path, default=0, minimum=0),
                release=r.number(odoc, "release", path, default=0.0, minimum=0),
            )
        )

    if r.problems:
        raise ValidationError(r.problems)

    return Scenario(
        name=name,
        params=ScenarioParams(
            t_buffer_min=t_buffer,
            t_transport_min=t_transport,
            cfp_deadline=float(cfp_deadline) if cfp_deadline is not None else None,
            hold_deadline=float(hold_deadline) if hold_deadline is not None else None,
        ),
        machines=tuple(machines),
        buffers=tuple(buffers),
        transports=tuple(transports),
        products=tuple(products),
        orders=tuple(orders),
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError([f"{path}: not valid JSON ({exc})"]) from exc
    return parse_scenario(doc, source=path.name)


# ---------------------------------------------------------------------------
# normalization / export


def _mins(seconds: Seconds) -> Union[int, float]:
    m = seconds / 60
    return int(m) if m == int(m) else m


def scenario_to_dict(s: Scenario) -> dict:
    """Canonical JSON-ready form; load(export(load(x))) is the identity."""
    doc: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "name": s.name,
        "params": {"t_buffer_min": _mins(s.params.t_buffer_min)},
        "machines": [],
        "buffers": [],
        "transports": [],
        "products": [],
        "orders": [],
    }
    if s.params.t_transport_min is not None:
        doc["params"]["t_transport_min"] = _mins(s.params.t_transport_min)
    if s.params.cfp_deadline is not None:
        doc["params"]["cfp_deadline"] = s.params.cfp_deadline
    if s.params.hold_deadline is not None:
        doc["params"]["hold_deadline"] = s.params.hold_deadline

    for m in s.machines:
        mdoc: dict[str, Any] = {
            "id": m.id,
            "operation": m.operation,
            "location": list(m.location),
            "op_duration": {p: _mins(d) for p, d in m.op_duration},
            "setup": {},
            "initial_state": m.initial_state,
        }
        for frm, to, dur in m.setup:
            mdoc["setup"].setdefault(frm, {})[to] = _mins(dur)
        if m.initial_bookings:
            mdoc["initial_bookings"] = [
                {
                    "order_id": b.order_id,
                    "start": _mins(b.start),
                    "end": _mins(b.end),
                    "end_state": b.end_state,
                }
                for b in m.initial_bookings
            ]
        if m.maintenance:
            mdoc["maintenance"] = [
                {"start": _mins(w.start), "end": _mins(w.end), "state": w.state}
                for w in m.maintenance
            ]
        doc["machines"].append(mdoc)

    for b in s.buffers:
        doc["buffers"].append({"id": b.id, "location": list(b.location), "capacity": b.capacity})

    for t in s.transports:
        tdoc: dict[str, Any] = {
            "id": t.id,
            "segment": list(t.segment),
            "speed": t.speed,
            "load": _mins(t.load),
            "unload": _mins(t.unload),
            "initial_x": t.initial_x,
        }
        if t.initial_bookings:
            tdoc["initial_bookings"] = [
                {
                    "order_id": b.order_id,
                    "start": _mins(b.start),
                    "end": _mins(b.end),
                    "end_x": b.end_x,
                }
                for b in t.initial_bookings
            ]
        doc["transports"].append(tdoc)

    for p in s.products:
        doc["products"].append({"id": p.id, "steps": list(p.steps)})

    for o in s.orders:
        doc["orders"].append(
            {
                "id": o.id,
                "product": o.product,
                "arrival": _mins(o.arrival),
                "release": o.release,
            }
        )
    return doc


def save_scenario(s: Scenario, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# agent instantiation


@dataclass
class RuntimeBundle:
    """Everything the kernel needs, built from one scenario."""

    directory: DirectoryService
    agents: dict[str, Any]
    releases: list[tuple[float, str]]
    params: ScheduleParams
    kinds: dict[str, str]  # agent id -> machine | buffer | transport | order


def build_runtime(scenario: Scenario) -> RuntimeBundle:
    """Instantiate and register all agents, with initial calendars in place."""
    params = scenario.schedule_params()
    directory = DirectoryService()
    agents: dict[str, Any] = {}
    kinds: dict[str, str] = {}

    max_unload = max((t.unload for t in scenario.transports), default=0)
    max_load = max((t.load for t in scenario.transports), default=0)

    for m in scenario.machines:
        agent = ProductionAgent(
            ProductionConfig(
                agent_id=m.id,
                capability=m.operation,
                location=m.location,
                op_duration=m.durations(),
                setup=m.setup_matrix(),
                initial_state=m.initial_state,
                unload_estimate=max_unload,
                load_estimate=max_load,
            )
        )
        for b in m.initial_bookings:
            agent.schedule.insert_booking(
                BookingEntry(
                    order_id=b.order_id,
                    step_label="init",
                    segments=[("operation", TimeInterval(b.start, b.end))],
                    open_tail=False,
                    end_state=b.end_state,
                )
            )
        for i, w in enumerate(m.maintenance):
            agent.schedule.insert_booking(
                BookingEntry(
                    order_id=f"{m.id}-maint-{i}",
                    step_label="maintenance",
                    segments=[("maintenance", TimeInterval(w.start, w.end))],
                    open_tail=False,
                    end_state=w.state,
                )
            )
        agents[m.id] = agent
        kinds[m.id] = "machine"
        directory.register(m.operation, m.id)

    for b in scenario.buffers:
        agents[b.id] = BufferAgent(
            BufferConfig(
                agent_id=b.id,
                location=b.location,
                capacity=b.capacity,
                unload_estimate=max_unload,
                load_estimate=max_load,
            )
        )
        kinds[b.id] = "buffer"
        directory.register(BUFFER_CAPABILITY, b.id)

    for t in scenario.transports:
        agent = TransportAgent(
            TransportConfig(agent_id=t.id, geometry=t.geometry(), initial_x=t.initial_x)
        )
        for ib in t.initial_bookings:
            agent.schedule.insert_booking(
                BookingEntry(
                    order_id=ib.order_id,
                    step_label="init",
                    segments=[("operation", TimeInterval(ib.start, ib.end))],
                    open_tail=False,
                    end_state=f"{ib.end_x:g}",
                )
            )
        agents[t.id] = agent
        kinds[t.id] = "transport"
        directory.register(TRANSPORT_CAPABILITY, t.id)

    releases: list[tuple[float, str]] = []
    for o in scenario.orders:
        plan = scenario.product(o.product).steps
        agents[o.id] = OrderAgent(
            OrderConfig(order_id=o.id, product=o.product, plan=plan, arrival=o.arrival),
            params=params,
        )
        kinds[o.id] = "order"
        releases.append((o.release, o.id))

    releases.sort(key=lambda pair: (pair[0], pair[1]))
    return RuntimeBundle(
        directory=directory, agents=agents, releases=releases, params=params, kinds=kinds
    )
