"""Controller, hub relays and unit agents over local TCP sockets.

Topology: every unit agent connects to its hub, every hub connects to the
controller. A step ``k`` is driven by a logical clock:

* ``TICK(k, SAMPLE)``: batteries send ``MEASUREMENT``, PV units and loads
  send ``AVAILABILITY``, then ``ACK``. A hub answers with its own ``ACK``
  once all of its units have acknowledged the phase.
* the controller dispatches and sends ``SETPOINT_PLAN`` to every unit.
* ``TICK(k, APPLY)``: units apply the received plan or fall back to their
  stored default plan, the batteries integrate their SoC, then ``ACK``.

Hubs drop data messages on a link whose communication flag is 0 at the
message's step, in both directions. ``TICK`` and the hubs' own ``ACK``
markers are never dropped; they are the clock, not unit traffic.
"""
from __future__ import annotations

import asyncio
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..model import ConnectionState
from ..sim import (Controller, LocalUnit, Scenario, TraceRecord, disturbance_sequence,
                   finish_record, hub_of, plant_step)
from .wire import (CONTROLLER_ID, HUB_BASE, Codec, MsgType, Phase, WireError, WireMessage, ack,
                   tick)

logger = logging.getLogger(__name__)

DATA_TYPES = (MsgType.SETPOINT_PLAN, MsgType.MEASUREMENT, MsgType.AVAILABILITY, MsgType.ACK)


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnitId:
    kind: str
    index: int

    def wire(self, cfg) -> int:
        off = {"battery": 0, "pv": cfg.n_b, "load": cfg.n_b + cfg.n_s}[self.kind]
        return off + self.index


def unit_from_wire(uid: int, cfg) -> UnitId:
    if uid < cfg.n_b:
        return UnitId("battery", uid)
    if uid < cfg.n_b + cfg.n_s:
        return UnitId("pv", uid - cfg.n_b)
    if uid < cfg.n_b + cfg.n_s + cfg.n_l:
        return UnitId("load", uid - cfg.n_b - cfg.n_s)
    raise HarnessError(f"unknown unit id {uid}")


class LinkState:
    """Per-unit communication links of a scenario, looked up by step.

    Loads have no communication flag in the model; their links are always up.
    """

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.cfg = scenario.config
        self._cache: dict[int, ConnectionState] = {}

    def _conn(self, k: int) -> ConnectionState:
        if k not in self._cache:
            self._cache[k] = self.sc.connection(k)
        return self._cache[k]

    def is_up(self, unit_id: int, k: int) -> bool:
        u = unit_from_wire(unit_id, self.cfg)
        c = self._conn(k)
        if u.kind == "battery":
            return bool(c.A_b[u.index])
        if u.kind == "pv":
            return bool(c.A_s[u.index])
        return True


def drop_policy(link: LinkState, msg: WireMessage) -> str:
    """``"deliver"`` or ``"drop"`` for a unit-link message at the hub."""
    if msg.type not in DATA_TYPES:
        return "deliver"
    return "deliver" if link.is_up(msg.unit_id, msg.k) else "drop"


@dataclass
class LinkCounter:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0


@dataclass
class Counters:
    """Per-link traffic, keyed by ``(unit_id, direction)`` with direction
    ``"up"`` (unit to controller) or ``"down"``."""

    links: dict = field(default_factory=lambda: defaultdict(LinkCounter))
    received_by_controller: dict = field(default_factory=lambda: defaultdict(int))
    received_by_unit: dict = field(default_factory=lambda: defaultdict(int))

    def conserved(self) -> bool:
        return all(c.sent == c.delivered + c.dropped for c in self.links.values())


class _Jitter:
    def __init__(self, max_delay: float, seed: int):
        self.max_delay = max_delay
        self.rng = random.Random(seed)

    async def __call__(self):
        if self.max_delay > 0:
            await asyncio.sleep(self.rng.uniform(0, self.max_delay))


# ---------------------------------------------------------------- unit agents

class UnitAgent:
    """Common socket loop of battery, PV and load agents."""

    def __init__(self, uid: UnitId, scenario: Scenario, codec: Codec):
        self.uid = uid
        self.sc = scenario
        self.cfg = scenario.config
        self.codec = codec
        self.wire_id = uid.wire(self.cfg)
        self.pending = None
        self.log: dict[int, dict] = {}

    async def run(self, host: str, port: int):
        reader, writer = await asyncio.open_connection(host, port)
        writer.write(self.codec.pack(WireMessage(MsgType.HELLO, 0, self.wire_id)))
        await writer.drain()
        try:
            while True:
                msg = await self.codec.read(reader)
                if msg is None:
                    raise HarnessError(f"unit {self.wire_id}: hub closed the link")
                if msg.type == MsgType.SETPOINT_PLAN:
                    if len(msg.payload) != self.cfg.N + 1:
                        raise WireError(f"plan of length {len(msg.payload)} != N+1")
                    self.pending = np.array(msg.payload)
                    continue
                if msg.type != MsgType.TICK:
                    continue
                if msg.phase == Phase.STOP:
                    break
                out = self.sample(msg.k) if msg.phase == Phase.SAMPLE else self.apply(msg.k)
                for m in out:
                    writer.write(self.codec.pack(m))
                writer.write(self.codec.pack(ack(msg.k, msg.phase, self.wire_id)))
                await writer.drain()
        finally:
            writer.close()

    def sample(self, k: int) -> list:
        return []

    def apply(self, k: int) -> list:
        return []


class BatteryAgent(UnitAgent):
    def __init__(self, uid, scenario, codec, plan, omegas, upsilons):
        super().__init__(uid, scenario, codec)
        self.unit = LocalUnit(plan)
        self.x = float(scenario.x0[uid.index])
        self.omegas = omegas[:, uid.index]
        self.upsilons = upsilons[:, uid.index]

    def sample(self, k):
        return [WireMessage(MsgType.MEASUREMENT, k, self.wire_id, (self.x + self.upsilons[k],))]

    def apply(self, k):
        u = self.unit.apply(k, self.pending)
        self.pending = None
        g = self.sc.connection(k).G_b[self.uid.index]
        p = u if g else 0.0
        self.log[k] = {"x": self.x, "u": u, "plan": self.unit.plan.sequence.copy()}
        self.x = self.x - self.cfg.T_s * (p + self.omegas[k])
        return []


class PvAgent(UnitAgent):
    def __init__(self, uid, scenario, codec, plan):
        super().__init__(uid, scenario, codec)
        self.unit = LocalUnit(plan)

    def sample(self, k):
        pa = float(self.sc.pv_actual(k)[self.uid.index])
        self.log[k] = {"pa": pa}
        return [WireMessage(MsgType.AVAILABILITY, k, self.wire_id, (pa,))]

    def apply(self, k):
        u = self.unit.apply(k, self.pending)
        self.pending = None
        self.log[k].update(u=u, plan=self.unit.plan.sequence.copy())
        return []


class LoadAgent(UnitAgent):
    def sample(self, k):
        pl = float(self.sc.load_actual(k)[self.uid.index])
        self.log[k] = {"pl": pl}
        return [WireMessage(MsgType.AVAILABILITY, k, self.wire_id, (pl,))]


# ---------------------------------------------------------------- hub

class Hub:
    """Relay between the controller and the units of one microgrid."""

    def __init__(self, h: int, units: list[int], link: LinkState, codec: Codec,
                 counters: Counters, jitter: _Jitter):
        self.h = h
        self.wire_id = HUB_BASE + h
        self.units = set(units)
        self.link = link
        self.codec = codec
        self.counters = counters
        self.jitter = jitter
        self.unit_writers: dict[int, asyncio.StreamWriter] = {}
        self.all_connected = asyncio.Event()
        self.up_queue: asyncio.Queue = asyncio.Queue()
        self.server = None
        self._unit_tasks = []

    async def start(self, host: str, port: int):
        try:
            self.server = await asyncio.start_server(self._on_unit, host, port)
        except OSError as exc:
            raise HarnessError(f"hub {self.h}: cannot bind {host}:{port}: {exc}") from None
        if not self.units:
            self.all_connected.set()
        return self.server.sockets[0].getsockname()[:2]

    async def _on_unit(self, reader, writer):
        hello = await self.codec.read(reader)
        if hello is None or hello.type != MsgType.HELLO or hello.unit_id not in self.units:
            writer.close()
            return
        self.unit_writers[hello.unit_id] = writer
        if set(self.unit_writers) == self.units:
            self.all_connected.set()
        while True:
            msg = await self.codec.read(reader)
            if msg is None:
                break
            await self.up_queue.put(msg)

    async def run(self, host: str, port: int):
        await self.all_connected.wait()
        reader, writer = await asyncio.open_connection(host, port)
        writer.write(self.codec.pack(WireMessage(MsgType.HELLO, 0, self.wire_id)))
        await writer.drain()
        up = asyncio.create_task(self._upstream(writer))
        try:
            await self._downstream(reader)
        finally:
            up.cancel()
            for w in self.unit_writers.values():
                w.close()
            writer.close()
            self.server.close()

    async def _downstream(self, reader):
        while True:
            msg = await self.codec.read(reader)
            if msg is None:
                raise HarnessError(f"hub {self.h}: controller closed the link")
            if msg.type == MsgType.TICK:
                await self.jitter()
                for w in self.unit_writers.values():
                    w.write(self.codec.pack(msg))
                for w in self.unit_writers.values():
                    await w.drain()
                if msg.phase == Phase.STOP:
                    return
                continue
            if msg.unit_id not in self.units:
                raise HarnessError(f"hub {self.h}: message for foreign unit {msg.unit_id}")
            c = self.counters.links[(msg.unit_id, "down")]
            c.sent += 1
            if drop_policy(self.link, msg) == "drop":
                c.dropped += 1
                continue
            await self.jitter()
            self.unit_writers[msg.unit_id].write(self.codec.pack(msg))
            await self.unit_writers[msg.unit_id].drain()
            c.delivered += 1
            self.counters.received_by_unit[msg.unit_id] += 1

    async def _upstream(self, writer):
        acked: dict[tuple, set] = defaultdict(set)
        while True:
            msg = await self.up_queue.get()
            c = self.counters.links[(msg.unit_id, "up")]
            c.sent += 1
            if drop_policy(self.link, msg) == "drop":
                c.dropped += 1
            else:
                await self.jitter()
                writer.write(self.codec.pack(msg))
                c.delivered += 1
            if msg.type == MsgType.ACK:
                key = (msg.k, msg.phase)
                acked[key].add(msg.unit_id)
                if acked[key] == self.units:
                    del acked[key]
                    writer.write(self.codec.pack(ack(msg.k, msg.phase, self.wire_id)))
            await writer.drain()


# ---------------------------------------------------------------- controller

class ControllerAgent:
    def __init__(self, scenario: Scenario, controller: Controller, n_hubs: int, codec: Codec,
                 counters: Counters, tick_timeout: float):
        self.sc = scenario
        self.cfg = scenario.config
        self.ctrl = controller
        self.codec = codec
        self.counters = counters
        self.n_hubs = n_hubs
        self.timeout = tick_timeout
        self.hubs: dict[int, tuple] = {}
        self.ready = asyncio.Event()
        self.server = None
        self.records: dict[int, dict] = {}

    async def start(self, host: str, port: int):
        try:
            self.server = await asyncio.start_server(self._on_hub, host, port)
        except OSError as exc:
            raise HarnessError(f"controller: cannot bind {host}:{port}: {exc}") from None
        return self.server.sockets[0].getsockname()[:2]

    async def _on_hub(self, reader, writer):
        hello = await self.codec.read(reader)
        if hello is None or hello.type != MsgType.HELLO or not 0 <= hello.unit_id - HUB_BASE < self.n_hubs:
            writer.close()
            return
        self.hubs[hello.unit_id - HUB_BASE] = (reader, writer)
        if len(self.hubs) == self.n_hubs:
            self.ready.set()

    async def _broadcast(self, msg):
        for _, w in self.hubs.values():
            w.write(self.codec.pack(msg))
        for _, w in self.hubs.values():
            await w.drain()

    async def _collect(self, k: int, phase: Phase) -> dict[int, WireMessage]:
        """Read every hub's stream up to its phase-complete marker."""
        got = {}
        for h, (reader, _) in sorted(self.hubs.items()):
            while True:
                msg = await asyncio.wait_for(self.codec.read(reader), self.timeout)
                if msg is None:
                    raise HarnessError(f"controller: hub {h} closed the link at step {k}")
                if msg.k != k:
                    raise HarnessError(f"controller: message for step {msg.k} during step {k}")
                if msg.unit_id >= HUB_BASE:
                    if msg.type == MsgType.ACK and msg.phase == phase:
                        break
                    continue
                self.counters.received_by_controller[msg.unit_id] += 1
                if msg.type in (MsgType.MEASUREMENT, MsgType.AVAILABILITY):
                    got[msg.unit_id] = msg
        return got

    async def run(self):
        await asyncio.wait_for(self.ready.wait(), self.timeout)
        cfg = self.cfg
        for k in range(self.sc.steps):
            await self._broadcast(tick(k, Phase.SAMPLE))
            got = await self._collect(k, Phase.SAMPLE)

            def value(kind, i):
                m = got.get(UnitId(kind, i).wire(cfg))
                return m.payload[0] if m is not None else None

            yb = [value("battery", i) for i in range(cfg.n_b)]
            pa = [value("pv", j) for j in range(cfg.n_s)]
            pl = np.array([value("load", m) for m in range(cfg.n_l)], dtype=float)
            sched = self.sc.connection(k)
            conn = ConnectionState(A_b=[v is not None for v in yb], A_s=[v is not None for v in pa],
                                   G_b=sched.G_b, G_s=sched.G_s, G_l=sched.G_l)
            y = np.array([0.0 if v is None else v for v in yb])
            pa = np.array([0.0 if v is None else v for v in pa])

            d = self.ctrl.dispatch(k, conn, pa, pl)
            for j in range(cfg.n_s):
                seq = d.sequences_s.get(j, d.plan_s[:, j])
                await self._send_plan(k, UnitId("pv", j), seq)
            for i in range(cfg.n_b):
                seq = d.sequences_b.get(i, d.plan_b[:, i])
                await self._send_plan(k, UnitId("battery", i), seq)
            await self._broadcast(tick(k, Phase.APPLY))
            await self._collect(k, Phase.APPLY)

            est, sol, status = self.ctrl.observe_and_plan(k, conn, y)
            self.records[k] = {"conn": conn, "y": y, "dispatch": d, "est": est, "sol": sol,
                               "status": status}
        await self._broadcast(tick(self.sc.steps, Phase.STOP))
        for _, w in self.hubs.values():
            w.close()
        self.server.close()

    async def _send_plan(self, k, uid: UnitId, seq):
        wid = uid.wire(self.cfg)
        h = hub_of(uid.index, self.n_hubs)
        _, w = self.hubs[h]
        w.write(self.codec.pack(WireMessage(MsgType.SETPOINT_PLAN, k, wid, tuple(seq))))
        await w.drain()


# ---------------------------------------------------------------- entry point

class NetworkTrace(list):
    """Trace records plus the traffic counters of the run."""

    counters: Counters


def run_networked(scenario: Scenario, endpoints=None, *, jitter: float = 0.0,
                  transport: str = "binary", tick_timeout: float = 60.0,
                  jitter_seed: int = 0, solver: str = "CLARABEL") -> NetworkTrace:
    """Run ``scenario`` with every agent on its own socket connection.

    ``endpoints`` lists ``(host, port)`` for the controller followed by one
    per hub; port 0 picks a free port. ``jitter`` adds random per-message
    relay delays (seconds) that must not change the result.
    """
    return asyncio.run(_run(scenario, endpoints, jitter, transport, tick_timeout, jitter_seed, solver))


async def _run(sc, endpoints, jitter, transport, tick_timeout, jitter_seed, solver):
    cfg = sc.config
    n_hubs = sc.n_hubs
    if endpoints is None:
        endpoints = [("127.0.0.1", 0)] * (1 + n_hubs)
    endpoints = [tuple(e) for e in endpoints]
    if len(endpoints) != 1 + n_hubs:
        raise HarnessError(f"need {1 + n_hubs} endpoints (controller + hubs), got {len(endpoints)}")
    codec = Codec(transport)
    counters = Counters()
    link = LinkState(sc)
    omegas, upsilons = disturbance_sequence(sc)
    ctrl = Controller(sc, solver)
    plans_s, plans_b = ctrl.initial_plans()

    units: list[UnitAgent] = []
    for i in range(cfg.n_b):
        units.append(BatteryAgent(UnitId("battery", i), sc, codec, plans_b[i], omegas, upsilons))
    for j in range(cfg.n_s):
        units.append(PvAgent(UnitId("pv", j), sc, codec, plans_s[j]))
    for m in range(cfg.n_l):
        units.append(LoadAgent(UnitId("load", m), sc, codec))

    controller = ControllerAgent(sc, ctrl, n_hubs, codec, counters, tick_timeout)
    c_addr = await controller.start(*endpoints[0])
    hubs, hub_addr = [], []
    for h in range(n_hubs):
        members = [u.wire_id for u in units if hub_of(u.uid.index, n_hubs) == h]
        hub = Hub(h, members, link, codec, counters, _Jitter(jitter, jitter_seed + h))
        hub_addr.append(await hub.start(*endpoints[1 + h]))
        hubs.append(hub)

    tasks = [asyncio.create_task(controller.run(), name="controller")]
    tasks += [asyncio.create_task(hub.run(*c_addr), name=f"hub{hub.h}") for hub in hubs]
    tasks += [asyncio.create_task(u.run(*hub_addr[hub_of(u.uid.index, n_hubs)]),
                                  name=f"unit{u.wire_id}") for u in units]
    done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
    failed = [t for t in done if t.exception() is not None]
    if failed:
        for t in pending:
            t.cancel()
        await asyncio.gather(*pending, return_exceptions=True)
        t = failed[0]
        raise HarnessError(f"agent {t.get_name()} crashed: {t.exception()!r}") from t.exception()

    trace = NetworkTrace(_assemble(sc, controller, units))
    trace.counters = counters
    return trace


def _assemble(sc: Scenario, controller: ControllerAgent, units) -> list[TraceRecord]:
    """Trace records from the controller's decisions and the agents' own logs."""
    cfg = sc.config
    bats = [u for u in units if isinstance(u, BatteryAgent)]
    pvs = [u for u in units if isinstance(u, PvAgent)]
    loads = [u for u in units if isinstance(u, LoadAgent)]
    trace = []
    for k in range(sc.steps):
        r = controller.records[k]
        x = np.array([b.log[k]["x"] for b in bats])
        u_b = np.array([b.log[k]["u"] for b in bats])
        u_s = np.array([p.log[k]["u"] for p in pvs])
        pa = np.array([p.log[k]["pa"] for p in pvs])
        pl = np.array([ld.log[k]["pl"] for ld in loads])
        conn = sc.connection(k)
        rec = plant_step(sc, k, x, conn, pa, pl, u_s, u_b, r["y"], r["dispatch"])
        finish_record(rec, r["est"], r["sol"], r["status"])
        rec.plans_b = np.array([b.log[k]["plan"] for b in bats])
        rec.plans_s = np.array([p.log[k]["plan"] for p in pvs])
        trace.append(rec)
    return trace
