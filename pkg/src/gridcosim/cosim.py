"""Lockstep co-simulation of tsnet, dnet, DER fleets and the DERMS over the bus.

Per tick ``t`` the orchestrator publishes ``sync/tick``. Each component then
runs once its upstream components have reported ``sync/done/<id>`` for the
tick it depends on:

    tsnet        needs every dnet group at t-1 (boundary injections lag a tick)
    fleet-X      needs tsnet at t (frequency), applies DERMS commands from < t
    dnet-G       needs tsnet at t (interface voltage) and its fleets at t
    derms        needs every fleet at t (telemetry); setpoints act at t+1

The barrier releases tick t+1 when every registered component is done with
t. The same component code runs in three modes: deterministic round-robin
(the reference), one thread per component on the in-process broker, and one
process per component over the TCP wire protocol.
"""

from __future__ import annotations

import bisect
import collections
import csv
import dataclasses
import json
import logging
import math
import multiprocessing
import os
import pathlib
import threading
import time
from typing import Any, Iterable, Sequence

import numpy as np

from .der import DerFleet, DroopParams
from .derms import GroupConfig, Registry
from .dnet import FeederGroup, DivergedError
from .msgbus import Broker, Envelope, LocalClient
from .scenario import FleetSpec, FeederSpec, Scenario, load_scenario
from .tsnet import (
    Area,
    GridEvent,
    InterfaceBus,
    NumericalDivergenceError,
    TieLine,
    TransmissionSystem,
)

log = logging.getLogger(__name__)

ORCHESTRATOR_ID = "orchestrator"
RECORDER_ID = "recorder"
MODES = ("round_robin", "threads", "wire")
DEFAULT_TIMEOUT_S = 5.0


class CosimError(Exception):
    pass


class ConfigurationError(CosimError, ValueError):
    pass


class DeadlockError(CosimError):
    def __init__(self, tick: int, laggards: Sequence[str]) -> None:
        super().__init__(f"tick {tick}: no done message from {', '.join(laggards)}")
        self.tick = tick
        self.laggards = list(laggards)


class ComponentFailure(CosimError):
    pass


# ---------------------------------------------------------------------------
# barrier and inbox

class TickBarrier:
    """Membership and per-tick done-set of the lockstep protocol."""

    def __init__(self, step_s: float) -> None:
        self.step_s = step_s
        self.tick = -1
        self.registered: list[str] = []
        self.done: set[str] = set()
        self.status: dict[str, str] = {}
        self._started = False

    def register(self, component_id: str) -> str:
        if self._started:
            raise ConfigurationError("components cannot join a running barrier")
        if component_id in self.registered:
            raise ConfigurationError(f"duplicate component id {component_id!r}")
        self.registered.append(component_id)
        return component_id

    def unregister(self, component_id: str) -> None:
        if self._started:
            raise ConfigurationError(f"cannot unregister {component_id!r} mid-run")
        self.registered.remove(component_id)

    def begin(self, tick: int) -> None:
        if not self.registered:
            raise ConfigurationError("no components registered")
        if tick <= self.tick:
            raise ConfigurationError(f"tick must increase (was {self.tick}, got {tick})")
        self._started = True
        self.tick = tick
        self.done = set()
        self.status = {}

    def mark_done(self, component_id: str, tick: int, status: str = "ok") -> None:
        if tick == self.tick and component_id in self.registered:
            self.done.add(component_id)
            self.status[component_id] = status

    @property
    def complete(self) -> bool:
        return len(self.done) == len(self.registered)

    def laggards(self) -> list[str]:
        return [c for c in self.registered if c not in self.done]


class Inbox:
    """Envelopes buffered by topic and ordered by tick, so reads can be bounded by tick."""

    def __init__(self) -> None:
        self._by_topic: dict[str, list[Envelope]] = {}
        self._ticks: dict[str, list[int]] = {}
        self._by_schema: dict[str, set[str]] = collections.defaultdict(set)

    def add(self, env: Envelope) -> None:
        lst = self._by_topic.setdefault(env.topic, [])
        ticks = self._ticks.setdefault(env.topic, [])
        if not ticks or ticks[-1] <= env.tick:
            lst.append(env)
            ticks.append(env.tick)
        else:
            k = bisect.bisect_right(ticks, env.tick)
            lst.insert(k, env)
            ticks.insert(k, env.tick)
        self._by_schema[env.schema].add(env.topic)

    def latest(self, topic: str, max_tick: int) -> Envelope | None:
        """Newest envelope on ``topic`` with tick <= max_tick; older ones are discarded."""
        ticks = self._ticks.get(topic)
        if not ticks:
            return None
        k = bisect.bisect_right(ticks, max_tick) - 1
        if k < 0:
            return None
        env = self._by_topic[topic][k]
        if k > 0:
            del self._by_topic[topic][:k]
            del ticks[:k]
        return env

    def take(self, schema: str, max_tick: int) -> list[Envelope]:
        """Remove and return every envelope of ``schema`` with tick <= max_tick, in (tick, topic) order."""
        out = []
        for topic in self._by_schema.get(schema, ()):
            ticks = self._ticks[topic]
            k = bisect.bisect_right(ticks, max_tick)
            if k:
                out.extend(self._by_topic[topic][:k])
                del self._by_topic[topic][:k]
                del ticks[:k]
        out.sort(key=lambda e: (e.tick, e.topic, e.publisher_id))
        return out


# ---------------------------------------------------------------------------
# components

class Component:
    """A barrier member: buffers envelopes and runs :meth:`step` when its dependencies are done."""

    def __init__(self, component_id: str, deps: Iterable[tuple[str, int]] = ()) -> None:
        self.id = component_id
        self.deps = list(deps)
        self.client: Any = None
        self.inbox = Inbox()
        self.pending_ticks: collections.deque[Envelope] = collections.deque()
        self.done_seen: set[tuple[str, int]] = set()
        self.last_tick = -1
        self.error: BaseException | None = None

    def filters(self) -> list[str]:
        return []

    def bind(self, client: Any) -> None:
        self.client = client
        client.subscribe("sync/tick")
        for dep, _ in self.deps:
            client.subscribe(f"sync/done/{dep}")
        for flt in self.filters():
            client.subscribe(flt)

    def _ingest(self, env: Envelope) -> None:
        if env.schema == "tick":
            self.pending_ticks.append(env)
        elif env.schema == "done":
            if env.values.get("status") != "ready":
                self.done_seen.add((env.topic.rsplit("/", 1)[1], env.tick))
        else:
            self.inbox.add(env)

    def _ready(self, tick: int) -> bool:
        return all(tick + off < 0 or (dep, tick + off) in self.done_seen for dep, off in self.deps)

    def _advance(self) -> bool:
        progressed = False
        while self.pending_ticks and self._ready(self.pending_ticks[0].tick):
            env = self.pending_ticks.popleft()
            tick = env.tick
            status = self.step(tick, env["sim_time_s"], env["step_s"]) or "ok"
            self.last_tick = tick
            self.client.publish(f"sync/done/{self.id}", tick, tick=tick, status=status)
            self.done_seen = {(d, t) for d, t in self.done_seen if t >= tick - 1}
            progressed = True
        return progressed

    def poll(self) -> bool:
        """Round-robin entry point: drain the mailbox and run every tick that is ready."""
        for env in self.client.drain():
            self._ingest(env)
        return self._advance()

    def serve(self, last_tick: int, stop: threading.Event | None = None, poll_s: float = 0.05) -> None:
        """Concurrent entry point: block on the mailbox until ``last_tick`` is done."""
        try:
            self.client.publish(f"sync/done/{self.id}", 0, tick=0, status="ready")
            while self.last_tick < last_tick and not (stop and stop.is_set()):
                env = self.client.get(timeout=poll_s)
                if env is None:
                    continue
                self._ingest(env)
                for more in self.client.drain():
                    self._ingest(more)
                self._advance()
        except BaseException as exc:  # reported to the orchestrator through the done channel
            self.error = exc
            log.exception("component %s failed", self.id)
            try:
                tick = max(self.last_tick + 1, 0)
                self.client.publish(f"sync/done/{self.id}", tick, tick=tick, status=f"error: {exc}")
            except Exception:
                pass

    def step(self, tick: int, sim_time_s: float, step_s: float) -> str | None:
        raise NotImplementedError


def build_transmission(scenario: Scenario) -> TransmissionSystem:
    areas = [Area(a.id, a.H_s, a.D_pu, a.R_pu, a.Tg_s, a.rating_MVA, Tt_s=a.Tt_s, retired_MW=a.retired_MW)
             for a in scenario.areas]
    ties = [TieLine(t.id, t.from_area, t.to_area, t.B_pu) for t in scenario.ties]
    buses = [InterfaceBus(b.id, b.area, b.v_set_pu, b.dv_dp_pu_per_MW, b.dv_dq_pu_per_MVAr)
             for b in scenario.buses]
    events = [GridEvent(e.at_s, e.kind, e.target, e.delta_MW) for e in scenario.events]
    return TransmissionSystem(areas, ties, buses, events, base_MVA=scenario.base_MVA)


def feeder_group(spec: FeederSpec) -> FeederGroup:
    return FeederGroup(spec.id, spec.feeder, spec.replication, spec.bus, spec.phase_model, spec.instantiate)


def initial_injections(scenario: Scenario, spec: FeederSpec) -> dict[str, float]:
    return {d: f.p_initial_kW for f in scenario.fleets if f.feeder == spec.id for d in f.device_ids}


def initial_head_power(scenario: Scenario, tol: float) -> dict[str, tuple[complex, float]]:
    """Self-consistent head power and interface voltage per group before the first tick."""
    system = build_transmission(scenario)
    out = {}
    for spec in scenario.feeders:
        group = feeder_group(spec)
        inj = initial_injections(scenario, spec)
        bus = system.buses[spec.bus]
        v = bus.v_set_pu
        for _ in range(100):
            _, s, _ = group.solve(inj, v, tol=tol)
            bus.p_load_MW, bus.q_load_MVAr = s.real, s.imag
            v_new = bus.voltage_pu
            if abs(v_new - v) < 1e-15:
                break
            v = v_new
        out[spec.id] = (s, v)
    return out


class TsnetComponent(Component):
    def __init__(self, scenario: Scenario, dnet_ids: Sequence[str], pf_tol: float = 1e-10) -> None:
        super().__init__("tsnet", [(g, -1) for g in dnet_ids])
        self.scenario = scenario
        self.system = build_transmission(scenario)
        self.groups = scenario.feeders
        start = initial_head_power(scenario, pf_tol)
        self._apply_boundary({g.id: start[g.id][0] for g in self.groups})
        self.system.initialize({a.id: a.gen_MW for a in scenario.areas},
                               {a.id: a.load_MW for a in scenario.areas}, scenario.balancing_area)
        self.boundary_log: list[tuple[int, dict[str, float]]] = []
        self.halted = False

    def filters(self) -> list[str]:
        return [f"ds/{g.id}/headpower" for g in self.groups]

    def _apply_boundary(self, head: dict[str, complex]) -> dict[str, float]:
        inj = {a: 0.0 for a in self.system.areas}
        for g in self.groups:
            s = head[g.id]
            bus = self.system.buses[g.bus]
            bus.p_load_MW, bus.q_load_MVAr = s.real, s.imag
            inj[bus.area] -= s.real  # head power is load seen from transmission
        self.system.set_boundary(inj)
        return inj

    def step(self, tick: int, sim_time_s: float, step_s: float) -> str | None:
        if self.halted:
            return "diverged"
        if tick > 0:
            head = {}
            for g in self.groups:
                env = self.inbox.latest(f"ds/{g.id}/headpower", tick - 1)
                head[g.id] = complex(env["p_mw"], env["q_mvar"])
            self.boundary_log.append((tick, self._apply_boundary(head)))
            try:
                self.system.advance(step_s, self.scenario.tsnet_dt_s)
            except NumericalDivergenceError as exc:
                log.error("%s", exc)
                self.halted = True
                return "diverged"
        for aid, area in self.system.areas.items():
            self.client.publish(f"ts/{aid}/freq", tick, f_hz=area.frequency_hz)
        for bid in self.system.buses:
            self.client.publish(f"ts/{bid}/voltage", tick, v_pu=self.system.bus_voltage(bid))
        return "unstable" if self.system.unstable else "ok"


class FleetComponent(Component):
    def __init__(self, scenario: Scenario, spec: FleetSpec) -> None:
        super().__init__(f"fleet-{spec.id}", [("tsnet", 0)])
        self.spec = spec
        self.area = scenario.fleet_area(spec)
        self.fleet = DerFleet(spec.device_ids, spec.p_rated_kW, spec.p_initial_kW, None, spec.droop,
                              spec.mode, spec.ramp_limit_kW_per_s)

    def filters(self) -> list[str]:
        out = [f"ts/{self.area}/freq"]
        for d in self.spec.device_ids:
            out += [f"derms/setpoint/{d}", f"derms/control/{d}"]
        return out

    def step(self, tick: int, sim_time_s: float, step_s: float) -> str | None:
        env = self.inbox.latest(f"ts/{self.area}/freq", tick)
        f_hz = env["f_hz"] if env is not None else 60.0
        # DERMS output from earlier ticks only: a command issued at t acts at t+1
        for cmd in self.inbox.take("control", tick - 1):
            device = cmd.topic.rsplit("/", 1)[1]
            droop = None
            if cmd.values.keys() & {"db_of_hz", "db_uf_hz", "k_of", "k_uf"}:
                droop = DroopParams.from_values(**{k: cmd.values.get(k) for k in
                                                   ("db_of_hz", "db_uf_hz", "k_of", "k_uf")},
                                                olrt_s=self.fleet.droop.olrt_s)
            self.fleet.set_mode(cmd["verb"], droop, [device])
        for cmd in self.inbox.take("setpoint", tick - 1):
            self.fleet.apply_setpoint(cmd.topic.rsplit("/", 1)[1], cmd["p_kw"])
        out = self.fleet.step(f_hz, step_s)
        avail = self.fleet.p_available
        for i, d in enumerate(self.fleet.ids):
            self.client.publish(f"der/{d}/output", tick, p_kw=float(out[i]), q_kvar=0.0,
                                p_available_kw=float(avail[i]))
        return None


class DnetComponent(Component):
    def __init__(self, scenario: Scenario, spec: FeederSpec, fleet_ids: Sequence[str],
                 pf_tol: float = 1e-10) -> None:
        super().__init__(f"dnet-{spec.id}", [("tsnet", 0)] + [(f, 0) for f in fleet_ids])
        self.spec = spec
        self.group = feeder_group(spec)
        self.devices = list(initial_injections(scenario, spec))
        self.v_set = scenario.bus(spec.bus).v_set_pu
        self.pf_tol = pf_tol

    def filters(self) -> list[str]:
        return [f"ts/{self.spec.bus}/voltage"] + [f"der/{d}/output" for d in self.devices]

    def step(self, tick: int, sim_time_s: float, step_s: float) -> str | None:
        inj = {}
        for d in self.devices:
            env = self.inbox.latest(f"der/{d}/output", tick)
            inj[d] = (env["p_kw"], env.values.get("q_kvar", 0.0)) if env is not None else 0.0
        venv = self.inbox.latest(f"ts/{self.spec.bus}/voltage", tick)
        v = venv["v_pu"] if venv is not None else self.v_set
        try:
            _, s, losses = self.group.solve(inj, v, tol=self.pf_tol)
        except DivergedError as exc:
            log.error("group %s: %s", self.spec.id, exc)
            return "diverged"
        self.client.publish(f"ds/{self.spec.id}/headpower", tick, p_mw=s.real, q_mvar=s.imag, losses_kw=losses)
        return None


class DermsComponent(Component):
    def __init__(self, scenario: Scenario, fleet_ids: Sequence[str]) -> None:
        super().__init__("derms", [(f, 0) for f in fleet_ids])
        self.scenario = scenario
        cfg = scenario.derms
        self.registry = Registry(cfg.stale_after_ticks)
        self.replication = {}
        for f in scenario.fleets:
            self.registry.add_group(GroupConfig(f.id, cfg.baseline_frac * f.rated_total_kW,
                                                cfg.range_frac * f.rated_total_kW, f.droop, cfg.weighting))
            for d in f.device_ids:
                self.registry.register(d, f.id, f.p_rated_kW)
            self.replication[f.id] = scenario.replication_of(f)
        step = scenario.step_s
        self.agc_every = max(1, int(round(cfg.agc_period_s / step))) if cfg.agc is not None else None
        self.droop_tick = None if cfg.droop_enable_at_s is None else int(round(cfg.droop_enable_at_s / step))

    def filters(self) -> list[str]:
        return ["der/+/output"]

    def step(self, tick: int, sim_time_s: float, step_s: float) -> str | None:
        for env in self.inbox.take("der_output", tick):
            self.registry.ingest_telemetry(env)
        self.registry.refresh_staleness(tick)
        if self.droop_tick is not None and tick == self.droop_tick:
            for fid in self.scenario.derms.droop_fleets:
                for cmd in self.registry.enable_droop(fid):
                    self.client.publish(f"derms/control/{cmd.device_id}", tick, **cmd.payload())
        if self.agc_every is not None and tick % self.agc_every == 0:
            r = self.scenario.derms.agc.value_at(sim_time_s)
            total = 0.0
            for gid in self.registry.groups:
                request, alloc = self.registry.dispatch(gid, r, tick)
                total += request * self.replication[gid]
                for cmd in alloc.commands:
                    self.client.publish(f"derms/setpoint/{cmd.device_id}", tick, p_kw=cmd.p_setpoint_kW)
            self.client.publish("derms/agc", tick, r_pu=r, request_kw=total)
        return None


# ---------------------------------------------------------------------------
# recording

FAMILIES = {
    "frequency": ("ts/+/freq", "f_hz", 1),
    "voltage": ("ts/+/voltage", "v_pu", 1),
    "headpower": ("ds/+/headpower", "p_mw", 1),
    "losses": ("ds/+/headpower", "losses_kw", 1),
    "device_output": ("der/+/output", "p_kw", None),
    "agc": ("derms/agc", None, None),
}


class Recorder:
    """Passive subscriber turning envelopes into ``t_s, id, value`` rows per signal family."""

    def __init__(self, step_s: float, device_stride: int = 1) -> None:
        self.step_s = step_s
        self.device_stride = device_stride
        self.rows: dict[str, list[tuple[int, str, float]]] = {k: [] for k in FAMILIES}
        self.client: Any = None

    def bind(self, client: Any) -> None:
        self.client = client
        for flt in ("ts/+/freq", "ts/+/voltage", "ds/+/headpower", "der/+/output", "derms/agc"):
            client.subscribe(flt)

    def poll(self) -> None:
        for env in self.client.drain():
            self.add(env)

    def add(self, env: Envelope) -> None:
        kind = env.schema
        entity = env.topic.split("/")[1]
        if kind == "frequency":
            self.rows["frequency"].append((env.tick, entity, env["f_hz"]))
        elif kind == "voltage":
            self.rows["voltage"].append((env.tick, entity, env["v_pu"]))
        elif kind == "headpower":
            self.rows["headpower"].append((env.tick, entity, env["p_mw"]))
            self.rows["losses"].append((env.tick, entity, env.values.get("losses_kw", 0.0)))
        elif kind == "der_output":
            if env.tick % self.device_stride == 0:
                self.rows["device_output"].append((env.tick, entity, env["p_kw"]))
        elif kind == "agc":
            self.rows["agc"].append((env.tick, "r_pu", env["r_pu"]))
            self.rows["agc"].append((env.tick, "request_kw", env.values.get("request_kw", 0.0)))

    def write(self, out_dir: pathlib.Path) -> dict[str, str]:
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {}
        for family, rows in self.rows.items():
            if not rows and family in ("agc", "device_output"):
                continue
            path = out_dir / f"{family}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t_s", "id", "value"])
                for tick, entity, value in sorted(rows, key=lambda r: (r[0], r[1])):
                    w.writerow([repr(round(tick * self.step_s, 9)), entity, repr(float(value))])
            files[family] = str(path)
        return files


# ---------------------------------------------------------------------------
# orchestration

@dataclasses.dataclass
class RunReport:
    scenario: str
    case: str
    out_dir: str
    files: dict[str, str]
    final_tick: int
    stable: bool
    diverged: bool
    mode: str
    wall_s: float
    metrics: dict[str, Any] = dataclasses.field(default_factory=dict)
    manifest: str = ""


def build_components(scenario: Scenario, pf_tol: float = 1e-10) -> list[Component]:
    """Components in phase order: tsnet, fleets, dnet groups, derms."""
    dnet_ids = [f"dnet-{g.id}" for g in scenario.feeders]
    comps: list[Component] = [TsnetComponent(scenario, dnet_ids, pf_tol)]
    fleets = [FleetComponent(scenario, f) for f in scenario.fleets]
    comps += fleets
    for g in scenario.feeders:
        comps.append(DnetComponent(scenario, g, [c.id for c in fleets if c.spec.feeder == g.id], pf_tol))
    if scenario.fleets:
        comps.append(DermsComponent(scenario, [c.id for c in fleets]))
    return comps


class CoSimulation:
    def __init__(self, scenario: Scenario, mode: str = "round_robin", realtime: bool = False,
                 timeout_s: float = DEFAULT_TIMEOUT_S, out_dir: str | os.PathLike | None = None,
                 overrides: Sequence[str] = (), components: Sequence[Component] | None = None) -> None:
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}")
        self.scenario = scenario
        self.mode = mode
        self.realtime = realtime
        self.timeout_s = timeout_s
        self.overrides = list(overrides)
        self.out_dir = pathlib.Path(out_dir if out_dir is not None else scenario.output_dir)
        self.barrier = TickBarrier(scenario.step_s)
        self.components = list(components) if components is not None else (
            [] if mode == "wire" else build_components(scenario))
        ids = [c.id for c in self.components] if mode != "wire" else self._wire_ids()
        for cid in ids:
            self.barrier.register(cid)
        self.recorder = Recorder(scenario.step_s, scenario.device_stride)
        self.broker = Broker()
        self.hooks: list = []  # callables(tick, client) run right after sync/tick is published

    def _wire_ids(self) -> list[str]:
        s = self.scenario
        return (["tsnet"] + [f"fleet-{f.id}" for f in s.fleets] + [f"dnet-{g.id}" for g in s.feeders]
                + (["derms"] if s.fleets else []))

    # -- entry point

    def run(self) -> RunReport:
        if not self.barrier.registered:
            raise ConfigurationError("no components registered")
        start = time.perf_counter()
        if self.mode == "round_robin":
            final, diverged = self._run_round_robin()
        elif self.mode == "threads":
            final, diverged = self._run_threads()
        else:
            final, diverged = self._run_wire()
        files = self.recorder.write(self.out_dir)
        from .metrics import compute_metrics  # local import keeps the module graph acyclic
        metrics = compute_metrics(self.out_dir, self.scenario.summary(), diverged=diverged)
        report = RunReport(self.scenario.source, self.scenario.case, str(self.out_dir), files, final,
                           bool(metrics.get("stable", not diverged)) and not diverged, diverged, self.mode,
                           time.perf_counter() - start, metrics)
        report.manifest = write_manifest(report, self.scenario)
        return report

    def _tick_envelope(self, client: Any, tick: int) -> None:
        self.barrier.begin(tick)
        client.publish("sync/tick", tick, tick=tick, sim_time_s=tick * self.scenario.step_s,
                       step_s=self.scenario.step_s)
        for hook in self.hooks:
            hook(tick, client)

    def _pace(self, start: float, tick: int) -> None:
        if self.realtime:
            lag = tick * self.scenario.step_s - (time.perf_counter() - start)
            if lag > 0:
                time.sleep(lag)

    def _halted(self) -> bool:
        return any(s == "diverged" for s in self.barrier.status.values())

    def _check_errors(self) -> None:
        failed = {c: s for c, s in self.barrier.status.items() if s.startswith("error")}
        if failed:
            raise ComponentFailure("; ".join(f"{c}: {s}" for c, s in failed.items()))

    def _run_round_robin(self) -> tuple[int, bool]:
        orch = self.broker.connect(ORCHESTRATOR_ID)
        orch.subscribe("sync/done/+")
        for comp in self.components:
            comp.bind(self.broker.connect(comp.id))
        self.recorder.bind(self.broker.connect(RECORDER_ID))
        wall0 = time.perf_counter()
        tick = 0
        for tick in range(self.scenario.n_ticks + 1):
            self._tick_envelope(orch, tick)
            while not self.barrier.complete:
                progressed = False
                for comp in self.components:
                    progressed |= comp.poll()
                for env in orch.drain():
                    self.barrier.mark_done(env.topic.rsplit("/", 1)[1], env["tick"], env.values.get("status", "ok"))
                if not progressed and not self.barrier.complete:
                    raise DeadlockError(tick, self.barrier.laggards())
            self.recorder.poll()
            self._check_errors()
            if self._halted():
                return tick, True
            self._pace(wall0, tick)
        return tick, False

    def _wait_barrier(self, orch: Any, tick: int) -> None:
        deadline = time.monotonic() + self.timeout_s
        while not self.barrier.complete:
            env = orch.get(timeout=max(deadline - time.monotonic(), 0.0))
            if env is None:
                self._check_errors()
                raise DeadlockError(tick, self.barrier.laggards())
            status = env.values.get("status", "ok")
            if status == "ready":
                continue
            self.barrier.mark_done(env.topic.rsplit("/", 1)[1], env["tick"], status)
            if status.startswith("error"):
                self._check_errors()

    def _await_ready(self, orch: Any) -> None:
        waiting = set(self.barrier.registered)
        deadline = time.monotonic() + max(self.timeout_s, 30.0)
        while waiting:
            env = orch.get(timeout=max(deadline - time.monotonic(), 0.0))
            if env is None:
                raise DeadlockError(-1, sorted(waiting))
            if env.values.get("status") == "ready":
                waiting.discard(env.topic.rsplit("/", 1)[1])

    def _drive(self, orch: Any) -> tuple[int, bool]:
        wall0 = time.perf_counter()
        tick = 0
        for tick in range(self.scenario.n_ticks + 1):
            self._tick_envelope(orch, tick)
            self._wait_barrier(orch, tick)
            if self._halted():
                return tick, True
            self._pace(wall0, tick)
        return tick, False

    def _run_threads(self) -> tuple[int, bool]:
        orch = self.broker.connect(ORCHESTRATOR_ID)
        orch.subscribe("sync/done/+")
        self.recorder.bind(self.broker.connect(RECORDER_ID))
        stop = threading.Event()
        threads = []
        for comp in self.components:
            comp.bind(self.broker.connect(comp.id))
            th = threading.Thread(target=comp.serve, args=(self.scenario.n_ticks, stop), name=comp.id, daemon=True)
            threads.append(th)
            th.start()
        try:
            self._await_ready(orch)
            return self._drive(orch)
        finally:
            stop.set()
            for th in threads:
                th.join(timeout=5.0)
            self.recorder.poll()

    def _run_wire(self) -> tuple[int, bool]:
        from .wire import BusServer, RemoteClient
        if not os.path.exists(self.scenario.source):
            raise ConfigurationError("wire mode needs a scenario file on disk")
        server = BusServer(self.broker).start()
        host, port = server.address
        ctx = multiprocessing.get_context("spawn")
        procs = [ctx.Process(target=_wire_worker, args=(self.scenario.source, self.overrides, cid, host, port),
                             name=cid, daemon=True) for cid in self.barrier.registered]
        orch = RemoteClient(host, port, ORCHESTRATOR_ID)
        rec = RemoteClient(host, port, RECORDER_ID)
        try:
            orch.subscribe("sync/done/+")
            self.recorder.bind(rec)
            for p in procs:
                p.start()
            self._await_ready(orch)
            result = self._drive(orch)
            # every envelope was acknowledged before the last done, so the recorder has it all
            time.sleep(0.05)
            self.recorder.poll()
            return result
        finally:
            for p in procs:
                p.join(timeout=5.0)
                if p.is_alive():
                    p.terminate()
            orch.close()
            rec.close()
            server.stop()


def _wire_worker(source: str, overrides: Sequence[str], component_id: str, host: str, port: int) -> None:
    from .wire import RemoteClient
    scenario = load_scenario(source, overrides)
    comp = next(c for c in build_components(scenario) if c.id == component_id)
    client = RemoteClient(host, port, component_id)
    try:
        comp.bind(client)
        comp.serve(scenario.n_ticks)
    finally:
        client.close()


def write_manifest(report: RunReport, scenario: Scenario) -> str:
    path = pathlib.Path(report.out_dir) / "manifest.json"
    doc = {
        "scenario": scenario.source,
        "case": scenario.case,
        "name": scenario.name,
        "output_dir": report.out_dir,
        "seed": scenario.seed,
        "mode": report.mode,
        "final_tick": report.final_tick,
        "stable": report.stable,
        "diverged": report.diverged,
        "files": {k: os.path.basename(v) for k, v in report.files.items()},
        "scenario_summary": scenario.summary(),
        "metrics": report.metrics,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return str(path)


def run_scenario(scenario: Scenario, mode: str = "round_robin", **kw: Any) -> RunReport:
    return CoSimulation(scenario, mode, **kw).run()
