"""Scenario files: an INI document describing one co-simulation run.

Sections (``X`` is an id)::

    [scenario]   name, case, duration_s, step_s, seed, monitor_area, event_time_s
    [tsnet]      dt_s, base_MVA, balancing_area
    [area.X]     H_s, D_pu, R_pu, Tg_s, Tt_s, rating_MVA, retired_MW, gen_MW, load_MW
    [tie.X]      from, to, B_pu
    [bus.X]      area, v_set_pu, dv_dp_pu_per_MW, dv_dq_pu_per_MVAr
    [event.X]    at_s, kind, target, delta_MW
    [feeder.X]   file, bus, replication, phase_model, load_scale, instantiate
    [fleet.X]    feeder, count, siting (head | load_nodes), phases (single | all),
                 p_rated_kW, p_initial_kW, mode, ramp_limit_kW_per_s,
                 db_of_hz, db_uf_hz, k_of, k_uf, olrt_s
    [derms]      agc_file, agc_period_s, baseline_frac, range_frac, weighting,
                 group_rating_kW, droop_enable_at_s, droop_fleets, stale_after_ticks
    [output]     dir, device_stride

Relative file names resolve against the scenario's directory first and the
bundled data directory second. ``--set section.key=value`` overrides are
applied before validation.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
import pathlib
import re
from typing import Any, Iterable

import numpy as np

from . import DATA_DIR, SCENARIO_DIR
from .der import DerValidationError, DroopParams, MODES
from .derms import AgcSignal, load_agc_csv
from .dnet import DerSite, Feeder, FeederError, load_feeder
from .tsnet import EVENT_KINDS

CASE_LABELS = ("BaseCase", "Case1", "Case2")


class ScenarioError(ValueError):
    def __init__(self, message: str, source: str = "", line: int | None = None) -> None:
        where = f"{source}:{line}: " if line else (f"{source}: " if source else "")
        super().__init__(where + message)
        self.line = line


@dataclasses.dataclass
class AreaSpec:
    id: str
    H_s: float
    D_pu: float
    R_pu: float
    Tg_s: float
    rating_MVA: float
    Tt_s: float = 0.0
    retired_MW: float = 0.0
    gen_MW: float = 0.0
    load_MW: float = 0.0


@dataclasses.dataclass
class TieSpec:
    id: str
    from_area: str
    to_area: str
    B_pu: float


@dataclasses.dataclass
class BusSpec:
    id: str
    area: str
    v_set_pu: float = 1.0
    dv_dp_pu_per_MW: float = 0.0
    dv_dq_pu_per_MVAr: float = 0.0


@dataclasses.dataclass
class EventSpec:
    id: str
    at_s: float
    kind: str
    target: str
    delta_MW: float = 0.0


@dataclasses.dataclass
class FeederSpec:
    id: str
    path: pathlib.Path
    bus: str
    replication: int = 1
    phase_model: str = "three_phase"
    load_scale: float = 1.0
    instantiate: bool = False
    feeder: Feeder | None = None  # loaded template with DER sites attached


@dataclasses.dataclass
class FleetSpec:
    id: str
    feeder: str
    count: int
    siting: str
    phases: str
    p_rated_kW: float
    p_initial_kW: float
    mode: str
    droop: DroopParams
    ramp_limit_kW_per_s: float | None = None
    device_ids: list[str] = dataclasses.field(default_factory=list)
    sites: dict[str, DerSite] = dataclasses.field(default_factory=dict)

    @property
    def rated_total_kW(self) -> float:
        return self.count * self.p_rated_kW


@dataclasses.dataclass
class DermsSpec:
    agc: AgcSignal | None = None
    agc_path: str = ""
    agc_period_s: float = 4.0
    baseline_frac: float = 0.5
    range_frac: float = 0.5
    weighting: str = "available"
    group_rating_kW: float | None = None
    droop_enable_at_s: float | None = None
    droop_fleets: tuple[str, ...] = ()
    stale_after_ticks: int = 5


@dataclasses.dataclass
class Scenario:
    name: str
    case: str
    source: str
    duration_s: float
    step_s: float
    seed: int
    monitor_area: str
    event_time_s: float | None
    tsnet_dt_s: float
    base_MVA: float
    balancing_area: str
    areas: list[AreaSpec]
    ties: list[TieSpec]
    buses: list[BusSpec]
    events: list[EventSpec]
    feeders: list[FeederSpec]
    fleets: list[FleetSpec]
    derms: DermsSpec
    output_dir: str
    device_stride: int = 1

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s / self.step_s))

    def bus(self, bus_id: str) -> BusSpec:
        return next(b for b in self.buses if b.id == bus_id)

    def feeder_spec(self, feeder_id: str) -> FeederSpec:
        return next(f for f in self.feeders if f.id == feeder_id)

    def fleet_area(self, fleet: FleetSpec) -> str:
        return self.bus(self.feeder_spec(fleet.feeder).bus).area

    def summary(self) -> dict[str, Any]:
        return {"name": self.name, "case": self.case, "source": self.source, "seed": self.seed,
                "duration_s": self.duration_s, "step_s": self.step_s, "monitor_area": self.monitor_area,
                "event_time_s": self.event_time_s,
                "regulating_range_kW": self.regulating_range_total_kW()}

    def replication_of(self, fleet: FleetSpec) -> int:
        return self.feeder_spec(fleet.feeder).replication

    def regulating_range_total_kW(self) -> float:
        if self.derms.agc is None:
            return 0.0
        return sum(self.derms.range_frac * f.rated_total_kW * self.replication_of(f) for f in self.fleets)


# ---------------------------------------------------------------------------
# parsing

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_map(text: str) -> dict[tuple[str, str | None], int]:
    out: dict[tuple[str, str | None], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = n
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            out[(section, m.group(1).strip().lower())] = n
    return out


class _Reader:
    """Typed access to a parsed INI document with line-anchored errors."""

    def __init__(self, text: str, source: str, overrides: Iterable[str] = ()) -> None:
        self.source = source
        self.lines = _line_map(text)
        self.cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            self.cp.read_string(text, source=source)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            raise ScenarioError(str(exc).splitlines()[0], source, line) from None
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, opt = key.strip().rpartition(".")
            if not sep or not dot:
                raise ScenarioError(f"override {item!r} is not section.key=value", source)
            if not self.cp.has_section(section):
                self.cp.add_section(section)
            self.cp.set(section, opt, value.strip())

    def error(self, message: str, section: str, key: str | None = None) -> ScenarioError:
        line = self.lines.get((section, key.lower() if key else None)) or self.lines.get((section, None))
        return ScenarioError(f"[{section}] {message}", self.source, line)

    def sections(self, prefix: str) -> list[tuple[str, str]]:
        return [(s, s[len(prefix) + 1:]) for s in self.cp.sections() if s.startswith(prefix + ".")]

    def has(self, section: str, key: str) -> bool:
        return self.cp.has_option(section, key)

    def get(self, section: str, key: str, default: Any = ..., kind: type = str) -> Any:
        if not self.cp.has_option(section, key):
            if default is ...:
                raise self.error(f"missing required key {key!r}", section)
            return default
        raw = self.cp.get(section, key).strip()
        try:
            if kind is bool:
                return self.cp.getboolean(section, key)
            if kind is int:
                value = int(raw)
            elif kind is float:
                value = float(raw)
                if not math.isfinite(value):
                    raise ValueError
            else:
                value = raw
        except ValueError:
            raise self.error(f"{key} = {raw!r} is not a valid {kind.__name__}", section, key) from None
        return value

    def positive(self, section: str, key: str, default: Any = ..., kind: type = float) -> Any:
        value = self.get(section, key, default, kind)
        if value is not None and not value > 0:
            raise self.error(f"{key} must be > 0, got {value!r}", section, key)
        return value


def _resolve(name: str, base_dir: pathlib.Path) -> pathlib.Path:
    p = pathlib.Path(name)
    if p.is_absolute():
        return p
    for root in (base_dir, DATA_DIR):
        if (root / p).exists():
            return root / p
    return base_dir / p


def resolve_scenario_path(path: str | os.PathLike) -> pathlib.Path:
    """A path as given, or the name of a bundled scenario."""
    p = pathlib.Path(path)
    if p.exists():
        return p
    for candidate in (SCENARIO_DIR / p.name, SCENARIO_DIR / f"{p.name}.cfg"):
        if candidate.exists():
            return candidate
    return p


def load_scenario(path: str | os.PathLike, overrides: Iterable[str] = ()) -> Scenario:
    p = resolve_scenario_path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", str(path)) from None
    return parse_scenario(text, str(p), overrides)


def parse_scenario(text: str, source: str = "<scenario>", overrides: Iterable[str] = ()) -> Scenario:
    r = _Reader(text, source, overrides)
    base_dir = pathlib.Path(source).resolve().parent if source != "<scenario>" else pathlib.Path.cwd()
    if not r.cp.has_section("scenario"):
        raise ScenarioError("missing [scenario] section", source)
    s = "scenario"
    name = r.get(s, "name", pathlib.Path(source).stem)
    case = r.get(s, "case", "BaseCase")
    if case not in CASE_LABELS:
        raise r.error(f"case must be one of {CASE_LABELS}, got {case!r}", s, "case")
    duration = r.positive(s, "duration_s")
    step = r.positive(s, "step_s", 0.1)
    if abs(duration / step - round(duration / step)) > 1e-9:
        raise r.error("duration_s must be a whole number of steps", s, "duration_s")
    seed = r.get(s, "seed", 0, int)
    event_time = r.get(s, "event_time_s", None, float)

    t = "tsnet"
    dt = r.positive(t, "dt_s", 0.01) if r.cp.has_section(t) else 0.01
    if dt > step + 1e-12:
        raise r.error("dt_s must not exceed the exchange step", t, "dt_s")
    base_MVA = r.positive(t, "base_MVA", 100.0) if r.cp.has_section(t) else 100.0

    areas = []
    for sec, aid in r.sections("area"):
        spec = AreaSpec(aid, r.positive(sec, "H_s"), r.get(sec, "D_pu", 1.0, float), r.positive(sec, "R_pu"),
                        r.positive(sec, "Tg_s"), r.positive(sec, "rating_MVA"), r.get(sec, "Tt_s", 0.0, float),
                        r.get(sec, "retired_MW", 0.0, float), r.get(sec, "gen_MW", 0.0, float),
                        r.get(sec, "load_MW", 0.0, float))
        if spec.D_pu < 0 or spec.Tt_s < 0:
            raise r.error("D_pu and Tt_s must be >= 0", sec)
        if not 0 <= spec.retired_MW < spec.rating_MVA:
            raise r.error("retired_MW must lie in [0, rating_MVA)", sec, "retired_mw")
        areas.append(spec)
    if not areas:
        raise ScenarioError("at least one [area.X] section is required", source)
    area_ids = {a.id for a in areas}
    balancing = r.get(t, "balancing_area", areas[0].id) if r.cp.has_section(t) else areas[0].id
    if balancing not in area_ids:
        raise r.error(f"unknown balancing_area {balancing!r}", t, "balancing_area")
    monitor = r.get(s, "monitor_area", areas[0].id)
    if monitor not in area_ids:
        raise r.error(f"unknown monitor_area {monitor!r}", s, "monitor_area")

    ties = []
    for sec, tid in r.sections("tie"):
        a, b = r.get(sec, "from"), r.get(sec, "to")
        for end, key in ((a, "from"), (b, "to")):
            if end not in area_ids:
                raise r.error(f"unknown area {end!r}", sec, key)
        ties.append(TieSpec(tid, a, b, r.positive(sec, "B_pu")))

    buses = []
    for sec, bid in r.sections("bus"):
        area = r.get(sec, "area")
        if area not in area_ids:
            raise r.error(f"unknown area {area!r}", sec, "area")
        buses.append(BusSpec(bid, area, r.positive(sec, "v_set_pu", 1.0), r.get(sec, "dv_dp_pu_per_MW", 0.0, float),
                             r.get(sec, "dv_dq_pu_per_MVAr", 0.0, float)))
    bus_ids = {b.id for b in buses}

    events = []
    for sec, eid in r.sections("event"):
        kind = r.get(sec, "kind")
        if kind not in EVENT_KINDS:
            raise r.error(f"unknown event kind {kind!r}", sec, "kind")
        target = r.get(sec, "target", "")
        valid = {a.id for a in areas} if kind in ("load_step", "trip_generation") else \
            {tt.id for tt in ties} if kind == "trip_tie" else None
        if valid is not None and target not in valid:
            raise r.error(f"event target {target!r} does not resolve", sec, "target")
        at = r.get(sec, "at_s", kind=float)
        if at < 0:
            raise r.error("at_s must be >= 0", sec, "at_s")
        events.append(EventSpec(eid, at, kind, target, r.get(sec, "delta_MW", 0.0, float)))
    events.sort(key=lambda e: e.at_s)
    if event_time is None and events:
        event_time = events[0].at_s

    feeders = []
    for sec, fid in r.sections("feeder"):
        bus = r.get(sec, "bus")
        if bus not in bus_ids:
            raise r.error(f"unknown bus {bus!r}", sec, "bus")
        mode = r.get(sec, "phase_model", "three_phase")
        if mode not in ("three_phase", "balanced"):
            raise r.error(f"phase_model must be three_phase or balanced, got {mode!r}", sec, "phase_model")
        path = _resolve(r.get(sec, "file"), base_dir)
        spec = FeederSpec(fid, path, bus, r.positive(sec, "replication", 1, int), mode,
                          r.get(sec, "load_scale", 1.0, float), r.get(sec, "instantiate", False, bool))
        if spec.load_scale < 0:
            raise r.error("load_scale must be >= 0", sec, "load_scale")
        try:
            template = load_feeder(path)
        except OSError:
            raise r.error(f"cannot read feeder file {str(path)!r}", sec, "file") from None
        except FeederError as exc:
            raise r.error(f"feeder {fid}: {exc}", sec, "file") from None
        spec.feeder = template.with_loads_scaled(spec.load_scale) if spec.load_scale != 1.0 else template
        feeders.append(spec)
    feeder_ids = {f.id for f in feeders}

    rng = np.random.default_rng(seed)
    fleets = []
    for sec, fid in r.sections("fleet"):
        feeder = r.get(sec, "feeder")
        if feeder not in feeder_ids:
            raise r.error(f"unknown feeder group {feeder!r}", sec, "feeder")
        mode = r.get(sec, "mode", "fixed_setpoint")
        if mode not in MODES:
            raise r.error(f"mode must be one of {MODES}", sec, "mode")
        try:
            droop = DroopParams.from_values(**{k: r.get(sec, k, None, float)
                                               for k in ("db_of_hz", "db_uf_hz", "k_of", "k_uf", "olrt_s")})
        except DerValidationError as exc:
            raise r.error(f"fleet {fid}: invalid droop parameters: {exc}", sec) from None
        siting = r.get(sec, "siting", "load_nodes")
        if siting not in ("head", "load_nodes"):
            raise r.error("siting must be head or load_nodes", sec, "siting")
        phases = r.get(sec, "phases", "all")
        if phases not in ("single", "all"):
            raise r.error("phases must be single or all", sec, "phases")
        rated = r.positive(sec, "p_rated_kW")
        initial = r.get(sec, "p_initial_kW", 0.0, float)
        if not 0 <= initial <= rated:
            raise r.error("p_initial_kW must lie in [0, p_rated_kW]", sec, "p_initial_kw")
        ramp = r.get(sec, "ramp_limit_kW_per_s", None, float)
        if ramp is not None and not ramp > 0:
            raise r.error("ramp_limit_kW_per_s must be > 0", sec, "ramp_limit_kw_per_s")
        fleet = FleetSpec(fid, feeder, r.positive(sec, "count", kind=int), siting, phases, rated, initial,
                          mode, droop, ramp)
        _site_fleet(fleet, next(f for f in feeders if f.id == feeder).feeder, rng)
        fleets.append(fleet)
    _attach_sites(feeders, fleets, r)

    d = "derms"
    derms = DermsSpec()
    if r.cp.has_section(d):
        if r.has(d, "agc_file"):
            agc_path = _resolve(r.get(d, "agc_file"), base_dir)
            try:
                derms.agc = load_agc_csv(agc_path)
            except OSError:
                raise r.error(f"cannot read AGC file {str(agc_path)!r}", d, "agc_file") from None
            except ValueError as exc:
                raise r.error(str(exc), d, "agc_file") from None
            derms.agc_path = str(agc_path)
        derms.agc_period_s = r.positive(d, "agc_period_s", 4.0)
        derms.baseline_frac = r.get(d, "baseline_frac", 0.5, float)
        derms.range_frac = r.get(d, "range_frac", 0.5, float)
        if not (0 <= derms.baseline_frac <= 1 and 0 <= derms.range_frac <= 1):
            raise r.error("baseline_frac and range_frac must lie in [0, 1]", d)
        derms.weighting = r.get(d, "weighting", "available")
        derms.group_rating_kW = r.get(d, "group_rating_kW", None, float)
        derms.droop_enable_at_s = r.get(d, "droop_enable_at_s", None, float)
        names = r.get(d, "droop_fleets", "")
        derms.droop_fleets = tuple(x.strip() for x in names.split(",") if x.strip())
        for fleet_id in derms.droop_fleets:
            if fleet_id not in {f.id for f in fleets}:
                raise r.error(f"droop_fleets references unknown fleet {fleet_id!r}", d, "droop_fleets")
        derms.stale_after_ticks = r.positive(d, "stale_after_ticks", 5, int)
        if derms.group_rating_kW is not None:
            for f in fleets:
                if f.rated_total_kW != derms.group_rating_kW:
                    raise r.error(f"fleet {f.id} rating {f.count} x {f.p_rated_kW} kW = {f.rated_total_kW} kW "
                                  f"differs from group_rating_kW = {derms.group_rating_kW}", d, "group_rating_kw")

    o = "output"
    out_dir = r.get(o, "dir", f"out/{name}") if r.cp.has_section(o) else f"out/{name}"
    stride = r.positive(o, "device_stride", 1, int) if r.cp.has_section(o) else 1

    return Scenario(name, case, source, duration, step, seed, monitor, event_time, dt, base_MVA, balancing,
                    areas, ties, buses, events, feeders, fleets, derms, out_dir, stride)


def _site_fleet(fleet: FleetSpec, feeder: Feeder, rng: np.random.Generator) -> None:
    """Deterministic siting: at the head, or at load nodes drawn with probability ~ load."""
    width = len(str(fleet.count - 1))
    fleet.device_ids = [f"{fleet.id}-{i:0{width}d}" for i in range(fleet.count)]
    if fleet.siting == "head":
        node = feeder.nodes[feeder.head]
        phases = node.phases if fleet.phases == "all" else node.phases[0]
        fleet.sites = {d: DerSite(feeder.head, phases) for d in fleet.device_ids}
        return
    loads = feeder.load_nodes()
    if not loads:
        raise ScenarioError(f"fleet {fleet.id}: feeder has no loaded nodes to site DERs on")
    if fleet.phases == "single":
        choices = [(nid, ph) for nid, ph, _ in loads]
        weights = np.array([kw for *_, kw in loads])
    else:
        per_node: dict[str, float] = {}
        for nid, _, kw in loads:
            per_node[nid] = per_node.get(nid, 0.0) + kw
        choices = [(nid, feeder.nodes[nid].phases) for nid in per_node]
        weights = np.array(list(per_node.values()))
    picks = rng.choice(len(choices), size=fleet.count, p=weights / weights.sum())
    fleet.sites = {d: DerSite(*choices[k]) for d, k in zip(fleet.device_ids, picks)}


def _attach_sites(feeders: list[FeederSpec], fleets: list[FleetSpec], r: _Reader) -> None:
    for spec in feeders:
        sites: dict[str, DerSite] = {}
        for fleet in fleets:
            if fleet.feeder == spec.id:
                sites.update(fleet.sites)
        if sites:
            try:
                spec.feeder = spec.feeder.with_ders(sites)
            except FeederError as exc:
                raise r.error(str(exc), f"feeder.{spec.id}") from None
