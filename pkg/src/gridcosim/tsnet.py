"""Reduced transmission-system dynamics.

The bulk system is a handful of coherent areas, each an aggregate swing
equation with load damping and a droop governor, coupled by linearized tie
lines. All area quantities are per unit on the area's MVA rating; tie
susceptances are per unit on the common ``base_MVA``.

Per area::

    d(delta)/dt   = 2*pi*60 * df
    2H_eff d(df)/dt = Pm - Pload - D*df - tie_out/S + boundary_inj/S
    Tg dPm/dt     = Pm_ref - df/R - Pm                  (Tt == 0)

With a turbine lag ``Tt > 0`` the governor drives a valve state ``Pv`` and
``Tt dPm/dt = Pv - Pm``.  ``H_eff = H * (1 - retired_MW / rating)``: retired
units take their inertia with them but, being base-loaded, no governor
response.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

F_NOM = 60.0
OMEGA_NOM = 2.0 * math.pi * F_NOM
UNSTABLE_DFREQ_PU = 0.05


class TsnetError(Exception):
    pass


class NotFoundError(TsnetError, LookupError):
    pass


class NumericalDivergenceError(TsnetError, FloatingPointError):
    def __init__(self, area_id: str, time_s: float) -> None:
        super().__init__(f"non-finite state in area {area_id!r} at t={time_s:.3f} s")
        self.area_id = area_id
        self.time_s = time_s


@dataclasses.dataclass
class Area:
    id: str
    H_s: float
    D_pu: float
    R_pu: float
    Tg_s: float
    rating_MVA: float
    Tt_s: float = 0.0
    retired_MW: float = 0.0
    Pm_pu: float = 0.0
    Pm_ref_pu: float = 0.0
    Pv_pu: float = 0.0
    Pload_pu: float = 0.0
    delta_rad: float = 0.0
    dfreq_pu: float = 0.0
    boundary_inj_MW: float = 0.0

    def __post_init__(self) -> None:
        if not self.H_s > 0:
            raise ValueError(f"area {self.id}: H_s must be > 0")
        if not self.rating_MVA > 0:
            raise ValueError(f"area {self.id}: rating_MVA must be > 0")
        if not self.R_pu > 0:
            raise ValueError(f"area {self.id}: R_pu must be > 0")
        if self.D_pu < 0:
            raise ValueError(f"area {self.id}: D_pu must be >= 0")
        if not self.Tg_s > 0 or self.Tt_s < 0:
            raise ValueError(f"area {self.id}: Tg_s must be > 0 and Tt_s >= 0")
        if not 0 <= self.retired_MW < self.rating_MVA:
            raise ValueError(f"area {self.id}: retired_MW must lie in [0, rating_MVA)")

    @property
    def H_eff(self) -> float:
        return self.H_s * (1.0 - self.retired_MW / self.rating_MVA)

    @property
    def frequency_hz(self) -> float:
        return F_NOM * (1.0 + self.dfreq_pu)


@dataclasses.dataclass
class TieLine:
    id: str
    from_area: str
    to_area: str
    B_pu: float
    in_service: bool = True

    def __post_init__(self) -> None:
        if self.in_service and not self.B_pu > 0:
            raise ValueError(f"tie {self.id}: B_pu must be > 0 when in service")
        if self.from_area == self.to_area:
            raise ValueError(f"tie {self.id}: connects area {self.from_area} to itself")


EVENT_KINDS = ("load_step", "trip_tie", "trip_generation", "fault_clear")


@dataclasses.dataclass(order=True)
class GridEvent:
    at_time_s: float
    kind: str = dataclasses.field(compare=False)
    target: str = dataclasses.field(default="", compare=False)
    delta_MW: float = dataclasses.field(default=0.0, compare=False)
    applied: bool = dataclasses.field(default=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclasses.dataclass
class InterfaceBus:
    """Transmission bus where distribution groups attach.

    Its voltage is a quasi-static affine proxy of the power drawn by the
    attached groups, not a solved AC quantity.
    """

    id: str
    area: str
    v_set_pu: float = 1.0
    dv_dp_pu_per_MW: float = 0.0
    dv_dq_pu_per_MVAr: float = 0.0
    p_load_MW: float = 0.0
    q_load_MVAr: float = 0.0

    @property
    def voltage_pu(self) -> float:
        return self.v_set_pu + self.dv_dp_pu_per_MW * self.p_load_MW + self.dv_dq_pu_per_MVAr * self.q_load_MVAr


class TransmissionSystem:
    def __init__(self, areas: Sequence[Area], ties: Sequence[TieLine] = (),
                 buses: Sequence[InterfaceBus] = (), events: Iterable[GridEvent] = (),
                 base_MVA: float = 100.0) -> None:
        self.areas = {a.id: a for a in areas}
        if len(self.areas) != len(areas):
            raise ValueError("duplicate area id")
        self.ties = {t.id: t for t in ties}
        self.buses = {b.id: b for b in buses}
        for tie in ties:
            for end in (tie.from_area, tie.to_area):
                self._area(end)
        for bus in buses:
            self._area(bus.area)
        self.base_MVA = base_MVA
        self.events = sorted(events)
        for ev in self.events:
            self._check_event_target(ev)
        self.time_s = 0.0
        self.unstable = False
        self._order = list(self.areas)
        self._index = {aid: i for i, aid in enumerate(self._order)}
        self._refresh()

    # -- lookup

    def _area(self, area_id: str) -> Area:
        try:
            return self.areas[area_id]
        except KeyError:
            raise NotFoundError(f"unknown area {area_id!r}") from None

    def _check_event_target(self, ev: GridEvent) -> None:
        if ev.kind in ("load_step", "trip_generation"):
            self._area(ev.target)
        elif ev.kind == "trip_tie" and ev.target not in self.ties:
            raise NotFoundError(f"unknown tie {ev.target!r}")

    def _refresh(self) -> None:
        n = len(self._order)
        areas = [self.areas[a] for a in self._order]
        self._S = np.array([a.rating_MVA for a in areas])
        self._two_h = np.array([2.0 * a.H_eff for a in areas])
        self._D = np.array([a.D_pu for a in areas])
        self._R = np.array([a.R_pu for a in areas])
        self._Tg = np.array([a.Tg_s for a in areas])
        self._Tt = np.array([a.Tt_s for a in areas])
        self._lag = self._Tt > 0
        live = [t for t in self.ties.values() if t.in_service]
        self._tie_from = np.array([self._index[t.from_area] for t in live], dtype=int)
        self._tie_to = np.array([self._index[t.to_area] for t in live], dtype=int)
        self._tie_b = np.array([t.B_pu * self.base_MVA for t in live])
        lap = np.zeros((n, n))
        for i, j, b in zip(self._tie_from, self._tie_to, self._tie_b):
            lap[i, i] += b
            lap[j, j] += b
            lap[i, j] -= b
            lap[j, i] -= b
        self._laplacian_MW = lap

    def _tie_out_MW(self, delta: np.ndarray) -> np.ndarray:
        flow = self._tie_b * (delta[self._tie_from] - delta[self._tie_to])
        out = np.zeros_like(delta)
        np.add.at(out, self._tie_from, flow)
        np.subtract.at(out, self._tie_to, flow)
        return out

    # -- state packing: rows delta, df, Pm, Pv

    def state(self) -> np.ndarray:
        areas = [self.areas[a] for a in self._order]
        return np.array([[a.delta_rad for a in areas], [a.dfreq_pu for a in areas],
                         [a.Pm_pu for a in areas], [a.Pv_pu for a in areas]])

    def _store(self, x: np.ndarray) -> None:
        for k, aid in enumerate(self._order):
            a = self.areas[aid]
            a.delta_rad, a.dfreq_pu, a.Pm_pu, a.Pv_pu = (float(v) for v in x[:, k])

    def tie_flows_MW(self) -> dict[str, float]:
        return {t.id: (t.B_pu * self.base_MVA
                       * (self.areas[t.from_area].delta_rad - self.areas[t.to_area].delta_rad)
                       if t.in_service else 0.0)
                for t in self.ties.values()}

    def derivative(self, x: np.ndarray) -> np.ndarray:
        areas = [self.areas[a] for a in self._order]
        pload = np.array([a.Pload_pu for a in areas])
        pref = np.array([a.Pm_ref_pu for a in areas])
        inj = np.array([a.boundary_inj_MW for a in areas])
        delta, df, pm, pv = x
        tie_out = self._tie_out_MW(delta)
        dx = np.empty_like(x)
        dx[0] = OMEGA_NOM * df
        dx[1] = (pm - pload - self._D * df - (tie_out - inj) / self._S) / self._two_h
        gov = pref - df / self._R
        with np.errstate(divide="ignore", invalid="ignore"):
            dx[2] = np.where(self._lag, (pv - pm) / np.where(self._lag, self._Tt, 1.0),
                             (gov - pm) / self._Tg)
            dx[3] = np.where(self._lag, (gov - pv) / self._Tg, 0.0)
        return dx

    # -- operations

    def initialize(self, gen_MW: dict[str, float], load_MW: dict[str, float],
                   balancing_area: str) -> None:
        """Place the system at equilibrium.

        ``gen_MW`` is the scheduled synchronous generation per area (before
        retirement); the balancing area absorbs whatever mismatch remains
        after boundary injections, and tie angles are solved from the
        resulting interchange.
        """
        self._area(balancing_area)
        net = {}
        for aid, a in self.areas.items():
            a.Pload_pu = load_MW.get(aid, 0.0) / a.rating_MVA
            net[aid] = gen_MW.get(aid, 0.0) - a.retired_MW - load_MW.get(aid, 0.0) + a.boundary_inj_MW
        mismatch = sum(net.values())
        for aid, a in self.areas.items():
            gen = gen_MW.get(aid, 0.0) - a.retired_MW
            if aid == balancing_area:
                gen -= mismatch
                net[aid] -= mismatch
            a.Pm_pu = a.Pm_ref_pu = a.Pv_pu = gen / a.rating_MVA
            a.dfreq_pu = 0.0
        k = self._index[balancing_area]
        keep = [i for i in range(len(self._order)) if i != k]
        delta = np.zeros(len(self._order))
        if keep:
            lap = self._laplacian_MW[np.ix_(keep, keep)]
            p = np.array([net[self._order[i]] for i in keep])
            try:
                delta[keep] = np.linalg.solve(lap, p)
            except np.linalg.LinAlgError:
                raise TsnetError("tie network is not connected; cannot initialize interchange") from None
        for i, aid in enumerate(self._order):
            self.areas[aid].delta_rad = float(delta[i])

    def set_boundary(self, injections_MW: dict[str, float]) -> None:
        for aid, a in self.areas.items():
            a.boundary_inj_MW = injections_MW.get(aid, 0.0)

    def apply_event(self, event: GridEvent) -> None:
        if event.applied:
            log.warning("event %s already applied", event)
            return
        if event.kind == "load_step":
            a = self._area(event.target)
            a.Pload_pu += event.delta_MW / a.rating_MVA
        elif event.kind == "trip_tie":
            tie = self.ties.get(event.target)
            if tie is None:
                raise NotFoundError(f"unknown tie {event.target!r}")
            if not tie.in_service:
                log.warning("tie %s already out of service", tie.id)
            tie.in_service = False
            self._refresh()
        elif event.kind == "trip_generation":
            a = self._area(event.target)
            d = event.delta_MW / a.rating_MVA
            a.Pm_ref_pu -= d
            a.Pm_pu -= d
            a.Pv_pu -= d
        else:
            log.info("fault_clear at t=%.3f s: fault represented by its aftermath only", self.time_s)
        event.applied = True

    def _due_events(self) -> None:
        for ev in self.events:
            if not ev.applied and ev.at_time_s <= self.time_s + 1e-9:
                self.apply_event(ev)

    def step(self, dt_s: float) -> None:
        """Advance one fixed RK4 step, applying events that are due first."""
        if not dt_s > 0:
            raise ValueError("dt_s must be > 0")
        self._due_events()
        x = self.state()
        with np.errstate(invalid="ignore", over="ignore"):
            k1 = self._checked(self.derivative(x))
            k2 = self._checked(self.derivative(x + 0.5 * dt_s * k1))
            k3 = self._checked(self.derivative(x + 0.5 * dt_s * k2))
            k4 = self._checked(self.derivative(x + dt_s * k3))
            x = self._checked(x + (dt_s / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        self._store(x)
        self.time_s += dt_s
        if np.abs(x[1]).max() > UNSTABLE_DFREQ_PU:
            self.unstable = True

    def _checked(self, x: np.ndarray) -> np.ndarray:
        bad = ~np.isfinite(x).all(axis=0)
        if bad.any():
            raise NumericalDivergenceError(self._order[int(np.argmax(bad))], self.time_s)
        return x

    def advance(self, duration_s: float, dt_s: float) -> None:
        """Integrate over ``duration_s`` in equal substeps no longer than ``dt_s``."""
        n = max(1, math.ceil(duration_s / dt_s - 1e-9))
        h = duration_s / n
        for _ in range(n):
            self.step(h)

    def measure(self, area_id: str) -> tuple[float, float]:
        """Frequency (Hz) of an area and the voltage (pu) of its first interface bus."""
        a = self._area(area_id)
        volts = [b.voltage_pu for b in self.buses.values() if b.area == area_id]
        return a.frequency_hz, (volts[0] if volts else 1.0)

    def bus_voltage(self, bus_id: str) -> float:
        try:
            return self.buses[bus_id].voltage_pu
        except KeyError:
            raise NotFoundError(f"unknown bus {bus_id!r}") from None
