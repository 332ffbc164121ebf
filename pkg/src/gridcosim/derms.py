"""DER management: device registry, AGC-to-setpoint dispatch and droop enablement."""

from __future__ import annotations

import bisect
import csv
import dataclasses
import logging
import math
import os
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .der import DroopParams
from .msgbus import Envelope

log = logging.getLogger(__name__)

STALE_AFTER_TICKS = 5
WEIGHTINGS = ("available", "rated", "equal")


class DermsError(Exception):
    pass


class DermsValidationError(DermsError, ValueError):
    pass


class ConfigurationError(DermsError):
    pass


class NotFoundError(DermsError, LookupError):
    pass


@dataclasses.dataclass
class DeviceRecord:
    device_id: str
    group_id: str
    p_rated_kW: float
    last_reported_available_kW: float
    last_reported_output_kW: float = 0.0
    last_tick: int = 0
    stale: bool = False


@dataclasses.dataclass(frozen=True)
class SetpointCommand:
    device_id: str
    p_setpoint_kW: float
    issue_tick: int

    def __post_init__(self) -> None:
        if not self.p_setpoint_kW >= 0:
            raise DermsValidationError(f"negative setpoint for {self.device_id}")


@dataclasses.dataclass(frozen=True)
class Allocation:
    commands: tuple[SetpointCommand, ...]
    shortfall_kW: float = 0.0

    @property
    def total_kW(self) -> float:
        return math.fsum(c.p_setpoint_kW for c in self.commands)

    def as_dict(self) -> dict[str, float]:
        return {c.device_id: c.p_setpoint_kW for c in self.commands}


def water_fill(request: float, caps: Sequence[float], weights: Sequence[float]) -> list[float]:
    """Shares proportional to ``weights``, each capped at ``caps``; clamped excess is redistributed.

    The fill runs in exact rational arithmetic and each share is rounded once,
    so every share is the double nearest its exact value. The returned shares
    then sum to ``min(request, sum(caps))``: uncapped shares are stepped to an
    adjacent double, largest rounding remainder first, until the sum closes.
    """
    n = len(caps)
    exact_caps = [Fraction(c) for c in caps]
    target = min(Fraction(request), sum(exact_caps))
    if target <= 0:
        return [0.0] * n
    w = [Fraction(x) for x in weights]
    free = [i for i in range(n) if exact_caps[i] > 0 and w[i] > 0]
    if not free:  # all weight sits on devices without capacity
        free = [i for i in range(n) if exact_caps[i] > 0]
        w = [Fraction(1)] * n
    exact = [Fraction(0)] * n
    residual = target
    while free:
        level = residual / sum(w[i] for i in free)
        clamped = [i for i in free if level * w[i] >= exact_caps[i]]
        if not clamped:
            for i in free:
                exact[i] = level * w[i]
            break
        for i in clamped:
            exact[i] = exact_caps[i]
            residual -= exact_caps[i]
        free = [i for i in free if i not in clamped]
    share = [float(x) for x in exact]
    target_f = float(target)
    # close the sum largest-remainder style: among adjacent-double steps that
    # shrink the exact gap, take the share whose rounding went furthest the wrong way
    for _ in range(8 * n + 16):
        if math.fsum(share) == target_f:
            break
        gap = Fraction(target_f) - sum(Fraction(x) for x in share)
        up = gap > 0
        best, best_key = None, None
        for i in free:
            x = min(max(math.nextafter(share[i], math.inf if up else -math.inf), 0.0), caps[i])
            if abs(gap - (Fraction(x) - Fraction(share[i]))) >= abs(gap):
                continue
            key = (exact[i] - Fraction(share[i])) * (1 if up else -1)
            if best_key is None or key > best_key:
                best, best_key = (i, x), key
        if best is None:
            break
        share[best[0]] = best[1]
    return share


def allocate(p_request_kW: float, group: Sequence[DeviceRecord], tick: int = 0,
             weighting: str = "available") -> Allocation:
    """Split ``p_request_kW`` over the non-stale devices of ``group``."""
    if not group:
        raise DermsValidationError("cannot allocate over an empty group")
    if not p_request_kW >= 0 or math.isinf(p_request_kW):
        raise DermsValidationError(f"request must be finite and >= 0, got {p_request_kW!r}")
    if weighting not in WEIGHTINGS:
        raise DermsValidationError(f"unknown weighting {weighting!r}")
    live = [r for r in group if not r.stale]
    caps = [max(r.last_reported_available_kW, 0.0) for r in live]
    if weighting == "available":
        weights = caps
    elif weighting == "rated":
        weights = [r.p_rated_kW for r in live]
    else:
        weights = [1.0] * len(live)
    shares = water_fill(p_request_kW, caps, weights) if live else []
    commands = tuple(SetpointCommand(r.device_id, s, tick) for r, s in zip(live, shares))
    shortfall = max(p_request_kW - math.fsum(shares), 0.0)
    return Allocation(commands, shortfall)


@dataclasses.dataclass
class GroupConfig:
    id: str
    baseline_kW: float | None = None
    regulating_range_kW: float | None = None
    droop: DroopParams | None = None
    weighting: str = "available"


def agc_to_request(signal_value_pu: float, baseline_kW: float | None, regulating_range_kW: float | None,
                   rated_total_kW: float) -> float:
    """baseline + r * range, clamped to [0, rated]."""
    if baseline_kW is None or regulating_range_kW is None:
        raise ConfigurationError("group has no AGC baseline/regulating range configured")
    if not -1.0 <= signal_value_pu <= 1.0:
        raise DermsValidationError(f"AGC signal {signal_value_pu!r} outside [-1, 1]")
    return min(max(baseline_kW + signal_value_pu * regulating_range_kW, 0.0), rated_total_kW)


@dataclasses.dataclass(frozen=True)
class ControlCommand:
    device_id: str
    verb: str
    droop: DroopParams | None = None

    def payload(self) -> dict[str, float | str]:
        out: dict[str, float | str] = {"verb": self.verb}
        if self.droop is not None:
            out.update(db_of_hz=self.droop.db_of_hz, db_uf_hz=self.droop.db_uf_hz,
                       k_of=self.droop.k_of, k_uf=self.droop.k_uf)
        return out


class Registry:
    """Devices and groups known to the DERMS. Mutations are serialised by the owner."""

    def __init__(self, stale_after_ticks: int = STALE_AFTER_TICKS) -> None:
        self.devices: dict[str, DeviceRecord] = {}
        self.groups: dict[str, GroupConfig] = {}
        self.members: dict[str, list[str]] = {}
        self.stale_after_ticks = stale_after_ticks
        self.dropped = 0

    def add_group(self, config: GroupConfig) -> None:
        if config.id in self.groups:
            raise DermsValidationError(f"duplicate group {config.id!r}")
        self.groups[config.id] = config
        self.members[config.id] = []

    def register(self, device_id: str, group_id: str, p_rated_kW: float,
                 p_available_kW: float | None = None, tick: int = 0) -> DeviceRecord:
        if group_id not in self.groups:
            raise NotFoundError(f"unknown group {group_id!r}")
        if device_id in self.devices:
            raise DermsValidationError(f"device {device_id!r} already registered")
        rec = DeviceRecord(device_id, group_id, p_rated_kW,
                           p_rated_kW if p_available_kW is None else p_available_kW, last_tick=tick)
        self.devices[device_id] = rec
        self.members[group_id].append(device_id)
        return rec

    def group(self, group_id: str) -> list[DeviceRecord]:
        try:
            return [self.devices[d] for d in self.members[group_id]]
        except KeyError:
            raise NotFoundError(f"unknown group {group_id!r}") from None

    def rated_total(self, group_id: str) -> float:
        return math.fsum(r.p_rated_kW for r in self.group(group_id))

    def ingest_telemetry(self, envelope: Envelope) -> bool:
        """Record a ``der/<id>/output`` report; unknown devices are counted and dropped."""
        device_id = envelope.topic.split("/")[1]
        rec = self.devices.get(device_id)
        if rec is None:
            self.dropped += 1
            log.warning("telemetry from unregistered device %s dropped", device_id)
            return False
        if envelope.tick < rec.last_tick:
            return False
        rec.last_tick = envelope.tick
        rec.last_reported_output_kW = envelope["p_kw"]
        if "p_available_kw" in envelope.values:
            rec.last_reported_available_kW = envelope["p_available_kw"]
        rec.stale = False
        return True

    def refresh_staleness(self, tick: int) -> list[str]:
        newly = []
        for rec in self.devices.values():
            silent = tick - rec.last_tick >= self.stale_after_ticks
            if silent and not rec.stale:
                newly.append(rec.device_id)
            rec.stale = silent
        return newly

    def dispatch(self, group_id: str, signal_value_pu: float, tick: int) -> tuple[float, Allocation]:
        cfg = self.groups.get(group_id)
        if cfg is None:
            raise NotFoundError(f"unknown group {group_id!r}")
        request = agc_to_request(signal_value_pu, cfg.baseline_kW, cfg.regulating_range_kW,
                                 self.rated_total(group_id))
        return request, allocate(request, self.group(group_id), tick, cfg.weighting)

    def enable_droop(self, group_id: str, params: DroopParams | None = None) -> list[ControlCommand]:
        """One freq_watt command per member; repeat calls yield the same commands."""
        members = self.group(group_id)
        params = params or self.groups[group_id].droop or DroopParams()
        return [ControlCommand(r.device_id, "freq_watt", params) for r in members]


@dataclasses.dataclass(frozen=True)
class AgcSignal:
    t_s: tuple[float, ...]
    r_pu: tuple[float, ...]
    source: str = ""

    def __post_init__(self) -> None:
        if len(self.t_s) != len(self.r_pu) or not self.t_s:
            raise DermsValidationError("AGC signal needs equal-length, non-empty columns")
        if any(b <= a for a, b in zip(self.t_s, self.t_s[1:])):
            raise DermsValidationError("AGC time stamps must be strictly increasing")
        bad = [r for r in self.r_pu if not -1.0 <= r <= 1.0]
        if bad:
            raise DermsValidationError(f"AGC values outside [-1, 1]: {bad[:3]}")

    def value_at(self, t_s: float) -> float:
        """Zero-order hold; before the first sample the first value applies."""
        k = bisect.bisect_right(self.t_s, t_s + 1e-9) - 1
        return self.r_pu[max(k, 0)]


def load_agc_csv(path: str | os.PathLike) -> AgcSignal:
    t, r = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and not _is_number(row[0]):
                continue  # header
            if len(row) < 2:
                raise DermsValidationError(f"{path}:{lineno}: expected 't_s, r_pu'")
            try:
                t.append(float(row[0]))
                r.append(float(row[1]))
            except ValueError:
                raise DermsValidationError(f"{path}:{lineno}: non-numeric AGC row {row!r}") from None
    return AgcSignal(tuple(t), tuple(r), str(path))


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def register_fleet(registry: Registry, group_id: str, ratings: Mapping[str, float] | Iterable[tuple[str, float]],
                   tick: int = 0) -> None:
    items = ratings.items() if isinstance(ratings, Mapping) else ratings
    for device_id, rated in items:
        registry.register(device_id, group_id, rated, tick=tick)
