"""PV device models with headroom, setpoint tracking and frequency-watt droop.

A single :class:`DerDevice` carries the reference semantics. :class:`DerFleet`
holds many devices that share droop parameters as arrays and steps them with
the same formulas, vectorised; the tests hold the two to each other.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Sequence

import numpy as np

F_NOM_HZ = 60.0
MODES = ("fixed_setpoint", "freq_watt", "agc_follow")


class DerValidationError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class DroopParams:
    """Frequency-watt curve. Defaults are the IEEE 1547-2018 category values."""

    db_of_hz: float = 0.036
    db_uf_hz: float = 0.036
    k_of: float = 0.05
    k_uf: float = 0.05
    f_nom_hz: float = F_NOM_HZ
    olrt_s: float = 0.0  # open-loop response time of an optional first-order filter

    def __post_init__(self) -> None:
        for name in ("db_of_hz", "db_uf_hz", "olrt_s"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DerValidationError(f"{name} must be >= 0, got {value!r}")
        for name in ("k_of", "k_uf", "f_nom_hz"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise DerValidationError(f"{name} must be > 0, got {value!r}")

    @classmethod
    def from_values(cls, **values: float | None) -> "DroopParams":
        """Build from possibly partial values; missing or None keys take defaults."""
        return cls(**{k: float(v) for k, v in values.items() if v is not None})


def droop_pu(f_hz, p_pre_pu, p_avail_pu, params: DroopParams):
    """Frequency-watt law in per unit of rating; works on scalars or arrays."""
    f = np.asarray(f_hz, dtype=float)
    if np.any(np.isnan(f)):
        raise DerValidationError("frequency is NaN")
    over = f - (params.f_nom_hz + params.db_of_hz)
    under = (params.f_nom_hz - params.db_uf_hz) - f
    p = (p_pre_pu
         - np.where(over > 0, over, 0.0) / (params.f_nom_hz * params.k_of)
         + np.where(under > 0, under, 0.0) / (params.f_nom_hz * params.k_uf))
    p = np.minimum(np.maximum(p, 0.0), p_avail_pu)
    return float(p) if np.ndim(p) == 0 else p


def ramp_toward(current, target, limit_kw_per_s, dt_s):
    """Move ``current`` toward ``target`` by at most ``limit * dt``; no limit when None/inf."""
    if limit_kw_per_s is None:
        return target
    step = np.asarray(limit_kw_per_s, dtype=float) * dt_s
    out = np.where(np.isinf(step), target, current + np.clip(np.subtract(target, current), -step, step))
    return float(out) if np.ndim(out) == 0 else out


@dataclasses.dataclass
class DerDevice:
    id: str
    p_rated_kW: float
    p_available_kW: float | None = None
    p_pre_kW: float = 0.0
    p_output_kW: float = 0.0
    q_output_kvar: float = 0.0
    feeder_node: str = ""
    phases: str = "a"
    droop: DroopParams = dataclasses.field(default_factory=DroopParams)
    mode: str = "fixed_setpoint"
    ramp_limit_kW_per_s: float | None = None
    target_kW: float | None = None

    def __post_init__(self) -> None:
        if not self.p_rated_kW > 0:
            raise DerValidationError(f"device {self.id}: p_rated_kW must be > 0")
        if self.p_available_kW is None:
            self.p_available_kW = self.p_rated_kW
        if self.mode not in MODES:
            raise DerValidationError(f"device {self.id}: unknown mode {self.mode!r}")
        if self.ramp_limit_kW_per_s is not None and not self.ramp_limit_kW_per_s > 0:
            raise DerValidationError(f"device {self.id}: ramp limit must be > 0")
        self.set_available(self.p_available_kW)
        self.p_output_kW = min(max(self.p_output_kW, 0.0), self.p_available_kW)
        if self.target_kW is None:
            self.target_kW = self.p_output_kW

    def set_available(self, p_kw: float) -> None:
        """Update the headroom ceiling; output is pulled down if it now exceeds it."""
        if not math.isfinite(p_kw) or p_kw < 0:
            raise DerValidationError(f"device {self.id}: available power must be >= 0")
        self.p_available_kW = min(p_kw, self.p_rated_kW)
        self.p_output_kW = min(self.p_output_kW, self.p_available_kW)

    def arm(self) -> None:
        """Snapshot the pre-disturbance operating point used as droop reference."""
        self.p_pre_kW = self.p_output_kW

    def set_mode(self, mode: str, droop: DroopParams | None = None) -> None:
        if mode not in MODES:
            raise DerValidationError(f"device {self.id}: unknown mode {mode!r}")
        if mode == "freq_watt" and self.mode != "freq_watt":
            self.arm()
        elif mode != "freq_watt" and self.mode == "freq_watt":
            self.target_kW = self.p_output_kW  # hold until a new setpoint arrives
        self.mode = mode
        if droop is not None:
            self.droop = droop


def droop_power(device: DerDevice, f_hz: float) -> float:
    """Droop target in kW for ``device`` at ``f_hz`` (clamped to headroom)."""
    p = droop_pu(f_hz, device.p_pre_kW / device.p_rated_kW, device.p_available_kW / device.p_rated_kW,
                 device.droop)
    return p * device.p_rated_kW


def apply_setpoint(device: DerDevice, p_setpoint_kW: float) -> DerDevice:
    """Latch a DERMS setpoint; output reaches it on the next :func:`step_device`."""
    if not math.isfinite(p_setpoint_kW) or p_setpoint_kW < 0:
        raise DerValidationError(f"device {device.id}: setpoint must be >= 0, got {p_setpoint_kW!r}")
    device.target_kW = p_setpoint_kW
    return device


def step_device(device: DerDevice, f_hz: float, dt_s: float) -> dict[str, float]:
    """Advance one tick and return the ``der/<id>/output`` payload."""
    if not dt_s > 0:
        raise DerValidationError("dt_s must be > 0")
    if math.isnan(f_hz):
        raise DerValidationError("frequency is NaN")
    if device.mode == "freq_watt":
        target = droop_power(device, f_hz)
        if device.droop.olrt_s > 0:
            # first-order filter with ~95% settling in olrt
            alpha = 1.0 - math.exp(-3.0 * dt_s / device.droop.olrt_s)
            target = device.p_output_kW + alpha * (target - device.p_output_kW)
    else:
        target = min(device.target_kW, device.p_available_kW)
    p = ramp_toward(device.p_output_kW, target, device.ramp_limit_kW_per_s, dt_s)
    device.p_output_kW = min(max(p, 0.0), device.p_available_kW)
    return {"p_kw": device.p_output_kW, "q_kvar": device.q_output_kvar,
            "p_available_kw": device.p_available_kW}


class DerFleet:
    """Devices with shared droop parameters, stepped as arrays.

    Array fields mirror :class:`DerDevice`; droop parameters are shared by
    the fleet because mode commands carry group-wide parameters.
    """

    def __init__(self, ids: Sequence[str], p_rated_kW, p_output_kW=0.0, p_available_kW=None,
                 droop: DroopParams | None = None, mode: str = "fixed_setpoint",
                 ramp_limit_kW_per_s: float | None = None) -> None:
        self.ids = list(ids)
        if len(set(self.ids)) != len(self.ids):
            raise DerValidationError("duplicate device id in fleet")
        n = len(self.ids)
        self.index = {d: i for i, d in enumerate(self.ids)}
        self.p_rated = np.broadcast_to(np.asarray(p_rated_kW, dtype=float), (n,)).copy()
        if np.any(~(self.p_rated > 0)):
            raise DerValidationError("p_rated_kW must be > 0")
        avail = self.p_rated if p_available_kW is None else p_available_kW
        self.p_available = np.minimum(np.broadcast_to(np.asarray(avail, dtype=float), (n,)), self.p_rated)
        self.p_output = np.clip(np.broadcast_to(np.asarray(p_output_kW, dtype=float), (n,)), 0.0,
                                self.p_available)
        self.target = self.p_output.copy()
        self.p_pre = self.p_output.copy()
        self.droop = droop or DroopParams()
        if mode not in MODES:
            raise DerValidationError(f"unknown mode {mode!r}")
        self.droop_on = np.full(n, mode == "freq_watt")
        self.ramp_limit = ramp_limit_kW_per_s

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_devices(cls, devices: Iterable[DerDevice]) -> "DerFleet":
        devices = list(devices)
        fleet = cls([d.id for d in devices], [d.p_rated_kW for d in devices],
                    [d.p_output_kW for d in devices], [d.p_available_kW for d in devices],
                    devices[0].droop if devices else None, "fixed_setpoint",
                    devices[0].ramp_limit_kW_per_s if devices else None)
        fleet.droop_on = np.array([d.mode == "freq_watt" for d in devices])
        fleet.p_pre = np.array([d.p_pre_kW for d in devices])
        fleet.target = np.array([d.target_kW for d in devices])
        return fleet

    def mode_of(self, device_id: str) -> str:
        return "freq_watt" if self.droop_on[self.index[device_id]] else "fixed_setpoint"

    def set_mode(self, mode: str, droop: DroopParams | None = None,
                 device_ids: Iterable[str] | None = None) -> int:
        """Switch devices (default: all) to ``mode``; entering freq_watt arms them."""
        if mode not in MODES:
            raise DerValidationError(f"unknown mode {mode!r}")
        idx = np.arange(len(self)) if device_ids is None else np.array([self.index[d] for d in device_ids],
                                                                       dtype=int)
        if mode == "freq_watt":
            arming = idx[~self.droop_on[idx]]
            self.p_pre[arming] = self.p_output[arming]
            self.droop_on[idx] = True
        else:
            # leaving droop holds the present output until a new setpoint arrives
            leaving = idx[self.droop_on[idx]]
            self.target[leaving] = self.p_output[leaving]
            self.droop_on[idx] = False
        if droop is not None:
            self.droop = droop
        return len(idx)

    def apply_setpoint(self, device_id: str, p_kw: float) -> None:
        if not math.isfinite(p_kw) or p_kw < 0:
            raise DerValidationError(f"device {device_id}: setpoint must be >= 0, got {p_kw!r}")
        self.target[self.index[device_id]] = p_kw

    def step(self, f_hz: float, dt_s: float) -> np.ndarray:
        if not dt_s > 0:
            raise DerValidationError("dt_s must be > 0")
        if math.isnan(f_hz):
            raise DerValidationError("frequency is NaN")
        target = np.minimum(self.target, self.p_available)
        if self.droop_on.any():
            droop = droop_pu(f_hz, self.p_pre / self.p_rated, self.p_available / self.p_rated,
                             self.droop) * self.p_rated
            if self.droop.olrt_s > 0:
                alpha = 1.0 - math.exp(-3.0 * dt_s / self.droop.olrt_s)
                droop = self.p_output + alpha * (droop - self.p_output)
            target = np.where(self.droop_on, droop, target)
        p = ramp_toward(self.p_output, target, self.ramp_limit, dt_s)
        self.p_output = np.clip(p, 0.0, self.p_available)
        return self.p_output

    @property
    def total_output_kW(self) -> float:
        return float(self.p_output.sum())
