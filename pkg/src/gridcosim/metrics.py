"""Run metrics computed from the recorded CSV files.

Everything here reads the files a run wrote, so a metric computed after the
fact from an output directory matches the one stored in its manifest.
"""

from __future__ import annotations

import csv
import math
import os
import pathlib
from typing import Any, Mapping

import numpy as np

F_NOM_HZ = 60.0
SUSTAINED_DEV_HZ = 0.8       # sustained deviation that counts as loss of stability
SUSTAINED_S = 5.0
COLLAPSE_DEV_HZ = 3.0        # any excursion this large counts as unstable
WINDOW_S = 30.0
SETTLE_WINDOW_S = 10.0
EXCURSION_HZ = 1e-3          # first departure from nominal that fixes the excursion sign


def read_series(path: str | os.PathLike) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``t_s, id, value`` rows grouped by id as (t, value) arrays."""
    cols: dict[str, tuple[list[float], list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for t, ident, value in reader:
            ts, vs = cols.setdefault(ident, ([], []))
            ts.append(float(t))
            vs.append(float(value))
    return {k: (np.array(t), np.array(v)) for k, (t, v) in cols.items()}


def oscillation(t: np.ndarray, f: np.ndarray, window_s: float = WINDOW_S) -> tuple[float, float]:
    """Peak-to-peak half-amplitude over the final window and its growth against the window before."""
    if len(t) < 2:
        return 0.0, 0.0
    end = t[-1]
    last = f[t > end - window_s]
    prev = f[(t > end - 2 * window_s) & (t <= end - window_s)]
    amp = 0.5 * float(np.ptp(last)) if len(last) else 0.0
    amp_prev = 0.5 * float(np.ptp(prev)) if len(prev) else amp
    return amp, amp - amp_prev


def frequency_metrics(t: np.ndarray, f: np.ndarray, event_time_s: float | None,
                      diverged: bool = False) -> dict[str, Any]:
    dev = f - F_NOM_HZ
    amp, growth = oscillation(t, f)
    settle = f[t > t[-1] - SETTLE_WINDOW_S] if len(t) else f
    after = (t >= event_time_s) if event_time_s is not None else np.ones_like(t, dtype=bool)
    moved = np.flatnonzero(after & (np.abs(dev) > EXCURSION_HZ))
    sign = int(np.sign(dev[moved[0]])) if len(moved) else 0
    # a sustained run of |df| beyond the threshold
    step = float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    need = max(1, int(round(SUSTAINED_S / step)))
    run = longest = 0
    first_sustained = None
    for k, big in enumerate(np.abs(dev) > SUSTAINED_DEV_HZ):
        run = run + 1 if big else 0
        if run > longest:
            longest = run
        if run == need and first_sustained is None:
            first_sustained = float(t[k - need + 1])
    growing = growth > 1e-4 and amp > 0.05
    collapse = bool(np.any(np.abs(dev) > COLLAPSE_DEV_HZ))
    stable = not (diverged or growing or first_sustained is not None or collapse)
    cross = np.flatnonzero(np.abs(dev) > SUSTAINED_DEV_HZ)
    return {
        "max_frequency_hz": float(f.max()),
        "min_frequency_hz": float(f.min()),
        "max_abs_deviation_hz": float(np.abs(dev).max()),
        "settling_frequency_hz": float(settle.mean()),
        "final_amplitude_hz": amp,
        "amplitude_growth_hz": growth,
        "first_excursion_sign": sign,
        "first_exceed_0p8_s": float(t[cross[0]]) if len(cross) else None,
        "first_sustained_0p8_s": first_sustained,
        "stable": stable,
    }


def tracking_error(agc: Mapping[str, tuple[np.ndarray, np.ndarray]],
                   headpower: Mapping[str, tuple[np.ndarray, np.ndarray]],
                   regulating_range_kW: float, step_s: float) -> float | None:
    """RMS of delivered minus requested DER power over the regulating range.

    Delivered DER power is the change in aggregate head power, sign flipped,
    one exchange step after the request (setpoints act on the next tick).
    Constant offsets such as losses are removed before the RMS.
    """
    if "request_kw" not in agc or not headpower or regulating_range_kW <= 0:
        return None
    t_req, req = agc["request_kw"]
    t_h = next(iter(headpower.values()))[0]
    head = sum(v for _, v in headpower.values()) * 1000.0
    lookup = {round(x / step_s): i for i, x in enumerate(t_h)}
    err = []
    for tr, r in zip(t_req, req):
        i = lookup.get(round(tr / step_s) + 1)
        if i is not None:
            err.append(-head[i] - r)
    if len(err) < 2:
        return None
    e = np.array(err)
    e -= e.mean()
    return float(np.sqrt(np.mean(e ** 2)) / regulating_range_kW)


def compute_metrics(out_dir: str | os.PathLike, summary: Mapping[str, Any], diverged: bool = False) -> dict[str, Any]:
    out = pathlib.Path(out_dir)
    metrics: dict[str, Any] = {}
    freq_path = out / "frequency.csv"
    if freq_path.exists():
        series = read_series(freq_path)
        area = summary.get("monitor_area")
        if area not in series and series:
            area = sorted(series)[0]
        if area in series:
            t, f = series[area]
            metrics.update(frequency_metrics(t, f, summary.get("event_time_s"), diverged))
            metrics["monitor_area"] = area
        metrics["areas"] = {a: {"max_hz": float(v.max()), "min_hz": float(v.min())} for a, (_, v) in series.items()}
    metrics.setdefault("stable", not diverged)
    loss_path = out / "losses.csv"
    if loss_path.exists():
        losses = read_series(loss_path)
        step = float(summary.get("step_s", 1.0))
        metrics["total_losses_kWh"] = float(sum(v.sum() for _, v in losses.values()) * step / 3600.0)
        metrics["mean_losses_kW"] = float(np.mean(sum(v for _, v in losses.values()))) if losses else 0.0
    agc_path, head_path = out / "agc.csv", out / "headpower.csv"
    if agc_path.exists() and head_path.exists():
        metrics["agc_tracking_error"] = tracking_error(read_series(agc_path), read_series(head_path),
                                                       float(summary.get("regulating_range_kW", 0.0)),
                                                       float(summary.get("step_s", 1.0)))
    return metrics


def headline(metrics: Mapping[str, Any]) -> list[tuple[str, Any]]:
    keys = ("stable", "max_frequency_hz", "min_frequency_hz", "settling_frequency_hz", "final_amplitude_hz",
            "first_sustained_0p8_s", "total_losses_kWh", "agc_tracking_error")
    return [(k, metrics.get(k)) for k in keys if k in metrics]


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)
