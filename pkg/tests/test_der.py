import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcosim.der import (
    DerDevice,
    DerFleet,
    DerValidationError,
    DroopParams,
    apply_setpoint,
    droop_power,
    step_device,
)


def oracle_droop_kw(f, p_rated, p_pre, p_avail, db_of, db_uf, k_of, k_uf, f_nom=60.0):
    """Piecewise frequency-watt curve, evaluated branch by branch in kW."""
    if f > f_nom + db_of:
        p = p_pre - (f - f_nom - db_of) / (f_nom * k_of) * p_rated
    elif f < f_nom - db_uf:
        p = p_pre + (f_nom - db_uf - f) / (f_nom * k_uf) * p_rated
    else:
        p = p_pre
    return min(max(p, 0.0), p_avail)


def pv(**kw):
    params = dict(id="pv1", p_rated_kW=68.5, p_pre_kW=50.0, p_output_kW=50.0, mode="freq_watt")
    params.update(kw)
    return DerDevice(**params)


@pytest.mark.parametrize("f,expected", [
    (60.0, 50.0),
    (60.5, 50.0 - (0.464 / 3.0) * 68.5),
    (59.5, 50.0 + (0.464 / 3.0) * 68.5),
])
def test_droop_examples(f, expected):
    assert droop_power(pv(), f) == pytest.approx(expected, abs=1e-12)


def test_droop_example_values_to_two_decimals():
    assert round(droop_power(pv(), 60.5), 2) == 39.41
    assert round(droop_power(pv(), 59.5), 2) == 60.59


def test_droop_matches_oracle_on_random_draws():
    rng = random.Random(2024)
    for _ in range(10_000):
        rated = rng.uniform(1.0, 500.0)
        avail = rng.uniform(0.0, rated)
        pre = rng.uniform(0.0, avail)
        params = DroopParams(rng.uniform(0, 0.5), rng.uniform(0, 0.5), rng.uniform(0.01, 0.1),
                             rng.uniform(0.01, 0.1))
        f = rng.uniform(57.0, 63.0)
        dev = DerDevice("d", rated, avail, pre, pre, droop=params, mode="freq_watt")
        got = droop_power(dev, f)
        want = oracle_droop_kw(f, rated, pre, avail, params.db_of_hz, params.db_uf_hz, params.k_of, params.k_uf)
        assert abs(got - want) <= 1e-12 * max(1.0, rated)


def test_fleet_matches_single_device():
    rng = np.random.default_rng(5)
    params = DroopParams(0.02, 0.05, 0.04, 0.06)
    devices = [DerDevice(f"d{i}", r, r * 0.9, r * p, r * p, droop=params, mode="freq_watt")
               for i, (r, p) in enumerate(zip(rng.uniform(5, 100, 50), rng.uniform(0, 0.9, 50)))]
    fleet = DerFleet.from_devices(devices)
    for f in rng.uniform(59.0, 61.0, 40):
        out = fleet.step(float(f), 0.1)
        assert np.array_equal(out, [step_device(d, float(f), 0.1)["p_kw"] for d in devices])


draws = st.tuples(st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.floats(0.005, 0.2), st.floats(0.005, 0.2),
                  st.floats(0.0, 1.0), st.floats(0.0, 1.0))


@settings(max_examples=300, deadline=None)
@given(draws, st.floats(55.0, 65.0), st.floats(1e-6, 0.2))
def test_droop_is_monotone_and_flat_in_deadband(p, f, df):
    db_of, db_uf, k_of, k_uf, a, b = p
    avail, pre = max(a, b) * 100.0, min(a, b) * 100.0
    dev = pv(p_rated_kW=100.0, p_available_kW=avail, p_pre_kW=pre, p_output_kW=pre,
             droop=DroopParams(db_of, db_uf, k_of, k_uf))
    assert droop_power(dev, f + df) <= droop_power(dev, f)
    if 60.0 - db_uf <= f <= 60.0 + db_of:
        assert droop_power(dev, f) == pre
    # continuity: a tiny step moves the output by at most the steepest slope
    slope = 100.0 / (60.0 * min(k_of, k_uf))
    assert abs(droop_power(dev, f + 1e-7) - droop_power(dev, f)) <= slope * 1e-7 * (1 + 1e-6) + 1e-9


@pytest.mark.parametrize("k", [0.02, 0.05, 0.1])
def test_symmetric_law_slope_by_finite_difference(k):
    dev = pv(p_rated_kW=1000.0, p_pre_kW=500.0, p_output_kW=500.0, droop=DroopParams(0.0, 0.0, k, k))
    h = 1e-4
    for f in (59.9, 60.0, 60.1):
        slope = (droop_power(dev, f + h) - droop_power(dev, f - h)) / (2 * h)
        assert slope == pytest.approx(-1000.0 / (60.0 * k), abs=1e-9 * 1000.0 / (60.0 * k) * 1e3)


def test_setpoint_tracking_and_clamp():
    dev = pv(mode="agc_follow", p_output_kW=0.0)
    apply_setpoint(dev, 68.5)
    assert step_device(dev, 60.0, 0.1)["p_kw"] == 68.5
    apply_setpoint(dev, 100.0)
    step_device(dev, 60.0, 0.1)
    assert dev.p_output_kW == 68.5
    with pytest.raises(DerValidationError):
        apply_setpoint(dev, -1.0)


def test_ramp_limit():
    dev = pv(mode="agc_follow", p_output_kW=0.0, ramp_limit_kW_per_s=5.0)
    apply_setpoint(dev, 10.0)
    step_device(dev, 60.0, 0.5)
    assert dev.p_output_kW == pytest.approx(2.5)


def test_setpoint_idempotent_without_ramp():
    dev = pv(mode="fixed_setpoint", p_output_kW=10.0)
    apply_setpoint(dev, 30.0)
    step_device(dev, 60.0, 1.0)
    first = dev.p_output_kW
    apply_setpoint(dev, 30.0)
    step_device(dev, 60.0, 1.0)
    assert dev.p_output_kW == first == 30.0


def test_fixed_setpoint_without_command_holds():
    dev = pv(mode="fixed_setpoint", p_output_kW=42.0)
    for f in (59.0, 61.0, 60.0):
        step_device(dev, f, 0.1)
    assert dev.p_output_kW == 42.0


def test_droop_over_frequency_reduces_then_recovers():
    dev = pv(ramp_limit_kW_per_s=20.0)
    step_device(dev, 61.0, 0.1)
    assert dev.p_output_kW < dev.p_pre_kW
    for _ in range(50):
        step_device(dev, 60.01, 0.1)
    assert dev.p_output_kW == dev.p_pre_kW


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["f", "sp", "avail", "mode"]), st.floats(0.0, 1.0)), max_size=30))
def test_output_bounds_invariant(ops):
    dev = pv(ramp_limit_kW_per_s=30.0)
    for op, x in ops:
        if op == "f":
            step_device(dev, 58.0 + 4.0 * x, 0.1)
        elif op == "sp":
            apply_setpoint(dev, 100.0 * x)
        elif op == "avail":
            dev.set_available(100.0 * x)
        else:
            dev.set_mode(["fixed_setpoint", "freq_watt", "agc_follow"][int(x * 2.999)])
        assert 0.0 <= dev.p_output_kW <= dev.p_available_kW <= dev.p_rated_kW


def test_invalid_inputs():
    with pytest.raises(DerValidationError):
        DroopParams(k_of=0.0)
    with pytest.raises(DerValidationError):
        DroopParams(db_uf_hz=-0.1)
    with pytest.raises(DerValidationError):
        droop_power(pv(), math.nan)
    with pytest.raises(DerValidationError):
        step_device(pv(), 60.0, 0.0)
