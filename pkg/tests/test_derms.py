import itertools
from fractions import Fraction
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcosim.der import DroopParams
from gridcosim.derms import (
    AgcSignal,
    ConfigurationError,
    DermsValidationError,
    DeviceRecord,
    GroupConfig,
    NotFoundError,
    Registry,
    agc_to_request,
    allocate,
    load_agc_csv,
)
from gridcosim.msgbus import Envelope
from gridcosim import data_path


def records(avail, rated=None):
    rated = rated or avail
    return [DeviceRecord(f"d{i}", "g", r, a) for i, (a, r) in enumerate(zip(avail, rated))]


def brute_force_fill(request, caps, weights):
    """Try every clamped subset in exact arithmetic; keep the self-consistent one."""
    caps = [Fraction(c) for c in caps]
    weights = [Fraction(w) for w in weights]
    target = min(Fraction(request), sum(caps))
    n = len(caps)
    if target <= 0:
        return [Fraction(0)] * n
    for k in range(n + 1):
        for clamped in itertools.combinations(range(n), k):
            free = [i for i in range(n) if i not in clamped]
            rest = target - sum(caps[i] for i in clamped)
            if not free:
                if rest == 0:
                    return caps
                continue
            wsum = sum(weights[i] for i in free)
            if wsum <= 0:
                continue
            level = rest / wsum
            if all(level * weights[i] <= caps[i] for i in free) and \
                    all(level * weights[i] >= caps[i] for i in clamped):
                return [caps[i] if i in clamped else level * weights[i] for i in range(n)]
    raise AssertionError("no consistent clamp set")


def test_zero_request():
    assert allocate(0.0, records([10, 20, 30])).as_dict() == {"d0": 0.0, "d1": 0.0, "d2": 0.0}


def test_pro_rata_example():
    got = allocate(30.0, records([10, 20, 30])).as_dict()
    assert got == pytest.approx({"d0": 5.0, "d1": 10.0, "d2": 15.0}, abs=1e-12)


def test_clamp_and_redistribute_example_with_equal_weights():
    got = allocate(55.0, records([10, 20, 30]), weighting="equal").as_dict()
    assert got == pytest.approx({"d0": 10.0, "d1": 20.0, "d2": 25.0}, abs=1e-12)


def test_rated_weighting_clamps_devices_short_on_headroom():
    got = allocate(60.0, records([5, 30, 30], rated=[30, 30, 30]), weighting="rated").as_dict()
    assert got == pytest.approx({"d0": 5.0, "d1": 27.5, "d2": 27.5}, abs=1e-12)


def test_request_beyond_capacity_and_zero_capacity():
    alloc = allocate(100.0, records([10, 20, 30]))
    assert alloc.total_kW == 60.0 and alloc.shortfall_kW == 40.0
    empty = allocate(5.0, records([0.0, 0.0]))
    assert empty.total_kW == 0.0 and empty.shortfall_kW == 5.0


def test_allocation_errors():
    with pytest.raises(DermsValidationError):
        allocate(1.0, [])
    with pytest.raises(DermsValidationError):
        allocate(-1.0, records([1.0]))


@pytest.mark.parametrize("weighting", ["available", "rated", "equal"])
def test_allocation_matches_brute_force_oracle(weighting):
    rng = random.Random({"available": 1, "rated": 2, "equal": 3}[weighting])
    for _ in range(10_000):
        n = rng.randint(1, 10)
        rated = [rng.uniform(1.0, 100.0) for _ in range(n)]
        avail = [r * rng.choice([1.0, rng.uniform(0.0, 1.0)]) for r in rated]
        request = rng.uniform(0.0, 1.1 * sum(avail))
        alloc = allocate(request, records(avail, rated), weighting=weighting)
        weights = {"available": avail, "rated": rated, "equal": [1.0] * n}[weighting]
        want = brute_force_fill(request, avail, weights)
        got = [c.p_setpoint_kW for c in alloc.commands]
        increment = math.ulp(max(request, 1.0))
        assert all(abs(Fraction(g) - w) <= increment for g, w in zip(got, want)), (got, want)
        assert all(g <= a for g, a in zip(got, avail))
        assert abs(math.fsum(got) - min(request, math.fsum(avail))) <= increment


group_st = st.lists(st.floats(0.0, 100.0), min_size=1, max_size=10)


@settings(max_examples=300, deadline=None)
@given(group_st, st.floats(0.0, 1.0))
def test_proportional_fairness_without_clamping(avail, frac):
    alloc = allocate(frac * sum(avail), records(avail, [100.0] * len(avail)))
    ratios = [c.p_setpoint_kW / a for c, a in zip(alloc.commands, avail) if a > 1e-3]
    if ratios:
        assert max(ratios) - min(ratios) <= 1e-12 + 1e-9 * (frac < 1e-6)


@settings(max_examples=300, deadline=None)
@given(group_st, st.floats(0.0, 600.0), st.floats(0.0, 100.0),
       st.sampled_from(["available", "rated", "equal"]))
def test_monotone_in_request(avail, request, extra, weighting):
    recs = records(avail, [100.0] * len(avail))
    lo = allocate(request, recs, weighting=weighting).commands
    hi = allocate(request + extra, recs, weighting=weighting).commands
    assert all(b.p_setpoint_kW >= a.p_setpoint_kW - 1e-9 for a, b in zip(lo, hi))


def test_agc_to_request():
    assert agc_to_request(0.0, 3425.0, 3425.0, 6850.0) == 3425.0
    assert agc_to_request(1.0, 3425.0, 3425.0, 6850.0) == 6850.0
    assert agc_to_request(-1.0, 3425.0, 3425.0, 6850.0) == 0.0
    with pytest.raises(ConfigurationError):
        agc_to_request(0.5, None, 100.0, 6850.0)


def registry_with(n, group="g"):
    reg = Registry()
    reg.add_group(GroupConfig(group, baseline_kW=n * 34.25, regulating_range_kW=n * 34.25))
    for i in range(n):
        reg.register(f"pv{i}", group, 68.5)
    return reg


def test_enable_droop_counts_and_defaults():
    reg = registry_with(500)
    cmds = reg.enable_droop("g")
    assert len(cmds) == 500
    assert {c.device_id for c in cmds} == {f"pv{i}" for i in range(500)}
    assert all(c.droop == DroopParams() for c in cmds)
    assert len(reg.enable_droop("g")) == 500
    with pytest.raises(NotFoundError):
        reg.enable_droop("nope")


def out(device, tick, p=10.0, avail=68.5):
    return Envelope.create(f"der/{device}/output", tick, "fleet", p_kw=p, p_available_kw=avail)


def test_telemetry_and_staleness():
    reg = registry_with(3)
    assert reg.ingest_telemetry(out("pv0", 3, p=12.0))
    assert reg.devices["pv0"].last_reported_output_kW == 12.0
    assert not reg.ingest_telemetry(out("ghost", 3))
    assert reg.dropped == 1
    for tick in range(1, 6):
        reg.ingest_telemetry(out("pv1", tick))
        reg.ingest_telemetry(out("pv2", tick, avail=30.0))
    assert reg.refresh_staleness(8) == ["pv0"]
    _, alloc = reg.dispatch("g", 0.0, 8)
    assert set(alloc.as_dict()) == {"pv1", "pv2"}
    assert alloc.as_dict()["pv2"] <= 30.0


def test_agc_signal_and_bundled_trace():
    sig = AgcSignal((0.0, 4.0, 8.0), (0.1, -0.2, 0.3))
    assert [sig.value_at(t) for t in (0.0, 3.9, 4.0, 100.0)] == [0.1, 0.1, -0.2, 0.3]
    with pytest.raises(DermsValidationError):
        AgcSignal((0.0, 0.0), (0.0, 0.0))
    with pytest.raises(DermsValidationError):
        AgcSignal((0.0,), (1.5,))
    trace = load_agc_csv(data_path("agc_synthetic.csv"))
    assert all(-1.0 <= r <= 1.0 for r in trace.r_pu)
    assert trace.t_s[-1] >= 600.0
