import collections

import numpy as np
import pytest

import simcase
from gridcosim import SCENARIO_DIR
from gridcosim.scenario import ScenarioError, load_scenario, parse_scenario

BUNDLED = sorted(p.stem for p in SCENARIO_DIR.glob("*.cfg"))


def test_bundled_set_is_complete():
    assert BUNDLED == ["studyA_base", "studyA_case1", "studyA_case2", "studyB_case1", "studyB_case2"]


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_validate(name):
    s = load_scenario(name)
    assert s.name == name
    assert s.n_ticks * s.step_s == pytest.approx(s.duration_s)
    for f in s.feeders:
        assert f.feeder is not None and f.replication >= 1


def test_study_a_cases_differ_only_by_documented_deltas():
    base, c1, c2 = (load_scenario(f"studyA_{c}") for c in ("base", "case1", "case2"))
    assert [a.retired_MW for a in base.areas] == [0, 0, 0]
    assert {a.id: a.retired_MW for a in c1.areas}["SE"] == 2878
    assert not base.fleets
    rated = sum(f.rated_total_kW * c1.replication_of(f) for f in c1.fleets)
    injected = sum(f.count * f.p_initial_kW * c1.replication_of(f) for f in c1.fleets)
    assert injected == pytest.approx(2878e3)
    assert rated > injected
    assert not c1.derms.droop_fleets and c2.derms.droop_fleets == ("P1", "P2")
    for x, y in zip(c1.areas, c2.areas):
        assert x == y


def test_study_b_capacity_identity():
    c1, c2 = load_scenario("studyB_case1"), load_scenario("studyB_case2")
    assert {f.rated_total_kW for f in c1.fleets} == {f.rated_total_kW for f in c2.fleets} == {6850.0}
    assert all(f.count == 100 and f.p_rated_kW == 68.5 for f in c2.fleets)
    assert c1.derms.group_rating_kW == c2.derms.group_rating_kW == 6850.0


def test_capacity_mismatch_fails_validation(tmp_path):
    path = simcase.write(tmp_path, derms={"group_rating_kW": 301})
    with pytest.raises(ScenarioError, match=r"fleet P rating 3 x 100.0 kW = 300.0 kW differs"):
        load_scenario(path)


def test_errors_are_line_anchored(tmp_path):
    path = simcase.write(tmp_path, area__B={"H_s": "heavy"})
    lines = path.read_text().splitlines()
    expected = next(i for i, line in enumerate(lines, 1) if line.startswith("H_s = heavy"))
    with pytest.raises(ScenarioError) as err:
        load_scenario(path)
    assert err.value.line == expected
    assert f"{path}:{expected}:" in str(err.value)


@pytest.mark.parametrize("changes, message", [
    ({"tie__AB": {"to": "Z"}}, "unknown area 'Z'"),
    ({"feeder__G": {"bus": "nowhere"}}, "unknown bus"),
    ({"fleet__P": {"feeder": "H"}}, "unknown feeder group"),
    ({"fleet__P": {"k_of": 0}}, "fleet P: invalid droop parameters"),
    ({"fleet__P": {"p_initial_kW": 120}}, "p_initial_kW"),
    ({"scenario": {"case": "Case7"}}, "case must be one of"),
    ({"scenario": {"duration_s": 0.25}}, "whole number of steps"),
    ({"tsnet": {"dt_s": 0.5}}, "must not exceed the exchange step"),
    ({"event__x": {"at_s": 1, "kind": "trip_tie", "target": "XY"}}, "does not resolve"),
    ({"event__x": {"at_s": 1, "kind": "meteor"}}, "unknown event kind"),
    ({"derms": {"droop_fleets": "P, Q"}}, "unknown fleet 'Q'"),
    ({"derms": {"agc_file": "missing.csv"}}, "cannot read AGC file"),
    ({"area__A": {"retired_MW": 5000}}, "retired_MW"),
])
def test_invalid_scenarios_are_rejected(tmp_path, changes, message):
    with pytest.raises(ScenarioError, match=message):
        load_scenario(simcase.write(tmp_path, **changes))


def test_feeder_loop_is_reported_with_its_edge(tmp_path):
    path = simcase.write(tmp_path)
    (tmp_path / "tiny.txt").write_text(simcase.FEEDER.replace("3 4 abc 400 cfg1", "3 4 abc 400 cfg1\n4 2 abc 100 cfg1"))
    with pytest.raises(ScenarioError, match="line 4-2 closes a loop"):
        load_scenario(path)


def test_missing_file_and_section():
    with pytest.raises(ScenarioError, match="cannot read scenario"):
        load_scenario("no/such/scenario.cfg")
    with pytest.raises(ScenarioError, match=r"missing \[scenario\]"):
        parse_scenario("[tsnet]\ndt_s = 0.01\n")


def test_overrides_apply_before_validation(tmp_path):
    path = simcase.write(tmp_path)
    s = load_scenario(path, ["scenario.duration_s=1.5", "fleet.P.count=5", "output.dir=elsewhere"])
    assert s.n_ticks == 15
    assert s.fleets[0].count == 5 and len(s.fleets[0].device_ids) == 5
    assert s.output_dir == "elsewhere"
    with pytest.raises(ScenarioError, match="not section.key=value"):
        load_scenario(path, ["duration"])


def test_siting_is_seeded_and_follows_load():
    a = load_scenario("studyB_case2")
    b = load_scenario("studyB_case2")
    c = load_scenario("studyB_case2", ["scenario.seed=6"])
    sites = lambda s: [(d, x.node, x.phases) for f in s.fleets for d, x in f.sites.items()]
    assert sites(a) == sites(b)
    assert sites(a) != sites(c)
    # every device on a loaded bus-phase, single phase; heavier phases draw more devices
    feeder = a.feeders[0].feeder
    loads = {(n, ph): kw for n, ph, kw in feeder.load_nodes()}
    counts = collections.Counter()
    for s in (load_scenario("studyB_case2", [f"scenario.seed={k}"]) for k in range(3)):
        for f in s.fleets:
            for site in f.sites.values():
                assert len(site.phases) == 1 and (site.node, site.phases) in loads
                counts[(site.node, site.phases)] += 1
    kw = np.array([loads[k] for k in counts])
    n = np.array(list(counts.values()))
    assert np.corrcoef(kw, n)[0, 1] > 0.5


def test_head_siting_puts_the_plant_at_the_head():
    s = load_scenario("studyB_case1")
    for spec, fleet in zip(s.feeders, s.fleets):
        (site,) = fleet.sites.values()
        assert site.node == spec.feeder.head and site.phases == "abc"
