import csv
import json

import pytest

import simcase
from gridcosim.cli import compare, main


def run(tmp_path, *extra, **changes):
    path = simcase.write(tmp_path, **changes)
    return main(["run", str(path), *extra]), tmp_path / "out"


def test_run_stable_scenario_exits_zero(tmp_path, capsys):
    code, out = run(tmp_path)
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stable"] is True and manifest["case"] == "Case2"
    assert manifest["files"]["frequency"] == "frequency.csv"
    assert "manifest" in capsys.readouterr().out


def test_run_unstable_scenario_exits_two(tmp_path):
    code, out = run(tmp_path, scenario={"duration_s": 10, "monitor_area": "B"},
                    event__big={"at_s": 0.5, "kind": "load_step", "target": "B", "delta_MW": 1500})
    assert code == 2
    assert json.loads((out / "manifest.json").read_text())["stable"] is False


def test_run_missing_file_exits_one(capsys):
    assert main(["run", "missing.cfg"]) == 1
    assert "cannot read scenario" in capsys.readouterr().err


def test_flags_become_overrides(tmp_path):
    code, _ = run(tmp_path, "--duration", "1", "--step", "0.05", "--seed", "9", "--out", str(tmp_path / "o2"),
                  "--set", "fleet.P.count=2")
    assert code == 0
    m = json.loads((tmp_path / "o2" / "manifest.json").read_text())
    assert m["final_tick"] == 20 and m["seed"] == 9
    with open(tmp_path / "o2" / "device_output.csv") as fh:
        assert {r["id"] for r in csv.DictReader(fh)} == {"P-0", "P-1"}


def test_validate_bundled_and_invalid(tmp_path, capsys):
    assert main(["validate", "studyA_case2"]) == 0
    assert main(["validate", str(simcase.write(tmp_path, fleet__P={"k_of": -0.05}))]) == 1
    assert "fleet P" in capsys.readouterr().err


def test_validate_names_the_loop_edge(tmp_path, capsys):
    path = simcase.write(tmp_path)
    (tmp_path / "tiny.txt").write_text(simcase.FEEDER.replace("[loads]", "2 4 abc 100 cfg1\n\n[loads]"))
    assert main(["validate", str(path)]) == 1
    assert "line 2-4 closes a loop" in capsys.readouterr().err


def test_manifest_metrics_recompute_from_csv(tmp_path):
    code, out = run(tmp_path, event__drop={"at_s": 0.5, "kind": "load_step", "target": "A", "delta_MW": -40})
    m = json.loads((out / "manifest.json").read_text())["metrics"]
    freq, losses = {}, []
    with open(out / "frequency.csv") as fh:
        for r in csv.DictReader(fh):
            freq.setdefault(r["id"], []).append(float(r["value"]))
    with open(out / "losses.csv") as fh:
        losses = [float(r["value"]) for r in csv.DictReader(fh)]
    assert m["max_frequency_hz"] == pytest.approx(max(freq["A"]), rel=1e-9)
    assert m["min_frequency_hz"] == pytest.approx(min(freq["A"]), rel=1e-9)
    assert m["total_losses_kWh"] == pytest.approx(sum(losses) * 0.1 / 3600, rel=1e-9)


def test_compare_with_itself_is_all_zero(tmp_path, capsys):
    _, out = run(tmp_path)
    table = tmp_path / "cmp.csv"
    assert main(["compare", str(out), str(out / "manifest.json"), "--csv", str(table)]) == 0
    s = compare(str(out), str(out))
    assert s["mean_head_power_offset_MW"] == 0 and s["frequency_nadir_delta_hz"] == 0
    assert s["max_abs_frequency_delta_hz"] == 0
    with open(table) as fh:
        assert all(float(r["delta_MW"]) == 0 for r in csv.DictReader(fh))


def test_compare_truncates_to_overlap_and_rejects_disjoint(tmp_path, caplog):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _, long = run(tmp_path / "a")
    _, short = run(tmp_path / "b", "--duration", "1")
    assert compare(str(long), str(short))["samples"] == 11
    assert "differ" in caplog.text
    # shift b out of range by rewriting its time column
    for name in ("headpower.csv", "frequency.csv"):
        path = short / name
        lines = path.read_text().splitlines()
        path.write_text("\n".join([lines[0]] + [f"{float(l.split(',')[0]) + 100},{l.split(',', 1)[1]}"
                                                for l in lines[1:]]) + "\n")
    with pytest.raises(ValueError, match="no time stamps"):
        compare(str(long), str(short))
    assert main(["compare", str(long), str(short)]) == 1


def test_list_shows_bundled(capsys):
    assert main(["list"]) == 0
    assert capsys.readouterr().out.split() == ["studyA_base", "studyA_case1", "studyA_case2", "studyB_case1",
                                               "studyB_case2"]
