"""A two-area, one-feeder scenario small enough for many end-to-end runs."""

import pathlib

FEEDER = """\
[feeder]
name = tiny
head = 0
base_kV = 4.16
base_MVA = 1.0

[transformer]
kVA = 2000
r_pu = 0.01
x_pu = 0.06

[linecodes]
cfg1 0.4576 1.0780 0.1560 0.5017 0.1535 0.3849 0.4666 1.0482 0.1580 0.4236 0.4615 1.0651

[nodes]
0 abc
1 abc
2 abc
3 abc
4 abc

[lines]
0 1 abc 500 cfg1
1 2 abc 800 cfg1
1 3 abc 600 cfg1
3 4 abc 400 cfg1

[loads]
2 abc 120 40
3 abc 90 30
4 abc 150 50
"""

AGC = "t_s,r_pu\n0,0.0\n1,0.5\n2,-0.5\n3,1.0\n4,-1.0\n5,0.25\n"

BASE = {
    "scenario": {"name": "tiny", "case": "Case2", "duration_s": 3.0, "step_s": 0.1, "seed": 3,
                 "monitor_area": "A"},
    "tsnet": {"dt_s": 0.01, "base_MVA": 100, "balancing_area": "A"},
    "area.A": {"H_s": 5, "D_pu": 1, "R_pu": 0.05, "Tg_s": 0.5, "Tt_s": 1, "rating_MVA": 2000,
               "gen_MW": 1500, "load_MW": 1400},
    "area.B": {"H_s": 4, "D_pu": 1, "R_pu": 0.05, "Tg_s": 0.5, "rating_MVA": 1000, "gen_MW": 700,
               "load_MW": 800},
    "tie.AB": {"from": "A", "to": "B", "B_pu": 20},
    "bus.B1": {"area": "B", "dv_dp_pu_per_MW": -1e-4, "dv_dq_pu_per_MVAr": -2e-4},
    "feeder.G": {"file": "tiny.txt", "bus": "B1", "replication": 200},
    "fleet.P": {"feeder": "G", "count": 3, "siting": "load_nodes", "p_rated_kW": 100,
                "p_initial_kW": 60, "mode": "agc_follow"},
    "derms": {"agc_file": "agc.csv", "agc_period_s": 0.2, "baseline_frac": 0.5, "range_frac": 0.4},
}


def write(tmp_path, drop=(), name="tiny.cfg", **changes):
    """Write the base scenario with ``changes`` ({section: {key: value} or None}) applied."""
    tmp = pathlib.Path(tmp_path)
    (tmp / "tiny.txt").write_text(FEEDER)
    (tmp / "agc.csv").write_text(AGC)
    doc = {k: dict(v) for k, v in BASE.items()}
    for section in drop:
        doc.pop(section, None)
    for section, values in changes.items():
        section = section.replace("__", ".")
        if values is None:
            doc.pop(section, None)
        else:
            doc.setdefault(section, {}).update(values)
    doc.setdefault("output", {}).setdefault("dir", str(tmp / "out"))
    text = "".join(f"[{s}]\n" + "".join(f"{k} = {v}\n" for k, v in kv.items()) + "\n" for s, kv in doc.items())
    path = tmp / name
    path.write_text(text)
    return path
