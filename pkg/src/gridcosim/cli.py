"""``gridcosim`` command line: validate, run and compare scenarios.

Exit codes: 0 success (stable run), 2 run completed but unstable, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import pathlib
import sys
from typing import Sequence

import numpy as np

from . import SCENARIO_DIR, __version__
from .metrics import _fmt, headline, read_series
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_ERROR, EXIT_UNSTABLE = 0, 1, 2
log = logging.getLogger("gridcosim")


def _overrides(args: argparse.Namespace) -> list[str]:
    out = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        out.append(f"scenario.seed={args.seed}")
    if getattr(args, "step", None) is not None:
        out.append(f"scenario.step_s={args.step}")
    if getattr(args, "duration", None) is not None:
        out.append(f"scenario.duration_s={args.duration}")
    if getattr(args, "out", None) is not None:
        out.append(f"output.dir={args.out}")
    return out


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        s = load_scenario(args.scenario, _overrides(args))
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    devices = sum(f.count for f in s.fleets)
    print(f"{s.source}: ok ({s.case}, {s.n_ticks} ticks of {s.step_s} s, {len(s.areas)} areas, "
          f"{len(s.feeders)} feeder groups, {devices} modelled devices)")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    from .cosim import CosimError, run_scenario
    overrides = _overrides(args)
    try:
        s = load_scenario(args.scenario, overrides)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    mode = "wire" if args.wire else ("threads" if args.threads else "round_robin")
    try:
        report = run_scenario(s, mode, realtime=args.realtime, timeout_s=args.timeout, overrides=overrides)
    except (CosimError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{s.name} [{s.case}] -> {report.out_dir} ({report.final_tick} ticks, {report.wall_s:.1f} s wall)")
    for key, value in headline(report.metrics):
        print(f"  {key:24s} {_fmt(value)}")
    print(f"  manifest                 {report.manifest}")
    return EXIT_OK if report.stable else EXIT_UNSTABLE


def _load_manifest(path: str) -> tuple[dict, pathlib.Path]:
    p = pathlib.Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return json.loads(p.read_text()), p.parent


def _delivered(out_dir: pathlib.Path, files: dict) -> dict[float, float]:
    """Aggregate power injected into transmission (MW, sign-flipped head power) per time."""
    series = read_series(out_dir / files["headpower"])
    total: dict[float, float] = {}
    for t, v in series.values():
        for ti, vi in zip(t.tolist(), v.tolist()):
            total[ti] = total.get(ti, 0.0) - vi
    return total


def _frequency(out_dir: pathlib.Path, files: dict, area: str) -> dict[float, float]:
    series = read_series(out_dir / files["frequency"])
    t, v = series[area] if area in series else next(iter(series.values()))
    return dict(zip(t.tolist(), v.tolist()))


def compare(manifest_a: str, manifest_b: str, out_csv: str | None = None) -> dict[str, float]:
    ma, da = _load_manifest(manifest_a)
    mb, db = _load_manifest(manifest_b)
    area = ma.get("metrics", {}).get("monitor_area") or ma["scenario_summary"].get("monitor_area")
    pa, pb = _delivered(da, ma["files"]), _delivered(db, mb["files"])
    fa, fb = _frequency(da, ma["files"], area), _frequency(db, mb["files"], area)
    common = sorted(set(pa) & set(pb) & set(fa) & set(fb))
    if not common:
        raise ValueError("manifests share no time stamps")
    if len(common) < max(len(pa), len(pb)):
        log.warning("time ranges differ; comparing the %d shared samples only", len(common))
    d_p = np.array([pa[t] - pb[t] for t in common])
    d_f = np.array([fa[t] - fb[t] for t in common])
    summary = {
        "samples": len(common),
        "t_start_s": common[0],
        "t_end_s": common[-1],
        "mean_head_power_offset_MW": float(d_p.mean()),
        "max_abs_head_power_offset_MW": float(np.abs(d_p).max()),
        "frequency_nadir_delta_hz": min(fa[t] for t in common) - min(fb[t] for t in common),
        "frequency_peak_delta_hz": max(fa[t] for t in common) - max(fb[t] for t in common),
        "max_abs_frequency_delta_hz": float(np.abs(d_f).max()),
    }
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_s", "delivered_a_MW", "delivered_b_MW", "delta_MW", "f_a_hz", "f_b_hz", "delta_hz"])
            for t, dp, df in zip(common, d_p, d_f):
                w.writerow([repr(t), repr(pa[t]), repr(pb[t]), repr(float(dp)), repr(fa[t]), repr(fb[t]),
                            repr(float(df))])
    return summary


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        summary = compare(args.manifest_a, args.manifest_b, args.csv)
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for key, value in summary.items():
        print(f"{key:30s} {_fmt(value)}")
    if args.csv:
        print(f"{'series':30s} {args.csv}")
    return EXIT_OK


def cmd_list(args: argparse.Namespace) -> int:
    for p in sorted(SCENARIO_DIR.glob("*.cfg")):
        print(p.stem)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcosim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
        p.add_argument("--seed", type=int)
        p.add_argument("--step", type=float, help="exchange step in seconds")
        p.add_argument("--duration", type=float, help="simulated seconds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a scenario value")

    p = sub.add_parser("run", help="run a scenario and write CSVs plus manifest.json")
    scenario_args(p)
    p.add_argument("--wire", action="store_true", help="one process per component over TCP")
    p.add_argument("--threads", action="store_true", help="one thread per component on the in-process bus")
    p.add_argument("--realtime", action="store_true", help="pace simulated time to the wall clock")
    p.add_argument("--timeout", type=float, default=5.0, help="deadlock timeout per tick in concurrent modes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a scenario without running it")
    scenario_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="compare two runs by manifest")
    p.add_argument("manifest_a")
    p.add_argument("manifest_b")
    p.add_argument("--csv", help="write the aligned series to this file")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("list", help="list bundled scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
