"""Plot the CSVs of one or more runs: area frequency and feeder head power.

    python3 tools/plot_run.py out/studyA_case1 out/studyA_case2 -o freq.png

Needs matplotlib, which the package itself does not depend on.
"""

import argparse
import json
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from gridcosim.metrics import read_series  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("runs", nargs="+", help="run output directories")
    ap.add_argument("-o", "--out", default="run.png")
    args = ap.parse_args(argv)

    fig, (ax_f, ax_p) = plt.subplots(2, 1, sharex=True, figsize=(9, 6))
    for run in map(pathlib.Path, args.runs):
        manifest = json.loads((run / "manifest.json").read_text())
        label = f"{manifest['name']} ({manifest['case']})"
        monitor = manifest["scenario_summary"].get("monitor_area")
        for area, (t, f) in read_series(run / "frequency.csv").items():
            if monitor is None or area == monitor:
                ax_f.plot(t, f, label=f"{label} {area}")
        head = read_series(run / "headpower.csv")
        if head:
            t = next(iter(head.values()))[0]
            ax_p.plot(t, -sum(p for _, p in head.values()), label=label)
    ax_f.set_ylabel("frequency [Hz]")
    ax_p.set_ylabel("delivered at feeder heads [MW]")
    ax_p.set_xlabel("time [s]")
    for ax in (ax_f, ax_p):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(args.out)


if __name__ == "__main__":
    main()
