"""Generate the bundled synthetic AGC regulation trace (src/gridcosim/data/agc_synthetic.csv).

Band-limited noise in the spirit of a fast regulation signal: 2 s samples,
a sum of random-phase sinusoids with periods between 30 s and 10 min, scaled
so the signal spans most of [-1, 1]. Deterministic for a fixed seed.

    python3 tools/make_agc_trace.py [out_path] [--duration 1800] [--seed 7]
"""

import argparse
import csv
import pathlib

import numpy as np


def trace(duration_s=1800.0, dt_s=2.0, seed=7):
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration_s + dt_s / 2, dt_s)
    periods = np.exp(rng.uniform(np.log(30.0), np.log(600.0), 24))
    amps = rng.uniform(0.3, 1.0, 24) * np.sqrt(periods / 600.0)
    phases = rng.uniform(0, 2 * np.pi, 24)
    r = (amps[:, None] * np.sin(2 * np.pi * t[None, :] / periods[:, None] + phases[:, None])).sum(axis=0)
    r = 0.95 * r / np.max(np.abs(r))
    return t, np.round(r, 6)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default = pathlib.Path(__file__).resolve().parents[1] / "src" / "gridcosim" / "data" / "agc_synthetic.csv"
    ap.add_argument("out", nargs="?", type=pathlib.Path, default=default)
    ap.add_argument("--duration", type=float, default=1800.0)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    t, r = trace(args.duration, seed=args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "r_pu"])
        w.writerows(zip(t.tolist(), r.tolist()))
    print(f"wrote {args.out} ({len(t)} samples)")


if __name__ == "__main__":
    main()
