"""Generate the bundled 123-node radial feeder (src/gridcosim/data/feeder123.txt).

The layout is synthetic: a three-phase backbone with single-phase laterals,
4.16 kV, about 3.5 MW of spot load at kvar = kW/2. Line codes use the
overhead configuration impedances published with the IEEE 123-node test
feeder (config 1 for the backbone, config 9 for single-phase taps).
Regulators, capacitors and switches are omitted. Output is deterministic.

    python3 tools/make_feeder123.py [out_path]
"""

import pathlib
import random
import sys

N_NODES = 123
N_BACKBONE = 40
N_LOADED = 85
TOTAL_KW = 3490.0
SEED = 123

CONFIG1 = "0.4576 1.0780 0.1560 0.5017 0.1535 0.3849 0.4666 1.0482 0.1580 0.4236 0.4615 1.0651"
CONFIG9 = "1.3292 1.3475 0 0 0 0 1.3292 1.3475 0 0 1.3292 1.3475"


def build(seed=SEED):
    rng = random.Random(seed)
    nodes = [("150", "abc")]
    lines = []
    backbone = ["150"]
    for k in range(1, N_BACKBONE):
        nid = str(k)
        # mostly a chain, occasionally forking off an earlier backbone node
        parent = backbone[-1] if rng.random() < 0.75 or len(backbone) < 4 else rng.choice(backbone[1:-1])
        nodes.append((nid, "abc"))
        lines.append((parent, nid, "abc", rng.randint(10, 25) * 10, "cfg1"))
        backbone.append(nid)
    k = N_BACKBONE
    phase_cycle = "abc"
    tap = 0
    while k < N_NODES:
        root = rng.choice(backbone[2:])
        ph = phase_cycle[tap % 3]
        tap += 1
        parent = root
        for _ in range(min(rng.randint(2, 6), N_NODES - k)):
            nid = str(k)
            nodes.append((nid, ph))
            lines.append((parent, nid, ph, rng.randint(15, 40) * 10, "cfg9"))
            parent = nid
            k += 1
    candidates = [n for n in nodes if n[0] != "150"]
    loaded = sorted(rng.sample(candidates, N_LOADED), key=lambda n: int(n[0]))
    raw = [rng.choice((20.0, 40.0, 40.0, 75.0)) * (3 if ph == "abc" else 1) for _, ph in loaded]
    scale = TOTAL_KW / sum(raw)
    loads = [(nid, ph, round(kw * scale, 1)) for (nid, ph), kw in zip(loaded, raw)]
    return nodes, lines, loads


def render(nodes, lines, loads):
    out = [
        "# Synthetic 123-node radial feeder; generated by tools/make_feeder123.py",
        "[feeder]",
        "name = feeder123",
        "head = 150",
        "base_kV = 4.16",
        "base_MVA = 1.0",
        "",
        "[transformer]",
        "kVA = 5000",
        "r_pu = 0.01",
        "x_pu = 0.08",
        "tap = 1.0",
        "",
        "[linecodes]",
        "# name  Raa Xaa Rab Xab Rac Xac Rbb Xbb Rbc Xbc Rcc Xcc   (ohm/mile)",
        f"cfg1 {CONFIG1}",
        f"cfg9 {CONFIG9}",
        "",
        "[nodes]",
    ]
    out += [f"{nid} {ph}" for nid, ph in nodes]
    out += ["", "[lines]", "# from to phases length_ft linecode"]
    out += [f"{a} {b} {ph} {ft} {code}" for a, b, ph, ft, code in lines]
    out += ["", "[loads]", "# node phase kW kvar"]
    out += [f"{nid} {ph} {kw:.1f} {kw / 2:.2f}" for nid, ph, kw in loads]
    return "\n".join(out) + "\n"


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    default = pathlib.Path(__file__).resolve().parents[1] / "src" / "gridcosim" / "data" / "feeder123.txt"
    path = pathlib.Path(argv[0]) if argv else default
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render(*build()))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
