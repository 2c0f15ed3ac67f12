"""Print parameter totals across channel multipliers and recurrence counts.

    python scripts/param_accounting.py
"""

import argparse

from bionet.graph import BioNetConfig, build, param_summary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mults", type=float, nargs="+", default=[0.25, 0.5, 0.75, 1.0, 1.25])
    ap.add_argument("--ts", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--depth", type=int, default=4)
    args = ap.parse_args()

    print(f"{'mult':>6} {'t':>3} {'conv+head':>12} {'norm':>8} {'total':>12} {'MB':>8}")
    for mult in args.mults:
        for t in args.ts:
            s = param_summary(build(BioNetConfig(mult=mult, t=t, l=args.depth)))
            print(f"{mult:>6} {t:>3} {s.conv:>12} {s.norm:>8} {s.total:>12} {s.model_bytes / 1e6:>8.2f}")


if __name__ == "__main__":
    main()
