"""Print per-scale PANW weights for a few exponents side by side."""

import argparse

from stylevar.grpo import panw_table
from stylevar.tokenizer import FULL_SCHEDULE, ScaleSchedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alphas", default="0,0.5,0.7,1.0")
    ap.add_argument("--schedule", default=",".join(map(str, FULL_SCHEDULE)))
    args = ap.parse_args()
    sched = ScaleSchedule(tuple(int(s) for s in args.schedule.split(",")))
    alphas = [float(a) for a in args.alphas.split(",")]
    tables = [panw_table(sched, a) for a in alphas]
    print("side tokens " + " ".join(f"a={a:<6g}" for a in alphas) + "   (per-token weight x1e-2)")
    for i, side in enumerate(sched.sides):
        cells = " ".join(f"{t[i]['per_token_x100']:8.2f}" for t in tables)
        print(f"{side:>4} {sched.token_counts[i]:>6} {cells}")


if __name__ == "__main__":
    main()
