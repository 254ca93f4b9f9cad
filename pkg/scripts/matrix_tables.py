"""Train LSF-SAC, QMIX and VDN on the matrix game and print their factorization tables.

    python scripts/matrix_tables.py --seeds 0 1 2 3 4 --out runs/matrix
"""

import argparse
import json
from pathlib import Path

from lsfsac.env import payoff
from lsfsac.harness import build_config, format_table, run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--algos", nargs="+", default=["lsf-sac", "qmix", "vdn"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--out", default="runs/matrix")
    args = p.parse_args()

    for algo in args.algos:
        for seed in args.seeds:
            cfg, _ = build_config([("env", "matrix"), ("algo", algo), ("seed", str(seed)),
                                   ("steps", str(args.steps))])
            res = run(cfg, Path(args.out) / cfg.run_id)
            table_path = res.out / "report" / "factorization.txt"
            table = json.loads((res.out / "report" / "factorization.json").read_text())
            a, b = table["greedy"]
            print(f"== {cfg.run_id}: greedy ({table['actions'][a]},{table['actions'][b]}) "
                  f"true payoff {payoff(a, b):.0f}")
            print(format_table(table), end="")
            print(f"   (saved to {table_path})")


if __name__ == "__main__":
    main()
