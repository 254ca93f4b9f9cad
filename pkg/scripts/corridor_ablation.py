"""Message ablation on the corridor: LSF-SAC against MASAC (messages off).

Writes one run directory per (algo, seed) plus a combined report with
median and min-max learning curves.

    python scripts/corridor_ablation.py --seeds 0 1 2 3 4 --out runs/corridor
"""

import argparse
import statistics
from pathlib import Path

from lsfsac.harness import build_config, emit_report, run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--algos", nargs="+", default=["lsf-sac", "masac"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    p.add_argument("--steps", type=int, default=100000)
    p.add_argument("--out", default="runs/corridor")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="extra overrides applied to every arm")
    args = p.parse_args()

    extra = [tuple(kv.split("=", 1)) for kv in args.set]
    out = Path(args.out)
    finals, paths = {}, []
    for algo in args.algos:
        for seed in args.seeds:
            cfg, _ = build_config([("env", "corridor"), ("algo", algo), ("seed", str(seed)),
                                   ("steps", str(args.steps)), ("eval_interval", "10000"), *extra])
            res = run(cfg, out / cfg.run_id)
            last = [r for r in res.records if r["kind"] == "eval"][-1]
            finals.setdefault(algo, []).append(last["success_rate"])
            paths.append(res.out / "metrics.jsonl")
            print(f"{cfg.run_id}: final success {last['success_rate']:.2f}", flush=True)
    emit_report(paths, out / "report")
    for algo, vals in finals.items():
        print(f"{algo}: median final success {statistics.median(vals):.2f} over {len(vals)} seeds")


if __name__ == "__main__":
    main()
