"""Command line entry point, run configuration, metrics, and reports.

A run writes into its output directory::

    config.txt      resolved configuration (flat ``section.key = value`` lines)
    metrics.jsonl   one JSON record per line, append-only
    checkpoints/    parameter snapshots (see ``nets.save_checkpoint``)
    report/         learning curve, summary.csv, factorization table (matrix env)

Usage::

    python -m lsfsac --env matrix --algo lsf-sac --seed 0 --steps 20000 --out runs/m0
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .baselines import BaselineConfig, BaselineLearner
from .env import ACTION_NAMES, Episode, MatrixGame, make_env
from .learner import EvalRecord, LearnerConfig, LSFSACLearner, evaluate, pad_episodes, run_training
from .nets import NetConfig, encode_messages, save_checkpoint
from .objective import IBConfig, greedy_joint_action

log = logging.getLogger(__name__)

ALGOS = ("lsf-sac", "masac", "vdn", "qmix")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    """Bad key, bad value, or conflicting options."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    env: str = "matrix"
    algo: str = "lsf-sac"
    seed: int = 0
    steps: int = 20000
    eval_interval: int = 5000
    eval_episodes: int = 32
    log_interval: int = 100
    checkpoint_interval: int = 0  # learner steps; 0 keeps only the final snapshot
    threads: int = 1
    nets: NetConfig = field(default_factory=NetConfig)
    objective: IBConfig = field(default_factory=IBConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    @property
    def run_id(self) -> str:
        return f"{self.env}-{self.algo}-seed{self.seed}"

    @property
    def tag(self) -> str:
        return f"{self.env}-{self.algo}"


SECTIONS = ("nets", "objective", "learner", "baseline")
# derived from --algo, never set directly
RESERVED = {"baseline.algo"}


def _field_types(obj) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(obj)}


def config_keys(cfg: RunConfig | None = None) -> dict[str, str]:
    """Every settable dotted key mapped to its annotation string."""
    cfg = cfg or RunConfig()
    keys = {k: t for k, t in _field_types(cfg).items() if k not in SECTIONS}
    for sec in SECTIONS:
        for k, t in _field_types(getattr(cfg, sec)).items():
            if f"{sec}.{k}" not in RESERVED:
                keys[f"{sec}.{k}"] = t
    return keys


def resolve_key(key: str) -> str:
    """Map a dotted or bare key to its dotted form; bare keys must be unambiguous."""
    keys = config_keys()
    if key in keys:
        return key
    hits = [k for k in keys if k.rsplit(".", 1)[-1] == key]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of {sorted(hits)}")
    raise ConfigError(f"unknown config key {key!r}")


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(text: str, annotation: str):
    text = text.strip()
    if "None" in annotation and text.lower() in ("none", "null", ""):
        return None
    base = annotation.replace("| None", "").strip()
    try:
        if base == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {base}") from None
    return text


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def set_key(cfg: RunConfig, key: str, text: str) -> str:
    """Apply ``key = text`` to ``cfg``; returns the dotted key."""
    dotted = resolve_key(key)
    value = parse_value(text, config_keys(cfg)[dotted])
    if "." in dotted:
        sec, name = dotted.split(".", 1)
        setattr(getattr(cfg, sec), name, value)
    else:
        setattr(cfg, dotted, value)
    return dotted


def read_config_file(path) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def build_config(pairs: list[tuple[str, str]]) -> tuple[RunConfig, set[str]]:
    """Apply overrides in order onto defaults, then validate.

    Returns the config and the set of dotted keys that were set explicitly.
    """
    cfg = RunConfig()
    explicit = set()
    for k, v in pairs:
        explicit.add(set_key(cfg, k, v))
    finalize(cfg, explicit)
    return cfg, explicit


def finalize(cfg: RunConfig, explicit: set[str] = frozenset()):
    """Derive algo-dependent settings and reject conflicting ablations."""
    if cfg.algo not in ALGOS:
        raise ConfigError(f"unknown algo {cfg.algo!r}; choose from {list(ALGOS)}")
    try:
        make_env(cfg.env)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.steps < 1 or cfg.eval_interval < 1 or cfg.eval_episodes < 1:
        raise ConfigError("steps, eval_interval and eval_episodes must be positive")
    if cfg.algo in ("vdn", "qmix"):
        bad = [k for k, v in (("nets.double_q", cfg.nets.double_q),
                              ("objective.soft_target", cfg.objective.soft_target)) if v]
        if cfg.objective.alpha_mode == "fixed":
            bad.append("objective.alpha_mode")
        if "nets.messages" in explicit and cfg.nets.messages:
            bad.append("nets.messages")
        if bad:
            raise ConfigError(f"{cfg.algo} is value-based; incompatible options: {bad}")
        cfg.baseline.algo = cfg.algo
        cfg.nets.messages = False
        cfg.nets.mixer = cfg.algo
    elif cfg.algo == "masac":
        if "nets.messages" in explicit and cfg.nets.messages:
            raise ConfigError("masac is the messages-off ablation; drop nets.messages=true")
        cfg.nets.messages = False
    else:
        if not cfg.nets.messages:
            raise ConfigError("lsf-sac needs messages; use --algo masac for the ablation")
    if cfg.nets.mixer not in ("qmix", "vdn"):
        raise ConfigError(f"unknown mixer {cfg.nets.mixer!r}")
    if cfg.learner.dtype not in ("float32", "float64"):
        raise ConfigError("learner.dtype must be float32 or float64")
    # re-run dataclass validation on edited sections
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        if hasattr(obj, "__post_init__"):
            try:
                obj.__post_init__()
            except ValueError as e:
                raise ConfigError(str(e)) from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration; pass back with --config to reproduce"]
    for key in config_keys(cfg):
        if "." in key:
            sec, name = key.split(".", 1)
            v = getattr(getattr(cfg, sec), name)
        else:
            v = getattr(cfg, key)
        lines.append(f"{key} = {format_value(v)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def make_learner(cfg: RunConfig, env):
    if cfg.algo in ("vdn", "qmix"):
        return BaselineLearner(env.spec, cfg.baseline, cfg.nets, cfg.learner, seed=cfg.seed)
    return LSFSACLearner(env.spec, cfg.nets, cfg.objective, cfg.learner, seed=cfg.seed)


class MetricsWriter:
    """Append-only JSON-lines writer, flushed per record."""

    def __init__(self, path, run_id: str, tag: str):
        self.path = Path(path)
        self.run_id, self.tag = run_id, tag
        self._fh = open(self.path, "a", encoding="utf-8")

    def __call__(self, rec: dict):
        out = {"run": self.run_id, "tag": self.tag, "step": rec.get("env_step", 0), **rec}
        self._fh.write(json.dumps(out, sort_keys=False) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class RunResult:
    config: RunConfig
    learner: object
    state: object
    out: Path | None
    records: list


def run(cfg: RunConfig, out: Path | None = None, extra_record=None) -> RunResult:
    """Train one configuration; writes artifacts into ``out`` when given."""
    torch.set_num_threads(max(int(cfg.threads), 1))
    env = make_env(cfg.env)
    learner = make_learner(cfg, env)
    writer = None
    records = []

    def on_record(rec):
        records.append(rec)
        if writer is not None:
            writer(rec)
        if extra_record is not None:
            extra_record(rec)

    on_ckpt = None
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        metrics = out / "metrics.jsonl"
        if metrics.exists():
            metrics.unlink()
        writer = MetricsWriter(metrics, cfg.run_id, cfg.tag)

        def on_ckpt(lrn, env_steps):
            save_checkpoint(lrn.module, out / "checkpoints" / f"step{env_steps:08d}")

    try:
        state = run_training(learner, env, cfg.steps, cfg.seed, cfg.eval_interval,
                             cfg.eval_episodes, cfg.log_interval, on_record=on_record,
                             on_checkpoint=on_ckpt, checkpoint_interval=cfg.checkpoint_interval)
    finally:
        if writer is not None:
            writer.close()
    if out is not None:
        save_checkpoint(learner.module, out / "checkpoints" / "final")
        report = out / "report"
        emit_report([out / "metrics.jsonl"], report)
        if isinstance(env, MatrixGame):
            emit_factorization_table(learner, env, report)
    return RunResult(cfg, learner, state, out, records)


def evaluate_snapshot(learner, env, n_episodes: int, seed: int, env_step: int = 0) -> EvalRecord:
    """Greedy decentralized evaluation: argmax of the actors (or of the local
    q-values for value-based learners); messages are never consumed."""
    return evaluate(learner.greedy_controller(), env, n_episodes, seed, env_step=env_step)


# ---------------------------------------------------------------------------
# Factorization table
# ---------------------------------------------------------------------------


def factorization_table(learner, env) -> dict:
    """Per-agent q-values and the reconstructed 3x3 Q_tot grid on the matrix game.

    LSF-SAC critics receive the mean messages of the constant observation.
    """
    if not isinstance(env, MatrixGame):
        raise ValueError("factorization tables are defined for the matrix game only")
    state, obs, avail = env.reset(0)
    ep = Episode(state=np.stack([state, state]), obs=np.stack([obs, obs]),
                 avail=np.stack([avail, avail]), actions=np.zeros((1, 2), dtype=np.int64),
                 reward=np.zeros(1), terminated=np.ones(1, dtype=bool))
    batch = pad_episodes([ep], env.spec.n_actions, learner.dtype)
    if hasattr(learner, "nets"):
        critic = learner.nets.critics[0]
        inbound = None
        if learner.net_cfg.messages:
            noise = torch.zeros(*batch.inputs.shape[:3], learner.net_cfg.msg_dim, dtype=learner.dtype)
            inbound = encode_messages(learner.nets.encoder, batch.inputs, noise=noise).inbound
    else:
        critic, inbound = learner.critic, None
    with torch.no_grad():
        q = critic.local(batch.inputs, inbound)[0, 0]  # [2, 3]
        s = batch.state[0, 0]
        grid = [[float(critic.mixer(torch.stack([q[0, a], q[1, b]]), s)) for b in range(3)]
                for a in range(3)]
    greedy = greedy_joint_action(q).tolist()
    return {"q1": q[0].tolist(), "q2": q[1].tolist(), "q_tot": grid, "greedy": greedy,
            "actions": list(ACTION_NAMES)}


def format_table(table: dict) -> str:
    """Text layout: header row holds Q_2, first column Q_1; greedy entries in *stars*."""
    g1, g2 = table["greedy"]
    names = table["actions"]

    def cell(v, bold):
        s = f"{v:.1f}"
        return f"*{s}*" if bold else s

    head = ["Q1 \\ Q2"] + [f"{cell(v, j == g2)}({names[j]})" for j, v in enumerate(table["q2"])]
    rows = [head]
    for i, v in enumerate(table["q1"]):
        rows.append([f"{cell(v, i == g1)}({names[i]})"]
                    + [cell(table["q_tot"][i][j], i == g1 and j == g2) for j in range(3)])
    width = max(len(c) for r in rows for c in r) + 2
    return "\n".join("".join(c.rjust(width) for c in r) for r in rows) + "\n"


def emit_factorization_table(learner, env, out_dir) -> dict:
    table = factorization_table(learner, env)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "factorization.txt").write_text(format_table(table))
    (out_dir / "factorization.json").write_text(json.dumps(table, indent=2))
    return table


# ---------------------------------------------------------------------------
# Metrics parsing and reports
# ---------------------------------------------------------------------------


def read_metrics(paths) -> tuple[list[dict], int]:
    """Parse JSON-lines files; malformed lines are skipped and counted."""
    records, bad = [], 0
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    bad += 1
                    continue
                if not isinstance(rec, dict) or "run" not in rec or "step" not in rec:
                    bad += 1
                    continue
                records.append(rec)
    return records, bad


def eval_curves(records) -> dict[str, dict]:
    """Per-run eval series: ``{run: {"tag", "step", "success_rate", ...}}``."""
    runs: dict[str, dict] = {}
    for r in records:
        if r.get("kind") != "eval":
            continue
        d = runs.setdefault(r["run"], {"tag": r.get("tag", r["run"]), "step": [],
                                       "success_rate": [], "median_return": [],
                                       "mean_return": []})
        for k in ("step", "success_rate", "median_return", "mean_return"):
            d[k].append(float(r[k]))
    return runs


def aggregate(curves: list[list[float]], steps: list[list[float]] | None = None):
    """Median with min-max band across runs, aligned by evaluation index.

    Runs of unequal length are truncated to the shortest. Returns
    ``(step, median, lo, hi)`` arrays.
    """
    if not curves:
        raise ValueError("nothing to aggregate")
    n = min(len(c) for c in curves)
    y = np.array([c[:n] for c in curves], dtype=float)
    x = np.arange(n, dtype=float) if steps is None else np.array([s[:n] for s in steps]).min(0)
    return x, np.median(y, 0), y.min(0), y.max(0)


def emit_report(metrics_paths, out_dir, metric: str = "success_rate") -> dict:
    """Learning curves per tag (median and min-max band) and a summary CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, bad = read_metrics(metrics_paths)
    if bad:
        log.warning("skipped %d malformed metrics lines", bad)
    runs = eval_curves(records)
    summary = []
    for run_id, d in sorted(runs.items()):
        summary.append({"run": run_id, "tag": d["tag"], "final_step": int(d["step"][-1]),
                        "success_rate": d["success_rate"][-1],
                        "median_return": d["median_return"][-1],
                        "mean_return": d["mean_return"][-1]})
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["run", "tag", "final_step", "success_rate",
                                           "median_return", "mean_return"])
        w.writeheader()
        w.writerows(summary)
    bands = {}
    tags = sorted({d["tag"] for d in runs.values()})
    for tag in tags:
        members = [d for d in runs.values() if d["tag"] == tag]
        x, med, lo, hi = aggregate([m[metric] for m in members], [m["step"] for m in members])
        bands[tag] = {"step": x.tolist(), "median": med.tolist(), "lo": lo.tolist(), "hi": hi.tolist()}
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for m in members:
            ax.plot(m["step"], m[metric], color="0.7", lw=0.8)
        ax.plot(x, med, lw=2, label=f"{tag} (median, n={len(members)})")
        ax.fill_between(x, lo, hi, alpha=0.25)
        ax.set_xlabel("env steps")
        ax.set_ylabel(metric.replace("_", " "))
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / f"curve_{tag}.png", dpi=120)
        plt.close(fig)
    (out_dir / "bands.json").write_text(json.dumps(bands))
    return {"summary": summary, "bands": bands, "skipped": bad}


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lsfsac", description="Train LSF-SAC or a baseline on a desk-scale task.")
    p.add_argument("--env", help="matrix | corridor")
    p.add_argument("--algo", help=" | ".join(ALGOS))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="environment steps")
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    p.add_argument("--out", help="output directory (default: $LSFSAC_OUT/<run id> or runs/<run id>)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable (e.g. objective.beta=0.1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run_cli(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        pairs = read_config_file(args.config) if args.config else []
        for key in ("env", "algo", "seed", "steps"):
            v = getattr(args, key)
            if v is not None:
                pairs.append((key, str(v)))
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            pairs.append((k.strip(), v.strip()))
        cfg, _ = build_config(pairs)
    except (ConfigError, OSError) as e:
        parser.print_usage(sys.stderr)
        print(f"lsfsac: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else Path(os.environ.get("LSFSAC_OUT", "runs")) / cfg.run_id
    try:
        t0 = time.perf_counter()
        res = run(cfg, out)
        evals = [r for r in res.records if r.get("kind") == "eval"]
        last = evals[-1] if evals else {}
        print(f"{cfg.run_id}: {len(evals)} evaluations, final success "
              f"{last.get('success_rate', float('nan')):.3f}, median return "
              f"{last.get('median_return', float('nan')):.2f} "
              f"({time.perf_counter() - t0:.0f}s) -> {out}")
    except Exception as e:  # runtime failures map to a distinct exit code
        log.exception("run failed")
        print(f"lsfsac: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run_cli())
