"""Command-line entry point: ``emcomm train|eval|analyze|inspect-config|compare``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from .analysis import DEFAULT_EPS, DEFAULT_MIN_PTS, analyze_run
from .checkpoint import CheckpointError, load_agents, load_trainer, save_trainer
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .trainer import Trainer, evaluate, run_training

log = logging.getLogger("emcomm")

OUTPUT_ROOT_ENV = "EMCOMM_OUTPUT_ROOT"
METRIC_COLUMNS = [
    "step",
    "wall_time",
    "episodes",
    "train_reward",
    "eval_metric",
    "eval_mean",
    "eval_stderr",
    "eval_reward",
    "eval_success",
    "rl_loss",
    "ground_loss",
    "grad_norm",
]

# flag -> (section, key)
SHORTCUTS = {
    "method": ("train", "method"),
    "env": ("env", "kind"),
    "kappa": ("grounding", "kappa"),
    "tau": ("grounding", "tau"),
    "lr": ("train", "lr"),
    "gamma": ("train", "gamma"),
    "workers": ("train", "workers"),
    "total_steps": ("train", "total_steps"),
    "eval_every": ("train", "eval_every"),
    "checkpoint_every": ("run", "checkpoint_every"),
    "output": ("run", "output_dir"),
}


class MetricsWriter:
    """Append-only metrics CSV, flushed after every row."""

    def __init__(self, path: Path):
        self.path = path
        new = not path.exists() or path.stat().st_size == 0
        self.fh = open(path, "a", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS)
        if new:
            self.writer.writeheader()
            self.fh.flush()

    def __call__(self, row: dict) -> None:
        self.writer.writerow({k: _fmt(row[k]) for k in METRIC_COLUMNS})
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def resolve_output(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    values: dict[str, dict[str, str]] = {}
    for flag, (section, key) in SHORTCUTS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values.setdefault(section, {})[key] = str(v)
    if getattr(args, "seed", None):
        values.setdefault("run", {})["seeds"] = " ".join(str(s) for s in args.seed)
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        values.setdefault(section.strip(), {})[key.strip()] = value
    return apply_overrides(cfg, values)


def _check_resume(tr: Trainer, cfg: RunConfig, seed: int) -> None:
    if tr.seed != seed:
        raise ConfigError(f"resume checkpoint was trained with seed {tr.seed}, not {seed}")
    if asdict(tr.env_config) != asdict(cfg.env):
        diff = [k for k, v in asdict(cfg.env).items() if asdict(tr.env_config)[k] != v]
        raise ConfigError(f"resume checkpoint is incompatible: env keys differ: {', '.join(diff)}")
    mine, theirs = asdict(cfg.train), asdict(tr.config)
    for k in ("total_steps", "eval_every"):
        mine.pop(k), theirs.pop(k)
    if mine != theirs:
        diff = [k for k in mine if mine[k] != theirs[k]]
        raise ConfigError(f"resume checkpoint is incompatible: train keys differ: {', '.join(diff)}")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = resolve_output(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    for seed in cfg.run.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        trainer = None
        if args.resume:
            try:
                trainer = load_trainer(args.resume)
            except (OSError, CheckpointError) as exc:
                raise ConfigError(f"cannot resume: {exc}") from None
            _check_resume(trainer, cfg, seed)
            trainer.config = cfg.train
        metrics = MetricsWriter(seed_dir / "metrics.csv")

        def checkpoint(tr: Trainer, d=seed_dir) -> None:
            save_trainer(tr, d / f"checkpoint_{tr.steps:010d}.ckpt")
            save_trainer(tr, d / "final.ckpt")

        try:
            tr = run_training(
                cfg.env,
                cfg.train,
                seed,
                trainer=trainer,
                on_metrics=metrics,
                on_checkpoint=checkpoint,
                checkpoint_every=cfg.run.checkpoint_every,
            )
        finally:
            metrics.close()
        print(f"seed {seed}: {tr.steps} steps, {tr.episodes} episodes -> {seed_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError("episodes must be at least 1")
    agents, env_config, _ = _load(args.checkpoint)
    summary = evaluate(agents, env_config, args.episodes, seed=args.seed)
    line = f"{summary.metric}: {summary.mean:.4f} ± {summary.stderr:.4f} over {args.episodes} episodes"
    print(line)
    out = Path(args.out) if args.out else Path(str(args.checkpoint) + ".eval.txt")
    out.write_text(
        f"metric = {summary.metric}\nmean = {summary.mean!r}\nstderr = {summary.stderr!r}\n"
        f"episodes = {args.episodes}\nseed = {args.seed}\n"
        f"mean_reward = {summary.mean_reward!r}\nsuccess_rate = {summary.success_rate!r}\n"
    )
    return 0


def cmd_analyze(args) -> int:
    agents, env_config, _ = _load(args.checkpoint)
    report, points = analyze_run(agents, env_config, args.episodes, args.seed, args.eps, args.min_pts)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.txt")
    points.write_csv(out / "points.csv", report.labels)
    sc = "unavailable" if report.silhouette is None else f"{report.silhouette:.4f}"
    print(f"NC={report.n_clusters} NP={report.n_noise} SC={sc} ({len(points)} messages) -> {out}")
    return 0


def cmd_inspect(args) -> int:
    cfg = resolve_config(args)
    sys.stdout.write(cfg.to_ini())
    print(f"# digest {cfg.digest()}")
    return 0


def cmd_compare(args) -> int:
    from .experiments import compare, desk_comparison, to_json

    results = desk_comparison(args.methods, args.seeds, args.total_steps)
    out = resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(to_json(results))
    if "cacl" in results and "no_comm" in results:
        print(compare(results, "cacl", "no_comm"))
    return 0


def _load(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        return load_agents(path)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="pp_cacl", help="preset name or INI path")
    p.add_argument("--seed", type=int, nargs="+")
    p.add_argument("--method")
    p.add_argument("--env")
    p.add_argument("--kappa", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--output")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emcomm")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train agents and write metrics/checkpoints")
    _config_args(p)
    p.add_argument("--resume", help="continue from a trainer checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="cluster the messages a checkpoint sends")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--min-pts", dest="min_pts", type=int, default=DEFAULT_MIN_PTS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("inspect-config", help="print the resolved configuration")
    _config_args(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("compare", help="desk-scale method comparison on reduced predator-prey")
    p.add_argument("--methods", nargs="+", default=["cacl", "no_comm", "ae_comm"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--total-steps", dest="total_steps", type=int, default=1_000_000)
    p.add_argument("--out", default="runs/compare.json")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
