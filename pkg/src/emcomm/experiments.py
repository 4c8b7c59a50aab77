"""Desk-scale comparison of grounding methods on a reduced predator-prey task."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .analysis import analyze_run
from .envs import EnvConfig
from .trainer import AE_COMM, CACL, NO_COMM, TrainConfig, run_training

log = logging.getLogger(__name__)

REDUCED_PP = EnvConfig.predator_prey(grid_size=5, n_agents=2, n_preys=1)
FINAL_EVAL_SEED = 424242


@dataclass
class SeedResult:
    method: str
    seed: int
    eval_mean: float
    eval_stderr: float
    n_clusters: Optional[int]
    n_noise: Optional[int]
    silhouette: Optional[float]
    seconds: float
    curve: list = field(default_factory=list)


def run_method(
    method: str,
    seed: int,
    env_config: EnvConfig = REDUCED_PP,
    total_steps: int = 1_000_000,
    eval_episodes: int = 12,
    analyze_episodes: int = 7,
    train_overrides: Optional[dict] = None,
) -> SeedResult:
    config = TrainConfig(method=method, total_steps=total_steps, eval_every=max(total_steps // 10, 1))
    if train_overrides:
        config = replace(config, **train_overrides)
    curve: list = []
    start = time.perf_counter()
    tr = run_training(env_config, config, seed, on_metrics=lambda r: curve.append((r["step"], r["eval_mean"])))
    summary = tr.evaluate(eval_episodes, seed=FINAL_EVAL_SEED + seed)
    nc = npts = sc = None
    if method != NO_COMM:
        report, _ = analyze_run(tr.agents, env_config, analyze_episodes, seed=FINAL_EVAL_SEED + seed)
        nc, npts, sc = report.n_clusters, report.n_noise, report.silhouette
    seconds = time.perf_counter() - start
    log.info("%s seed %d: eval %.3f (sc=%s) in %.0fs", method, seed, summary.mean, sc, seconds)
    return SeedResult(method, seed, summary.mean, summary.stderr, nc, npts, sc, seconds, curve)


def desk_comparison(
    methods: Sequence[str] = (CACL, NO_COMM, AE_COMM),
    seeds: Sequence[int] = (0, 1, 2),
    total_steps: int = 1_000_000,
    env_config: EnvConfig = REDUCED_PP,
    progress: Optional[Callable[[SeedResult], None]] = None,
) -> dict[str, list[SeedResult]]:
    results: dict[str, list[SeedResult]] = {m: [] for m in methods}
    for seed in seeds:
        for m in methods:
            r = run_method(m, seed, env_config, total_steps)
            results[m].append(r)
            if progress:
                progress(r)
    return results


def seed_mean_and_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def compare(results: dict[str, list[SeedResult]], a: str, b: str) -> dict:
    """Difference of seed-level means of ``a`` over ``b`` and its pooled standard error."""
    ma, sa = seed_mean_and_stderr([r.eval_mean for r in results[a]])
    mb, sb = seed_mean_and_stderr([r.eval_mean for r in results[b]])
    pooled = float(np.hypot(sa, sb))
    return {"mean_a": ma, "mean_b": mb, "diff": ma - mb, "pooled_se": pooled, "passes": ma - mb > pooled}


def to_json(results: dict[str, list[SeedResult]]) -> str:
    return json.dumps({m: [r.__dict__ for r in rs] for m, rs in results.items()}, indent=2)


def from_json(text: str) -> dict[str, list[SeedResult]]:
    raw = json.loads(text)
    out = {}
    for m, rs in raw.items():
        out[m] = [SeedResult(**{**r, "curve": [tuple(c) for c in r["curve"]]}) for r in rs]
    return out


def source_digest() -> str:
    """Hash of the package sources; results are deterministic given this and the arguments."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cached_desk_comparison(
    cache_dir,
    methods: Sequence[str] = (CACL, NO_COMM, AE_COMM),
    seeds: Sequence[int] = (0, 1, 2),
    total_steps: int = 1_000_000,
    env_config: EnvConfig = REDUCED_PP,
    progress: Optional[Callable[[SeedResult], None]] = None,
) -> dict[str, list[SeedResult]]:
    """``desk_comparison`` memoized on disk, keyed by source digest and arguments."""
    key = json.dumps(
        [source_digest(), list(methods), list(seeds), total_steps, asdict(env_config)], sort_keys=True
    )
    path = Path(cache_dir) / f"desk_{hashlib.sha256(key.encode()).hexdigest()[:16]}.json"
    if path.exists():
        return from_json(path.read_text())
    results = desk_comparison(methods, seeds, total_steps, env_config, progress)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(results))
    return results
