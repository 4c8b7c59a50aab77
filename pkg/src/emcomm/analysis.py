"""Density clustering of sent messages and cluster-quality scoring."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .envs import EnvConfig, make_env
from .nets import MSG_DIM, AgentNet

NOISE = -1
DEFAULT_EPS = 0.15
DEFAULT_MIN_PTS = 4


def _neighbourhoods(points: np.ndarray, eps: float, chunk: int = 1024) -> list[np.ndarray]:
    sq = (points * points).sum(axis=1)
    out = []
    for start in range(0, len(points), chunk):
        block = points[start : start + chunk]
        d2 = sq[start : start + chunk, None] + sq[None, :] - 2.0 * block @ points.T
        # exact recomputation near the threshold avoids cancellation error
        near = d2 <= (eps * 1.01) ** 2 + 1e-12
        for r, row in enumerate(near):
            cand = np.flatnonzero(row)
            diff = points[cand] - block[r]
            out.append(cand[np.sqrt((diff * diff).sum(axis=1)) <= eps])
    return out


def dbscan(points, eps: float = DEFAULT_EPS, min_pts: int = DEFAULT_MIN_PTS) -> np.ndarray:
    """Label each point with a cluster id (0, 1, ...) or NOISE (-1).

    A point is core when at least ``min_pts`` points (itself included) lie
    within Euclidean distance ``eps``. Clusters are discovered in input order
    and grown breadth-first; a border point reachable from several clusters
    keeps the first one that reaches it.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts at least 1")
    points = np.asarray(points, dtype=float)
    n = len(points)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    hoods = _neighbourhoods(points.reshape(n, -1), eps)
    core = np.array([len(h) >= min_pts for h in hoods])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for p in range(n):
        if visited[p] or not core[p]:
            continue
        visited[p] = True
        labels[p] = cluster
        queue = deque([p])
        while queue:
            q = queue.popleft()
            for r in hoods[q]:
                if labels[r] == NOISE:
                    labels[r] = cluster
                if core[r] and not visited[r]:
                    visited[r] = True
                    queue.append(r)
        cluster += 1
    return labels


def silhouette(points, labels) -> Optional[float]:
    """Mean silhouette over non-noise points; None when fewer than 2 clusters.

    Points in singleton clusters score 0.
    """
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    keep = labels != NOISE
    x, lab = points[keep], labels[keep]
    ids = np.unique(lab)
    if len(ids) < 2:
        return None
    members = [np.flatnonzero(lab == c) for c in ids]
    pos = np.searchsorted(ids, lab)
    # sums of distances from every point to every cluster
    sums = np.zeros((len(x), len(ids)))
    step = 128
    for start in range(0, len(x), step):
        block = x[start : start + step]
        d = np.sqrt(((block[:, None, :] - x[None, :, :]) ** 2).sum(axis=2))
        for c, m in enumerate(members):
            sums[start : start + step, c] = d[:, m].sum(axis=1)
    sizes = np.array([len(m) for m in members], dtype=float)
    own_size = sizes[pos]
    rows = np.arange(len(x))
    a = np.where(own_size > 1, sums[rows, pos] / np.maximum(own_size - 1, 1), 0.0)
    mean_other = sums / sizes
    mean_other[rows, pos] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.clip(s.mean(), -1.0, 1.0))


@dataclass
class ClusterReport:
    labels: np.ndarray
    n_clusters: int
    n_noise: int
    silhouette: Optional[float]
    eps: float
    min_pts: int
    episodes: int = 0

    @classmethod
    def from_points(cls, points, eps=DEFAULT_EPS, min_pts=DEFAULT_MIN_PTS, episodes=0) -> "ClusterReport":
        labels = dbscan(points, eps, min_pts)
        n_clusters = len(np.unique(labels[labels != NOISE]))
        sc = silhouette(points, labels) if n_clusters >= 2 else None
        return cls(labels, n_clusters, int((labels == NOISE).sum()), sc, eps, min_pts, episodes)

    def as_dict(self) -> dict:
        return {
            "NC": self.n_clusters,
            "NP": self.n_noise,
            "SC": "unavailable" if self.silhouette is None else repr(self.silhouette),
            "eps": self.eps,
            "min_pts": self.min_pts,
            "episodes": self.episodes,
            "points": len(self.labels),
        }

    def write(self, path) -> None:
        Path(path).write_text("".join(f"{k} = {v}\n" for k, v in self.as_dict().items()))


@dataclass
class MessagePointSet:
    """Logged messages with (episode, step, agent) provenance."""

    messages: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    agent: np.ndarray

    @classmethod
    def from_log(cls, logged: np.ndarray) -> "MessagePointSet":
        logged = np.asarray(logged, dtype=float).reshape(-1, 3 + MSG_DIM)
        ints = logged[:, :3].astype(int)
        return cls(logged[:, 3:], ints[:, 0], ints[:, 1], ints[:, 2])

    def __len__(self) -> int:
        return len(self.messages)

    def write_csv(self, path, labels: Optional[np.ndarray] = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "step", "agent", *[f"m{k + 1}" for k in range(MSG_DIM)], "label"])
            for r in range(len(self)):
                label = "" if labels is None else int(labels[r])
                w.writerow(
                    [self.episode[r], self.step[r], self.agent[r], *map(repr, self.messages[r].tolist()), label]
                )


def check_compatible(agents: Sequence[AgentNet], env_config: EnvConfig) -> None:
    env = make_env(env_config)
    if len(agents) != env.n_agents:
        raise ValueError(f"checkpoint has {len(agents)} agents, environment needs {env.n_agents}")
    for a in agents:
        if a.obs_dim != env.obs_dim or a.n_actions != env.n_actions:
            raise ValueError(
                f"checkpoint agents expect obs_dim={a.obs_dim}, n_actions={a.n_actions}; "
                f"environment provides obs_dim={env.obs_dim}, n_actions={env.n_actions}"
            )


def analyze_run(
    agents: Sequence[AgentNet],
    env_config: EnvConfig,
    episodes: int = 7,
    seed: int = 0,
    eps: float = DEFAULT_EPS,
    min_pts: int = DEFAULT_MIN_PTS,
) -> tuple[ClusterReport, MessagePointSet]:
    """Cluster every message sent during ``episodes`` evaluation episodes."""
    from .trainer import evaluate

    check_compatible(agents, env_config)
    if not all(a.communicates for a in agents):
        raise ValueError("agents without a message head send no messages to analyze")
    summary = evaluate(agents, env_config, episodes, seed=seed)
    points = MessagePointSet.from_log(summary.messages)
    report = ClusterReport.from_points(points.messages, eps, min_pts, episodes)
    return report, points
