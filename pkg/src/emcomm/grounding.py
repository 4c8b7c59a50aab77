"""Message grounding losses and the per-agent trajectory buffer.

The contrastive loss treats every message of one episode as a view of the
same sample: for each anchor message, messages from the same trajectory
are positives and every other message in the batch is in the denominator.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import MSG_DIM, AgentNet


@dataclass
class CaclConfig:
    tau: float = 0.1
    kappa: float = 0.5
    batch_trajectories: int = 8
    max_messages: int = 64
    buffer_capacity: int = 64

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass
class TrajectoryRecord:
    """One agent's view of one finished episode.

    ``observations`` and ``own_messages`` are (T, ·); ``other_messages`` is
    (T, N-1, 4). The alive masks drop steps where a sender was not in play.
    """

    traj_id: int
    observations: Optional[np.ndarray]
    own_messages: np.ndarray
    other_messages: np.ndarray
    own_alive: Optional[np.ndarray] = None
    others_alive: Optional[np.ndarray] = None

    def __post_init__(self):
        T = len(self.own_messages)
        if self.own_messages.shape != (T, MSG_DIM) or self.other_messages.shape[::2] != (T, MSG_DIM):
            raise ValueError("messages must have length 4 and share the time axis")
        if self.own_alive is None:
            self.own_alive = np.ones(T, dtype=bool)
        if self.others_alive is None:
            self.others_alive = np.ones(self.other_messages.shape[:2], dtype=bool)

    def __len__(self) -> int:
        return len(self.own_messages)

    def message_values(self) -> np.ndarray:
        """All stored messages (own then others, time-major) that were actually sent."""
        own = self.own_messages[self.own_alive]
        others = self.other_messages[self.others_alive]
        return np.concatenate([own, others])


class MessageBuffer:
    """Bounded FIFO of trajectory records."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.records: deque[TrajectoryRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.records)

    def push(self, record: TrajectoryRecord) -> None:
        self.records.append(record)

    def sample(self, k: int, rng: np.random.Generator) -> list[TrajectoryRecord]:
        if not self.records:
            raise ValueError("cannot sample from an empty buffer")
        if k > len(self.records):
            raise ValueError(f"asked for {k} trajectories, buffer holds {len(self.records)}")
        idx = rng.choice(len(self.records), size=k, replace=False)
        return [self.records[i] for i in idx]


def buffer_push(buffer: MessageBuffer, record: TrajectoryRecord) -> None:
    buffer.push(record)


def buffer_sample(buffer: MessageBuffer, k: int, rng: np.random.Generator) -> list[TrajectoryRecord]:
    return buffer.sample(k, rng)


def stack_batch(message_sets: Sequence) -> tuple[Tensor, np.ndarray]:
    """Concatenate per-trajectory message sets and return matching labels."""
    if not message_sets:
        raise ValueError("empty trajectory batch")
    parts = [ad.as_tensor(m) for m in message_sets]
    labels = np.concatenate([np.full(len(p), j) for j, p in enumerate(parts)])
    return ad.concat(parts, axis=0), labels


def cacl_loss(messages, labels, tau: float = 0.1, reduction: str = "mean") -> Tensor:
    """Supervised-contrastive loss with trajectory membership as the label.

    Per anchor i with positives P(i) (same label, excluding i) and
    A(i) = all other messages:

        l_i = -1/|P(i)| * sum_p [ z_i.z_p / tau - log sum_a exp(z_i.z_a / tau) ]

    where z are the L2-normalized messages. Anchors without positives are
    skipped. ``reduction="mean"`` averages over the remaining anchors,
    ``"sum"`` returns their total.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    messages = ad.as_tensor(messages)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0 or messages.shape[0] == 0:
        raise ValueError("empty message batch")
    if messages.shape[0] != n:
        raise ValueError("one label per message required")
    if len(np.unique(labels)) < 2:
        warnings.warn("contrastive batch has fewer than 2 trajectories", RuntimeWarning, stacklevel=2)
    return _contrastive(ad.l2_normalize(messages), labels, tau, reduction)


def _contrastive(z: Tensor, labels: np.ndarray, tau: float, reduction: str) -> Tensor:
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    zd = z.data
    groups, label_idx, counts = np.unique(labels, return_inverse=True, return_counts=True)
    n_pos = counts[label_idx] - 1
    valid = n_pos > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor._result(np.asarray(0.0), (z,), lambda g: (np.zeros_like(zd),))
    # log-denominator over A(i): every message but the anchor itself
    zt = np.ascontiguousarray(zd.T)
    e = zd @ zt
    e *= 1.0 / tau
    np.fill_diagonal(e, -np.inf)
    shift = e.max(axis=1, keepdims=True)
    e -= shift
    np.exp(e, out=e)
    denom = e.sum(axis=1)
    log_denom = np.log(denom) + shift[:, 0]
    # positive logits averaged over P(i), via per-trajectory sums
    group_sum = np.zeros((len(groups), zd.shape[1]))
    np.add.at(group_sum, label_idx, zd)
    pos_sum = group_sum[label_idx] - zd
    inv_pos = np.where(valid, 1.0 / np.maximum(n_pos, 1), 0.0)
    pos_mean = (zd * pos_sum).sum(axis=1) * inv_pos / tau
    per_anchor = log_denom - pos_mean
    scale = 1.0 / n_valid if reduction == "mean" else 1.0
    loss = float(per_anchor[valid].sum()) * scale

    def back(g):
        c = valid * (g * scale)
        a = e * (c / denom)[:, None]
        grad = (a @ zd + a.T @ zd) / tau
        w = c * inv_pos
        w_sum = np.zeros_like(group_sum)
        np.add.at(w_sum, label_idx, w[:, None] * zd)
        grad -= (w[:, None] * pos_sum + w_sum[label_idx] - w[:, None] * zd) / tau
        return (grad,)

    return Tensor._result(np.asarray(loss), (z,), back)


def _subsample(n: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def agent_message_batch(
    agent: AgentNet,
    records: Sequence[TrajectoryRecord],
    max_messages: int,
    rng: np.random.Generator,
) -> tuple[Tensor, np.ndarray]:
    """Messages for a contrastive batch as seen by ``agent``.

    The agent's own messages are recomputed from stored observations so they
    carry gradient; other agents' messages are replayed as constants.
    """
    parts: list[Tensor] = []
    labels: list[np.ndarray] = []
    for j, rec in enumerate(records):
        if rec.observations is None:
            raise ValueError(f"trajectory {rec.traj_id} has no stored observations")
        own_t = np.flatnonzero(rec.own_alive)
        other_slots = np.argwhere(rec.others_alive)
        n_own = len(own_t)
        chosen = _subsample(n_own + len(other_slots), max_messages, rng)
        own_sel = own_t[chosen[chosen < n_own]]
        other_sel = other_slots[chosen[chosen >= n_own] - n_own]
        if len(own_sel):
            parts.append(agent.produce_message(rec.observations[own_sel]))
        if len(other_sel):
            parts.append(ad.constant(rec.other_messages[other_sel[:, 0], other_sel[:, 1]]))
        labels.append(np.full(len(own_sel) + len(other_sel), j))
    if not parts:
        raise ValueError("trajectory batch contains no messages")
    return ad.concat(parts, axis=0), np.concatenate(labels)


def cacl_gradient_scope(
    agent: AgentNet,
    records: Sequence[TrajectoryRecord],
    config: CaclConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Contrastive loss whose gradient reaches only ``agent``'s parameters."""
    messages, labels = agent_message_batch(agent, records, config.max_messages, rng)
    return cacl_loss(messages, labels, config.tau)


def ae_loss(agent: AgentNet, observations) -> Tensor:
    """Reconstruct the (stop-gradient) observation encoding from the message."""
    if agent.decoder is None:
        raise ValueError("ae_loss needs an agent with a decoder")
    enc = agent.encode(observations)
    recon = agent.reconstruct(agent.message_from_encoding(enc))
    return ad.mse(recon, enc.detach())


def ae_observation_batch(
    records: Sequence[TrajectoryRecord], max_per_record: int, rng: np.random.Generator
) -> np.ndarray:
    obs = []
    for rec in records:
        if rec.observations is None:
            raise ValueError(f"trajectory {rec.traj_id} has no stored observations")
        alive = np.flatnonzero(rec.own_alive)
        if len(alive) == 0:
            continue
        obs.append(rec.observations[alive[_subsample(len(alive), max_per_record, rng)]])
    if not obs:
        raise ValueError("trajectory batch contains no observations")
    return np.concatenate(obs)
