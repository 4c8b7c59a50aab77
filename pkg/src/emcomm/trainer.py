"""Independent actor-critic with n-step returns and optional message grounding.

``workers`` environment copies advance in lockstep and feed one learner, so
every agent's forward pass is batched across workers. Each agent owns its
network, optimizer and grounding buffer; messages cross agents as plain
values, never as gradient paths.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import TRAFFIC_JUNCTION, EnvConfig, make_env
from .grounding import (
    CaclConfig,
    MessageBuffer,
    TrajectoryRecord,
    ae_loss,
    ae_observation_batch,
    cacl_gradient_scope,
)
from .nets import MSG_DIM, AgentNet, act
from .optim import AdamState, adam_step, clip_gradients, global_norm

log = logging.getLogger(__name__)

CACL = "cacl"
AE_COMM = "ae_comm"
NO_COMM = "no_comm"
METHODS = (CACL, AE_COMM, NO_COMM)


@dataclass
class TrainConfig:
    method: str = CACL
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-4
    adam_eps: float = 1e-3
    grad_clip: float = 2500.0
    n_steps: int = 5
    workers: int = 12
    total_steps: int = 1_000_000
    eval_every: int = 100_000
    eval_episodes: int = 12
    grounding: CaclConfig = field(default_factory=CaclConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_steps < 1 or self.workers < 1:
            raise ValueError("n_steps and workers must be positive")

    @property
    def kappa(self) -> float:
        return self.grounding.kappa


def nstep_returns(rewards, bootstrap, gamma: float, dones=None) -> np.ndarray:
    """Discounted returns by backward recursion, bootstrapped from the segment end.

    ``rewards`` is (T,) or (T, B). A true ``dones[t]`` cuts the recursion so
    nothing after an episode end leaks into earlier steps.
    """
    rewards = np.asarray(rewards, dtype=float)
    dones = np.zeros_like(rewards, dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    out = np.empty_like(rewards)
    running = np.asarray(bootstrap, dtype=float) * np.ones(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * np.where(dones[t], 0.0, running)
        out[t] = running
    return out


@dataclass
class RolloutSegment:
    """One agent's slice of an n-step rollout over all workers.

    Tensor lists hold one (B,) entry per step; arrays are (T, B).
    """

    logprobs: list[Tensor]
    entropies: list[Tensor]
    values: list[Tensor]
    rewards: np.ndarray
    dones: np.ndarray
    alive: np.ndarray
    bootstrap: np.ndarray

    def returns(self, gamma: float) -> np.ndarray:
        return nstep_returns(self.rewards, self.bootstrap, gamma, self.dones)


def a2c_loss(segment: RolloutSegment, config: TrainConfig) -> Tensor:
    """Policy-gradient + value + entropy loss, averaged over live samples."""
    logp = ad.concat(segment.logprobs, axis=0)
    ent = ad.concat(segment.entropies, axis=0)
    value = ad.concat(segment.values, axis=0)
    ret = segment.returns(config.gamma).ravel()
    mask = segment.alive.ravel().astype(float)
    weight = mask / max(mask.sum(), 1.0)
    adv = ret - value.data
    policy_term = -ad.tsum(logp * (adv * weight))
    value_term = ad.tsum(ad.square(value - ret) * weight) * config.value_coef
    entropy_term = ad.tsum(ent * weight) * (-config.entropy_coef)
    loss = policy_term + value_term + entropy_term
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite actor-critic loss")
    return loss


def grounding_loss(
    agent: AgentNet,
    records: Optional[Sequence[TrajectoryRecord]],
    config: TrainConfig,
    rng: np.random.Generator,
) -> Optional[Tensor]:
    """The method's grounding term for one agent, or None before warm-up.

    Also None when the sampled trajectories hold nothing to ground, which
    happens in traffic-junction when cars never entered during them.
    """
    if config.method == NO_COMM or not records or len(records) < 2:
        return None
    if config.method == CACL:
        if not any(r.own_alive.any() or r.others_alive.any() for r in records):
            return None
        return cacl_gradient_scope(agent, records, config.grounding, rng)
    if not any(r.own_alive.any() for r in records):
        return None
    obs = ae_observation_batch(records, config.grounding.max_messages, rng)
    return ae_loss(agent, obs)


def total_loss(
    agent: AgentNet,
    segment: RolloutSegment,
    records: Optional[Sequence[TrajectoryRecord]],
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    """L = L_RL + kappa * L_ground. Returns (total, rl part, grounding part)."""
    rl = a2c_loss(segment, config)
    ground = grounding_loss(agent, records, config, rng)
    if ground is None or config.kappa == 0:
        return rl, rl, ground
    return rl + ground * config.kappa, rl, ground


def apply_gradients(agent: AgentNet, optim: AdamState, loss: Tensor, max_norm: float) -> float:
    """Backprop ``loss`` into ``agent`` only, clip, and take one Adam step."""
    params = agent.parameters()
    ad.zero_grads(params)
    ad.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    norm = global_norm(grads)
    adam_step(params, clip_gradients(grads, max_norm), optim)
    return norm


def build_agents(env_config: EnvConfig, method: str, seed: int) -> list[AgentNet]:
    env = make_env(env_config)
    seqs = np.random.SeedSequence([seed, 7]).spawn(env.n_agents)
    return [
        AgentNet(
            env.obs_dim,
            env.n_actions,
            env.n_agents,
            np.random.default_rng(s),
            communicate=method != NO_COMM,
            decoder=method == AE_COMM,
        )
        for s in seqs
    ]


def received_messages(messages: np.ndarray, agent: int) -> np.ndarray:
    """Other agents' messages for ``agent``, concatenated: (B, N, 4) -> (B, 4(N-1))."""
    b, n, _ = messages.shape
    return np.delete(messages, agent, axis=1).reshape(b, (n - 1) * MSG_DIM)


@dataclass
class EvalSummary:
    metric: str
    mean: float
    stderr: float
    rows: list[dict]
    messages: np.ndarray  # (K, 7): episode, step, agent, m1..m4

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r["reward"] for r in self.rows]))

    @property
    def success_rate(self) -> float:
        return float(np.mean([r["success"] for r in self.rows]))


def _stderr(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def evaluate(
    agents: Sequence[AgentNet],
    env_config: EnvConfig,
    episodes: int = 12,
    seed: int = 0,
    policy: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
) -> EvalSummary:
    """Run ``episodes`` stochastic-policy episodes side by side.

    ``policy(agent, probs) -> actions`` overrides sampling (scripted baselines).
    Episode k uses its own environment seed, so results do not depend on
    the order episodes are run in.
    """
    if episodes < 1:
        raise ValueError("episodes must be positive")
    seeds = np.random.SeedSequence([seed, 1]).spawn(episodes)
    envs = [make_env(env_config, seed=int(s.generate_state(1)[0])) for s in seeds]
    rngs = [np.random.default_rng(s) for s in seeds]
    n = envs[0].n_agents
    obs = np.stack([e.reset() for e in envs])
    hidden = [a.initial_hidden(episodes) for a in agents]
    prev = np.zeros((episodes, n, MSG_DIM))
    running = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    lengths = np.zeros(episodes, dtype=int)
    success = np.ones(episodes, dtype=bool)
    logged = []
    for a in agents:
        a.set_training(False)
    try:
        with ad.no_grad():
            while running.any():
                alive = np.stack([e.alive() for e in envs])
                actions = np.zeros((episodes, n), dtype=int)
                msgs = np.zeros((episodes, n, MSG_DIM))
                for i, agent in enumerate(agents):
                    out = agent.forward(hidden[i], obs[:, i], received_messages(prev, i))
                    probs = np.exp(out.logp.data)
                    if policy is not None:
                        actions[:, i] = policy(i, probs)
                    else:
                        cdf = np.cumsum(probs, axis=1)
                        u = np.array([r.random() for r in rngs])[:, None] * cdf[:, -1:]
                        actions[:, i] = np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)
                    hidden[i] = out.hidden
                    if out.message is not None:
                        msgs[:, i] = out.message.data
                for k in np.flatnonzero(running):
                    for i in np.flatnonzero(alive[k]):
                        if agents[i].communicates:
                            logged.append([k, lengths[k], i, *msgs[k, i]])
                    res = envs[k].step(actions[k])
                    obs[k] = res.observations
                    returns[k] += res.reward
                    lengths[k] += 1
                    if res.info.get("collisions", 0) > 0:
                        success[k] = False
                    if res.done:
                        running[k] = False
                prev = msgs
    finally:
        for a in agents:
            a.set_training(True)
    rows = [
        {"episode": k, "reward": float(returns[k]), "success": bool(success[k]), "length": int(lengths[k])}
        for k in range(episodes)
    ]
    if env_config.kind == TRAFFIC_JUNCTION:
        metric, values = "success_rate", success.astype(float)
    else:
        metric, values = "episode_reward", returns
    messages = np.array(logged, dtype=float).reshape(-1, 3 + MSG_DIM)
    return EvalSummary(metric, float(values.mean()), _stderr(values), rows, messages)


@dataclass
class UpdateStats:
    rl_loss: float
    ground_loss: float
    grad_norm: float


class Trainer:
    """Learner plus ``workers`` lockstep environment copies."""

    def __init__(self, env_config: EnvConfig, config: TrainConfig, seed: int = 0):
        env_config.validate()
        self.env_config = env_config
        self.config = config
        self.seed = seed
        w = config.workers
        env_seeds = np.random.SeedSequence([seed, 0]).spawn(w)
        self.envs = [make_env(env_config, seed=int(s.generate_state(1)[0])) for s in env_seeds]
        self.n_agents = self.envs[0].n_agents
        self.agents = build_agents(env_config, config.method, seed)
        self.optims = [
            AdamState.for_params(a.parameters(), lr=config.lr, eps=config.adam_eps) for a in self.agents
        ]
        self.buffers = [MessageBuffer(config.grounding.buffer_capacity) for _ in self.agents]
        self.act_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.ground_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        self.obs = np.stack([e.reset() for e in self.envs])
        self.hidden = np.zeros((len(self.agents), w, self.agents[0].gru.n_hidden))
        self.prev_msgs = np.zeros((w, self.n_agents, MSG_DIM))
        self.episode_return = np.zeros(w)
        self.episode_success = np.ones(w, dtype=bool)
        self._clear_episode_logs()
        self.steps = 0
        self.updates = 0
        self.episodes = 0
        self.traj_counter = 0
        self.finished_returns: list[float] = []
        self._sync_arrival_rate()

    def _clear_episode_logs(self, workers: Optional[Sequence[int]] = None) -> None:
        if workers is None:
            self.ep_obs = [[] for _ in self.envs]
            self.ep_msgs = [[] for _ in self.envs]
            self.ep_alive = [[] for _ in self.envs]
            return
        for k in workers:
            self.ep_obs[k], self.ep_msgs[k], self.ep_alive[k] = [], [], []

    def _sync_arrival_rate(self) -> None:
        if self.env_config.kind != TRAFFIC_JUNCTION:
            return
        lo, hi = self.env_config.arrival_rate_min, self.env_config.arrival_rate_max
        frac = min(1.0, self.steps / max(1, self.config.total_steps))
        for e in self.envs:
            e.set_arrival_rate(lo + (hi - lo) * frac)

    @property
    def communicates(self) -> bool:
        return self.config.method != NO_COMM

    def _finish_episode(self, k: int) -> None:
        self.episodes += 1
        self.finished_returns.append(float(self.episode_return[k]))
        if self.communicates and self.ep_obs[k]:
            obs = np.stack(self.ep_obs[k])  # (T, N, obs_dim)
            msgs = np.stack(self.ep_msgs[k])  # (T, N, 4)
            alive = np.stack(self.ep_alive[k])  # (T, N)
            tid = self.traj_counter
            for i in range(self.n_agents):
                self.buffers[i].push(
                    TrajectoryRecord(
                        traj_id=tid,
                        observations=obs[:, i].copy(),
                        own_messages=msgs[:, i].copy(),
                        other_messages=np.delete(msgs, i, axis=1),
                        own_alive=alive[:, i].copy(),
                        others_alive=np.delete(alive, i, axis=1),
                    )
                )
        self.traj_counter += 1
        self.episode_return[k] = 0.0
        self.episode_success[k] = True
        self._clear_episode_logs([k])
        self.obs[k] = self.envs[k].reset()
        self.hidden[:, k] = 0.0
        self.prev_msgs[k] = 0.0

    def update(self) -> UpdateStats:
        """Collect one n-step segment on every worker and update every agent."""
        cfg = self.config
        w, n, T = cfg.workers, self.n_agents, cfg.n_steps
        self._sync_arrival_rate()
        hidden = [ad.constant(self.hidden[i]) for i in range(n)]
        logps = [[] for _ in range(n)]
        ents = [[] for _ in range(n)]
        vals = [[] for _ in range(n)]
        rewards = np.zeros((T, w))
        dones = np.zeros((T, w), dtype=bool)
        alive = np.zeros((T, w, n), dtype=bool)
        for t in range(T):
            alive[t] = np.stack([e.alive() for e in self.envs])
            actions = np.zeros((w, n), dtype=int)
            msgs = np.zeros((w, n, MSG_DIM))
            for i, agent in enumerate(self.agents):
                out = act(agent, hidden[i], self.obs[:, i], received_messages(self.prev_msgs, i), self.act_rng)
                actions[:, i] = out.action
                logps[i].append(out.logprob)
                ents[i].append(out.entropy)
                vals[i].append(out.value)
                hidden[i] = out.hidden
                if out.message is not None:
                    msgs[:, i] = out.message.data
            for k, env in enumerate(self.envs):
                if self.communicates:
                    self.ep_obs[k].append(self.obs[k].copy())
                    self.ep_msgs[k].append(msgs[k])
                    self.ep_alive[k].append(alive[t, k])
                res = env.step(actions[k])
                self.obs[k] = res.observations
                rewards[t, k] = res.reward
                dones[t, k] = res.done
                self.episode_return[k] += res.reward
            self.prev_msgs = msgs
            self.steps += w
            keep = ad.constant((~dones[t]).astype(float)[:, None])
            hidden = [h * keep for h in hidden]
            for k in np.flatnonzero(dones[t]):
                self._finish_episode(k)

        with ad.no_grad():
            bootstrap = [
                agent.forward(hidden[i], self.obs[:, i], received_messages(self.prev_msgs, i)).value.data
                for i, agent in enumerate(self.agents)
            ]
        rl_total = ground_total = norm_total = 0.0
        for i, agent in enumerate(self.agents):
            seg = RolloutSegment(
                logps[i], ents[i], vals[i], rewards, dones, alive[:, :, i], bootstrap[i]
            )
            records = self._grounding_batch(i)
            loss, rl, ground = total_loss(agent, seg, records, cfg, self.ground_rng)
            norm_total += apply_gradients(agent, self.optims[i], loss, cfg.grad_clip)
            rl_total += float(rl.data)
            ground_total += float(ground.data) if ground is not None else 0.0
            self.hidden[i] = hidden[i].data
        self.updates += 1
        return UpdateStats(rl_total / n, ground_total / n, norm_total / n)

    def _grounding_batch(self, i: int) -> Optional[list[TrajectoryRecord]]:
        buf = self.buffers[i]
        if not self.communicates or len(buf) < 2:
            return None
        k = min(self.config.grounding.batch_trajectories, len(buf))
        return buf.sample(k, self.ground_rng)

    def pop_finished_returns(self) -> list[float]:
        out, self.finished_returns = self.finished_returns, []
        return out

    def evaluate(self, episodes: Optional[int] = None, seed: Optional[int] = None) -> EvalSummary:
        n = self.config.eval_episodes if episodes is None else episodes
        # evaluation seeds never coincide with training environment seeds
        return evaluate(self.agents, self.env_config, n, seed=(self.seed + 1) * 1_000_003 if seed is None else seed)


def run_training(
    env_config: EnvConfig,
    config: TrainConfig,
    seed: int = 0,
    trainer: Optional[Trainer] = None,
    on_metrics: Optional[Callable[[dict], None]] = None,
    on_checkpoint: Optional[Callable[[Trainer], None]] = None,
    checkpoint_every: int = 0,
    until_steps: Optional[int] = None,
) -> Trainer:
    """Train until ``until_steps`` (default ``config.total_steps``) environment steps.

    ``on_metrics`` receives one row per evaluation; ``on_checkpoint`` is
    called every ``checkpoint_every`` steps and at the end.
    """
    tr = trainer or Trainer(env_config, config, seed)
    target = config.total_steps if until_steps is None else until_steps
    start = time.perf_counter()
    next_eval = (tr.steps // config.eval_every + 1) * config.eval_every if config.eval_every else None
    next_ckpt = (tr.steps // checkpoint_every + 1) * checkpoint_every if checkpoint_every else None
    stats = UpdateStats(0.0, 0.0, 0.0)
    while tr.steps < target:
        stats = tr.update()
        if next_eval is not None and tr.steps >= next_eval:
            next_eval += config.eval_every
            row = _metrics_row(tr, stats, start)
            log.info("step %d eval %s=%.3f", tr.steps, row["eval_metric"], row["eval_mean"])
            if on_metrics:
                on_metrics(row)
        if next_ckpt is not None and tr.steps >= next_ckpt:
            next_ckpt += checkpoint_every
            if on_checkpoint:
                on_checkpoint(tr)
    if on_checkpoint:
        on_checkpoint(tr)
    return tr


def _metrics_row(tr: Trainer, stats: UpdateStats, start: float) -> dict:
    summary = tr.evaluate()
    finished = tr.pop_finished_returns()
    return {
        "step": tr.steps,
        "wall_time": round(time.perf_counter() - start, 3),
        "episodes": tr.episodes,
        "train_reward": float(np.mean(finished)) if finished else float("nan"),
        "eval_metric": summary.metric,
        "eval_mean": summary.mean,
        "eval_stderr": summary.stderr,
        "eval_reward": summary.mean_reward,
        "eval_success": summary.success_rate,
        "rl_loss": stats.rl_loss,
        "ground_loss": stats.ground_loss,
        "grad_norm": stats.grad_norm,
    }
