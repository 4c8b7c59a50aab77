"""Fully-cooperative predator-prey on a square grid.

A prey is captured only when none of its four moves leads to a free cell:
every orthogonal neighbour is either a predator or off the grid. Predators
cannot see each other, only preys and the grid edge inside their window.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .base import EnvConfig, StepResult, restore_rng, rng_state

LEFT, RIGHT, UP, DOWN, NOOP = range(5)
ACTION_NAMES = ("LEFT", "RIGHT", "UP", "DOWN", "NO-OP")
MOVES = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [0, 0]])
NEIGHBOURS = MOVES[:4]


class PredatorPreyEnv:
    n_actions = 5

    def __init__(self, config: EnvConfig, seed: Optional[int] = None):
        config.validate()
        self.config = config
        self.size = config.grid_size
        self.n_agents = config.n_agents
        self.n_preys = config.n_preys
        self.radius = config.view_radius
        self.window = 2 * self.radius + 1
        self.obs_dim = 2 * self.window**2 + 2
        self.prey_probs = np.asarray(config.prey_move_probs, dtype=float)
        self._prey_cdf = np.cumsum(self.prey_probs)[:-1]
        pad = self.radius
        self._wall_grid = np.ones((self.size + 2 * pad, self.size + 2 * pad))
        self._wall_grid[pad : pad + self.size, pad : pad + self.size] = 0.0
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.predators = np.zeros((self.n_agents, 2), dtype=int)
        self.preys = np.zeros((self.n_preys, 2), dtype=int)
        self.prey_alive = np.zeros(self.n_preys, dtype=bool)
        self.t = 0

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        n = self.n_agents + self.n_preys
        cells = self.rng.choice(self.size * self.size, size=n, replace=False)
        coords = np.stack([cells // self.size, cells % self.size], axis=1)
        self.predators = coords[: self.n_agents].copy()
        self.preys = coords[self.n_agents :].copy()
        self.prey_alive = np.ones(self.n_preys, dtype=bool)
        self.t = 0
        return self.observe_all()

    def set_positions(self, predators, preys, prey_alive=None, t: int = 0) -> np.ndarray:
        """Place entities explicitly (scripted scenarios)."""
        predators = np.asarray(predators, dtype=int).reshape(-1, 2)
        preys = np.asarray(preys, dtype=int).reshape(-1, 2)
        if len(predators) != self.n_agents or len(preys) != self.n_preys:
            raise ValueError("entity counts do not match the configuration")
        self.predators = predators.copy()
        self.preys = preys.copy()
        self.prey_alive = (
            np.ones(self.n_preys, dtype=bool) if prey_alive is None else np.asarray(prey_alive, bool).copy()
        )
        self.t = t
        return self.observe_all()

    def alive(self) -> np.ndarray:
        return np.ones(self.n_agents, dtype=bool)

    def _inside(self, cell) -> bool:
        return 0 <= cell[0] < self.size and 0 <= cell[1] < self.size

    def _predator_cells(self) -> set:
        return {(int(r), int(c)) for r, c in self.predators}

    def is_captured(self, k: int) -> bool:
        preds = self._predator_cells()
        r, c = (int(v) for v in self.preys[k])
        for dr, dc in NEIGHBOURS.tolist():
            cell = (r + dr, c + dc)
            if self._inside(cell) and cell not in preds:
                return False
        return True

    def adjacent_predators(self, k: int) -> int:
        dist = np.abs(self.predators - self.preys[k]).sum(axis=1)
        return int((dist == 1).sum())

    def sample_prey_move(self) -> int:
        return int(np.searchsorted(self._prey_cdf, self.rng.random(), side="right"))

    def step(self, actions) -> StepResult:
        actions = np.asarray(actions)
        if actions.shape != (self.n_agents,) or np.any(actions < 0) or np.any(actions >= 5):
            raise ValueError(f"invalid joint action {actions!r}")
        cfg = self.config
        moves = MOVES.tolist()
        preds = [tuple(p) for p in self.predators.tolist()]
        preys = [tuple(p) for p in self.preys.tolist()]
        alive = self.prey_alive.tolist()
        live_preys = {p for p, a in zip(preys, alive) if a}
        # predators resolve in index order; blocked moves become NO-OP
        for i, a in enumerate(actions.tolist()):
            dr, dc = moves[a]
            target = (preds[i][0] + dr, preds[i][1] + dc)
            if a == NOOP or not self._inside(target):
                continue
            if target not in preds and target not in live_preys:
                preds[i] = target
        pred_set = set(preds)
        for k in range(self.n_preys):
            if not alive[k]:
                continue
            move = self.sample_prey_move()
            dr, dc = moves[move]
            target = (preys[k][0] + dr, preys[k][1] + dc)
            if move == NOOP or not self._inside(target):
                continue
            if target not in pred_set and target not in live_preys:
                live_preys.discard(preys[k])
                live_preys.add(target)
                preys[k] = target
        self.predators = np.array(preds, dtype=int).reshape(-1, 2)
        self.preys = np.array(preys, dtype=int).reshape(-1, 2)

        captures = failed = 0
        for k in range(self.n_preys):
            if not alive[k]:
                continue
            r, c = preys[k]
            neighbours = [(r + dr, c + dc) for dr, dc in moves[:4]]
            if all(not self._inside(x) or x in pred_set for x in neighbours):
                self.prey_alive[k] = False
                captures += 1
            elif any(x in pred_set for x in neighbours):
                failed += 1
        reward = captures * cfg.capture_reward + failed * cfg.failed_attempt_penalty + cfg.step_penalty
        self.t += 1
        done = bool(not self.prey_alive.any() or self.t >= cfg.max_steps)
        info = {"captures": captures, "failed_attempts": failed, "collisions": 0}
        return StepResult(self.observe_all(), float(reward), done, info)

    def observe(self, agent: int) -> np.ndarray:
        return self.observe_all()[agent]

    def observe_all(self) -> np.ndarray:
        r, w = self.radius, self.window
        prey_grid = np.zeros((self.size + 2 * r, self.size + 2 * r))
        for k in np.flatnonzero(self.prey_alive):
            prey_grid[self.preys[k, 0] + r, self.preys[k, 1] + r] = 1.0
        out = np.empty((self.n_agents, self.obs_dim))
        for i, (pr, pc) in enumerate(self.predators.tolist()):
            out[i, : w * w] = prey_grid[pr : pr + w, pc : pc + w].ravel()
            out[i, w * w : 2 * w * w] = self._wall_grid[pr : pr + w, pc : pc + w].ravel()
        out[:, 2 * w * w :] = self.predators / self.size
        return out

    def get_state(self) -> dict:
        return {
            "predators": self.predators.copy(),
            "preys": self.preys.copy(),
            "prey_alive": self.prey_alive.copy(),
            "t": self.t,
            "rng": rng_state(self.rng),
        }

    def set_state(self, state: dict) -> None:
        self.predators = np.asarray(state["predators"], dtype=int).copy()
        self.preys = np.asarray(state["preys"], dtype=int).copy()
        self.prey_alive = np.asarray(state["prey_alive"], dtype=bool).copy()
        self.t = int(state["t"])
        self.rng = restore_rng(state["rng"])
