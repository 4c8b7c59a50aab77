"""Single-junction traffic gridworld (easy variant: two arrival points).

Route 0 enters at the left edge and drives right along the middle row;
route 1 enters at the top edge and drives down the middle column. The
routes cross at one junction cell. Cars leave after passing the far edge
and may later re-enter as new arrivals.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .base import EnvConfig, StepResult, restore_rng, rng_state

GAS, BRAKE = 0, 1
N_ROUTES = 2


class TrafficJunctionEnv:
    n_actions = 2

    def __init__(self, config: EnvConfig, seed: Optional[int] = None):
        config.validate()
        self.config = config
        self.size = config.grid_size
        self.n_agents = config.n_agents
        self.radius = config.view_radius
        self.window = 2 * self.radius + 1
        self.obs_dim = self.window**2 + N_ROUTES + 2
        mid = self.size // 2
        along = np.arange(self.size)
        self.routes = [
            np.stack([np.full(self.size, mid), along], axis=1),
            np.stack([along, np.full(self.size, mid)], axis=1),
        ]
        self.arrival_rate = config.arrival_rate_min
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self._clear()

    def _clear(self) -> None:
        n = self.n_agents
        self.active = np.zeros(n, dtype=bool)
        self.route = np.zeros(n, dtype=int)
        self.progress = np.zeros(n, dtype=int)
        self.age = np.zeros(n, dtype=int)
        self.t = 0
        self.collided = False

    def set_arrival_rate(self, rate: float) -> None:
        lo, hi = self.config.arrival_rate_min, self.config.arrival_rate_max
        self.arrival_rate = float(np.clip(rate, lo, hi))

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._clear()
        return self.observe_all()

    def place(self, agent: int, route: int, progress: int, age: int = 0) -> None:
        """Activate ``agent`` at a given point of a route (scripted scenarios)."""
        self.active[agent] = True
        self.route[agent] = route
        self.progress[agent] = progress
        self.age[agent] = age

    def alive(self) -> np.ndarray:
        return self.active.copy()

    def cell(self, agent: int) -> np.ndarray:
        return self.routes[self.route[agent]][self.progress[agent]]

    def step(self, actions) -> StepResult:
        actions = np.asarray(actions)
        if actions.shape != (self.n_agents,) or np.any((actions != GAS) & (actions != BRAKE)):
            raise ValueError(f"invalid joint action {actions!r}")
        cfg = self.config
        for i in np.flatnonzero(self.active):
            if actions[i] == GAS:
                self.progress[i] += 1
                if self.progress[i] >= self.size:
                    self.active[i] = False
        # one draw per arrival point every step keeps the random stream aligned
        draws = self.rng.random(N_ROUTES)
        for route in range(N_ROUTES):
            if draws[route] >= self.arrival_rate:
                continue
            idle = np.flatnonzero(~self.active)
            if len(idle) == 0:
                break
            entry = self.routes[route][0]
            if any(np.array_equal(self.cell(j), entry) for j in np.flatnonzero(self.active)):
                continue
            self.place(int(idle[0]), route, 0)

        cells: dict[tuple, list[int]] = {}
        for i in np.flatnonzero(self.active):
            cells.setdefault(tuple(self.cell(i)), []).append(int(i))
        colliding = sum(len(v) for v in cells.values() if len(v) > 1)
        reward = colliding * cfg.collision_penalty
        reward += cfg.time_penalty * float(self.age[self.active].sum())
        self.age[self.active] += 1
        self.collided = self.collided or colliding > 0
        self.t += 1
        done = self.t >= cfg.max_steps
        info = {"collisions": colliding, "success": not self.collided, "captures": 0, "failed_attempts": 0}
        return StepResult(self.observe_all(), float(reward), done, info)

    def observe(self, agent: int) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        if not self.active[agent]:
            obs[-1] = 1.0
            return obs
        w, r = self.window, self.radius
        occ = np.zeros((w, w))
        here = self.cell(agent)
        for j in np.flatnonzero(self.active):
            if j == agent:
                continue
            rel = self.cell(j) - here + r
            if 0 <= rel[0] < w and 0 <= rel[1] < w:
                occ[rel[0], rel[1]] = 1.0
        obs[: w * w] = occ.ravel()
        obs[w * w + self.route[agent]] = 1.0
        obs[w * w + N_ROUTES] = self.progress[agent] / (self.size - 1)
        return obs

    def observe_all(self) -> np.ndarray:
        return np.stack([self.observe(i) for i in range(self.n_agents)])

    def get_state(self) -> dict:
        return {
            "active": self.active.copy(),
            "route": self.route.copy(),
            "progress": self.progress.copy(),
            "age": self.age.copy(),
            "t": self.t,
            "collided": self.collided,
            "arrival_rate": self.arrival_rate,
            "rng": rng_state(self.rng),
        }

    def set_state(self, state: dict) -> None:
        self.active = np.asarray(state["active"], dtype=bool).copy()
        self.route = np.asarray(state["route"], dtype=int).copy()
        self.progress = np.asarray(state["progress"], dtype=int).copy()
        self.age = np.asarray(state["age"], dtype=int).copy()
        self.t = int(state["t"])
        self.collided = bool(state["collided"])
        self.arrival_rate = float(state["arrival_rate"])
        self.rng = restore_rng(state["rng"])
