from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

PREDATOR_PREY = "predator_prey"
TRAFFIC_JUNCTION = "traffic_junction"


@dataclass(frozen=True)
class EnvConfig:
    kind: str = PREDATOR_PREY
    grid_size: int = 7
    n_agents: int = 4
    n_preys: int = 2
    view_radius: int = 1
    max_steps: int = 200
    capture_reward: float = 10.0
    failed_attempt_penalty: float = -0.5
    step_penalty: float = -0.01
    prey_move_probs: tuple = (0.175, 0.175, 0.175, 0.175, 0.3)
    collision_penalty: float = -10.0
    time_penalty: float = -0.01
    arrival_rate_min: float = 0.1
    arrival_rate_max: float = 0.3
    seed: int = 0

    @classmethod
    def predator_prey(cls, **overrides) -> "EnvConfig":
        return cls(kind=PREDATOR_PREY, **overrides)

    @classmethod
    def traffic_junction(cls, **overrides) -> "EnvConfig":
        base = dict(kind=TRAFFIC_JUNCTION, grid_size=8, n_agents=5, n_preys=0, max_steps=20)
        base.update(overrides)
        return cls(**base)

    def with_(self, **overrides) -> "EnvConfig":
        return replace(self, **overrides)

    def validate(self) -> None:
        if self.kind not in (PREDATOR_PREY, TRAFFIC_JUNCTION):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.grid_size < 2 or self.n_agents < 1 or self.max_steps < 1:
            raise ValueError("grid_size >= 2, n_agents >= 1 and max_steps >= 1 required")
        if self.kind == PREDATOR_PREY:
            if self.n_agents + self.n_preys > self.grid_size**2:
                raise ValueError(
                    f"{self.n_agents} predators + {self.n_preys} preys do not fit "
                    f"on a {self.grid_size}x{self.grid_size} grid"
                )
            p = np.asarray(self.prey_move_probs, dtype=float)
            if p.shape != (5,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError("prey_move_probs must be 5 non-negative values summing to 1")
        else:
            if not 0 <= self.arrival_rate_min <= self.arrival_rate_max <= 1:
                raise ValueError("need 0 <= arrival_rate_min <= arrival_rate_max <= 1")


@dataclass
class StepResult:
    observations: np.ndarray
    reward: float
    done: bool
    info: dict[str, Any] = field(default_factory=dict)

    def rewards(self, n_agents: int) -> np.ndarray:
        return np.full(n_agents, self.reward)


def make_env(config: EnvConfig, seed: Optional[int] = None):
    from .predator_prey import PredatorPreyEnv
    from .traffic_junction import TrafficJunctionEnv

    config.validate()
    cls = PredatorPreyEnv if config.kind == PREDATOR_PREY else TrafficJunctionEnv
    return cls(config, seed=config.seed if seed is None else seed)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
