"""Run configuration: INI files with [run], [env], [train] and [grounding] sections.

Every training constant has a default, so a standard run only needs the
environment, the method and a seed.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .envs import PREDATOR_PREY, TRAFFIC_JUNCTION, EnvConfig
from .grounding import CaclConfig
from .trainer import AE_COMM, CACL, NO_COMM, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seeds: tuple = (0,)
    output_dir: str = "runs/default"
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvConfig = field(default_factory=EnvConfig.predator_prey)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def grounding(self) -> CaclConfig:
        return self.train.grounding

    def sections(self) -> dict[str, Any]:
        return {"run": self.run, "env": self.env, "train": self.train, "grounding": self.train.grounding}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name, obj in self.sections().items():
            cp[name] = {
                f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name != "grounding"
            }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(float(value)) if "e" in value.lower() else int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in value.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for key {key!r}") from None
    return value.strip()


def _env_defaults(kind: str) -> EnvConfig:
    if kind == PREDATOR_PREY:
        return EnvConfig.predator_prey()
    if kind == TRAFFIC_JUNCTION:
        return EnvConfig.traffic_junction()
    raise ConfigError(f"unknown environment kind {kind!r}")


def apply_overrides(cfg: RunConfig, values: dict[str, dict[str, str]]) -> RunConfig:
    """Apply ``{section: {key: text}}``; unknown sections or keys are rejected."""
    known = {"run", "env", "train", "grounding"}
    for section in values:
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
    env = cfg.env
    env_vals = dict(values.get("env", {}))
    if "kind" in env_vals and env_vals["kind"].strip() != env.kind:
        env = _env_defaults(env_vals["kind"].strip())
    updated = {}
    for section, obj in (("run", cfg.run), ("env", env), ("train", cfg.train), ("grounding", cfg.grounding)):
        names = {f.name: f for f in fields(obj) if f.name != "grounding"}
        changes = {}
        for key, text in values.get(section, {}).items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            changes[key] = _parse(str(text), getattr(obj, key), key)
        try:
            updated[section] = replace(obj, **changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    train = replace(updated["train"], grounding=updated["grounding"])
    out = RunConfig(run=updated["run"], env=updated["env"], train=train)
    try:
        out.env.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return out


def parse_ini(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = {s: dict(cp[s]) for s in cp.sections()}
    return apply_overrides(base or RunConfig(), values)


def _preset(kind: str, method: str, **env_over) -> dict[str, dict[str, str]]:
    vals = {"env": {"kind": kind, **{k: str(v) for k, v in env_over.items()}}, "train": {"method": method}}
    if kind == TRAFFIC_JUNCTION:
        vals["train"]["total_steps"] = "10000000"
    else:
        vals["train"]["total_steps"] = "30000000"
    return vals


PRESETS: dict[str, dict[str, dict[str, str]]] = {}
for _short, _kind in (("pp", PREDATOR_PREY), ("tj", TRAFFIC_JUNCTION)):
    for _m in (CACL, AE_COMM, NO_COMM):
        PRESETS[f"{_short}_{_m}"] = _preset(_kind, _m)
for _m in (CACL, AE_COMM, NO_COMM):
    # reduced predator-prey used for desk-scale comparisons
    PRESETS[f"pp_small_{_m}"] = {
        "env": {"kind": PREDATOR_PREY, "grid_size": "5", "n_agents": "2", "n_preys": "1"},
        "train": {"method": _m, "total_steps": "1000000"},
    }


def load_config(name_or_path: str) -> RunConfig:
    """A preset name (e.g. ``pp_cacl``) or the path of an INI file."""
    if name_or_path in PRESETS:
        cfg = apply_overrides(RunConfig(), PRESETS[name_or_path])
        return apply_overrides(cfg, {"run": {"output_dir": f"runs/{name_or_path}"}})
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"no preset or file named {name_or_path!r} (presets: {', '.join(sorted(PRESETS))})")
    return parse_ini(path.read_text())
