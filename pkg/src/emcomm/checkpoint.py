"""Versioned binary container of named arrays, and trainer (de)serialization.

Layout: magic, uint32 format version, uint64 header length, UTF-8 JSON
header, then the raw little-endian array payloads in header order. The
header carries free-form metadata plus, per array, name/dtype/shape/offset
and a CRC32 so corruption is reported against the array it hit.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from .envs import EnvConfig
from .grounding import CaclConfig, MessageBuffer, TrajectoryRecord
from .trainer import Trainer, TrainConfig, build_agents

MAGIC = b"EMCOMMCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic in preamble)")
    pre = len(MAGIC) + struct.calcsize("<IQ")
    if len(data) < pre:
        raise CheckpointError(f"{path}: truncated preamble")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC) : pre])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    try:
        header = json.loads(data[pre : pre + hlen].decode())
        entries, meta = header["arrays"], header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = pre + hlen
    arrays = {}
    for e in entries:
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"] or zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: array {e['name']!r} is corrupt (checksum mismatch)")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, meta


def _jsonable(state: dict) -> dict:
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in state.items()}


def trainer_state(tr: Trainer) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {
        "kind": "trainer",
        "env_config": asdict(tr.env_config),
        "train_config": asdict(tr.config),
        "seed": tr.seed,
        "steps": tr.steps,
        "updates": tr.updates,
        "episodes": tr.episodes,
        "traj_counter": tr.traj_counter,
        "finished_returns": tr.finished_returns,
        "act_rng": tr.act_rng.bit_generator.state,
        "ground_rng": tr.ground_rng.bit_generator.state,
        "envs": [_jsonable(e.get_state()) for e in tr.envs],
        "optims": [],
        "sigma": [],
        "buffers": [],
    }
    for i, agent in enumerate(tr.agents):
        for name, p in agent.named_parameters().items():
            arrays[f"agent{i}/param/{name}"] = p.data
        sig = {}
        for name, st in agent.spectral_states().items():
            arrays[f"agent{i}/spectral/{name}"] = st.u
            sig[name] = st.sigma
        meta["sigma"].append(sig)
        opt = tr.optims[i]
        meta["optims"].append(
            {"step": opt.step, "lr": opt.lr, "eps": opt.eps, "beta1": opt.beta1, "beta2": opt.beta2}
        )
        for k, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"agent{i}/adam/m/{k}"] = m
            arrays[f"agent{i}/adam/v/{k}"] = v
        ids = []
        for j, rec in enumerate(tr.buffers[i].records):
            ids.append(rec.traj_id)
            prefix = f"buffer{i}/{j}"
            arrays[f"{prefix}/observations"] = rec.observations
            arrays[f"{prefix}/own_messages"] = rec.own_messages
            arrays[f"{prefix}/other_messages"] = rec.other_messages
            arrays[f"{prefix}/own_alive"] = rec.own_alive
            arrays[f"{prefix}/others_alive"] = rec.others_alive
        meta["buffers"].append(ids)
    arrays["hidden"] = tr.hidden
    arrays["prev_msgs"] = tr.prev_msgs
    arrays["obs"] = tr.obs
    arrays["episode_return"] = tr.episode_return
    arrays["episode_success"] = tr.episode_success
    n, d = tr.n_agents, tr.obs.shape[-1]
    for k in range(len(tr.envs)):
        arrays[f"worker{k}/ep_obs"] = np.array(tr.ep_obs[k]).reshape(-1, n, d)
        arrays[f"worker{k}/ep_msgs"] = np.array(tr.ep_msgs[k]).reshape(-1, n, 4)
        arrays[f"worker{k}/ep_alive"] = np.array(tr.ep_alive[k], dtype=bool).reshape(-1, n)
    return arrays, meta


def configs_from_meta(meta: dict) -> tuple[EnvConfig, TrainConfig]:
    env = dict(meta["env_config"])
    env["prey_move_probs"] = tuple(env["prey_move_probs"])
    train = dict(meta["train_config"])
    train["grounding"] = CaclConfig(**train["grounding"])
    return EnvConfig(**env), TrainConfig(**train)


def restore_trainer(arrays: dict[str, np.ndarray], meta: dict) -> Trainer:
    if meta.get("kind") != "trainer":
        raise CheckpointError("checkpoint does not hold trainer state")
    env_config, config = configs_from_meta(meta)
    tr = Trainer(env_config, config, meta["seed"])
    load_agent_arrays(tr.agents, arrays, meta)
    for i, opt in enumerate(tr.optims):
        o = meta["optims"][i]
        opt.step, opt.lr, opt.eps, opt.beta1, opt.beta2 = o["step"], o["lr"], o["eps"], o["beta1"], o["beta2"]
        opt.m = [arrays[f"agent{i}/adam/m/{k}"] for k in range(len(opt.m))]
        opt.v = [arrays[f"agent{i}/adam/v/{k}"] for k in range(len(opt.v))]
        buf = MessageBuffer(config.grounding.buffer_capacity)
        for j, tid in enumerate(meta["buffers"][i]):
            prefix = f"buffer{i}/{j}"
            buf.push(
                TrajectoryRecord(
                    traj_id=tid,
                    observations=arrays[f"{prefix}/observations"],
                    own_messages=arrays[f"{prefix}/own_messages"],
                    other_messages=arrays[f"{prefix}/other_messages"],
                    own_alive=arrays[f"{prefix}/own_alive"],
                    others_alive=arrays[f"{prefix}/others_alive"],
                )
            )
        tr.buffers[i] = buf
    for env, st in zip(tr.envs, meta["envs"]):
        env.set_state(st)
    tr.act_rng.bit_generator.state = meta["act_rng"]
    tr.ground_rng.bit_generator.state = meta["ground_rng"]
    tr.hidden = arrays["hidden"]
    tr.prev_msgs = arrays["prev_msgs"]
    tr.obs = arrays["obs"]
    tr.episode_return = arrays["episode_return"]
    tr.episode_success = arrays["episode_success"]
    for k in range(len(tr.envs)):
        tr.ep_obs[k] = list(arrays[f"worker{k}/ep_obs"])
        tr.ep_msgs[k] = list(arrays[f"worker{k}/ep_msgs"])
        tr.ep_alive[k] = list(arrays[f"worker{k}/ep_alive"])
    tr.steps, tr.updates, tr.episodes = meta["steps"], meta["updates"], meta["episodes"]
    tr.traj_counter = meta["traj_counter"]
    tr.finished_returns = list(meta["finished_returns"])
    return tr


def load_agent_arrays(agents, arrays: dict[str, np.ndarray], meta: dict) -> None:
    for i, agent in enumerate(agents):
        for name, p in agent.named_parameters().items():
            key = f"agent{i}/param/{name}"
            if key not in arrays:
                raise CheckpointError(f"missing parameter array {key!r}")
            if arrays[key].shape != p.data.shape:
                raise CheckpointError(f"parameter {key!r} has shape {arrays[key].shape}, expected {p.data.shape}")
            p.data = arrays[key].astype(np.float64)
        for name, st in agent.spectral_states().items():
            st.u = arrays[f"agent{i}/spectral/{name}"]
            st.sigma = meta["sigma"][i][name]


def save_trainer(tr: Trainer, path) -> None:
    arrays, meta = trainer_state(tr)
    save_arrays(path, arrays, meta)


def load_trainer(path) -> Trainer:
    arrays, meta = load_arrays(path)
    return restore_trainer(arrays, meta)


def load_agents(path):
    """Agents plus their environment and training configuration."""
    arrays, meta = load_arrays(path)
    env_config, config = configs_from_meta(meta)
    agents = build_agents(env_config, config.method, meta["seed"])
    load_agent_arrays(agents, arrays, meta)
    return agents, env_config, config
