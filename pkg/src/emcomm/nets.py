"""Per-agent networks: encoders, GRU core, policy/value/message heads, AE decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .spectral import SpectralState, spectral_normalize

OBS_ENC_DIM = 32
MSG_ENC_DIM = 16
HIDDEN_DIM = 32
MSG_DIM = 4


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_out, n_in)), True, f"{name}.weight")
        self.bias = Tensor(rng.uniform(-bound, bound, n_out), True, f"{name}.bias")

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class SpectralLinear(Linear):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        super().__init__(n_in, n_out, rng, name)
        self.spectral = SpectralState.init(n_out, rng)
        self.update_sigma = True

    def __call__(self, x: Tensor) -> Tensor:
        w = spectral_normalize(self.weight, self.spectral, 1, update=self.update_sigma)
        return ad.linear(x, w, self.bias)


class Head:
    """Three fully-connected layers; the middle one is spectrally normalized."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.l1 = Linear(n_in, HIDDEN_DIM, rng, f"{name}.l1")
        self.l2 = SpectralLinear(HIDDEN_DIM, HIDDEN_DIM, rng, f"{name}.l2")
        self.l3 = Linear(HIDDEN_DIM, n_out, rng, f"{name}.l3")

    def params(self) -> list[Tensor]:
        return self.l1.params() + self.l2.params() + self.l3.params()

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(ad.relu(self.l2(ad.relu(self.l1(x)))))


class GRUCell:
    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator, name: str = "gru"):
        bound = 1.0 / np.sqrt(n_hidden)
        width = n_in + n_hidden
        self.n_hidden = n_hidden
        self.w_gates = Tensor(rng.uniform(-bound, bound, (2 * n_hidden, width)), True, f"{name}.w_gates")
        self.b_gates = Tensor(rng.uniform(-bound, bound, 2 * n_hidden), True, f"{name}.b_gates")
        self.w_cand = Tensor(rng.uniform(-bound, bound, (n_hidden, width)), True, f"{name}.w_cand")
        self.b_cand = Tensor(rng.uniform(-bound, bound, n_hidden), True, f"{name}.b_cand")

    def params(self) -> list[Tensor]:
        return [self.w_gates, self.b_gates, self.w_cand, self.b_cand]

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        return gru_step(self, h, x)


def gru_step(cell: GRUCell, h: Tensor, x: Tensor) -> Tensor:
    """z = σ(Wz[x,h]), r = σ(Wr[x,h]), h̃ = tanh(Wh[x, r⊙h]), h' = (1-z)⊙h + z⊙h̃."""
    n = cell.n_hidden
    gates = ad.sigmoid(ad.linear(ad.concat([x, h]), cell.w_gates, cell.b_gates))
    z = gates[:, :n]
    r = gates[:, n:]
    cand = ad.tanh(ad.linear(ad.concat([x, r * h]), cell.w_cand, cell.b_cand))
    return h + z * (cand - h)


def entropy_from_logp(logp: Tensor) -> Tensor:
    return -ad.tsum(ad.exp(logp) * logp, axis=-1)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


@dataclass
class StepOutput:
    encoding: Tensor
    message: Optional[Tensor]
    hidden: Tensor
    logp: Tensor
    value: Tensor


@dataclass
class ActOutput:
    action: np.ndarray
    logprob: Tensor
    entropy: Tensor
    value: Tensor
    hidden: Tensor
    message: Optional[Tensor]
    encoding: Tensor


class AgentNet:
    """One agent's parameters. Nothing here is shared with other agents."""

    def __init__(
        self,
        obs_dim: int,
        n_actions: int,
        n_agents: int,
        rng: np.random.Generator,
        communicate: bool = True,
        decoder: bool = False,
    ):
        if decoder and not communicate:
            raise ValueError("a decoder needs a message head")
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_agents = n_agents
        self.received_dim = MSG_DIM * (n_agents - 1)
        self.obs_encoder = Linear(obs_dim, OBS_ENC_DIM, rng, "obs_encoder")
        self.msg_encoder = Linear(self.received_dim, MSG_ENC_DIM, rng, "msg_encoder")
        self.gru = GRUCell(OBS_ENC_DIM + MSG_ENC_DIM, HIDDEN_DIM, rng)
        self.policy_head = Head(HIDDEN_DIM, n_actions, rng, "policy_head")
        self.value_head = Head(HIDDEN_DIM, 1, rng, "value_head")
        self.message_head = Head(OBS_ENC_DIM, MSG_DIM, rng, "message_head") if communicate else None
        self.decoder: Optional[list[Linear]] = None
        if decoder:
            self.decoder = [
                Linear(MSG_DIM, HIDDEN_DIM, rng, "decoder.l1"),
                Linear(HIDDEN_DIM, OBS_ENC_DIM, rng, "decoder.l2"),
            ]

    @property
    def communicates(self) -> bool:
        return self.message_head is not None

    def _heads(self) -> list[tuple[str, Head]]:
        heads = [("policy_head", self.policy_head), ("value_head", self.value_head)]
        if self.message_head is not None:
            heads.append(("message_head", self.message_head))
        return heads

    def parameters(self) -> list[Tensor]:
        ps = self.obs_encoder.params() + self.msg_encoder.params() + self.gru.params()
        for _, head in self._heads():
            ps += head.params()
        if self.decoder is not None:
            for layer in self.decoder:
                ps += layer.params()
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def spectral_states(self) -> dict[str, SpectralState]:
        return {f"{name}.l2": head.l2.spectral for name, head in self._heads()}

    def set_training(self, training: bool) -> None:
        """Outside training the spectral estimates are frozen."""
        for _, head in self._heads():
            head.l2.update_sigma = training

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    def initial_hidden(self, batch: int) -> Tensor:
        return ad.constant(np.zeros((batch, HIDDEN_DIM)))

    def encode(self, obs) -> Tensor:
        return ad.relu(self.obs_encoder(ad.as_tensor(obs)))

    def message_from_encoding(self, encoding: Tensor) -> Tensor:
        if self.message_head is None:
            raise ValueError("agent has no message head")
        return ad.sigmoid(self.message_head(encoding))

    def produce_message(self, obs) -> Tensor:
        return self.message_from_encoding(self.encode(obs))

    def reconstruct(self, message: Tensor) -> Tensor:
        if self.decoder is None:
            raise ValueError("reconstruct called on an agent without a decoder")
        return self.decoder[1](ad.relu(self.decoder[0](message)))

    def forward(self, h: Tensor, obs, received) -> StepOutput:
        obs = ad.as_tensor(obs)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise ValueError(f"observation batch must be (B, {self.obs_dim}), got {obs.shape}")
        received = ad.as_tensor(received)
        if received.shape != (obs.shape[0], self.received_dim):
            raise ValueError(f"received messages must be (B, {self.received_dim}), got {received.shape}")
        enc = self.encode(obs)
        msg = self.message_from_encoding(enc) if self.message_head is not None else None
        menc = ad.relu(self.msg_encoder(received))
        h_next = gru_step(self.gru, h, ad.concat([enc, menc]))
        logits = self.policy_head(h_next)
        if not np.all(np.isfinite(logits.data)):
            raise FloatingPointError("non-finite policy logits")
        logp = ad.log_softmax(logits)
        value = self.value_head(h_next)[:, 0]
        return StepOutput(enc, msg, h_next, logp, value)


def act(
    agent: AgentNet, h: Tensor, obs, received, rng: np.random.Generator
) -> ActOutput:
    """Run one recurrent step and sample an action from the policy."""
    out = agent.forward(h, obs, received)
    action = sample_categorical(np.exp(out.logp.data), rng)
    return ActOutput(
        action=action,
        logprob=ad.pick(out.logp, action),
        entropy=entropy_from_logp(out.logp),
        value=out.value,
        hidden=out.hidden,
        message=out.message,
        encoding=out.encoding,
    )


def produce_message(agent: AgentNet, obs) -> Tensor:
    return agent.produce_message(obs)


def reconstruct(agent: AgentNet, message: Tensor) -> Tensor:
    return agent.reconstruct(message)
