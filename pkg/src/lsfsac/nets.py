"""Function approximators for LSF-SAC and the value-based baselines.

Every network that reads a history runs a GRU over per-step inputs
``[o_t, onehot(u_{t-1}), onehot(agent_id)]`` with parameters shared across
agents. Tensors are laid out ``[batch, time, agent, feature]``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class NetConfig:
    hidden: int = 64
    msg_dim: int = 4
    mix_hidden: int = 32
    messages: bool = True
    learned_prior: bool = False
    learned_msg_var: bool = False
    double_q: bool = False
    mixer: str = "qmix"


def build_inputs(obs: torch.Tensor, actions: torch.Tensor, n_actions: int) -> torch.Tensor:
    """Per-step history inputs.

    ``obs`` is ``[B, T+1, n, obs_dim]`` and ``actions`` is ``[B, T, n]``; the
    result is ``[B, T+1, n, obs_dim + n_actions + n]``.
    """
    B, T1, n, _ = obs.shape
    last = torch.zeros(B, T1, n, n_actions, dtype=obs.dtype)
    if actions.shape[1] > 0:
        last[:, 1:] = F.one_hot(actions[:, : T1 - 1].long(), n_actions).to(obs.dtype)
    ids = torch.eye(n, dtype=obs.dtype).expand(B, T1, n, n)
    return torch.cat([obs, last, ids], dim=-1)


class HistoryEncoder(nn.Module):
    """Linear + ReLU embedding followed by a single-layer GRU."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.fc = nn.Linear(in_dim, hidden)
        self.rnn = nn.GRU(hidden, hidden, batch_first=True)
        for name, p in self.rnn.named_parameters():
            if "weight" in name:
                nn.init.orthogonal_(p)
            else:
                nn.init.zeros_(p)

    def forward(self, x: torch.Tensor, h0: torch.Tensor | None = None):
        """``x`` is ``[B, T, n, in]``; returns ``([B, T, n, hidden], h_T)``."""
        B, T, n, _ = x.shape
        z = F.relu(self.fc(x)).permute(0, 2, 1, 3).reshape(B * n, T, self.hidden)
        if h0 is not None:
            h0 = h0.reshape(1, B * n, self.hidden)
        out, hT = self.rnn(z, h0)
        out = out.reshape(B, n, T, self.hidden).permute(0, 2, 1, 3)
        return out, hT.reshape(B, n, self.hidden)


def masked_softmax(logits: torch.Tensor, avail: torch.Tensor):
    avail = avail.bool()
    if not bool(avail.any(-1).all()):
        raise ValueError("every agent needs at least one available action")
    masked = logits.masked_fill(~avail, -math.inf)
    log_probs = torch.log_softmax(masked, dim=-1)
    probs = log_probs.exp()
    return probs, log_probs


@dataclass
class ActorOutput:
    logits: torch.Tensor
    probs: torch.Tensor
    log_probs: torch.Tensor
    hidden: torch.Tensor | None = None

    def entropy(self, avail: torch.Tensor) -> torch.Tensor:
        return -(self.probs * finite_log_probs(self.log_probs, avail)).sum(-1)


def finite_log_probs(log_probs: torch.Tensor, avail: torch.Tensor) -> torch.Tensor:
    # masked entries are -inf; zero them so p * log p stays differentiable
    return log_probs.masked_fill(~avail.bool(), 0.0)


class Actor(nn.Module):
    def __init__(self, in_dim: int, n_actions: int, hidden: int = 64):
        super().__init__()
        self.body = HistoryEncoder(in_dim, hidden)
        self.head = nn.Linear(hidden, n_actions)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, inputs, avail, h0=None) -> ActorOutput:
        h, hT = self.body(inputs, h0)
        logits = self.head(h)
        probs, log_probs = masked_softmax(logits, avail)
        return ActorOutput(logits, probs, log_probs, hT)


def actor_forward(actor: Actor, inputs, avail, h0=None) -> ActorOutput:
    """One decentralized step: ``inputs`` ``[n, in]``, ``avail`` ``[n, A]``.

    Each agent's row depends only on its own inputs and hidden state.
    """
    out = actor(inputs[None, None], avail[None, None], None if h0 is None else h0[None])
    return ActorOutput(out.logits[0, 0], out.probs[0, 0], out.log_probs[0, 0], out.hidden[0])


@dataclass
class MessageBundle:
    mu: torch.Tensor
    noise: torch.Tensor
    m_out: torch.Tensor
    inbound: torch.Tensor
    log_std: torch.Tensor | None = None


def bundle_messages(mu: torch.Tensor, noise: torch.Tensor, log_std=None) -> MessageBundle:
    """Reparameterized sample ``m_out = mu + std * noise`` plus inbound views.

    ``inbound[..., i, :]`` is ``<m_1^out, ..., m_n^out>`` for every agent i,
    so agent 0's message fills the first ``msg_dim`` slots.
    """
    m_out = mu + noise if log_std is None else mu + log_std.exp() * noise
    n = mu.shape[-2]
    flat = m_out.reshape(*m_out.shape[:-2], n * m_out.shape[-1])
    inbound = flat.unsqueeze(-2).expand(*flat.shape[:-1], n, flat.shape[-1])
    return MessageBundle(mu, noise, m_out, inbound, log_std)


class MessageEncoder(nn.Module):
    def __init__(self, in_dim: int, msg_dim: int = 4, hidden: int = 64, learned_var: bool = False):
        super().__init__()
        self.msg_dim = msg_dim
        self.body = HistoryEncoder(in_dim, hidden)
        self.head = nn.Linear(hidden, msg_dim)
        self.log_std = nn.Parameter(torch.zeros(msg_dim)) if learned_var else None

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        h, _ = self.body(inputs)
        return self.head(h)


def encode_messages(encoder: MessageEncoder, inputs, generator: torch.Generator | None = None,
                    noise: torch.Tensor | None = None) -> MessageBundle:
    mu = encoder(inputs)
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return bundle_messages(mu, noise, encoder.log_std)


class LocalCritic(nn.Module):
    """Per-agent q_i(tau_i, ., m_i); ``msg_in = 0`` disables messages."""

    def __init__(self, in_dim: int, n_actions: int, msg_in: int = 0, hidden: int = 64):
        super().__init__()
        self.msg_in = msg_in
        self.body = HistoryEncoder(in_dim, hidden)
        self.fc = nn.Linear(hidden + msg_in, hidden)
        self.out = nn.Linear(hidden, n_actions)

    def forward(self, inputs, inbound=None):
        h, _ = self.body(inputs)
        return self.head(h, inbound)

    def head(self, h, inbound=None):
        if self.msg_in:
            if inbound is None or inbound.shape[-1] != self.msg_in:
                got = None if inbound is None else inbound.shape[-1]
                raise ValueError(f"inbound message length {got} != {self.msg_in}")
            h = torch.cat([h, inbound], dim=-1)
        return self.out(F.relu(self.fc(h)))


@dataclass
class MixerWeights:
    w1: torch.Tensor  # [..., n, h]
    b1: torch.Tensor  # [..., h]
    w2: torch.Tensor  # [..., h]
    b2: torch.Tensor  # [...]


def mix_with_weights(q: torch.Tensor, w: MixerWeights, activation=F.elu) -> torch.Tensor:
    """Q_tot = w2 . act(w1^T q + b1) + b2 for ``q`` of shape ``[..., n]``."""
    hidden = activation(torch.einsum("...n,...nh->...h", q, w.w1) + w.b1)
    return (hidden * w.w2).sum(-1) + w.b2


class QMixer(nn.Module):
    """Monotonic mixer with state-conditioned, non-negative weights."""

    def __init__(self, n_agents: int, state_dim: int, mix_hidden: int = 32):
        super().__init__()
        self.n_agents = n_agents
        self.mix_hidden = mix_hidden
        self.hyper_w1 = nn.Linear(state_dim, n_agents * mix_hidden)
        self.hyper_b1 = nn.Linear(state_dim, mix_hidden)
        self.hyper_w2 = nn.Linear(state_dim, mix_hidden)
        self.hyper_b2 = nn.Sequential(
            nn.Linear(state_dim, mix_hidden), nn.ReLU(), nn.Linear(mix_hidden, 1)
        )

    def weights(self, state: torch.Tensor) -> MixerWeights:
        w1 = self.hyper_w1(state).abs().reshape(*state.shape[:-1], self.n_agents, self.mix_hidden)
        w2 = self.hyper_w2(state).abs()
        return MixerWeights(w1, self.hyper_b1(state), w2, self.hyper_b2(state).squeeze(-1))

    def forward(self, q: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        return mix_with_weights(q, self.weights(state))


class VDNMixer(nn.Module):
    def forward(self, q: torch.Tensor, state: torch.Tensor | None = None) -> torch.Tensor:
        return q.sum(-1)


class Decoder(nn.Module):
    """Variational q_psi(a_j | tau_j, M) as a masked categorical."""

    def __init__(self, in_dim: int, n_actions: int, msg_total: int, hidden: int = 64):
        super().__init__()
        self.body = HistoryEncoder(in_dim, hidden)
        self.fc = nn.Linear(hidden + msg_total, hidden)
        self.out = nn.Linear(hidden, n_actions)

    def forward(self, inputs, messages, avail):
        """``messages`` is the full ``[..., n, n * msg_dim]`` inbound view."""
        h, _ = self.body(inputs)
        logits = self.out(F.relu(self.fc(torch.cat([h, messages], dim=-1))))
        return masked_softmax(logits, avail)


class StandardNormalPrior(nn.Module):
    def logprob(self, m: torch.Tensor) -> torch.Tensor:
        return -0.5 * (LOG_2PI + m.pow(2)).sum(-1)

    def moments(self, like: torch.Tensor):
        return torch.zeros_like(like), torch.zeros_like(like)


class LearnedDiagPrior(nn.Module):
    def __init__(self, msg_dim: int):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(msg_dim))
        self.logvar = nn.Parameter(torch.zeros(msg_dim))

    def logprob(self, m: torch.Tensor) -> torch.Tensor:
        return -0.5 * (LOG_2PI + self.logvar + (m - self.mu).pow(2) / self.logvar.exp()).sum(-1)

    def moments(self, like: torch.Tensor):
        return self.mu.expand_as(like), self.logvar.expand_as(like)


class CriticSet(nn.Module):
    """Local critics plus mixer: one value-factorization head."""

    def __init__(self, in_dim, n_actions, n_agents, state_dim, cfg: NetConfig):
        super().__init__()
        msg_in = n_agents * cfg.msg_dim if cfg.messages else 0
        self.local = LocalCritic(in_dim, n_actions, msg_in, cfg.hidden)
        self.mixer = QMixer(n_agents, state_dim, cfg.mix_hidden) if cfg.mixer == "qmix" else VDNMixer()


class LSFSACNets(nn.Module):
    """All learnable pieces plus target copies of critics and encoder."""

    def __init__(self, n_agents, n_actions, obs_dim, state_dim, cfg: NetConfig | None = None):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        self.n_agents, self.n_actions = n_agents, n_actions
        in_dim = obs_dim + n_actions + n_agents
        self.in_dim = in_dim
        self.actor = Actor(in_dim, n_actions, cfg.hidden)
        self.critics = nn.ModuleList(
            CriticSet(in_dim, n_actions, n_agents, state_dim, cfg)
            for _ in range(2 if cfg.double_q else 1)
        )
        self.encoder = MessageEncoder(in_dim, cfg.msg_dim, cfg.hidden, cfg.learned_msg_var)
        self.decoder = Decoder(in_dim, n_actions, n_agents * cfg.msg_dim, cfg.hidden)
        self.prior = LearnedDiagPrior(cfg.msg_dim) if cfg.learned_prior else StandardNormalPrior()
        self.log_alpha = nn.Parameter(torch.zeros(()))
        self.target_critics = copy.deepcopy(self.critics)
        self.target_encoder = copy.deepcopy(self.encoder)
        for p in self.target_parameters():
            p.requires_grad_(False)

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def target_parameters(self):
        yield from self.target_critics.parameters()
        yield from self.target_encoder.parameters()

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "actor": list(self.actor.parameters()),
            "critic": list(self.critics.parameters()),
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()) + list(self.prior.parameters()),
            "alpha": [self.log_alpha],
        }

    def sync_target(self):
        sync_target(self.critics, self.target_critics)
        sync_target(self.encoder, self.target_encoder)


def sync_target(source: nn.Module, target: nn.Module):
    with torch.no_grad():
        for s, t in zip(source.parameters(), target.parameters()):
            t.copy_(s)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


# ---------------------------------------------------------------------------
# Checkpoints: little-endian float64 blob + tab-separated text manifest.
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"
BLOB = "params.bin"


def save_checkpoint(module: nn.Module, path) -> Path:
    """Write ``path/params.bin`` and ``path/manifest.txt``.

    Manifest lines are ``name<TAB>offset<TAB>shape`` where ``offset`` counts
    float64 elements and ``shape`` is comma-separated (empty for scalars).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines, chunks, offset = ["# lsfsac checkpoint v1 dtype=<f8"], [], 0
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f8").ravel()
        lines.append(f"{name}\t{offset}\t{','.join(str(d) for d in t.shape)}")
        chunks.append(arr)
        offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    (path / BLOB).write_bytes(blob.astype("<f8").tobytes())
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(module: nn.Module, path) -> nn.Module:
    path = Path(path)
    blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f8")
    state = module.state_dict()
    for line in (path / MANIFEST).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        name, offset, shape = line.split("\t")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        size = int(np.prod(dims)) if dims else 1
        arr = blob[int(offset):int(offset) + size].reshape(dims)
        state[name] = torch.as_tensor(arr.copy(), dtype=state[name].dtype)
    module.load_state_dict(state)
    return module
