"""Value-based VDN and QMIX learners on the shared env, buffer and mixer code."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch

from .learner import DTYPES, Controller, LearnerConfig, NonFiniteLossError, clip_and_norm
from .nets import CriticSet, NetConfig, sync_target
from .objective import LossReport, td_loss


@dataclass
class BaselineConfig:
    algo: str = "qmix"
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 5000

    def __post_init__(self):
        if self.algo not in ("vdn", "qmix"):
            raise ValueError(f"baseline algo must be vdn or qmix, got {self.algo!r}")
        for e in (self.eps_start, self.eps_end):
            if not 0.0 <= e <= 1.0:
                raise ValueError("epsilon values must lie in [0, 1]")

    def epsilon(self, env_steps: int) -> float:
        frac = min(max(env_steps, 0) / max(self.eps_anneal_steps, 1), 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def vdn_mix(q_chosen: torch.Tensor) -> torch.Tensor:
    return q_chosen.sum(-1)


def epsilon_greedy(q: np.ndarray, epsilon: float, avail: np.ndarray,
                   rng: np.random.Generator) -> int:
    """Uniform over available actions with probability ``epsilon``, else the
    masked argmax (lowest index on ties)."""
    avail = np.asarray(avail, dtype=bool)
    if not avail.any():
        raise ValueError("no available action")
    if rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(avail)))
    return int(np.where(avail, q, -np.inf).argmax())


class QController(Controller):
    """Acts on the local critics' q-values; no messages at execution."""

    def __init__(self, critic: CriticSet, n_agents, n_actions, epsilon=0.0, dtype=torch.float32):
        self.critic = critic
        self.epsilon = epsilon
        super().__init__(n_agents, n_actions, dtype)

    def scores(self, inputs, avail):
        h, hT = self.critic.local.body(inputs[None, None],
                                       None if self.hidden is None else self.hidden[None])
        self.hidden = hT[0]
        return self.critic.local.head(h)[0, 0].double().numpy()

    def choose(self, q, avail, rng, greedy):
        eps = 0.0 if greedy else self.epsilon
        return np.array([epsilon_greedy(q[i], eps, avail[i], rng) for i in range(self.n_agents)])


class BaselineLearner:
    def __init__(self, spec, base: BaselineConfig | None = None, net_cfg: NetConfig | None = None,
                 cfg: LearnerConfig | None = None, seed: int = 0):
        self.spec = spec
        self.base = base or BaselineConfig()
        self.cfg = cfg or LearnerConfig()
        self.dtype = DTYPES[self.cfg.dtype]
        net_cfg = copy.deepcopy(net_cfg or NetConfig())
        net_cfg.messages = False
        net_cfg.mixer = self.base.algo
        self.net_cfg = net_cfg
        torch.manual_seed(seed)
        in_dim = spec.obs_dim + spec.n_actions + spec.n_agents
        self.critic = CriticSet(in_dim, spec.n_actions, spec.n_agents, spec.state_dim,
                                net_cfg).to(self.dtype)
        self.target = copy.deepcopy(self.critic)
        sync_target(self.critic, self.target)
        self.opt = torch.optim.Adam(self.critic.parameters(), lr=self.cfg.lr)
        self.learner_steps = 0

    @property
    def module(self):
        return self.critic

    def behaviour_controller(self, env_steps: int) -> QController:
        return QController(self.critic, self.spec.n_agents, self.spec.n_actions,
                           self.base.epsilon(env_steps), self.dtype)

    def greedy_controller(self) -> QController:
        return QController(self.critic, self.spec.n_agents, self.spec.n_actions, 0.0, self.dtype)

    def train_step(self, batch) -> LossReport:
        self.opt.zero_grad()
        td, _ = td_loss(batch, [self.critic], [self.target], self.spec.gamma)
        td.backward()
        norm = clip_and_norm(self.critic.parameters(), self.cfg.grad_clip)
        self.opt.step()
        self.learner_steps += 1
        report = LossReport(td_loss=td.item(), msg_ce=0.0, msg_kl=0.0, msg_loss=0.0,
                            policy_loss=0.0, alpha_loss=0.0, total=td.item(), alpha=0.0,
                            grad_norms={"critic": norm})
        if not math.isfinite(report.td_loss):
            raise NonFiniteLossError("non-finite loss", report.as_dict())
        return report

    def maybe_sync_targets(self) -> bool:
        if self.learner_steps > 0 and self.learner_steps % self.cfg.target_interval == 0:
            sync_target(self.critic, self.target)
            return True
        return False
