"""Differentiable losses: TD critic, message (information bottleneck), soft
policy, temperature, and their weighted total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .nets import (
    CriticSet,
    MessageBundle,
    QMixer,
    finite_log_probs,
    mix_with_weights,
)


@dataclass
class IBConfig:
    beta: float = 0.05
    lambda1: float = 0.1
    lambda2: float = 1.0
    alpha_mode: str = "auto"
    alpha_fixed: float = 1.0
    alpha_init: float = 1.0
    target_entropy: float | None = None  # None -> 0.98 * ln(#available actions)
    soft_target: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.alpha_mode not in ("auto", "fixed"):
            raise ValueError("alpha_mode must be 'auto' or 'fixed'")
        if self.alpha_mode == "fixed" and self.alpha_fixed <= 0:
            raise ValueError("alpha_fixed must be > 0")

    def entropy_target(self, n_actions: int) -> float:
        if self.target_entropy is not None:
            return self.target_entropy
        return 0.98 * math.log(n_actions)

    def step_entropy_target(self, avail: torch.Tensor, mask: torch.Tensor) -> float:
        """Mean target over valid steps and agents of a batch.

        The default scales ln of the number of *available* actions, so masked
        steps (whose maximum entropy is lower) keep a reachable target.
        """
        if self.target_entropy is not None:
            return self.target_entropy
        n_avail = avail.sum(-1).to(mask.dtype)
        return float(masked_mean(0.98 * torch.log(n_avail), mask))


@dataclass
class LossReport:
    td_loss: float
    msg_ce: float
    msg_kl: float
    msg_loss: float
    policy_loss: float
    alpha_loss: float
    total: float
    alpha: float
    entropy: list[float] = field(default_factory=list)
    grad_norms: dict[str, float] = field(default_factory=dict)
    target_entropy: float = 0.0

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("entropy", "grad_norms")}
        d["entropy"] = sum(self.entropy) / max(len(self.entropy), 1)
        d.update({f"grad_norm/{k}": v for k, v in self.grad_norms.items()})
        return d


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``x`` ``[B, T, ...]`` over valid steps (and any trailing dims).

    ``mask`` may also carry non-negative weights, giving a weighted mean.
    """
    while mask.dim() < x.dim():
        mask = mask.unsqueeze(-1)
    mask = mask.expand_as(x)
    denom = mask.sum()
    if denom <= 0:
        raise ValueError("batch has no valid steps")
    # padded steps may hold inf (e.g. log-prob of a masked padding action)
    return torch.where(mask > 0, x * mask, torch.zeros_like(x)).sum() / denom


def greedy_joint_action(q: torch.Tensor, avail: torch.Tensor | None = None) -> torch.Tensor:
    """Per-agent argmax over the last axis; ties go to the lowest index."""
    if avail is not None:
        q = q.masked_fill(~avail.bool(), -math.inf)
    return q.argmax(-1)


def local_q(critic: CriticSet, inputs, bundle: MessageBundle | None):
    inbound = bundle.inbound if (bundle is not None and critic.local.msg_in) else None
    return critic.local(inputs, inbound)


def mixed(critic: CriticSet, q_chosen, state):
    return critic.mixer(q_chosen, state)


def td_loss(batch, critics: Sequence[CriticSet], target_critics: Sequence[CriticSet],
            gamma: float, msgs: MessageBundle | None = None,
            target_msgs: MessageBundle | None = None, soft_target: bool = False,
            next_policy=None, alpha: float = 0.0):
    """Squared TD residual averaged over valid steps.

    Online Q_tot uses the recorded joint action and online messages; the
    bootstrap uses per-agent greedy actions of the target local critics, the
    target messages and ``s_{t+1}``. With several critic sets (double-Q) the
    bootstrap is the minimum over target sets and the residuals are summed.
    ``soft_target`` replaces the greedy bootstrap by the exact expectation
    under ``next_policy`` (an ``ActorOutput`` over ``[B, T+1]``) with an
    ``alpha`` entropy bonus.
    """
    if batch.mask.sum() <= 0:
        raise ValueError("empty batch")
    inputs, state, avail = batch.inputs, batch.state, batch.avail
    with torch.no_grad():
        boots = []
        for tc in target_critics:
            q_next = local_q(tc, inputs, target_msgs)[:, 1:]
            if soft_target:
                probs = next_policy.probs[:, 1:]
                logp = finite_log_probs(next_policy.log_probs[:, 1:], avail[:, 1:])
                qn = q_next.masked_fill(~avail[:, 1:], 0.0)
                v = (probs * (qn - alpha * logp)).sum(-1)
            else:
                a_star = greedy_joint_action(q_next, avail[:, 1:])
                v = q_next.gather(-1, a_star.unsqueeze(-1)).squeeze(-1)
            boots.append(mixed(tc, v, state[:, 1:]))
        boot = torch.stack(boots).min(0).values
        target = batch.reward + gamma * (1.0 - batch.terminated) * boot

    loss = 0.0
    q_tots = []
    for c in critics:
        q = local_q(c, inputs, msgs)[:, :-1]
        chosen = q.gather(-1, batch.actions.unsqueeze(-1)).squeeze(-1)
        q_tot = mixed(c, chosen, state[:, :-1])
        q_tots.append(q_tot)
        loss = loss + masked_mean((target - q_tot).pow(2), batch.mask)
    return loss, q_tots


def gaussian_kl(mu: torch.Tensor, prior_mean=None, prior_var=None, post_var=None) -> torch.Tensor:
    """KL(N(mu, diag(post_var)) || N(prior_mean, diag(prior_var))) over the last axis.

    Defaults give the unit-covariance posterior against N(0, I), i.e. |mu|^2 / 2.
    """
    mu = torch.as_tensor(mu)
    if prior_mean is None:
        prior_mean = torch.zeros_like(mu)
    if prior_var is None:
        prior_var = torch.ones_like(mu)
    prior_mean = torch.as_tensor(prior_mean, dtype=mu.dtype)
    prior_var = torch.as_tensor(prior_var, dtype=mu.dtype)
    if bool((prior_var <= 0).any()):
        raise ValueError("prior variance must be positive")
    if post_var is None:
        post_var = torch.ones_like(mu)
    kl = 0.5 * (torch.log(prior_var) - torch.log(post_var)
                + (post_var + (mu - prior_mean).pow(2)) / prior_var - 1.0)
    return kl.sum(-1)


def action_nll(log_probs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """-log q(a) at the recorded actions."""
    return -log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)


@dataclass
class MessageLoss:
    ce: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor


def message_loss(batch, decoder, prior, msgs: MessageBundle, beta: float) -> MessageLoss:
    """Cross-entropy of each agent's logged action under the decoder plus
    beta times the KL of each message posterior to the prior."""
    inputs = batch.inputs[:, :-1]
    avail = batch.avail[:, :-1]
    _, log_probs = decoder(inputs, msgs.inbound[:, :-1], avail)
    ce = masked_mean(action_nll(log_probs, batch.actions), batch.mask)
    mu = msgs.mu[:, :-1]
    post_var = None if msgs.log_std is None else (2 * msgs.log_std).exp().expand_as(mu)
    if hasattr(prior, "logvar"):
        pm, plv = prior.moments(mu)
        kl_each = gaussian_kl(mu, pm, plv.exp(), post_var)
    else:
        kl_each = gaussian_kl(mu, post_var=post_var)
    kl = masked_mean(kl_each, batch.mask)
    return MessageLoss(ce, kl, ce + beta * kl)


def frozen_mixer(critic: CriticSet, state) -> Callable[[torch.Tensor], torch.Tensor]:
    """Mixer as a function of agent values only; its parameters get no gradient."""
    if isinstance(critic.mixer, QMixer):
        with torch.no_grad():
            w = critic.mixer.weights(state)
        return lambda x: mix_with_weights(x, w)
    return lambda x: x.sum(-1)


def soft_values(probs, log_probs, q, avail, alpha) -> torch.Tensor:
    """E_{a~pi}[q(a) - alpha log pi(a)] computed exactly over the action set."""
    logp = finite_log_probs(log_probs, avail)
    q = q.masked_fill(~avail.bool(), 0.0)
    return (probs * (q - alpha * logp)).sum(-1)


def policy_loss(policy, q_values: Sequence[torch.Tensor], mixers: Sequence[Callable],
                avail, mask, alpha: float) -> torch.Tensor:
    """Negative mixed soft value of the current policies.

    ``q_values`` are detached local q-vectors ``[B, T, n, A]``, one per critic
    set; ``mixers`` map per-agent values ``[B, T, n]`` to Q_tot with frozen
    weights. With two critic sets the smaller mixed value is used.
    """
    vals = []
    for q, mix in zip(q_values, mixers):
        x = soft_values(policy.probs, policy.log_probs, q.detach(), avail, float(alpha))
        vals.append(mix(x))
    v = torch.stack(vals).min(0).values if len(vals) > 1 else vals[0]
    return -masked_mean(v, mask)


def temperature_loss(log_alpha: torch.Tensor, entropy: torch.Tensor, target_entropy: float,
                     mode: str = "auto") -> torch.Tensor:
    """alpha * (H - H_0) with the entropy detached; zero in fixed mode."""
    if mode == "fixed":
        return torch.zeros((), dtype=log_alpha.dtype)
    return log_alpha.exp() * (entropy.detach() - target_entropy)


def total_loss(td: float, msg: float, pol: float, lambda1: float, lambda2: float) -> float:
    return td + lambda1 * msg + lambda2 * pol
