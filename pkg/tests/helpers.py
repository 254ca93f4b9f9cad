"""Shared oracles for the test suite."""

import numpy as np
import torch

from lsfsac.env import PAYOFF, Episode
from lsfsac.learner import pad_episodes
from lsfsac.nets import LocalCritic, QMixer, build_inputs, bundle_messages

# one "criterion N: PASS|FAIL ..." line per acceptance check, printed at session end
ACCEPTANCE: list[str] = []


def fd_rel_error(fn, params, h=1e-6):
    """Relative error between autograd and central finite differences.

    ``fn`` maps no arguments to a scalar tensor built from ``params``. The
    error is ``|g_auto - g_fd| / |g_fd|`` over the concatenated gradient.
    """
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    auto = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params
    ])
    fd = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = fn().item()
                flat[k] = orig - h
                down = fn().item()
                flat[k] = orig
                fd.append((up - down) / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    auto = auto.double()
    return float((auto - fd).norm() / fd.norm().clamp_min(1e-12))


def matrix_batch(pairs, rewards=None, dtype=torch.float64):
    """Padded batch of one-step matrix-game episodes with the given joint actions."""
    eps = []
    for k, (a, b) in enumerate(pairs):
        r = 0.0 if rewards is None else rewards[k]
        eps.append(Episode(
            state=np.ones((2, 1)), obs=np.ones((2, 2, 1)), avail=np.ones((2, 2, 3), dtype=bool),
            actions=np.array([[a, b]]), reward=np.array([r]), terminated=np.array([True]),
        ))
    return pad_episodes(eps, 3, dtype)


def random_episode(rng, n_agents=2, n_actions=3, obs_dim=4, state_dim=5, T=3, terminal=True):
    return Episode(
        state=rng.normal(size=(T + 1, state_dim)),
        obs=rng.normal(size=(T + 1, n_agents, obs_dim)),
        avail=np.ones((T + 1, n_agents, n_actions), dtype=bool),
        actions=rng.integers(n_actions, size=(T, n_agents)),
        reward=rng.normal(size=T),
        terminated=np.array([False] * (T - 1) + [terminal]),
    )


def fit_payoff(seed, messages, steps=1500, hidden=16, msg_dim=4, lr=1e-2):
    """Regress the 9 matrix-game payoffs through local critics and a monotone mixer.

    With ``messages`` each agent's message is a learned embedding of its own
    (observation, action) pair, and every local critic receives all messages.
    Returns the max absolute error over the 9 joint actions after fitting.
    """
    f64 = torch.float64
    torch.manual_seed(seed)
    joint = torch.tensor([(a, b) for a in range(3) for b in range(3)])
    target = torch.tensor([PAYOFF[a, b] for a, b in joint.tolist()], dtype=f64)
    inputs = build_inputs(torch.ones(9, 2, 2, 1, dtype=f64), joint[:, None], 3)[:, 0]
    critic = LocalCritic(inputs.shape[-1], 3, 2 * msg_dim if messages else 0, hidden).double()
    mixer = QMixer(2, 1, hidden).double()
    embed = torch.nn.Linear(inputs.shape[-1] + 3, msg_dim).double()
    params = [*critic.parameters(), *mixer.parameters()] + ([*embed.parameters()] if messages else [])
    opt = torch.optim.Adam(params, lr=lr)
    own = torch.cat([inputs, torch.eye(3, dtype=f64)[joint]], -1)  # obs features + own action
    state = torch.ones(9, 1, dtype=f64)
    for step in range(steps + 1):
        inbound = None
        if messages:
            mu = embed(own)
            inbound = bundle_messages(mu, torch.zeros_like(mu)).inbound
        q = critic(inputs[:, None], None if inbound is None else inbound[:, None])[:, 0]
        q_tot = mixer(q.gather(-1, joint[..., None])[..., 0], state)
        err = q_tot - target
        if step == steps:
            break
        opt.zero_grad()
        err.pow(2).mean().backward()
        opt.step()
    return err.abs().max().item()
