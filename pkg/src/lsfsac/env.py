"""Cooperative Dec-POMDP environments.

Two desk-scale tasks share one interface:

* ``MatrixGame``: the one-step, two-agent, three-action non-monotonic payoff
  game used to probe value factorization.
* ``SecretCorridor``: a short two-agent corridor where only agent 0 sees which
  exit pays, and only agent 1 can commit to an exit.

Rewards are returned undiscounted; the discount lives in ``EnvSpec.gamma`` and
is applied by the learner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidActionError(ValueError):
    """Raised when an agent picks an action its mask marks unavailable."""


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    episode_limit: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("n_agents must be >= 2")
        if self.n_actions < 2:
            raise ValueError("n_actions must be >= 2")
        if self.episode_limit < 1:
            raise ValueError("episode_limit must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class StepResult:
    reward: float
    terminated: bool
    next_state: np.ndarray
    next_obs: np.ndarray
    avail_actions: np.ndarray
    info: dict


class MultiAgentEnv:
    """Minimal interface every environment implements."""

    name = "base"
    spec: EnvSpec

    def reset(self, seed: int):
        """Return ``(state, obs, avail)`` for a fresh episode."""
        raise NotImplementedError

    def step(self, joint_action) -> StepResult:
        raise NotImplementedError

    def _check_actions(self, joint_action, avail):
        joint_action = np.asarray(joint_action, dtype=np.int64)
        if joint_action.shape != (self.spec.n_agents,):
            raise InvalidActionError(
                f"expected {self.spec.n_agents} actions, got shape {joint_action.shape}"
            )
        for i, a in enumerate(joint_action):
            if not 0 <= a < self.spec.n_actions or not avail[i, a]:
                raise InvalidActionError(f"agent {i} chose unavailable action {int(a)}")
        return joint_action


@dataclass
class Episode:
    """One finished trajectory.

    ``state``, ``obs`` and ``avail`` carry ``T + 1`` entries (the last one is the
    state reached by the final step); ``actions``, ``reward`` and ``terminated``
    carry ``T``.
    """

    state: np.ndarray
    obs: np.ndarray
    avail: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.actions)

    @property
    def ret(self) -> float:
        return float(self.reward.sum())

    def validate(self, episode_limit: int):
        T = len(self)
        if not 1 <= T <= episode_limit:
            raise ValueError(f"episode length {T} outside 1..{episode_limit}")
        if self.terminated.sum() != 1 or not self.terminated[-1]:
            raise ValueError("episode must end with exactly one terminal step")
        if len(self.state) != T + 1 or len(self.obs) != T + 1 or len(self.avail) != T + 1:
            raise ValueError("state/obs/avail need T + 1 entries")


# ---------------------------------------------------------------------------
# Matrix game
# ---------------------------------------------------------------------------

PAYOFF = np.array(
    [
        [8.0, -12.0, -12.0],
        [-12.0, 0.0, 0.0],
        [-12.0, 0.0, 0.0],
    ]
)
ACTION_NAMES = ("A", "B", "C")


def payoff(u1: int, u2: int) -> float:
    if not (0 <= u1 < 3 and 0 <= u2 < 3):
        raise InvalidActionError(f"matrix-game actions must be in 0..2, got ({u1}, {u2})")
    return float(PAYOFF[u1, u2])


class MatrixGame(MultiAgentEnv):
    """Single-state game: state and observations are the constant vector [1]."""

    name = "matrix"

    def __init__(self, gamma: float = 0.99):
        self.spec = EnvSpec(n_agents=2, n_actions=3, obs_dim=1, state_dim=1,
                            episode_limit=1, gamma=gamma)
        self._done = True

    def _avail(self):
        return np.ones((2, 3), dtype=bool)

    def reset(self, seed: int = 0):
        self._done = False
        return np.ones(1), np.ones((2, 1)), self._avail()

    def step(self, joint_action) -> StepResult:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        u = self._check_actions(joint_action, self._avail())
        self._done = True
        r = payoff(int(u[0]), int(u[1]))
        return StepResult(reward=r, terminated=True, next_state=np.ones(1),
                          next_obs=np.ones((2, 1)), avail_actions=self._avail(),
                          info={"success": r == 8.0})


# ---------------------------------------------------------------------------
# Secret corridor
# ---------------------------------------------------------------------------

LEFT, RIGHT, STAY, COMMIT = range(4)


class SecretCorridor(MultiAgentEnv):
    """Two agents on a 5x1 corridor with a hidden rewarded exit.

    Both agents start in the middle cell. Agent 0 (the scout) privately sees a
    bit saying whether the left end (cell 0) or the right end (cell 4) is the
    rewarded exit. Agent 1 (the runner) cannot see the bit, but sees where the
    scout stands. Only the runner may ``COMMIT``, and only while standing on an
    end cell; committing ends the episode with +10 for the rewarded exit and
    -10 for the other one. Every step costs 0.1. Episodes are cut at 10 steps.

    The runner's exit values depend on the scout's observation, so any value
    estimate built from the runner's own history is capped at chance until the
    scout's behaviour carries the bit.
    """

    name = "corridor"
    length = 5
    start = 2
    step_cost = 0.1
    exit_reward = 10.0

    def __init__(self, gamma: float = 0.99, episode_limit: int = 10):
        # obs: own cell, other cell, private exit bit (zeros for the runner), time
        dim = 2 * self.length + 2 + 1
        self.spec = EnvSpec(n_agents=2, n_actions=4, obs_dim=dim, state_dim=dim,
                            episode_limit=episode_limit, gamma=gamma)
        self.pos = np.array([self.start, self.start])
        self.exit_bit = 0
        self.t = 0
        self._done = True

    @property
    def exit_cell(self) -> int:
        return 0 if self.exit_bit == 0 else self.length - 1

    def get_state(self) -> np.ndarray:
        s = np.zeros(self.spec.state_dim)
        s[self.pos[0]] = 1.0
        s[self.length + self.pos[1]] = 1.0
        s[2 * self.length + self.exit_bit] = 1.0
        s[-1] = self.t / self.spec.episode_limit
        return s

    def observe(self, state: np.ndarray, agent: int) -> np.ndarray:
        """Observation of ``agent``, a pure function of the state vector."""
        n = self.length
        own = state[agent * n:(agent + 1) * n]
        other = state[(1 - agent) * n:(2 - agent) * n]
        secret = state[2 * n:2 * n + 2] if agent == 0 else np.zeros(2)
        return np.concatenate([own, other, secret, state[-1:]])

    def get_obs(self) -> np.ndarray:
        s = self.get_state()
        return np.stack([self.observe(s, i) for i in range(2)])

    def get_avail(self) -> np.ndarray:
        avail = np.zeros((2, 4), dtype=bool)
        for i, p in enumerate(self.pos):
            avail[i, LEFT] = p > 0
            avail[i, RIGHT] = p < self.length - 1
            avail[i, STAY] = True
        runner = self.pos[1]
        avail[1, COMMIT] = runner == 0 or runner == self.length - 1
        return avail

    def reset(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.exit_bit = int(rng.integers(2))
        self.pos = np.array([self.start, self.start])
        self.t = 0
        self._done = False
        return self.get_state(), self.get_obs(), self.get_avail()

    def step(self, joint_action) -> StepResult:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        u = self._check_actions(joint_action, self.get_avail())
        reward = -self.step_cost
        terminated = False
        success = False
        if u[1] == COMMIT:
            success = bool(self.pos[1] == self.exit_cell)
            reward += self.exit_reward if success else -self.exit_reward
            terminated = True
        for i in range(2):
            if u[i] == LEFT:
                self.pos[i] -= 1
            elif u[i] == RIGHT:
                self.pos[i] += 1
        self.t += 1
        if self.t >= self.spec.episode_limit:
            terminated = True
        self._done = terminated
        return StepResult(reward=reward, terminated=terminated,
                          next_state=self.get_state(), next_obs=self.get_obs(),
                          avail_actions=self.get_avail(),
                          info={"success": success, "committed": bool(u[1] == COMMIT)})


def secret_corridor_spec() -> tuple[EnvSpec, str]:
    env = SecretCorridor()
    return env.spec, SecretCorridor.__doc__


ENVS = {"matrix": MatrixGame, "corridor": SecretCorridor}


def make_env(name: str, **kwargs) -> MultiAgentEnv:
    try:
        return ENVS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
