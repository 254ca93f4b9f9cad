"""Episode collection, replay, and the LSF-SAC update loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .env import Episode, MultiAgentEnv
from .nets import (
    LSFSACNets,
    NetConfig,
    actor_forward,
    build_inputs,
    bundle_messages,
    encode_messages,
)
from .objective import (
    IBConfig,
    LossReport,
    frozen_mixer,
    local_q,
    masked_mean,
    message_loss,
    policy_loss,
    td_loss,
    temperature_loss,
    total_loss,
)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, report: dict):
        super().__init__(f"{message}: {report}")
        self.report = report


@dataclass
class LearnerConfig:
    buffer_size: int = 5000
    batch_size: int = 32
    warmup_episodes: int = 32
    lr: float = 5e-4
    alpha_lr: float = 1e-4
    grad_clip: float = 10.0
    target_interval: int = 200
    train_ratio: int = 1
    dtype: str = "float32"


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """FIFO ring of whole episodes."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: list[Episode | None] = [None] * capacity
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, episode: Episode):
        self.episodes[self.cursor] = episode
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def stored(self) -> list[Episode]:
        """Stored episodes, oldest first."""
        if self.size < self.capacity:
            return self.episodes[: self.size]
        return self.episodes[self.cursor:] + self.episodes[: self.cursor]


@dataclass
class EpisodeBatch:
    state: torch.Tensor  # [B, T+1, S]
    obs: torch.Tensor  # [B, T+1, n, O]
    avail: torch.Tensor  # [B, T+1, n, A] bool
    actions: torch.Tensor  # [B, T, n] long
    reward: torch.Tensor  # [B, T]
    terminated: torch.Tensor  # [B, T]
    mask: torch.Tensor  # [B, T]
    inputs: torch.Tensor  # [B, T+1, n, in]
    indices: np.ndarray | None = None


def pad_episodes(episodes: list[Episode], n_actions: int, dtype=torch.float32) -> EpisodeBatch:
    """Right-pad episodes to the longest one; padded ``avail`` rows are all-true."""
    B = len(episodes)
    if B == 0:
        raise ValueError("cannot batch zero episodes")
    T = max(len(e) for e in episodes)
    ep0 = episodes[0]
    n = ep0.obs.shape[1]
    state = np.zeros((B, T + 1, ep0.state.shape[-1]))
    obs = np.zeros((B, T + 1, n, ep0.obs.shape[-1]))
    avail = np.ones((B, T + 1, n, n_actions), dtype=bool)
    actions = np.zeros((B, T, n), dtype=np.int64)
    reward = np.zeros((B, T))
    term = np.zeros((B, T))
    mask = np.zeros((B, T))
    for b, e in enumerate(episodes):
        L = len(e)
        state[b, : L + 1] = e.state
        obs[b, : L + 1] = e.obs
        avail[b, : L + 1] = e.avail
        actions[b, :L] = e.actions
        reward[b, :L] = e.reward
        term[b, :L] = e.terminated
        mask[b, :L] = 1.0
    t = lambda x: torch.as_tensor(x, dtype=dtype)
    obs_t, act_t = t(obs), torch.as_tensor(actions)
    return EpisodeBatch(
        state=t(state), obs=obs_t, avail=torch.as_tensor(avail), actions=act_t,
        reward=t(reward), terminated=t(term), mask=t(mask),
        inputs=build_inputs(obs_t, act_t, n_actions),
    )


def sample_minibatch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator,
                     n_actions: int, dtype=torch.float32) -> EpisodeBatch:
    """Uniform sample without replacement, padded with validity masks."""
    if buffer.size < batch_size:
        raise ValueError(f"buffer holds {buffer.size} episodes, need {batch_size}")
    idx = rng.choice(buffer.size, size=batch_size, replace=False)
    batch = pad_episodes([buffer.episodes[i] for i in idx], n_actions, dtype)
    batch.indices = idx
    return batch


# ---------------------------------------------------------------------------
# Controllers: decentralized action selection during collection / evaluation
# ---------------------------------------------------------------------------


class Controller:
    """Keeps per-agent recurrent state and builds per-step inputs."""

    def __init__(self, n_agents: int, n_actions: int, dtype=torch.float32):
        self.n_agents, self.n_actions, self.dtype = n_agents, n_actions, dtype
        self.reset()

    def reset(self):
        self.hidden = None
        self.last_action = np.zeros(self.n_agents, dtype=np.int64)
        self.t = 0

    def step_inputs(self, obs: np.ndarray) -> torch.Tensor:
        n, A = self.n_agents, self.n_actions
        last = np.zeros((n, A))
        if self.t > 0:
            last[np.arange(n), self.last_action] = 1.0
        x = np.concatenate([obs, last, np.eye(n)], axis=-1)
        return torch.as_tensor(x, dtype=self.dtype)

    def scores(self, inputs, avail):
        raise NotImplementedError

    def act(self, obs, avail, rng: np.random.Generator | None, greedy: bool = False):
        with torch.no_grad():
            x = self.step_inputs(obs)
            probs_or_q = self.scores(x, torch.as_tensor(avail))
        actions = self.choose(probs_or_q, avail, rng, greedy)
        self.last_action = actions
        self.t += 1
        return actions

    def choose(self, scores, avail, rng, greedy):
        raise NotImplementedError


def _masked_argmax(values: np.ndarray, avail: np.ndarray) -> np.ndarray:
    return np.where(avail, values, -np.inf).argmax(-1)


class ActorController(Controller):
    """Samples from (or takes the argmax of) the decentralized actors."""

    def __init__(self, actor, n_agents, n_actions, dtype=torch.float32):
        self.actor = actor
        super().__init__(n_agents, n_actions, dtype)

    def scores(self, inputs, avail):
        out = actor_forward(self.actor, inputs, avail, self.hidden)
        self.hidden = out.hidden
        return out.probs.double().numpy()

    def choose(self, probs, avail, rng, greedy):
        if greedy:
            return _masked_argmax(probs, avail)
        actions = np.empty(self.n_agents, dtype=np.int64)
        for i in range(self.n_agents):
            p = np.where(avail[i], probs[i], 0.0)
            actions[i] = rng.choice(self.n_actions, p=p / p.sum())
        return actions


def collect_episode(env: MultiAgentEnv, controller: Controller, seed: int,
                    rng: np.random.Generator | None = None, greedy: bool = False) -> Episode:
    """Roll out one episode with decentralized action selection."""
    state, obs, avail = env.reset(seed)
    controller.reset()
    states, obss, avails = [state], [obs], [avail]
    actions, rewards, terms = [], [], []
    info: dict = {}
    for _ in range(env.spec.episode_limit):
        a = controller.act(obs, avail, rng, greedy)
        res = env.step(a)
        actions.append(a)
        rewards.append(res.reward)
        terms.append(res.terminated)
        state, obs, avail = res.next_state, res.next_obs, res.avail_actions
        states.append(state)
        obss.append(obs)
        avails.append(avail)
        info = res.info
        if res.terminated:
            break
    return Episode(
        state=np.asarray(states, dtype=float), obs=np.asarray(obss, dtype=float),
        avail=np.asarray(avails, dtype=bool), actions=np.asarray(actions, dtype=np.int64),
        reward=np.asarray(rewards, dtype=float), terminated=np.asarray(terms, dtype=bool),
        info=dict(info),
    )


# ---------------------------------------------------------------------------
# LSF-SAC learner
# ---------------------------------------------------------------------------


def clip_and_norm(params, max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


class LSFSACLearner:
    """Owns the parameters and applies the four ordered updates per step:
    critic, policy, encoder (with decoder and prior), temperature."""

    def __init__(self, spec, net_cfg: NetConfig | None = None, ib: IBConfig | None = None,
                 cfg: LearnerConfig | None = None, seed: int = 0):
        self.spec = spec
        self.net_cfg = net_cfg or NetConfig()
        self.ib = ib or IBConfig()
        self.cfg = cfg or LearnerConfig()
        self.dtype = DTYPES[self.cfg.dtype]
        torch.manual_seed(seed)
        self.nets = LSFSACNets(spec.n_agents, spec.n_actions, spec.obs_dim, spec.state_dim,
                               self.net_cfg).to(self.dtype)
        alpha0 = self.ib.alpha_fixed if self.ib.alpha_mode == "fixed" else self.ib.alpha_init
        with torch.no_grad():
            self.nets.log_alpha.fill_(math.log(alpha0))
        self.nets.sync_target()
        self.target_entropy = self.ib.entropy_target(spec.n_actions)
        groups = self.nets.parameter_groups()
        self.groups = groups
        lr = self.cfg.lr
        self.opt = {
            "critic": torch.optim.Adam(groups["critic"], lr=lr, foreach=True),
            "actor": torch.optim.Adam(groups["actor"], lr=lr, foreach=True),
            "encoder": torch.optim.Adam(groups["encoder"] + groups["decoder"], lr=lr, foreach=True),
            "alpha": torch.optim.Adam(groups["alpha"], lr=self.cfg.alpha_lr),
        }
        self.noise_gen = torch.Generator().manual_seed(int(seed) + 7919)
        self.learner_steps = 0
        self.last_order: list[str] = []

    @property
    def messages_on(self) -> bool:
        return self.net_cfg.messages

    def alpha_value(self) -> float:
        return self.nets.alpha.item()

    def controller(self) -> ActorController:
        return ActorController(self.nets.actor, self.spec.n_agents, self.spec.n_actions, self.dtype)

    def behaviour_controller(self, env_steps: int) -> ActorController:
        # exploration is the policy's own stochasticity
        return self.controller()

    def greedy_controller(self) -> ActorController:
        return self.controller()

    def _zero_grad(self):
        for p in self.nets.parameters():
            p.grad = None

    def train_step(self, batch: EpisodeBatch) -> LossReport:
        nets, ib = self.nets, self.ib
        order = []
        alpha = float(nets.alpha.detach())
        noise = target_noise = None
        msgs = target_msgs = None
        if self.messages_on:
            shape = (*batch.inputs.shape[:3], self.net_cfg.msg_dim)
            noise = torch.randn(shape, generator=self.noise_gen, dtype=self.dtype)
            target_noise = torch.randn(shape, generator=self.noise_gen, dtype=self.dtype)
            msgs = encode_messages(nets.encoder, batch.inputs, noise=noise)
            with torch.no_grad():
                target_msgs = encode_messages(nets.target_encoder, batch.inputs, noise=target_noise)
        next_policy = None
        if ib.soft_target:
            with torch.no_grad():
                next_policy = nets.actor(batch.inputs, batch.avail)

        # (1) critic
        self._zero_grad()
        td, _ = td_loss(batch, nets.critics, nets.target_critics, self.spec.gamma, msgs,
                        target_msgs, ib.soft_target, next_policy, alpha)
        td.backward()
        enc_td_grads = [None if p.grad is None else p.grad.clone() for p in self.groups["encoder"]]
        norms = {"critic": clip_and_norm(self.groups["critic"], self.cfg.grad_clip)}
        self.opt["critic"].step()
        order.append("critic")

        # (2) policy; critic values and mixer weights are constants here
        self._zero_grad()
        avail = batch.avail[:, :-1]
        pol_out = nets.actor(batch.inputs[:, :-1], avail)
        with torch.no_grad():
            det = None if msgs is None else bundle_messages(msgs.mu.detach(), noise, msgs.log_std)
            qs = [local_q(c, batch.inputs, det)[:, :-1] for c in nets.critics]
            mixers = [frozen_mixer(c, batch.state[:, :-1]) for c in nets.critics]
        pl = policy_loss(pol_out, qs, mixers, avail, batch.mask, alpha)
        (ib.lambda2 * pl).backward()
        norms["actor"] = clip_and_norm(self.groups["actor"], self.cfg.grad_clip)
        self.opt["actor"].step()
        order.append("policy")
        ent = pol_out.entropy(avail).detach()  # [B, T, n]
        ent_agents = [float(masked_mean(ent[..., i], batch.mask)) for i in range(self.spec.n_agents)]
        mean_ent = masked_mean(ent, batch.mask)

        # (3) encoder, decoder and prior: TD gradient on the encoder plus lambda1 * message loss
        if self.messages_on:
            self._zero_grad()
            msgs = encode_messages(nets.encoder, batch.inputs, noise=noise)
            ml = message_loss(batch, nets.decoder, nets.prior, msgs, ib.beta)
            (ib.lambda1 * ml.total).backward()
            for p, g in zip(self.groups["encoder"], enc_td_grads):
                if g is not None:
                    p.grad = g if p.grad is None else p.grad + g
            norms["encoder"] = clip_and_norm(self.groups["encoder"] + self.groups["decoder"],
                                             self.cfg.grad_clip)
            self.opt["encoder"].step()
            ce, kl, msg_total = ml.ce.item(), ml.kl.item(), ml.total.item()
        else:
            ce = kl = msg_total = 0.0
            norms["encoder"] = 0.0
        order.append("encoder")

        # (4) temperature
        self._zero_grad()
        target_ent = ib.step_entropy_target(avail, batch.mask)
        al = temperature_loss(nets.log_alpha, mean_ent, target_ent, ib.alpha_mode)
        if ib.alpha_mode == "auto":
            al.backward()
            norms["alpha"] = float(nets.log_alpha.grad.abs())
            self.opt["alpha"].step()
        else:
            norms["alpha"] = 0.0
        order.append("temperature")

        self.learner_steps += 1
        self.last_order = order
        report = LossReport(
            td_loss=td.item(), msg_ce=ce, msg_kl=kl, msg_loss=msg_total,
            policy_loss=pl.item(), alpha_loss=al.item(),
            total=total_loss(td.item(), msg_total, pl.item(), ib.lambda1, ib.lambda2),
            alpha=self.alpha_value(), entropy=ent_agents, grad_norms=norms,
            target_entropy=target_ent,
        )
        vals = [report.td_loss, report.msg_loss, report.policy_loss, report.alpha_loss]
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteLossError("non-finite loss", report.as_dict())
        return report

    def maybe_sync_targets(self) -> bool:
        if self.learner_steps > 0 and self.learner_steps % self.cfg.target_interval == 0:
            self.nets.sync_target()
            return True
        return False

    @property
    def module(self):
        return self.nets


# ---------------------------------------------------------------------------
# Training loop shared by LSF-SAC and the baselines
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    learner: object
    buffer: ReplayBuffer
    env_steps: int = 0
    episodes: int = 0
    env_rng: np.random.Generator = None
    act_rng: np.random.Generator = None
    sample_rng: np.random.Generator = None
    eval_seed: int = 0
    metrics: list = field(default_factory=list)


def make_streams(seed: int):
    """Independent generators for env seeds, action sampling, minibatch sampling, evaluation."""
    ss = np.random.SeedSequence(seed)
    env_ss, act_ss, sample_ss, eval_ss = ss.spawn(4)
    return (np.random.default_rng(env_ss), np.random.default_rng(act_ss),
            np.random.default_rng(sample_ss), int(eval_ss.generate_state(1)[0]))


@dataclass
class EvalRecord:
    env_step: int
    mean_return: float
    median_return: float
    success_rate: float
    n_episodes: int
    wall_clock: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate(controller: Controller, env: MultiAgentEnv, n_episodes: int, seed: int,
             env_step: int = 0, greedy: bool = True) -> EvalRecord:
    """Greedy decentralized rollouts on a fresh random stream."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    returns, successes = [], []
    for _ in range(n_episodes):
        ep = collect_episode(env, controller, int(rng.integers(2**31)), rng, greedy=greedy)
        returns.append(ep.ret)
        successes.append(bool(ep.info.get("success", False)))
    return EvalRecord(env_step=env_step, mean_return=float(np.mean(returns)),
                      median_return=float(np.median(returns)),
                      success_rate=float(np.mean(successes)), n_episodes=n_episodes,
                      wall_clock=time.perf_counter() - t0)


def run_training(learner, env: MultiAgentEnv, steps: int, seed: int, eval_interval: int = 5000,
                 eval_episodes: int = 32, log_interval: int = 100, on_record=None,
                 on_checkpoint=None, checkpoint_interval: int = 0):
    """Alternate collection and training until ``steps`` env steps are taken.

    ``on_record`` receives each metrics record (dict) as it is produced;
    ``on_checkpoint(learner, env_steps)`` fires every ``checkpoint_interval``
    learner steps. Returns the final ``TrainState``.
    """
    cfg = learner.cfg
    env_rng, act_rng, sample_rng, eval_seed = make_streams(seed)
    state = TrainState(learner=learner, buffer=ReplayBuffer(cfg.buffer_size), env_rng=env_rng,
                       act_rng=act_rng, sample_rng=sample_rng, eval_seed=eval_seed)

    def emit(rec):
        state.metrics.append(rec)
        if on_record is not None:
            on_record(rec)

    next_eval = eval_interval
    n_eval = 0
    while state.env_steps < steps:
        ctrl = learner.behaviour_controller(state.env_steps)
        ep = collect_episode(env, ctrl, int(env_rng.integers(2**31)), act_rng)
        state.buffer.add(ep)
        state.env_steps += len(ep)
        state.episodes += 1
        if state.buffer.size >= max(cfg.warmup_episodes, cfg.batch_size):
            for _ in range(cfg.train_ratio):
                batch = sample_minibatch(state.buffer, cfg.batch_size, sample_rng,
                                         env.spec.n_actions, learner.dtype)
                report = learner.train_step(batch)
                learner.maybe_sync_targets()
                if learner.learner_steps % log_interval == 0:
                    emit({"kind": "train", "env_step": state.env_steps,
                          "learner_step": learner.learner_steps, **report.as_dict()})
                if (on_checkpoint is not None and checkpoint_interval
                        and learner.learner_steps % checkpoint_interval == 0):
                    on_checkpoint(learner, state.env_steps)
        if state.env_steps >= next_eval or state.env_steps >= steps:
            rec = evaluate(learner.greedy_controller(), env, eval_episodes,
                           eval_seed + n_eval, env_step=state.env_steps)
            n_eval += 1
            emit({"kind": "eval", **rec.as_dict()})
            while next_eval <= state.env_steps:
                next_eval += eval_interval
    return state
