import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from helpers import fd_rel_error
from lsfsac.nets import (
    Actor,
    CriticSet,
    Decoder,
    LearnedDiagPrior,
    LocalCritic,
    LSFSACNets,
    MessageEncoder,
    MixerWeights,
    NetConfig,
    QMixer,
    StandardNormalPrior,
    VDNMixer,
    actor_forward,
    build_inputs,
    bundle_messages,
    encode_messages,
    load_checkpoint,
    masked_softmax,
    mix_with_weights,
    save_checkpoint,
)

IN_DIM = 6  # obs 1 + 3 actions + 2 agent ids


def _inputs(B=4, T=3, n=2, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, T, n, IN_DIM, generator=g, dtype=dtype)


# --- actor -----------------------------------------------------------------


def test_actor_uniform_at_zero_head():
    actor = Actor(IN_DIM, 3, hidden=8)
    out = actor_forward(actor, torch.randn(2, IN_DIM), torch.ones(2, 3, dtype=torch.bool))
    torch.testing.assert_close(out.probs, torch.full((2, 3), 1 / 3))


def test_masked_softmax_respects_mask():
    logits = torch.tensor([[5.0, -3.0, 9.0]])
    probs, logp = masked_softmax(logits, torch.tensor([[True, False, False]]))
    assert probs.tolist() == [[1.0, 0.0, 0.0]]
    assert math.isfinite(logp[0, 0].item())


def test_masked_softmax_all_false_raises():
    with pytest.raises(ValueError):
        masked_softmax(torch.zeros(1, 3), torch.zeros(1, 3, dtype=torch.bool))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), mask_bits=st.lists(st.booleans(), min_size=4, max_size=4))
def test_actor_output_invariants(seed, mask_bits):
    torch.manual_seed(seed)
    actor = Actor(IN_DIM, 4, hidden=8)
    torch.nn.init.normal_(actor.head.weight)
    mask_bits[seed % 4] = True
    avail = torch.tensor([mask_bits, [True] * 4])
    out = actor_forward(actor, torch.randn(2, IN_DIM), avail)
    assert torch.allclose(out.probs.sum(-1), torch.ones(2), atol=1e-6)
    assert (out.probs[~avail] == 0).all()
    assert torch.isfinite(out.log_probs[avail]).all()


def test_actor_locality():
    torch.manual_seed(0)
    actor = Actor(IN_DIM, 3, hidden=8)
    torch.nn.init.normal_(actor.head.weight)
    x = torch.randn(2, IN_DIM)
    avail = torch.ones(2, 3, dtype=torch.bool)
    h0 = torch.randn(2, 8)
    base = actor_forward(actor, x, avail, h0)
    x2, h2 = x.clone(), h0.clone()
    x2[1] += torch.randn(IN_DIM)
    h2[1] += 1.0
    other = actor_forward(actor, x2, avail, h2)
    assert torch.equal(base.probs[0], other.probs[0])
    assert torch.equal(base.hidden[0], other.hidden[0])
    assert not torch.equal(base.probs[1], other.probs[1])


# --- messages --------------------------------------------------------------


def test_zero_noise_gives_mean():
    enc = MessageEncoder(IN_DIM, 4, hidden=8)
    x = _inputs(dtype=torch.float32)
    b = encode_messages(enc, x, noise=torch.zeros(4, 3, 2, 4))
    assert torch.equal(b.m_out, b.mu)


def test_noise_is_stored_exactly():
    enc = MessageEncoder(IN_DIM, 4, hidden=8).double()
    b = encode_messages(enc, _inputs(), generator=torch.Generator().manual_seed(1))
    # equal up to one rounding of the addition
    torch.testing.assert_close(b.m_out - b.mu, b.noise, rtol=0, atol=1e-14)


def test_message_noise_unit_variance():
    enc = MessageEncoder(IN_DIM, 4, hidden=8).double()
    x = _inputs(B=1, T=1).expand(100_000, 1, 2, IN_DIM)
    b = encode_messages(enc, x, generator=torch.Generator().manual_seed(2))
    var = (b.m_out - b.mu).var(0)
    assert ((var > 0.98) & (var < 1.02)).all()


def test_inbound_layout():
    mu = torch.arange(8.0).reshape(2, 4)
    b = bundle_messages(mu, torch.zeros(2, 4))
    assert b.inbound.shape == (2, 8)
    for i in range(2):
        assert b.inbound[i].tolist() == list(range(8))  # agent 0's message first


def test_reparameterization_jacobian_is_identity():
    mu = torch.randn(2, 4, dtype=torch.float64)
    noise = torch.randn(2, 4, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda m: bundle_messages(m, noise).m_out, mu)
    torch.testing.assert_close(jac.reshape(8, 8), torch.eye(8, dtype=torch.float64))
    h = 1e-6
    fd = torch.stack([
        (bundle_messages(mu + h * e, noise).m_out - bundle_messages(mu - h * e, noise).m_out).reshape(-1) / (2 * h)
        for e in torch.eye(8, dtype=torch.float64).reshape(8, 2, 4)
    ])
    torch.testing.assert_close(fd, torch.eye(8, dtype=torch.float64))


# --- local critic ----------------------------------------------------------


def test_local_critic_shape_and_message_dependence():
    torch.manual_seed(0)
    critic = LocalCritic(IN_DIM, 3, msg_in=8, hidden=8).double()
    x = _inputs(B=1, T=1)
    m = torch.randn(1, 1, 2, 8, dtype=torch.float64)
    q = critic(x, m)
    assert q.shape == (1, 1, 2, 3)
    h = 1e-6
    grad = []
    for k in range(8):
        e = torch.zeros(8, dtype=torch.float64)
        e[k] = h
        grad.append(((critic(x, m + e) - critic(x, m - e)) / (2 * h)).abs().sum().item())
    assert max(grad) > 1e-6


def test_local_critic_message_mismatch_raises():
    critic = LocalCritic(IN_DIM, 3, msg_in=8, hidden=8)
    with pytest.raises(ValueError):
        critic(_inputs(dtype=torch.float32), torch.zeros(4, 3, 2, 6))
    with pytest.raises(ValueError):
        critic(_inputs(dtype=torch.float32))


def test_messages_off_ignores_inbound():
    critic = LocalCritic(IN_DIM, 3, msg_in=0, hidden=8).double()
    x = _inputs()
    q = critic(x)
    assert torch.equal(q, critic(x, torch.randn(4, 3, 2, 8, dtype=torch.float64)))


# --- mixer -----------------------------------------------------------------


def _fixed_weights(w1, w2, b1=None, b2=0.0):
    w1 = torch.tensor(w1, dtype=torch.float64)
    w2 = torch.tensor(w2, dtype=torch.float64)
    b1 = torch.zeros(w1.shape[-1], dtype=torch.float64) if b1 is None else torch.tensor(b1)
    return MixerWeights(w1, b1, w2, torch.tensor(b2, dtype=torch.float64))


def test_mixer_reduces_to_sum():
    w = _fixed_weights([[1.0], [1.0]], [1.0])
    q = torch.tensor([2.5, -1.0], dtype=torch.float64)
    assert mix_with_weights(q, w, activation=lambda x: x).item() == pytest.approx(1.5)


def test_hand_set_mixer():
    w = _fixed_weights([[0.5, 1.0], [2.0, 0.0]], [1.0, 1.0])
    q = torch.tensor([1.0, 2.0], dtype=torch.float64)
    assert mix_with_weights(q, w, activation=lambda x: x).item() == pytest.approx(5.5)


def test_mixer_weights_nonnegative():
    torch.manual_seed(0)
    mixer = QMixer(2, 5, 16)
    w = mixer.weights(torch.randn(64, 5))
    assert (w.w1 >= 0).all() and (w.w2 >= 0).all()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**16), agent=st.integers(0, 2),
       scale=st.floats(0.1, 20.0))
def test_mixer_monotone(seed, agent, scale):
    torch.manual_seed(seed)
    mixer = QMixer(3, 4, 8).double()
    s = torch.randn(16, 4, dtype=torch.float64)
    q = scale * torch.randn(16, 3, dtype=torch.float64)
    bumped = q.clone()
    bumped[:, agent] += 0.1
    assert (mixer(bumped, s) - mixer(q, s) >= -1e-6).all()


def test_vdn_mixer():
    assert VDNMixer()(torch.tensor([2.0, 3.0])).item() == 5.0


# --- decoder and prior -----------------------------------------------------


def test_decoder_normalized_and_uniform_at_zero():
    torch.manual_seed(0)
    dec = Decoder(IN_DIM, 3, 8, hidden=8).double()
    x, m = _inputs(), torch.randn(4, 3, 2, 8, dtype=torch.float64)
    avail = torch.ones(4, 3, 2, 3, dtype=torch.bool)
    probs, _ = dec(x, m, avail)
    assert torch.allclose(probs.sum(-1), torch.ones(4, 3, 2, dtype=torch.float64), atol=1e-6)
    torch.nn.init.zeros_(dec.out.weight)
    torch.nn.init.zeros_(dec.out.bias)
    probs, _ = dec(x, m, avail)
    torch.testing.assert_close(probs, torch.full_like(probs, 1 / 3))


def test_standard_prior_logprob():
    prior = StandardNormalPrior()
    assert prior.logprob(torch.zeros(2)).item() == pytest.approx(-math.log(2 * math.pi))
    assert prior.logprob(torch.zeros(2)).item() == pytest.approx(-1.8379, abs=1e-4)
    m = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    diff = prior.logprob(m) - prior.logprob(torch.zeros(3, dtype=torch.float64))
    assert diff.item() == pytest.approx(-(m.pow(2).sum().item()) / 2)


def test_learned_prior_at_init_matches_default():
    m = torch.randn(10, 4)
    assert torch.equal(LearnedDiagPrior(4).logprob(m), StandardNormalPrior().logprob(m))


# --- gradients -------------------------------------------------------------


def _weights_like(t, seed=3):
    return torch.randn(t.shape, generator=torch.Generator().manual_seed(seed), dtype=t.dtype)


def test_gradient_fidelity_forward_ops():
    torch.manual_seed(0)
    x = _inputs(B=2, T=2)
    m = torch.randn(2, 2, 2, 8, dtype=torch.float64)
    avail = torch.ones(2, 2, 2, 3, dtype=torch.bool)
    actor = Actor(IN_DIM, 3, hidden=6).double()
    torch.nn.init.normal_(actor.head.weight)
    enc = MessageEncoder(IN_DIM, 4, hidden=6).double()
    critic = LocalCritic(IN_DIM, 3, msg_in=8, hidden=6).double()
    mixer = QMixer(2, 5, 4).double()
    dec = Decoder(IN_DIM, 3, 8, hidden=6).double()
    prior = LearnedDiagPrior(4).double()
    s, q = torch.randn(7, 5, dtype=torch.float64), torch.randn(7, 2, dtype=torch.float64)
    cases = {
        "actor": (actor, lambda: (actor(x, avail).log_probs * _weights_like(avail.double())).sum()),
        "encoder": (enc, lambda: (enc(x) * _weights_like(torch.zeros(2, 2, 2, 4, dtype=torch.float64))).sum()),
        "critic": (critic, lambda: (critic(x, m) * _weights_like(avail.double())).sum()),
        "mixer": (mixer, lambda: (mixer(q, s) * _weights_like(q[:, 0])).sum()),
        "decoder": (dec, lambda: (dec(x, m, avail)[1] * _weights_like(avail.double())).sum()),
        "prior": (prior, lambda: prior.logprob(m[..., :4] + 0.3).sum()),
    }
    with torch.no_grad():
        prior.mu.normal_()
        prior.logvar.normal_()
    for name, (module, fn) in cases.items():
        err = fd_rel_error(fn, module.parameters())
        assert err <= 1e-4, f"{name}: {err}"


def test_forward_outputs_finite():
    nets = LSFSACNets(2, 3, 1, 1, NetConfig(hidden=8))
    x = _inputs(dtype=torch.float32) * 100
    avail = torch.ones(4, 3, 2, 3, dtype=torch.bool)
    b = encode_messages(nets.encoder, x)
    assert torch.isfinite(nets.actor(x, avail).log_probs).all()
    assert torch.isfinite(nets.critics[0].local(x, b.inbound)).all()
    assert torch.isfinite(nets.decoder(x, b.inbound, avail)[1]).all()


# --- targets and checkpoints -----------------------------------------------


def test_targets_start_equal_and_frozen():
    torch.manual_seed(0)
    nets = LSFSACNets(2, 3, 1, 1, NetConfig(hidden=8))
    for s, t in zip(nets.critics.parameters(), nets.target_critics.parameters()):
        assert torch.equal(s, t)
        assert not t.requires_grad
    names = {id(p) for g in nets.parameter_groups().values() for p in g}
    assert not any(id(p) in names for p in nets.target_parameters())


def test_sync_target_matches_online():
    torch.manual_seed(0)
    nets = LSFSACNets(2, 3, 1, 1, NetConfig(hidden=8))
    with torch.no_grad():
        for p in nets.critics.parameters():
            p.add_(0.1 * torch.randn_like(p))
    x = _inputs(dtype=torch.float32)
    m = torch.randn(4, 3, 2, 8)
    assert not torch.equal(nets.critics[0].local(x, m), nets.target_critics[0].local(x, m))
    nets.sync_target()
    # frozen copies may take a different (fused) recurrent kernel; equal to float32 rounding
    torch.testing.assert_close(nets.critics[0].local(x, m), nets.target_critics[0].local(x, m))
    torch.testing.assert_close(nets.encoder(x), nets.target_encoder(x))


def test_double_q_has_two_independent_critics():
    torch.manual_seed(0)
    nets = LSFSACNets(2, 3, 1, 1, NetConfig(hidden=8, double_q=True))
    assert len(nets.critics) == 2 and len(nets.target_critics) == 2
    a, b = (list(c.parameters()) for c in nets.critics)
    assert not torch.equal(a[0], b[0])
    assert len(LSFSACNets(2, 3, 1, 1, NetConfig(hidden=8)).critics) == 1


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    nets = LSFSACNets(2, 3, 1, 1, NetConfig(hidden=8, learned_prior=True))
    path = save_checkpoint(nets, tmp_path / "ckpt")
    header = (path / "manifest.txt").read_text().splitlines()[0]
    assert header.startswith("#") and "<f8" in header
    torch.manual_seed(1)
    other = LSFSACNets(2, 3, 1, 1, NetConfig(hidden=8, learned_prior=True))
    load_checkpoint(other, path)
    for (k, a), (_, b) in zip(nets.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), k
    blob = np.fromfile(path / "params.bin", dtype="<f8")
    assert blob.size == sum(t.numel() for t in nets.state_dict().values())


def test_build_inputs_layout():
    obs = torch.zeros(1, 3, 2, 1)
    actions = torch.tensor([[[2, 0], [1, 1]]])
    x = build_inputs(obs, actions, 3)
    assert x.shape == (1, 3, 2, 6)
    assert x[0, 0, :, 1:4].sum() == 0  # no previous action at t = 0
    assert x[0, 1, 0, 1:4].tolist() == [0, 0, 1]
    assert x[0, 2, 1, 1:4].tolist() == [0, 1, 0]
    assert x[0, 0, 1, 4:].tolist() == [0, 1]


def test_critic_set_mixer_choice():
    assert isinstance(CriticSet(IN_DIM, 3, 2, 1, NetConfig(mixer="vdn")).mixer, VDNMixer)
    assert isinstance(CriticSet(IN_DIM, 3, 2, 1, NetConfig()).mixer, QMixer)
