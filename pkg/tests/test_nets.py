import numpy as np
import pytest
import torch

from conftest import central_difference, rel_err, tiny_denoiser
from latent_dfkd.data import ImageDataset, make_bars_split
from latent_dfkd.diffusion import LatentBatch, cosine_schedule
from latent_dfkd.errors import ConfigError, ContractError
from latent_dfkd.nets import (Classifier, ConvAutoencoder, Denoiser, IdentityCodec, TeacherConfig, denoise,
                              extract_batch_stats, load_checkpoint, running_stats, save_checkpoint, state_hash,
                              train_classifier, train_teacher)


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def test_fresh_denoiser_outputs_zeros():
    net = Denoiser(1, 8, 2, emb_dim=16).eval()
    z = LatentBatch(torch.randn(3, 1, 8, 8), 4, torch.tensor([0, 1, 0]))
    out = denoise(net, z, torch.tensor([0, 1, 2]), cosine_schedule(10))
    assert out.shape == z.data.shape
    assert torch.count_nonzero(out) == 0


def test_denoiser_is_deterministic_in_eval_mode():
    net = tiny_denoiser(dtype=torch.float32)
    z = LatentBatch(torch.randn(2, 1, 8, 8), 3, torch.tensor([0, 1]))
    sched = cosine_schedule(10)
    assert torch.equal(denoise(net, z, z.class_targets, sched), denoise(net, z, z.class_targets, sched))


def test_denoiser_gradient_matches_finite_differences():
    net = tiny_denoiser()
    sched = cosine_schedule(10)
    cond = torch.tensor([0, 2])
    z = torch.randn(2, 1, 4, 4, dtype=torch.float64)

    def f(x):
        return net(x, torch.tensor(sched.alpha(5), dtype=x.dtype), cond).sum()

    zg = z.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(zg), zg)
    with torch.no_grad():
        num = central_difference(f, z.clone())
    assert rel_err(grad, num) < 1e-4


def test_denoiser_rejects_unknown_condition():
    net = Denoiser(1, 8, 2, emb_dim=16)
    with pytest.raises(ContractError):
        net(torch.zeros(1, 1, 8, 8), torch.tensor(0.5), torch.tensor([3]))


# ---------------------------------------------------------------------------
# codecs and checkpoints
# ---------------------------------------------------------------------------

def test_identity_codec_round_trip_is_exact():
    codec = IdentityCodec((1, 8, 8))
    x = torch.randn(4, 1, 8, 8)
    assert torch.equal(codec.decode(codec.encode(x)), x)


def test_autoencoder_shapes():
    codec = ConvAutoencoder((1, 16, 16), latent_channels=2)
    z = codec.encode(torch.zeros(2, 1, 16, 16))
    assert tuple(z.shape[1:]) == codec.latent_shape == (2, 8, 8)
    assert codec.decode(z).shape == (2, 1, 16, 16)


def test_checkpoint_round_trip(tmp_path):
    net = Classifier(1, 3, (4, 8), 1)
    h = save_checkpoint(tmp_path / "c.pt", net, "abc", 7, {"note": 1})
    back, meta = load_checkpoint(tmp_path / "c.pt")
    assert state_hash(back) == h == state_hash(net)
    assert meta["config_hash"] == "abc" and meta["seed"] == 7 and meta["extra"] == {"note": 1}


# ---------------------------------------------------------------------------
# batch statistics
# ---------------------------------------------------------------------------

def test_constant_zero_input_gives_zero_stats_before_floor():
    net = Classifier(1, 2, (1, 2), convs_per_stage=1).eval()
    with torch.no_grad():
        net.convs[0].weight.zero_()
        net.convs[0].weight[0, 0, 1, 1] = 1.0
    stats = extract_batch_stats(net, torch.zeros(4, 1, 8, 8), floor=0.0)
    mean, var = stats[0]
    assert torch.equal(mean, torch.zeros(1)) and torch.equal(var, torch.zeros(1))
    floored = extract_batch_stats(net, torch.zeros(4, 1, 8, 8))[0][1]
    assert torch.equal(floored, torch.full((1,), 1e-5))


def test_stats_match_running_stats_of_converged_bn():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(8, 1, 16, 16, generator=g) * 2 - 1
    y = torch.tensor([0, 1] * 4)
    torch.manual_seed(0)
    net = Classifier(1, 2, (4,), convs_per_stage=1)
    train_classifier(net, x, y, TeacherConfig(epochs=50, batch_size=8, patience=100))
    with torch.no_grad():
        (mean, var), = extract_batch_stats(net.eval(), x)
    (rm, rv), = running_stats(net)
    torch.testing.assert_close(mean, rm, atol=1e-3, rtol=0)
    torch.testing.assert_close(var, rv, atol=1e-3, rtol=1e-3)


def test_duplicating_the_batch_leaves_stats_unchanged():
    net = Classifier(1, 2, (4, 8), 1).double().eval()
    x = torch.randn(5, 1, 8, 8, dtype=torch.float64)
    a = extract_batch_stats(net, x)
    b = extract_batch_stats(net, torch.cat([x, x]))
    for (m1, v1), (m2, v2) in zip(a, b):
        torch.testing.assert_close(m1, m2, rtol=1e-12, atol=1e-12)
        torch.testing.assert_close(v1, v2, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# classifier training
# ---------------------------------------------------------------------------

def test_teacher_on_toy_bars_reaches_95_percent():
    train, held = make_bars_split(n_total=200, seed=0)
    _, metrics = train_teacher(train, TeacherConfig(epochs=30), held)
    assert metrics["eval_acc"] >= 0.95


def test_teacher_training_is_seed_deterministic():
    train, held = make_bars_split(n_total=200, seed=1)
    cfg = TeacherConfig(epochs=3, seed=5)
    m1, r1 = train_teacher(train, cfg, held)
    m2, r2 = train_teacher(train, cfg, held)
    assert r1["history"] == r2["history"]
    assert state_hash(m1) == state_hash(m2)


def test_empty_training_set_is_a_config_error():
    empty = ImageDataset(np.zeros((0, 1, 8, 8)), np.zeros(0), 2)
    with pytest.raises(ConfigError):
        train_teacher(empty, TeacherConfig())


def test_default_teacher_and_student_taps_pair_up():
    t = Classifier(1, 10, (16, 32, 64), 2).eval()
    s = Classifier(1, 10, (8, 16, 32), 1).eval()
    x = torch.zeros(2, 1, 16, 16)
    with torch.no_grad():
        tt, st = t.forward_all(x)[1], s.forward_all(x)[1]
    assert [a.shape[-2:] for a in tt] == [b.shape[-2:] for b in st]
