import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_dfkd.diffusion import (GuidanceSpec, LatentBatch, NoiseSchedule, ancestral_step, classifier_free_noise,
                                   cosine_schedule, forward_noise, linear_schedule, predict_x0)
from latent_dfkd.errors import ContractError, SingularScheduleError


def _batch(x, t):
    return LatentBatch(x, t, torch.zeros(len(x), dtype=torch.long))


# ---------------------------------------------------------------------------
# classifier-free guidance
# ---------------------------------------------------------------------------

def test_guidance_scale_one_returns_conditional_exactly():
    g = torch.Generator().manual_seed(0)
    ec, eu = torch.randn(3, 1, 4, 4, generator=g), torch.randn(3, 1, 4, 4, generator=g)
    out = classifier_free_noise(ec, eu, GuidanceSpec(scale=1.0))
    assert torch.equal(out, ec)


@pytest.mark.parametrize("s", [1.0, 2.5, 3.0, 7.5])
def test_guidance_equal_predictions_pass_through(s):
    e = torch.randn(2, 1, 4, 4)
    assert torch.equal(classifier_free_noise(e, e.clone(), GuidanceSpec(scale=s)), e)


def test_guidance_scalar_hand_value():
    out = classifier_free_noise(torch.tensor(0.3, dtype=torch.float64), torch.tensor(0.1, dtype=torch.float64),
                                GuidanceSpec(scale=3.0))
    # 0.1 + 3 * (0.3 - 0.1)
    assert out.item() == pytest.approx(0.7, abs=1e-12)


def test_guidance_rejects_scale_below_one_and_shape_mismatch():
    with pytest.raises(ContractError):
        GuidanceSpec(scale=0.5)
    with pytest.raises(ContractError):
        classifier_free_noise(torch.zeros(2), torch.zeros(3), 2.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_guidance_is_affine_in_scale(ec, eu):
    ec_t, eu_t = torch.tensor(ec, dtype=torch.float64), torch.tensor(eu, dtype=torch.float64)
    o1, o2, o3 = (classifier_free_noise(ec_t, eu_t, s) for s in (1.0, 2.0, 3.0))
    assert o2.item() == pytest.approx(0.5 * (o1.item() + o3.item()), abs=1e-9)


# ---------------------------------------------------------------------------
# clean-latent prediction
# ---------------------------------------------------------------------------

def test_predict_x0_identity_when_alpha_one():
    sched = NoiseSchedule((1.0, 1.0, 0.5))
    z = torch.randn(2, 1, 4, 4)
    assert torch.equal(predict_x0(_batch(z, 1), torch.randn_like(z), sched), z)


def test_predict_x0_zero_noise_rescales():
    sched = cosine_schedule(10)
    z = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    for t in range(1, 11):
        out = predict_x0(_batch(z, t), torch.zeros_like(z), sched)
        torch.testing.assert_close(out, z / math.sqrt(sched.alpha(t)), rtol=1e-12, atol=0)


@pytest.mark.parametrize("sched", [cosine_schedule(10), linear_schedule(10), cosine_schedule(50)])
def test_predict_x0_inverts_forward_noising(sched):
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(4, 1, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 1, 4, 4, generator=g, dtype=torch.float64)
    for t in range(1, sched.num_steps + 1):
        zt = forward_noise(z0, sched, t, eps)
        rec = predict_x0(_batch(zt, t), eps, sched)
        assert float((rec - z0).norm() / z0.norm()) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.sampled_from(["cosine", "linear"]), st.integers(0, 2**31 - 1))
def test_predict_x0_round_trip_property(T, kind, seed):
    sched = NoiseSchedule.from_kind(kind, T)
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = 1 + seed % T
    rec = predict_x0(forward_noise(z0, sched, t, eps), eps, sched, t)
    assert float((rec - z0).norm() / z0.norm()) < 1e-6


def test_predict_x0_errors():
    z = torch.randn(1, 1, 4, 4)
    with pytest.raises(ContractError):
        predict_x0(z, torch.zeros_like(z), cosine_schedule(10), t=0)
    with pytest.raises(SingularScheduleError):
        predict_x0(z, torch.zeros_like(z), NoiseSchedule((1.0, 0.5, 0.0)), t=2)
    with pytest.raises(ContractError):
        predict_x0(z, torch.zeros(1, 1, 2, 2), cosine_schedule(10), t=3)


# ---------------------------------------------------------------------------
# ancestral update
# ---------------------------------------------------------------------------

def test_ancestral_step_clean_previous_returns_x0():
    x0 = torch.randn(2, 1, 4, 4)
    out = ancestral_step(x0, cosine_schedule(10), 1, torch.randn_like(x0))
    assert torch.equal(out, x0)


def test_ancestral_step_zero_signal_returns_noise():
    sched = NoiseSchedule((1.0, 0.0, 0.0))
    x0, noise = torch.randn(2, 1, 4, 4), torch.randn(2, 1, 4, 4)
    assert torch.equal(ancestral_step(x0, sched, 2, noise), noise)


def test_ancestral_step_scalar_hand_value():
    sched = NoiseSchedule((1.0, 0.25, 0.1))
    out = ancestral_step(torch.tensor([2.0], dtype=torch.float64), sched, 2,
                         torch.tensor([1.0], dtype=torch.float64))
    assert out.item() == pytest.approx(0.5 * 2 + math.sqrt(0.75), abs=1e-12)
    assert out.item() == pytest.approx(1.8660, abs=1e-4)


def test_ancestral_step_is_deterministic():
    sched = cosine_schedule(10)
    x0, noise = torch.randn(3, 1, 4, 4), torch.randn(3, 1, 4, 4)
    a, b = ancestral_step(x0, sched, 5, noise), ancestral_step(x0.clone(), sched, 5, noise.clone())
    assert torch.equal(a, b)


# ---------------------------------------------------------------------------
# schedules and containers
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedules_are_valid(kind):
    s = NoiseSchedule.from_kind(kind, 25)
    a = np.asarray(s.alpha_bar)
    assert a[0] == 1.0 and np.all(np.diff(a) <= 0) and a[-1] > 0


@pytest.mark.parametrize("bad", [(0.9, 0.5), (1.0, 0.5, 0.7), (1.0, float("nan")), (1.0, 1.2)])
def test_schedule_validation(bad):
    with pytest.raises(ContractError):
        NoiseSchedule(bad)


def test_latent_batch_validation():
    with pytest.raises(ContractError):
        LatentBatch(torch.zeros(2, 4, 4), 1, torch.zeros(2, dtype=torch.long))
    with pytest.raises(ContractError):
        LatentBatch(torch.zeros(2, 1, 4, 4), 1, torch.zeros(3, dtype=torch.long))
