import pytest
import torch

from latent_dfkd.diffusion import cosine_schedule
from latent_dfkd.nets import Classifier, Denoiser, IdentityCodec


def tiny_classifier(num_classes=2, widths=(4, 8), seed=0, dtype=torch.float64):
    """Small BN classifier in eval mode with non-trivial running statistics."""
    torch.manual_seed(seed)
    net = Classifier(1, num_classes, widths, convs_per_stage=1).to(dtype)
    with torch.no_grad():
        for bn in net.bns:
            bn.running_mean.uniform_(-0.5, 0.5)
            bn.running_var.uniform_(0.5, 2.0)
            bn.weight.uniform_(0.5, 1.5)
            bn.bias.uniform_(-0.2, 0.2)
    return net.eval()


def tiny_denoiser(num_conditions=2, width=8, seed=0, dtype=torch.float64):
    """Denoiser whose zero-initialised output conv is replaced by random weights."""
    torch.manual_seed(seed)
    net = Denoiser(1, width, num_conditions, emb_dim=16).to(dtype)
    with torch.no_grad():
        net.out.weight.normal_(0, 0.1)
        net.out.bias.normal_(0, 0.1)
    return net.eval()


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar fn at x (double precision)."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float((a - b).norm() / b.norm().clamp_min(1e-30))


@pytest.fixture
def toy_models():
    teacher = tiny_classifier(seed=0)
    student = tiny_classifier(seed=1)
    denoiser = tiny_denoiser()
    codec = IdentityCodec((1, 4, 4)).double()
    return teacher, student, denoiser, codec, cosine_schedule(10)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
