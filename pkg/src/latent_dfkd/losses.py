"""Teacher-driven inversion losses used to steer synthesis."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError
from .nets import extract_batch_stats, running_stats

# flip to False to skip the per-evaluation sign assertions
DEBUG_SIGN_CHECKS = True


@dataclass
class InversionWeights:
    alpha: float = 1.0  # batch-norm statistics term
    beta: float = 1.0   # class prior term
    gamma: float = 1.0  # adversarial term
    tau: float = 4.0
    eta: float = 2.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.tau, self.eta)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError("inversion weights must be finite")
        if min(self.alpha, self.beta, self.gamma, self.eta) < 0:
            raise ContractError("alpha, beta, gamma and eta must be >= 0")
        if self.tau <= 0:
            raise ContractError("tau must be > 0")

    def to_dict(self):
        return asdict(self)


def gaussian_kl(mean_p, var_p, mean_q, var_q):
    """Elementwise KL(N(mean_p, var_p) || N(mean_q, var_q))."""
    return 0.5 * (torch.log(var_q) - torch.log(var_p) + (var_p + (mean_p - mean_q) ** 2) / var_q - 1.0)


def bn_loss(batch_stats, running) -> torch.Tensor:
    """Sum over layers and channels of KL(batch Gaussian || running Gaussian)."""
    if len(batch_stats) != len(running):
        raise ContractError(f"{len(batch_stats)} batch layers vs {len(running)} running layers")
    total = None
    for (mb, vb), (mr, vr) in zip(batch_stats, running):
        mb, vb = torch.as_tensor(mb), torch.as_tensor(vb)
        mr = torch.as_tensor(mr, dtype=mb.dtype)
        vr = torch.as_tensor(vr, dtype=mb.dtype)
        if mb.shape != mr.shape or vb.shape != vr.shape:
            raise ContractError(f"channel count mismatch: {tuple(mb.shape)} vs {tuple(mr.shape)}")
        term = gaussian_kl(mb, vb, mr, vr).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def class_prior_loss(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean cross-entropy of ``logits`` against the chosen classes."""
    if logits.dim() != 2 or logits.shape[1] == 0:
        raise ContractError("logits must be [batch, C] with C >= 1")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= logits.shape[1]):
        raise ContractError("target outside [0, C)")
    return F.cross_entropy(logits, targets)


def tempered_kl(p_logits, q_logits, tau):
    """KL(softmax(p/tau) || softmax(q/tau)) averaged over the batch."""
    if p_logits.shape != q_logits.shape:
        raise ContractError(f"logit shapes differ: {tuple(p_logits.shape)} vs {tuple(q_logits.shape)}")
    if tau <= 0:
        raise ContractError("temperature must be > 0")
    log_p = F.log_softmax(p_logits / tau, dim=1)
    log_q = F.log_softmax(q_logits / tau, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def adversarial_loss(teacher_logits, student_logits, tau) -> torch.Tensor:
    """Negative teacher/student KL; minimising it pushes inputs toward disagreement."""
    return -tempered_kl(teacher_logits, student_logits, tau)


def inversion_loss(images, targets, teacher, student, w: InversionWeights, bn_layer_ids=None):
    """Weighted sum of the BN, class-prior and adversarial terms.

    Returns ``(total, breakdown)`` where breakdown maps term names to detached
    floats. With ``w.gamma == 0`` the student is never evaluated and may be None.
    """
    zero = images.sum() * 0.0
    need_teacher = w.alpha or w.beta or w.gamma
    l_bn = l_cls = l_adv = zero
    if need_teacher:
        stats, t_logits = extract_batch_stats(teacher, images, layers=bn_layer_ids, return_logits=True)
        if w.alpha:
            l_bn = bn_loss(stats, running_stats(teacher, bn_layer_ids))
        if w.beta:
            l_cls = class_prior_loss(t_logits, targets)
        if w.gamma:
            if student is None:
                raise ContractError("student required when gamma > 0")
            l_adv = adversarial_loss(t_logits, student(images), w.tau)
    if DEBUG_SIGN_CHECKS:
        # small slack for floating-point cancellation; NaN is left to the caller's finiteness check
        assert not l_bn.item() < -1e-6, f"L_bn negative: {l_bn.item()}"
        assert not l_cls.item() < -1e-6, f"L_cls negative: {l_cls.item()}"
        assert not l_adv.item() > 1e-6, f"L_adv positive: {l_adv.item()}"
    total = w.alpha * l_bn + w.beta * l_cls + w.gamma * l_adv
    breakdown = {"L_bn": l_bn.item(), "L_cls": l_cls.item(), "L_adv": l_adv.item(), "total": total.item()}
    return total, breakdown
