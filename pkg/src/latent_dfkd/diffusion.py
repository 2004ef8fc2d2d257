"""Noise schedules and the sampling primitives used by the synthesis loop.

Everything here is a pure function of its inputs. Noise is always injected by
the caller so that a sampling run is fully determined by its seeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .errors import ContractError, SingularScheduleError

SCHEDULE_KINDS = ("cosine", "linear")


def continuous_alpha_bar(kind: str, tau, alpha_min: float = 1e-4):
    """Cumulative signal coefficient at continuous time ``tau`` in [0, 1].

    Works on floats, numpy arrays and torch tensors. ``tau = 0`` maps to 1.
    """
    lib = torch if isinstance(tau, torch.Tensor) else np
    if kind == "cosine":
        s = 0.008
        f = lib.cos((tau + s) / (1 + s) * math.pi / 2) ** 2
        out = f / math.cos(s / (1 + s) * math.pi / 2) ** 2
    elif kind == "linear":
        # integrated form of beta(u) = b0 + (b1 - b0) u over 1000 reference steps
        n, b0, b1 = 1000.0, 1e-4, 0.02
        out = lib.exp(-n * (b0 * tau + 0.5 * (b1 - b0) * tau**2))
    else:
        raise ContractError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if lib is torch:
        return out.clamp(alpha_min, 1.0)
    return np.clip(out, alpha_min, 1.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar[t] for t = 0..T, with alpha_bar[0] == 1 and non-increasing in t."""

    alpha_bar: tuple
    kind: str = "custom"

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ContractError("alpha_bar must hold T+1 >= 2 values")
        if not np.all(np.isfinite(a)):
            raise ContractError("alpha_bar must be finite")
        if a[0] != 1.0:
            raise ContractError("alpha_bar[0] must equal 1")
        if np.any(a < 0) or np.any(a > 1):
            raise ContractError("alpha_bar values must lie in [0, 1]")
        if np.any(np.diff(a) > 0):
            raise ContractError("alpha_bar must be non-increasing in t")
        object.__setattr__(self, "alpha_bar", tuple(float(v) for v in a))

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar) - 1

    @classmethod
    def from_kind(cls, kind: str, num_steps: int, alpha_min: float = 1e-4) -> "NoiseSchedule":
        if num_steps < 1:
            raise ContractError("num_steps must be >= 1")
        tau = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        a = continuous_alpha_bar(kind, tau, alpha_min=alpha_min)
        a[0] = 1.0
        return cls(tuple(a), kind=kind)

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ContractError(f"timestep {t} outside 0..{self.num_steps}")
        return self.alpha_bar[t]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha_bar": list(self.alpha_bar)}


def cosine_schedule(num_steps: int, alpha_min: float = 1e-4) -> NoiseSchedule:
    return NoiseSchedule.from_kind("cosine", num_steps, alpha_min)


def linear_schedule(num_steps: int, alpha_min: float = 1e-4) -> NoiseSchedule:
    return NoiseSchedule.from_kind("linear", num_steps, alpha_min)


@dataclass
class LatentBatch:
    """A batch of latents sharing one timestep.

    ``class_targets`` holds one integer label per item; ``rng_seed`` names the
    noise stream the batch was drawn from.
    """

    data: torch.Tensor
    timestep: int
    class_targets: torch.Tensor
    rng_seed: int = 0
    num_classes: Optional[int] = None

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ContractError(f"latent data must be [B, C, H, W], got shape {tuple(self.data.shape)}")
        self.class_targets = torch.as_tensor(self.class_targets, dtype=torch.long)
        if self.class_targets.shape != (self.data.shape[0],):
            raise ContractError("need exactly one class target per latent")
        if self.timestep < 0:
            raise ContractError("timestep must be >= 0")
        if self.class_targets.numel() and int(self.class_targets.min()) < 0:
            raise ContractError("class targets must be non-negative")
        if self.num_classes is not None and self.class_targets.numel():
            if int(self.class_targets.max()) >= self.num_classes:
                raise ContractError("class target outside [0, num_classes)")

    def __len__(self):
        return self.data.shape[0]

    def replace(self, data: Optional[torch.Tensor] = None, timestep: Optional[int] = None) -> "LatentBatch":
        return LatentBatch(
            self.data if data is None else data,
            self.timestep if timestep is None else timestep,
            self.class_targets,
            self.rng_seed,
            self.num_classes,
        )


@dataclass
class GuidanceSpec:
    scale: float = 3.0
    condition: Optional[torch.Tensor] = None
    null_condition: int = 0

    def __post_init__(self):
        if not self.scale >= 1:
            raise ContractError(f"guidance scale must be >= 1, got {self.scale}")


def classifier_free_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor,
                          spec: Union[GuidanceSpec, float]) -> torch.Tensor:
    """Blend conditional and unconditional noise predictions with scale s."""
    scale = spec.scale if isinstance(spec, GuidanceSpec) else float(spec)
    if scale < 1:
        raise ContractError(f"guidance scale must be >= 1, got {scale}")
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if scale == 1:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def forward_noise(z0: torch.Tensor, schedule: NoiseSchedule, t: int, noise: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(a_t) z0 + sqrt(1 - a_t) eps."""
    a = schedule.alpha(t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * noise


def _data(z):
    return z.data if isinstance(z, LatentBatch) else z


def predict_x0(z_t: LatentBatch, eps_hat: torch.Tensor, schedule: NoiseSchedule,
               t: Optional[int] = None) -> torch.Tensor:
    """One-shot estimate of the clean latent from z_t and predicted noise.

    ``z_t`` may also be a raw tensor, in which case ``t`` is required.
    """
    if t is None:
        if not isinstance(z_t, LatentBatch):
            raise ContractError("timestep required when z_t is a raw tensor")
        t = z_t.timestep
    x = _data(z_t)
    if t == 0:
        raise ContractError("predict_x0 is undefined at t=0")
    if not 1 <= t <= schedule.num_steps:
        raise ContractError(f"timestep {t} outside 1..{schedule.num_steps}")
    if eps_hat.shape != x.shape:
        raise ContractError(f"eps_hat shape {tuple(eps_hat.shape)} does not match latent {tuple(x.shape)}")
    a = schedule.alpha(t)
    if a <= 0:
        raise SingularScheduleError(f"alpha_bar[{t}] == 0")
    if a == 1.0:
        return x
    return (x - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)


def ancestral_step(x0_hat: torch.Tensor, schedule: NoiseSchedule, t: int, noise: torch.Tensor) -> torch.Tensor:
    """Latent for timestep t-1 from the predicted clean latent and injected noise."""
    if not 1 <= t <= schedule.num_steps:
        raise ContractError(f"timestep {t} outside 1..{schedule.num_steps}")
    if noise.shape != x0_hat.shape:
        raise ContractError(f"noise shape {tuple(noise.shape)} does not match {tuple(x0_hat.shape)}")
    a = schedule.alpha(t - 1)
    if a == 1.0:
        return x0_hat
    if a == 0.0:
        return noise
    return math.sqrt(a) * x0_hat + math.sqrt(1.0 - a) * noise


def noise_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g
