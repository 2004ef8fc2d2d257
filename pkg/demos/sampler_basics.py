"""
Sampler building blocks on a toy latent
=======================================

Noise a known latent, recover it with the clean-latent predictor, blend
guided noise predictions, and walk the harvest schedule. Runs in a second.
"""

import torch

from latent_dfkd.diffusion import GuidanceSpec, classifier_free_noise, cosine_schedule, forward_noise, predict_x0
from latent_dfkd.synthesis import default_period, harvest_timesteps

# a cosine schedule with 10 steps; alpha_bar[0] is always 1
sched = cosine_schedule(10)
print("alpha_bar:", [round(a, 4) for a in sched.alpha_bar])

# noise a known latent at every step and undo it with the true noise
z0 = torch.randn(2, 1, 4, 4, dtype=torch.float64)
eps = torch.randn_like(z0)
for t in (1, 5, 10):
    zt = forward_noise(z0, sched, t, eps)
    back = predict_x0(zt, eps, sched, t)
    print(f"t={t:2d}  |z_t - z0| = {float((zt - z0).norm()):.3f}   recovery error = {float((back - z0).norm()):.1e}")

# guidance: s=1 keeps the conditional prediction, larger s extrapolates away from the null one
eps_c, eps_u = torch.tensor(0.3), torch.tensor(0.1)
for s in (1.0, 3.0, 7.5):
    print(f"s={s}: blended noise = {classifier_free_noise(eps_c, eps_u, GuidanceSpec(scale=s)).item():.2f}")

# harvest schedule: T=10 with the default period gives four intermediates per image
k = default_period(10)
print(f"default k for T=10 is {k}; harvested steps {harvest_timesteps(10, k)}")
print("k=2 would harvest", harvest_timesteps(10, 2))
