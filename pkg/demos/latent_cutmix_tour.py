"""
Latent CutMix, MixUp and flips on a batch
=========================================

Shows what each latent augmentation does to a small labelled batch and
prints the audit metadata recorded for every mixed item.
"""

import numpy as np
import torch

from latent_dfkd.diffusion import LatentBatch
from latent_dfkd.synthesis import latent_cutmix, latent_mixup, latent_traditional

# four 6x6 single-channel latents; items of a class share a constant value so boxes are easy to spot
labels = torch.tensor([0, 0, 1, 1])
data = torch.stack([torch.full((1, 6, 6), float(v)) for v in (1, 2, 7, 8)])
batch = LatentBatch(data, timestep=6, class_targets=labels)
rng = np.random.default_rng(0)

# cutmix pastes a box from a same-class partner; area fraction ~ U(0, area_max)
mixed, info = latent_cutmix(batch, rng, area_max=0.5)
for p in info.pairs:
    print(f"item {p['target']} <- partner {p['partner']}  box {p['box']}  area {p['area']:.2f}")
print(mixed.data[0, 0].numpy())

# full-area boxes replace the item outright
full, _ = latent_cutmix(batch, rng, area_max=1.0, lam=1.0)
print("full replacement:", full.data[:, 0, 0, 0].tolist())

# mixup blends with a Beta(1, 1) weight
blended, info = latent_mixup(batch, rng)
print("mixup weights:", [round(p["lam"], 3) for p in info.pairs])

# the traditional arm flips horizontally and shifts by up to one cell
ramp = LatentBatch(torch.arange(36.0).view(1, 1, 6, 6).repeat(4, 1, 1, 1), 6, labels)
moved, info = latent_traditional(ramp, rng)
print("flip/shift:", [(p["flip"], p["shift"]) for p in info.pairs])
