"""Toy-scale networks: conditional denoiser, latent codecs and BN-instrumented classifiers.

Also holds the training loops for the two "pretrained" inputs of the pipeline
(teacher and denoiser) and the versioned checkpoint container.
"""
from __future__ import annotations

import copy
import hashlib
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import LatentBatch, NoiseSchedule, continuous_alpha_bar
from .errors import ConfigError, ContractError, DivergenceError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "latent_dfkd.checkpoint"
CHECKPOINT_VERSION = 1
VARIANCE_FLOOR = 1e-5


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

def _groups(channels):
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def noise_level_embedding(alpha_bar: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of the log signal-to-noise ratio."""
    a = alpha_bar.clamp(1e-8, 1 - 1e-8)
    logsnr = (torch.log(a) - torch.log1p(-a)).clamp(-20, 20)
    half = dim // 2
    freqs = torch.exp(torch.linspace(0, math.log(100.0), half, dtype=a.dtype, device=a.device))
    arg = logsnr[:, None] / 20.0 * freqs[None] * math.pi
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class Denoiser(nn.Module):
    """Small conditional UNet predicting the noise in a latent.

    Conditions are integers in ``[0, num_conditions]``; the last id is the
    trainable null condition used for classifier-free guidance.
    """

    arch_tag = "denoiser-unet-v1"

    def __init__(self, in_channels: int = 1, width: int = 32, num_conditions: int = 10, emb_dim: int = 64):
        super().__init__()
        self.arch_kwargs = dict(in_channels=in_channels, width=width,
                                num_conditions=num_conditions, emb_dim=emb_dim)
        self.num_conditions = num_conditions
        self.null_condition = num_conditions
        self.emb_dim = emb_dim
        self.cond_emb = nn.Embedding(num_conditions + 1, emb_dim)
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        w = width
        self.inp = nn.Conv2d(in_channels, w, 3, padding=1)
        self.rb1 = ResBlock(w, w, emb_dim)
        self.rb2 = ResBlock(w, 2 * w, emb_dim)
        self.rb3 = ResBlock(2 * w, 2 * w, emb_dim)
        self.rb4 = ResBlock(4 * w, 2 * w, emb_dim)
        self.rb5 = ResBlock(3 * w, w, emb_dim)
        self.out_norm = nn.GroupNorm(_groups(w), w)
        self.out = nn.Conv2d(w, in_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def condition_vocab(self):
        return self.num_conditions + 1

    def forward(self, x, alpha_bar, cond):
        if not torch.is_tensor(alpha_bar):
            alpha_bar = torch.tensor(float(alpha_bar), dtype=x.dtype)
        alpha_bar = alpha_bar.to(x.dtype).expand(x.shape[0]) if alpha_bar.dim() == 0 else alpha_bar.to(x.dtype)
        cond = torch.as_tensor(cond, dtype=torch.long)
        if cond.dim() == 0:
            cond = cond.expand(x.shape[0])
        if cond.numel() and (int(cond.min()) < 0 or int(cond.max()) >= self.condition_vocab):
            raise ContractError(f"condition id outside [0, {self.condition_vocab})")
        emb = self.time_mlp(noise_level_embedding(alpha_bar, self.emb_dim)) + self.cond_emb(cond)
        emb = F.silu(emb)
        h1 = self.rb1(self.inp(x), emb)
        h2 = self.rb2(F.avg_pool2d(h1, 2), emb)
        h3 = self.rb3(F.avg_pool2d(h2, 2), emb)
        u2 = self.rb4(torch.cat([F.interpolate(h3, scale_factor=2, mode="nearest"), h2], 1), emb)
        u1 = self.rb5(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], 1), emb)
        return self.out(F.silu(self.out_norm(u1)))


def denoise(handle: Denoiser, z: LatentBatch, condition, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise prediction for ``z`` at its timestep under ``condition``."""
    a = schedule.alpha(z.timestep)
    return handle(z.data, torch.tensor(a, dtype=z.data.dtype), condition)


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------

class IdentityCodec(nn.Module):
    """Latent space equals image space."""

    arch_tag = "codec-identity"

    def __init__(self, image_shape: Sequence[int] = (1, 16, 16)):
        super().__init__()
        self.arch_kwargs = dict(image_shape=tuple(image_shape))
        self.image_shape = tuple(image_shape)
        self.latent_shape = tuple(image_shape)

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class ConvAutoencoder(nn.Module):
    """Optional small trained codec; halves the spatial resolution."""

    arch_tag = "codec-conv-ae-v1"

    def __init__(self, image_shape: Sequence[int] = (1, 16, 16), latent_channels: int = 2, width: int = 16):
        super().__init__()
        self.arch_kwargs = dict(image_shape=tuple(image_shape), latent_channels=latent_channels, width=width)
        c, h, w = image_shape
        self.image_shape = tuple(image_shape)
        self.latent_shape = (latent_channels, h // 2, w // 2)
        self.enc = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, c, 3, padding=1), nn.Tanh(),
        )

    def encode(self, x):
        return self.enc(x)

    def decode(self, z):
        return self.dec(z)


def train_codec(codec: ConvAutoencoder, images: torch.Tensor, epochs: int = 30, lr: float = 2e-3,
                batch_size: int = 64, seed: int = 0):
    """Fit the autoencoder by reconstruction MSE; returns per-epoch losses."""
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    losses = []
    for _ in range(epochs):
        perm = torch.randperm(len(images), generator=g)
        total = 0.0
        for i in range(0, len(images), batch_size):
            x = images[perm[i:i + batch_size]]
            loss = F.mse_loss(codec.decode(codec.encode(x)), x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
        losses.append(total / len(images))
    codec.eval()
    return losses


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

@dataclass
class BNLayerStats:
    layer_id: str
    running_mean: torch.Tensor
    running_var: torch.Tensor


class Classifier(nn.Module):
    """CNN with one feature tap per resolution stage and a GAP + linear head.

    Each stage is ``convs_per_stage`` x (conv, BN, ReLU); stages after the first
    start with a 2x average-pool. Taps are the stage outputs. Non-final taps
    carry a 1x1 projection to class space used for class activation maps.
    """

    arch_tag = "classifier-cnn-v1"

    def __init__(self, in_channels: int = 1, num_classes: int = 10, widths: Sequence[int] = (16, 32, 64),
                 convs_per_stage: int = 2):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.arch_kwargs = dict(in_channels=in_channels, num_classes=num_classes, widths=widths,
                                convs_per_stage=convs_per_stage)
        self.num_classes = num_classes
        self.widths = widths
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        self.stage_of = []
        cin = in_channels
        for s, w in enumerate(widths):
            for _ in range(convs_per_stage):
                self.convs.append(nn.Conv2d(cin, w, 3, padding=1, bias=False))
                self.bns.append(nn.BatchNorm2d(w))
                self.stage_of.append(s)
                cin = w
        self.head = nn.Linear(widths[-1], num_classes)
        self.projections = nn.ModuleList(nn.Conv2d(w, num_classes, 1, bias=False) for w in widths[:-1])

    @property
    def num_taps(self):
        return len(self.widths)

    def forward_all(self, x):
        """Logits plus per-stage taps and the pre-BN activation of every BN layer."""
        taps, bn_inputs = [], []
        h = x
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            s = self.stage_of[i]
            if i > 0 and s != self.stage_of[i - 1]:
                taps.append(h)
                h = F.avg_pool2d(h, 2)
            pre = conv(h)
            bn_inputs.append(pre)
            h = F.relu(bn(pre))
        taps.append(h)
        logits = self.head(h.mean(dim=(2, 3)))
        return logits, taps, bn_inputs

    def forward(self, x):
        return self.forward_all(x)[0]

    def cam_weights(self, tap: int) -> torch.Tensor:
        """[num_classes x channels] weights that turn tap ``tap`` into class maps."""
        if tap == self.num_taps - 1 or tap == -1:
            return self.head.weight
        return self.projections[tap].weight.flatten(1)

    def bn_layers(self) -> List[BNLayerStats]:
        return [BNLayerStats(f"bn{i}", bn.running_mean.detach(), bn.running_var.detach())
                for i, bn in enumerate(self.bns)]

    def bn_checksum(self) -> str:
        h = hashlib.sha256()
        for bn in self.bns:
            h.update(bn.running_mean.detach().cpu().numpy().tobytes())
            h.update(bn.running_var.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def extract_batch_stats(handle: Classifier, images: torch.Tensor, layers: Optional[Sequence[int]] = None,
                        floor: float = VARIANCE_FLOOR, return_logits: bool = False):
    """Per-channel (mean, variance) of the pre-BN activations of each BN layer.

    Variance is the population (biased) estimate over batch and spatial
    positions, so duplicating the batch leaves it unchanged, and is floored at
    ``floor``.
    """
    logits, _, bn_inputs = handle.forward_all(images)
    idx = range(len(bn_inputs)) if layers is None else layers
    stats = []
    for i in idx:
        a = bn_inputs[i]
        flat = a.transpose(0, 1).reshape(a.shape[1], -1)
        mean = flat.mean(dim=1)
        var = flat.var(dim=1, unbiased=False)
        if floor:
            var = var.clamp_min(floor)
        stats.append((mean, var))
    if return_logits:
        return stats, logits
    return stats


def running_stats(handle: Classifier, layers: Optional[Sequence[int]] = None):
    bn = handle.bn_layers()
    idx = range(len(bn)) if layers is None else layers
    return [(bn[i].running_mean, bn[i].running_var) for i in idx]


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TeacherConfig:
    widths: tuple = (16, 32, 64)
    convs_per_stage: int = 2
    epochs: int = 30
    lr: float = 2e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    accuracy_floor: float = 0.0
    patience: int = 10
    probe_epochs: int = 10


def _accuracy(model, x, y, batch_size=512):
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            correct += (model(x[i:i + batch_size]).argmax(1) == y[i:i + batch_size]).sum().item()
    return correct / max(len(x), 1)


def recalibrate_bn(model: nn.Module, images: torch.Tensor, batch_size: int = 256):
    """Replace BN running statistics with exact cumulative averages over ``images``."""
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [m.momentum for m in bns]
    was_training = model.training
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            if len(chunk) > 1:
                model(chunk)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.train(was_training)


def train_classifier(model: Classifier, images: torch.Tensor, labels: torch.Tensor, cfg: TeacherConfig,
                     eval_images=None, eval_labels=None):
    """Supervised cross-entropy training; raises DivergenceError if the loss stalls."""
    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    history = []
    best, stale = float("inf"), 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(images), generator=g)
        total = 0.0
        for i in range(0, len(images), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError("non-finite training loss", {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        recalibrate_bn(model, images)
        epoch_loss = total / len(images)
        rec = {"epoch": epoch, "loss": epoch_loss, "train_acc": _accuracy(model, images, labels)}
        if eval_images is not None:
            rec["eval_acc"] = _accuracy(model, eval_images, eval_labels)
        history.append(rec)
        logger.debug("classifier epoch %d: %s", epoch, rec)
        if epoch_loss < best - 1e-6:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                raise DivergenceError(f"loss did not improve for {cfg.patience} epochs",
                                      {"history": history[-cfg.patience:]})
    model.eval()
    return history


def fit_projections(model: Classifier, images: torch.Tensor, labels: torch.Tensor, epochs: int = 10,
                    lr: float = 1e-2, batch_size: int = 64, seed: int = 0):
    """Fit the 1x1 tap projections as linear probes on frozen, detached features."""
    if not len(model.projections):
        return []
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.projections.parameters(), lr=lr)
    model.eval()
    losses = []
    for _ in range(epochs):
        perm = torch.randperm(len(images), generator=g)
        total = 0.0
        for i in range(0, len(images), batch_size):
            idx = perm[i:i + batch_size]
            with torch.no_grad():
                _, taps, _ = model.forward_all(images[idx])
            loss = sum(F.cross_entropy(p(t).mean(dim=(2, 3)), labels[idx])
                       for p, t in zip(model.projections, taps[:-1]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(images))
    return losses


def train_teacher(dataset, config: TeacherConfig, eval_dataset=None):
    """Train a teacher classifier (and its CAM probes). Returns (model, metrics)."""
    if dataset is None or len(dataset) == 0:
        raise ConfigError("teacher training set is empty")
    x, y = dataset.tensors()
    model = _seeded(lambda: Classifier(x.shape[1], dataset.num_classes, config.widths, config.convs_per_stage),
                    config.seed)
    ex = ey = None
    if eval_dataset is not None and len(eval_dataset):
        ex, ey = eval_dataset.tensors()
    history = train_classifier(model, x, y, config, ex, ey)
    probe = fit_projections(model, x, y, epochs=config.probe_epochs, seed=config.seed)
    final = history[-1] if history else {}
    acc = final.get("eval_acc", final.get("train_acc", 0.0))
    metrics = {"history": history, "probe_losses": probe, "train_acc": final.get("train_acc"),
               "eval_acc": final.get("eval_acc")}
    if acc < config.accuracy_floor:
        raise DivergenceError(f"teacher accuracy {acc:.4f} below floor {config.accuracy_floor}", metrics)
    return model, metrics


@dataclass
class DenoiserConfig:
    width: int = 32
    emb_dim: int = 64
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    p_uncond: float = 0.1
    schedule_kind: str = "cosine"
    alpha_min: float = 1e-4
    patience: int = 30


def train_denoiser(dataset, config: DenoiserConfig, codec=None):
    """Epsilon-prediction training with condition dropout. Returns (model, metrics).

    Noise levels are drawn from the continuous schedule so the network can be
    sampled with any number of steps.
    """
    if dataset is None or len(dataset) == 0:
        raise ConfigError("denoiser training set is empty")
    x, y = dataset.tensors()
    if codec is not None:
        with torch.no_grad():
            x = codec.encode(x)
    model = _seeded(lambda: Denoiser(x.shape[1], config.width, dataset.num_classes, config.emb_dim), config.seed)
    torch.manual_seed(config.seed)
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    steps_per_epoch = math.ceil(len(x) / config.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.epochs * steps_per_epoch)
    history = []
    best, stale = float("inf"), 0
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(len(x), generator=g)
        total = 0.0
        for i in range(0, len(x), config.batch_size):
            idx = perm[i:i + config.batch_size]
            x0, c = x[idx], y[idx].clone()
            drop = torch.rand(len(idx), generator=g) < config.p_uncond
            c[drop] = model.null_condition
            tau = torch.rand(len(idx), generator=g) * (1 - 1e-3) + 1e-3
            a = continuous_alpha_bar(config.schedule_kind, tau, config.alpha_min)
            eps = torch.randn(x0.shape, generator=g)
            zt = a.sqrt()[:, None, None, None] * x0 + (1 - a).sqrt()[:, None, None, None] * eps
            loss = F.mse_loss(model(zt, a, c), eps)
            if not torch.isfinite(loss):
                raise DivergenceError("non-finite denoiser loss", {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        epoch_loss = total / len(x)
        history.append({"epoch": epoch, "loss": epoch_loss})
        if epoch_loss < best - 1e-6:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                raise DivergenceError(f"denoiser loss did not improve for {config.patience} epochs",
                                      {"history": history[-config.patience:]})
    model.eval()
    return model, {"history": history, "final_loss": history[-1]["loss"] if history else None}


def _seeded(factory, seed):
    torch.manual_seed(seed)
    return factory()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_ARCHS = {cls.arch_tag: cls for cls in (Denoiser, Classifier, IdentityCodec, ConvAutoencoder)}


def state_hash(module: nn.Module) -> str:
    """sha256 over the module's state dict in key order."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, module: nn.Module, config_hash: str = "", seed: int = 0, extra: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": module.arch_tag,
        "arch_kwargs": dict(module.arch_kwargs),
        "state_dict": module.state_dict(),
        "config_hash": config_hash,
        "seed": int(seed),
        "extra": dict(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return state_hash(module)


def load_checkpoint(path):
    """Rebuild the module stored at ``path``. Returns (module, metadata)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')}")
    cls = _ARCHS[payload["arch"]]
    module = cls(**payload["arch_kwargs"])
    module.load_state_dict(payload["state_dict"])
    module.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return module, meta


def frozen_copy(module: nn.Module) -> nn.Module:
    m = copy.deepcopy(module).eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m
