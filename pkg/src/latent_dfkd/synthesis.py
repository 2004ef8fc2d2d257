"""Teacher-guided sampling, latent augmentation and the on-disk synthetic set.

One generation round draws a batch of latents, walks the sampler from T down
to 1 and at every step:

1. takes a gradient step on z_t against the inversion loss of the decoded
   predicted clean image,
2. on the augmentation grid (every k steps counted from T) mixes latents,
3. re-predicts the clean latent and, on harvest steps, decodes it into a record,
4. moves to t-1 with the ancestral update.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .diffusion import (GuidanceSpec, LatentBatch, NoiseSchedule, ancestral_step, classifier_free_noise,
                        noise_generator, predict_x0)
from .errors import ConfigError, ContractError, NonFiniteError
from .losses import InversionWeights, inversion_loss

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "cutmix", "mixup", "traditional")


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit seed for the stream named by ``keys``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def default_period(total_steps: int) -> int:
    """Augmentation/harvest period giving four harvests for typical step counts (e.g. T=10 -> 3)."""
    return max(1, math.ceil(total_steps / 4))


def harvest_timesteps(total_steps: int, period: int) -> List[int]:
    """{T-k, T-2k, ...} down to 0, with the final clean sample always included."""
    if period < 1 or period > total_steps:
        raise ConfigError(f"period k={period} must satisfy 1 <= k <= T={total_steps}")
    steps = list(range(total_steps - period, -1, -period))
    if steps[-1] != 0:
        steps.append(0)
    return steps


def on_augment_grid(total_steps: int, period: int, t: int) -> bool:
    """True when t is reached after a whole number of k-step blocks from T."""
    return t < total_steps and (total_steps - t) % period == 0


@dataclass
class SynthesisConfig:
    total_steps: int = 10
    lca_period: Optional[int] = None
    rounds: int = 1
    batch_size: int = 32
    num_classes: int = 2
    guidance_scale: float = 3.0
    weights: InversionWeights = field(default_factory=InversionWeights)
    edit_steps_per_t: int = 1
    lca_area_max: float = 0.5
    augmentation: str = "cutmix"
    cross_class_mix: bool = False
    grad_clip: Optional[float] = 1.0
    grad_through_eps: bool = True
    deterministic: bool = False
    clip_x0: bool = True
    schedule_kind: str = "cosine"
    alpha_min: float = 1e-4
    gamma_ramp_rounds: int = 1
    bn_layer_ids: Optional[List[int]] = None
    condition_map: Optional[List[int]] = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = InversionWeights(**self.weights)
        self.validate()

    @property
    def period(self) -> int:
        return default_period(self.total_steps) if self.lca_period is None else int(self.lca_period)

    def validate(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 1 <= self.period <= self.total_steps:
            raise ConfigError(f"lca_period k={self.period} must satisfy 1 <= k <= T={self.total_steps}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.guidance_scale < 1:
            raise ConfigError("guidance_scale must be >= 1")
        if self.edit_steps_per_t < 0:
            raise ConfigError("edit_steps_per_t must be >= 0")
        if not 0 < self.lca_area_max <= 1:
            raise ConfigError("lca_area_max must lie in (0, 1]")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.gamma_ramp_rounds < 1:
            raise ConfigError("gamma_ramp_rounds must be >= 1")

    def harvest_steps(self) -> List[int]:
        return harvest_timesteps(self.total_steps, self.period)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_kind(self.schedule_kind, self.total_steps, self.alpha_min)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d


@dataclass
class SyntheticRecord:
    image: torch.Tensor
    label: int
    harvest_t: int
    round: int
    teacher_confidence: float
    seed: int
    item: int
    lca_applied: bool = False


# ---------------------------------------------------------------------------
# noise prediction and latent editing
# ---------------------------------------------------------------------------

def guided_eps(denoiser, z: torch.Tensor, t: int, schedule: NoiseSchedule, guidance: GuidanceSpec):
    """Classifier-free guided noise prediction; one batched forward pass."""
    a = torch.tensor(schedule.alpha(t), dtype=z.dtype)
    cond = torch.as_tensor(guidance.condition, dtype=torch.long)
    if guidance.scale == 1:
        return denoiser(z, a, cond)
    null = torch.full_like(cond, guidance.null_condition)
    eps = denoiser(torch.cat([z, z]), a, torch.cat([cond, null]))
    eps_c, eps_u = eps.chunk(2)
    return classifier_free_noise(eps_c, eps_u, guidance)


def _clip(x0, on):
    return x0.clamp(-1.0, 1.0) if on else x0


def inversion_objective(z: torch.Tensor, targets, teacher, student, denoiser, codec, schedule, t,
                        w: InversionWeights, guidance: GuidanceSpec, grad_through_eps=True,
                        bn_layer_ids=None, clip_x0=False):
    """Inversion loss of the decoded clean-image prediction made from ``z``."""
    eps = guided_eps(denoiser, z, t, schedule, guidance)
    if not grad_through_eps:
        eps = eps.detach()
    x0 = _clip(predict_x0(z, eps, schedule, t), clip_x0)
    return inversion_loss(codec.decode(x0), targets, teacher, student, w, bn_layer_ids)


def inversion_grad(z: torch.Tensor, targets, teacher, student, denoiser, codec, schedule, t,
                   w: InversionWeights, guidance: GuidanceSpec, **kw):
    """Raw (unclipped) gradient of the inversion objective with respect to z."""
    z = z.detach().requires_grad_(True)
    with torch.enable_grad():
        loss, breakdown = inversion_objective(z, targets, teacher, student, denoiser, codec, schedule, t,
                                              w, guidance, **kw)
        (grad,) = torch.autograd.grad(loss, z, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(z)
    return grad, breakdown


def clip_per_item(grad: torch.Tensor, max_norm: Optional[float]) -> torch.Tensor:
    if max_norm is None:
        return grad
    norms = grad.flatten(1).norm(dim=1).clamp_min(1e-12)
    scale = (max_norm / norms).clamp(max=1.0)
    return grad * scale.view(-1, *([1] * (grad.dim() - 1)))


def edit_latent(z: LatentBatch, teacher, student, denoiser, codec, schedule: NoiseSchedule,
                w: InversionWeights, guidance: GuidanceSpec, steps: int = 1, grad_clip: Optional[float] = 1.0,
                grad_through_eps: bool = True, bn_layer_ids=None, clip_x0: bool = False,
                breakdowns: Optional[list] = None) -> LatentBatch:
    """Gradient-descent edit of z_t on the inversion loss, ``steps`` times.

    Raises NonFiniteError naming the offending term when the gradient or the
    loss stops being finite.
    """
    if w.eta < 0:
        raise ContractError("eta must be >= 0")
    if not 1 <= z.timestep <= schedule.num_steps:
        raise ContractError(f"cannot edit at timestep {z.timestep}")
    if w.eta == 0 or steps == 0:
        return z
    data = z.data
    for _ in range(steps):
        grad, breakdown = inversion_grad(data, z.class_targets, teacher, student, denoiser, codec, schedule,
                                         z.timestep, w, guidance, grad_through_eps=grad_through_eps,
                                         bn_layer_ids=bn_layer_ids, clip_x0=clip_x0)
        if breakdowns is not None:
            breakdowns.append(breakdown)
        if not torch.isfinite(grad).all():
            bad = [k for k, v in breakdown.items() if not math.isfinite(v)]
            raise NonFiniteError(f"non-finite latent gradient at t={z.timestep}",
                                 term=bad[0] if bad else "gradient", timestep=z.timestep)
        data = data - w.eta * clip_per_item(grad, grad_clip)
    return z.replace(data=data.detach())


# ---------------------------------------------------------------------------
# latent augmentations
# ---------------------------------------------------------------------------

@dataclass
class MixInfo:
    kind: str
    pairs: list = field(default_factory=list)
    warning: Optional[str] = None

    def applied_mask(self, n):
        mask = np.zeros(n, dtype=bool)
        for p in self.pairs:
            mask[p["target"]] = True
        return mask


def _partners(labels: np.ndarray, rng: np.random.Generator, cross_class: bool):
    out = []
    for i in range(len(labels)):
        pool = np.flatnonzero(labels == labels[i]) if not cross_class else np.arange(len(labels))
        pool = pool[pool != i]
        out.append(int(rng.choice(pool)) if len(pool) else None)
    return out


def cutmix_box(height, width, lam, rng):
    """Box (h0, h1, w0, w1) covering a fraction ~lam of the grid at a uniform valid position."""
    r = math.sqrt(max(0.0, min(1.0, lam)))
    bh, bw = int(round(height * r)), int(round(width * r))
    h0 = int(rng.integers(0, height - bh + 1))
    w0 = int(rng.integers(0, width - bw + 1))
    return h0, h0 + bh, w0, w0 + bw


def latent_cutmix(batch: LatentBatch, rng: np.random.Generator, area_max: float = 0.5,
                  lam: Optional[float] = None, cross_class: bool = False):
    """Paste a random box from a partner latent into every item.

    Partners share the item's label unless ``cross_class``. Sources are read
    from the unmixed batch. Returns the new batch and a MixInfo whose pairs
    record target, partner, box and sampled area for audit.
    """
    n = len(batch)
    if n < 2:
        return batch, MixInfo("cutmix", warning="batch_size<2: identity")
    labels = batch.class_targets.numpy()
    src = batch.data
    out = src.clone()
    H, W = src.shape[-2:]
    info = MixInfo("cutmix")
    for i, j in enumerate(_partners(labels, rng, cross_class)):
        if j is None:
            continue
        area = float(rng.uniform(0.0, area_max)) if lam is None else float(lam)
        h0, h1, w0, w1 = cutmix_box(H, W, area, rng)
        if h1 > h0 and w1 > w0:
            out[i, :, h0:h1, w0:w1] = src[j, :, h0:h1, w0:w1]
        info.pairs.append({"target": i, "partner": j, "box": [h0, h1, w0, w1], "lam": area,
                           "area": (h1 - h0) * (w1 - w0) / (H * W)})
    return batch.replace(data=out), info


def latent_mixup(batch: LatentBatch, rng: np.random.Generator, cross_class: bool = False, **_):
    """Convex blend with a partner, coefficient ~ Beta(1, 1)."""
    n = len(batch)
    if n < 2:
        return batch, MixInfo("mixup", warning="batch_size<2: identity")
    labels = batch.class_targets.numpy()
    src = batch.data
    out = src.clone()
    info = MixInfo("mixup")
    for i, j in enumerate(_partners(labels, rng, cross_class)):
        if j is None:
            continue
        lam = float(rng.beta(1.0, 1.0))
        out[i] = lam * src[i] + (1 - lam) * src[j]
        info.pairs.append({"target": i, "partner": j, "lam": lam})
    return batch.replace(data=out), info


def latent_traditional(batch: LatentBatch, rng: np.random.Generator, max_shift: int = 1, **_):
    """Random horizontal flip plus an integer translation of up to ``max_shift`` cells."""
    out = batch.data.clone()
    info = MixInfo("traditional")
    for i in range(len(batch)):
        flip = bool(rng.random() < 0.5)
        dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        x = out[i]
        if flip:
            x = torch.flip(x, dims=(-1,))
        x = torch.roll(x, shifts=(dy, dx), dims=(-2, -1))
        out[i] = x
        info.pairs.append({"target": i, "flip": flip, "shift": [dy, dx]})
    return batch.replace(data=out), info


def augment_latents(kind: str, batch: LatentBatch, rng, area_max=0.5, cross_class=False):
    if kind == "cutmix":
        return latent_cutmix(batch, rng, area_max=area_max, cross_class=cross_class)
    if kind == "mixup":
        return latent_mixup(batch, rng, cross_class=cross_class)
    if kind == "traditional":
        return latent_traditional(batch, rng)
    if kind == "none":
        return batch, MixInfo("none")
    raise ConfigError(f"unknown augmentation {kind!r}")


# ---------------------------------------------------------------------------
# generation round
# ---------------------------------------------------------------------------

def _frozen(module):
    if module is None:
        return None
    m = copy.deepcopy(module).eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


def round_labels(cfg: SynthesisConfig) -> torch.Tensor:
    """Balanced class assignment, items of a class kept contiguous."""
    return (torch.arange(cfg.batch_size) * cfg.num_classes) // cfg.batch_size


def generate_round(round_index: int, teacher, student, denoiser, codec, schedule: Optional[NoiseSchedule],
                   cfg: SynthesisConfig, metrics: Optional[list] = None,
                   invocation_log: Optional[list] = None) -> List[SyntheticRecord]:
    """Run one guided sampling pass and return the harvested records.

    ``metrics`` collects one loss-breakdown dict per edited timestep and
    ``invocation_log`` one entry per augmentation call.
    """
    cfg.validate()
    schedule = schedule or cfg.schedule()
    if schedule.num_steps != cfg.total_steps:
        raise ConfigError(f"schedule has {schedule.num_steps} steps, config says {cfg.total_steps}")
    T, k = cfg.total_steps, cfg.period
    harvest = set(cfg.harvest_steps())
    seed = derive_seed(cfg.seed, round_index)
    gen = noise_generator(seed)
    mix_rng = np.random.default_rng(derive_seed(cfg.seed, round_index, 1))

    teacher, student, denoiser = _frozen(teacher), _frozen(student), _frozen(denoiser)
    dtype = next(denoiser.parameters()).dtype
    ramp = min(1.0, (round_index + 1) / cfg.gamma_ramp_rounds)
    w = InversionWeights(**{**cfg.weights.to_dict(), "gamma": cfg.weights.gamma * ramp})
    if w.gamma == 0:
        student = None

    labels = round_labels(cfg)
    cond = labels if cfg.condition_map is None else torch.as_tensor(cfg.condition_map)[labels]
    guidance = GuidanceSpec(cfg.guidance_scale, cond, denoiser.null_condition)
    shape = (cfg.batch_size, *codec.latent_shape)
    z = LatentBatch(torch.randn(shape, generator=gen).to(dtype), T, labels, seed, cfg.num_classes)

    records: List[SyntheticRecord] = []
    for t in range(T, 0, -1):
        edits: list = []
        with torch.no_grad():
            z = edit_latent(z, teacher, student, denoiser, codec, schedule, w, guidance,
                            steps=cfg.edit_steps_per_t, grad_clip=cfg.grad_clip,
                            grad_through_eps=cfg.grad_through_eps, bn_layer_ids=cfg.bn_layer_ids,
                            clip_x0=cfg.clip_x0, breakdowns=edits)
            h = t - 1
            applied = np.zeros(len(z), dtype=bool)
            if cfg.augmentation != "none" and on_augment_grid(T, k, h):
                z, info = augment_latents(cfg.augmentation, z, mix_rng, cfg.lca_area_max, cfg.cross_class_mix)
                applied = info.applied_mask(len(z))
                if invocation_log is not None:
                    invocation_log.append({"round": round_index, "timestep": h, "kind": info.kind,
                                           "pairs": info.pairs, "warning": info.warning})
            eps = guided_eps(denoiser, z.data, t, schedule, guidance)
            x0 = _clip(predict_x0(z, eps, schedule), cfg.clip_x0)
            if not torch.isfinite(x0).all():
                raise NonFiniteError(f"non-finite latent in round {round_index} at t={t}",
                                     term="latent", timestep=t)
            if metrics is not None:
                rec = edits[-1] if edits else _loss_only(x0, labels, teacher, student, codec, w, cfg)
                metrics.append({"round": round_index, "timestep": h, **rec})
            if h in harvest:
                images = codec.decode(x0).clamp(-1, 1).float()
                probs = F.softmax(teacher(images.to(dtype)), dim=1)
                conf = probs.gather(1, labels[:, None]).squeeze(1)
                for i in range(len(z)):
                    records.append(SyntheticRecord(images[i].clone(), int(labels[i]), h, round_index,
                                                   float(conf[i]), seed, i, bool(applied[i])))
            noise = eps if cfg.deterministic else torch.randn(shape, generator=gen).to(dtype)
            z = z.replace(data=ancestral_step(x0, schedule, t, noise), timestep=h)
    return records


def _loss_only(x0, labels, teacher, student, codec, w, cfg):
    _, breakdown = inversion_loss(codec.decode(x0), labels, teacher, student, w, cfg.bn_layer_ids)
    return breakdown


# ---------------------------------------------------------------------------
# manifest on disk
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.jsonl"
META_NAME = "manifest_meta.json"
MANIFEST_VERSION = 1


def save_image(path, image: torch.Tensor):
    """Write a [C, H, W] image in [-1, 1] as an 8-bit PNG."""
    arr = ((image.detach().cpu().clamp(-1, 1).numpy() + 1.0) * 127.5).round().astype(np.uint8)
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB")
    img.save(path, format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr / 127.5 - 1.0


@dataclass
class SyntheticManifest:
    root: Path
    records: list
    config_hash: str = ""
    num_classes: int = 0
    valid: bool = True
    aborted_rounds: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def per_class_counts(self):
        counts = [0] * self.num_classes
        for r in self.records:
            counts[r["label"]] += 1
        return counts

    def load_arrays(self):
        """(images [N, C, H, W] float32 in [-1, 1], labels [N] int64)."""
        imgs = np.stack([load_image(self.root / r["path"]) for r in self.records])
        labels = np.asarray([r["label"] for r in self.records], dtype=np.int64)
        return imgs, labels

    def digest(self) -> str:
        h = hashlib.sha256((self.root / MANIFEST_NAME).read_bytes())
        for r in self.records:
            h.update((self.root / r["path"]).read_bytes())
        return h.hexdigest()

    @classmethod
    def load(cls, root):
        root = Path(root)
        if not (root / META_NAME).exists():
            raise ContractError(f"no synthetic manifest under {root}; run generate first")
        meta = json.loads((root / META_NAME).read_text())
        if meta.get("version") != MANIFEST_VERSION:
            raise ContractError(f"unsupported manifest version {meta.get('version')}")
        with open(root / MANIFEST_NAME) as f:
            records = [json.loads(line) for line in f if line.strip()]
        return cls(root, records, meta["config_hash"], meta["num_classes"], meta["valid"],
                   meta.get("aborted_rounds", []))


def _write_meta(root: Path, manifest: SyntheticManifest, extra: dict):
    meta = {"version": MANIFEST_VERSION, "config_hash": manifest.config_hash,
            "num_classes": manifest.num_classes, "valid": manifest.valid,
            "total": len(manifest), "per_class_counts": manifest.per_class_counts,
            "aborted_rounds": manifest.aborted_rounds, **extra}
    (root / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_records(root: Path, records: List[SyntheticRecord], manifest: SyntheticManifest):
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for r in records:
        rel = f"images/r{r.round:03d}_i{r.item:04d}_t{r.harvest_t:03d}.png"
        save_image(root / rel, r.image)
        manifest.records.append({"path": rel, "label": r.label, "harvest_t": r.harvest_t, "round": r.round,
                                 "teacher_confidence": round(r.teacher_confidence, 6),
                                 "lca_applied": r.lca_applied, "seed": r.seed})


def build_dataset(out_dir, teacher, student, denoiser, codec, schedule, cfg: SynthesisConfig,
                  rounds: Optional[int] = None, config_hash: str = "", metrics_path=None,
                  round_hook: Optional[Callable] = None, invocation_log: Optional[list] = None):
    """Generate ``rounds`` rounds and write images, manifest and metadata under ``out_dir``.

    A round that produces non-finite values is dropped and listed in
    ``aborted_rounds``. If writing fails the metadata is marked invalid and the
    error re-raised. ``round_hook(i, manifest)`` runs before round i and may
    return a replacement student (used for alternating generation/distillation).
    """
    rounds = cfg.rounds if rounds is None else rounds
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = SyntheticManifest(root, [], config_hash, cfg.num_classes)
    metric_rows: list = []
    extra = {"harvest_steps": cfg.harvest_steps(), "rounds": rounds, "synthesis": cfg.to_dict()}
    tmp = root / (MANIFEST_NAME + ".tmp")
    try:
        for i in range(rounds):
            if round_hook is not None:
                student = round_hook(i, manifest) or student
            try:
                recs = generate_round(i, teacher, student, denoiser, codec, schedule, cfg, metric_rows,
                                      invocation_log)
            except NonFiniteError as exc:
                logger.warning("round %d aborted: %s (term=%s)", i, exc, exc.term)
                manifest.aborted_rounds.append({"round": i, "term": exc.term, "timestep": exc.timestep})
                continue
            write_records(root, recs, manifest)
        with open(tmp, "w") as f:
            for r in manifest.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        os.replace(tmp, root / MANIFEST_NAME)
    except OSError:
        manifest.valid = False
        try:
            _write_meta(root, manifest, extra)
        except OSError:
            pass
        raise
    if metrics_path is not None:
        with open(metrics_path, "w") as f:
            for row in metric_rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    _write_meta(root, manifest, extra)
    return manifest
