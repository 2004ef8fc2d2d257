"""Student training on synthetic data: tempered KL plus class-activation-map alignment.

The CAM term compares L2-normalised class activation maps of paired
student/teacher stages. The final stage is weighted by the classifier head;
earlier stages use each network's 1x1 tap projection (fitted as probes for the
teacher, trained jointly for the student).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DivergenceError
from .losses import tempered_kl
from .nets import Classifier, recalibrate_bn, state_hash

logger = logging.getLogger(__name__)


@dataclass
class KDConfig:
    weight_kl: float = 1.0
    weight_cam: float = 1.0
    kd_temperature: float = 4.0
    layer_pairs: List[Tuple[int, int]] = field(default_factory=lambda: [(0, 0), (1, 1), (2, 2)])
    epochs_per_round: int = 20
    lr: float = 2e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.layer_pairs = [tuple(int(v) for v in p) for p in self.layer_pairs]
        self.validate()

    def validate(self):
        if self.weight_kl < 0 or self.weight_cam < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.kd_temperature <= 0:
            raise ConfigError("kd_temperature must be > 0")
        if self.weight_cam > 0 and not self.layer_pairs:
            raise ConfigError("layer_pairs must be non-empty when weight_cam > 0")
        if self.epochs_per_round < 0:
            raise ConfigError("epochs_per_round must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["layer_pairs"] = [list(p) for p in self.layer_pairs]
        return d


def kd_kl_loss(teacher_logits, student_logits, temperature) -> torch.Tensor:
    """temperature^2 * KL(teacher || student) on tempered softmaxes, batch mean."""
    return temperature ** 2 * tempered_kl(teacher_logits, student_logits, temperature)


@dataclass
class CAMap:
    map: torch.Tensor
    labels: torch.Tensor
    tap: int = -1
    normalized: bool = True
    zero: Optional[torch.Tensor] = None


def compute_cam(features: torch.Tensor, head_weights: torch.Tensor, class_labels, tap: int = -1,
                normalize: bool = True) -> CAMap:
    """Per-item map sum_c w[y, c] * F_c, optionally L2-normalised over the grid.

    All-zero maps stay zero and are flagged in ``CAMap.zero``.
    """
    if features.dim() != 4:
        raise ContractError("features must be [B, C, H, W]")
    if head_weights.dim() != 2 or head_weights.shape[1] != features.shape[1]:
        raise ContractError(f"head weights {tuple(head_weights.shape)} incompatible with "
                            f"{features.shape[1]} feature channels")
    labels = torch.as_tensor(class_labels, dtype=torch.long)
    w = head_weights[labels].to(features.dtype)
    cam = torch.einsum("bc,bchw->bhw", w, features)
    norms = cam.flatten(1).norm(dim=1)
    zero = norms == 0
    if normalize:
        cam = cam / torch.where(zero, torch.ones_like(norms), norms)[:, None, None]
    return CAMap(cam, labels, tap, normalize, zero)


def cam_distance(student_cam: CAMap, teacher_cam: CAMap) -> torch.Tensor:
    """MSE between maps after resizing the student map to the teacher grid."""
    s, t = student_cam.map, teacher_cam.map
    if s.shape[-2:] != t.shape[-2:]:
        s = F.interpolate(s[:, None], size=t.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
        norms = s.flatten(1).norm(dim=1)
        s = s / torch.where(norms == 0, torch.ones_like(norms), norms)[:, None, None]
    return F.mse_loss(s, t)


def cam_alignment_loss(student_taps: Sequence[torch.Tensor], teacher_taps: Sequence[torch.Tensor],
               student_weights: Sequence[torch.Tensor], teacher_weights: Sequence[torch.Tensor],
               labels, layer_pairs) -> torch.Tensor:
    """Sum over (student tap i, teacher tap j) pairs of the normalised-CAM MSE.

    ``student_weights[i]`` / ``teacher_weights[j]`` are the class-weight
    matrices of the corresponding taps.
    """
    if not layer_pairs:
        raise ConfigError("layer_pairs is empty")
    total = None
    for i, j in layer_pairs:
        cs = compute_cam(student_taps[i], student_weights[i], labels, i)
        ct = compute_cam(teacher_taps[j], teacher_weights[j], labels, j)
        d = cam_distance(cs, ct)
        total = d if total is None else total + d
    return total


def _cam_weights(model: Classifier):
    return [model.cam_weights(k) for k in range(model.num_taps)]


def distillation_loss(student: Classifier, teacher: Classifier, images, labels, cfg: KDConfig):
    """(total, L_KL, L_cam) for one batch. The teacher runs without gradients."""
    with torch.no_grad():
        t_logits, t_taps, _ = teacher.forward_all(images)
        t_weights = [w.detach() for w in _cam_weights(teacher)]
    s_logits, s_taps, _ = student.forward_all(images)
    l_kl = kd_kl_loss(t_logits, s_logits, cfg.kd_temperature)
    if cfg.weight_cam > 0:
        l_cam = cam_alignment_loss(s_taps, t_taps, _cam_weights(student), t_weights, labels, cfg.layer_pairs)
    else:
        l_cam = torch.zeros((), dtype=l_kl.dtype)
    total = cfg.weight_kl * l_kl + cfg.weight_cam * l_cam
    return total, l_kl, l_cam


def check_pairs(student: Classifier, teacher: Classifier, layer_pairs, image_shape):
    """Raise if any paired taps cannot be resized onto each other (empty maps)."""
    x = torch.zeros((2, *image_shape))
    with torch.no_grad():
        s_taps = student.eval().forward_all(x)[1]
        t_taps = teacher.forward_all(x)[1]
    for i, j in layer_pairs:
        if not (0 <= i < len(s_taps) and 0 <= j < len(t_taps)):
            raise ConfigError(f"layer pair ({i}, {j}) out of range")
        if min(s_taps[i].shape[-2:]) < 1 or min(t_taps[j].shape[-2:]) < 1:
            raise ConfigError(f"layer pair ({i}, {j}) has an empty feature map")


def distill_round(student: Classifier, teacher: Classifier, images, labels, cfg: KDConfig,
                  eval_images=None, eval_labels=None, round_index: int = 0, step_log: Optional[list] = None):
    """Train ``student`` in place for ``cfg.epochs_per_round`` epochs on (images, labels).

    ``images``/``labels`` are the synthetic set (labels feed the CAM class).
    Returns per-epoch metric dicts. A non-finite loss restores the last good
    student state and raises DivergenceError.
    """
    cfg.validate()
    images = torch.as_tensor(images, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(images) == 0:
        raise ConfigError("synthetic set is empty")
    teacher = teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    if cfg.weight_cam > 0:
        check_pairs(student, teacher, cfg.layer_pairs, images.shape[1:])

    torch.manual_seed(cfg.seed + 7919 * round_index)
    g = torch.Generator().manual_seed(cfg.seed + 7919 * round_index)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs_per_round, 1))
    last_good = copy.deepcopy(student.state_dict())
    history = []
    for epoch in range(cfg.epochs_per_round):
        student.train()
        perm = torch.randperm(len(images), generator=g)
        sums = np.zeros(3)
        seen = 0
        for i in range(0, len(images), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            total, l_kl, l_cam = distillation_loss(student, teacher, images[idx], labels[idx], cfg)
            if not torch.isfinite(total):
                student.load_state_dict(last_good)
                raise DivergenceError("non-finite distillation loss; restored last good student",
                                      {"round": round_index, "epoch": epoch, "step": i // cfg.batch_size})
            opt.zero_grad()
            total.backward()
            opt.step()
            row = (total.item(), l_kl.item(), l_cam.item())
            if step_log is not None:
                step_log.append({"round": round_index, "epoch": epoch, "total": row[0], "L_KL": row[1],
                                 "L_cam": row[2], "weight_kl": cfg.weight_kl, "weight_cam": cfg.weight_cam})
            sums += np.asarray(row) * len(idx)
            seen += len(idx)
        sched.step()
        recalibrate_bn(student, images)
        last_good = copy.deepcopy(student.state_dict())
        rec = {"round": round_index, "epoch": epoch, "total": sums[0] / max(seen, 1),
               "L_KL": sums[1] / max(seen, 1), "L_cam": sums[2] / max(seen, 1)}
        if eval_images is not None:
            rec["eval_acc"] = accuracy(student, eval_images, eval_labels)
        history.append(rec)
    student.eval()
    return history


def accuracy(model, images, labels, batch_size=512) -> float:
    return evaluate(model, images, labels, batch_size=batch_size)["accuracy"]


def evaluate(model, images, labels, num_classes: Optional[int] = None, batch_size: int = 512) -> dict:
    """Top-1 accuracy, per-class recall and confusion counts (rows = true class)."""
    images = torch.as_tensor(images, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(images) == 0:
        raise ContractError("evaluation set is empty")
    out_classes = model.num_classes if hasattr(model, "num_classes") else None
    num_classes = num_classes or out_classes or int(labels.max()) + 1
    if out_classes is not None and out_classes != num_classes:
        raise ContractError(f"model predicts {out_classes} classes, evaluation set has {num_classes}")
    if int(labels.max()) >= num_classes:
        raise ContractError("evaluation labels outside the model's class space")
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            preds.append(model(images[i:i + batch_size].to(next(model.parameters()).dtype)).argmax(1))
    pred = torch.cat(preds).numpy()
    y = labels.numpy()
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    support = conf.sum(1)
    recall = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    return {"accuracy": float((pred == y).mean()), "per_class_recall": recall.tolist(),
            "confusion": conf.tolist(), "n": int(len(y))}


def teacher_fingerprint(teacher) -> str:
    return state_hash(teacher)
