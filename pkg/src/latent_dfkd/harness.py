"""Experiment orchestration: run configs, stage functions, provenance and ablations.

A run directory looks like::

    <out>/config.json            resolved RunConfig
    <out>/run_manifest.jsonl      append-only stage events
    <out>/data/{teacher,generator,heldout}.npz
    <out>/checkpoints/*.pt
    <out>/synthetic/              images + manifest.jsonl + manifest_meta.json
    <out>/metrics/*.jsonl
    <out>/figures/*.png

Every stage embeds the hash of the resolved config in what it writes, and
checks the stage hashes of its inputs before using them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from .data import DEFAULT_STYLES, ImageDataset, generator_corpus, load_digits, make_bars_split, split_dataset
from .distill import KDConfig, distill_round, evaluate
from .errors import ConfigError, ContractError
from .losses import InversionWeights
from .nets import (Classifier, ConvAutoencoder, DenoiserConfig, IdentityCodec, TeacherConfig, load_checkpoint,
                   save_checkpoint, state_hash, train_codec, train_denoiser, train_teacher)
from .synthesis import SyntheticManifest, SynthesisConfig, build_dataset, generate_round

logger = logging.getLogger(__name__)

CONFIG_SCHEMA = "latent_dfkd.run_config"
CONFIG_VERSION = 1
ARMS = ("none", "traditional", "mixup", "cutmix")


@dataclass
class DatasetSpec:
    source: str = "digits"
    classes: Optional[List[int]] = None
    resolution: int = 16
    # teacher-train / generator-corpus / held-out; the generator portion is disjoint from the others
    fractions: List[float] = field(default_factory=lambda: [0.4, 0.3, 0.3])
    styles: List[List[float]] = field(default_factory=lambda: [list(s) for s in DEFAULT_STYLES])
    split_seed: int = 0

    def validate(self):
        if self.source not in ("digits", "bars"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if len(self.fractions) != 3:
            raise ConfigError("fractions must list teacher/generator/held-out shares")
        if self.resolution % 4:
            raise ConfigError("resolution must be a multiple of 4")


@dataclass
class StudentSpec:
    widths: List[int] = field(default_factory=lambda: [8, 16, 32])
    convs_per_stage: int = 1


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: TeacherConfig = field(default_factory=lambda: TeacherConfig(epochs=30, accuracy_floor=0.9))
    student: StudentSpec = field(default_factory=StudentSpec)
    denoiser: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(width=16, epochs=15, batch_size=128,
                                                                          lr=3e-3))
    codec: str = "identity"
    synthesis: SynthesisConfig = field(default_factory=lambda: SynthesisConfig(
        batch_size=40, num_classes=10, rounds=8, weights=InversionWeights(eta=2.0)))
    kd: KDConfig = field(default_factory=lambda: KDConfig(epochs_per_round=30))
    mode: str = "two-stage"
    seed: int = 0
    schema: str = CONFIG_SCHEMA
    version: int = CONFIG_VERSION

    def validate(self):
        if self.schema != CONFIG_SCHEMA or self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config schema {self.schema} v{self.version}")
        self.dataset.validate()
        self.synthesis.validate()
        self.kd.validate()
        if self.mode not in ("two-stage", "alternating"):
            raise ConfigError("mode must be 'two-stage' or 'alternating'")
        if self.codec not in ("identity", "autoencoder"):
            raise ConfigError("codec must be 'identity' or 'autoencoder'")
        n = len(self.dataset.classes) if self.dataset.classes else (2 if self.dataset.source == "bars" else 10)
        if self.synthesis.num_classes != n:
            raise ConfigError(f"synthesis.num_classes={self.synthesis.num_classes} but dataset has {n} classes")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthesis"] = self.synthesis.to_dict()
        d["kd"] = self.kd.to_dict()
        d["teacher"]["widths"] = list(self.teacher.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = json.loads(json.dumps(d))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "dataset" in d:
                kw["dataset"] = DatasetSpec(**d["dataset"])
            if "teacher" in d:
                kw["teacher"] = TeacherConfig(**{**d["teacher"], "widths": tuple(d["teacher"].get("widths",
                                                                                               (16, 32, 64)))})
            if "student" in d:
                kw["student"] = StudentSpec(**d["student"])
            if "denoiser" in d:
                kw["denoiser"] = DenoiserConfig(**d["denoiser"])
            if "synthesis" in d:
                syn = dict(d["synthesis"])
                syn["weights"] = InversionWeights(**syn.get("weights", {}))
                kw["synthesis"] = SynthesisConfig(**syn)
            if "kd" in d:
                kw["kd"] = KDConfig(**d["kd"])
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        return cls(**kw).validate()

    def with_overrides(self, overrides: Dict[str, object]) -> "RunConfig":
        """Copy with dotted-path overrides applied, e.g. {"synthesis.lca_period": 3}."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    def hash(self) -> str:
        return canonical_hash(self.to_dict())

    def stage_hashes(self) -> Dict[str, str]:
        """Hashes of the config slices each stage depends on, chained downstream."""
        d = self.to_dict()
        data = canonical_hash(d["dataset"])
        teacher = canonical_hash({"data": data, "teacher": d["teacher"]})
        denoiser = canonical_hash({"data": data, "denoiser": d["denoiser"], "codec": d["codec"]})
        generate = canonical_hash({"teacher": teacher, "denoiser": denoiser, "student": d["student"],
                                   "synthesis": d["synthesis"], "mode": d["mode"], "seed": d["seed"],
                                   "kd": d["kd"] if d["mode"] == "alternating" else None})
        distill = canonical_hash({"generate": generate, "kd": d["kd"]})
        return {"data": data, "teacher": teacher, "denoiser": denoiser, "generate": generate, "distill": distill}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def code_version() -> str:
    """Package version plus a short digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

class RunManifest:
    """Append-only JSON-lines log of stage events for one run directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "run_manifest.jsonl"

    def append(self, event: dict):
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def events(self) -> List[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def stage_status(self) -> Dict[str, str]:
        status = {}
        for e in self.events():
            status[e["stage"]] = e["status"]
        return status

    def is_complete(self) -> bool:
        st = self.stage_status()
        return bool(st) and all(v in ("ok", "failed") for v in st.values())

    def latest(self, stage: str) -> Optional[dict]:
        found = [e for e in self.events() if e["stage"] == stage and e["status"] == "ok"]
        return found[-1] if found else None


class _Stage:
    def __init__(self, manifest: RunManifest, stage: str, cfg: RunConfig):
        self.m, self.stage, self.cfg = manifest, stage, cfg
        self.info: dict = {}

    def __enter__(self):
        self.t0 = time.perf_counter()
        self.m.append({"stage": self.stage, "status": "started", "config_hash": self.cfg.hash(),
                       "code_version": code_version()})
        return self

    def __exit__(self, exc_type, exc, tb):
        event = {"stage": self.stage, "status": "ok" if exc is None else "failed",
                 "config_hash": self.cfg.hash(), "code_version": code_version(),
                 "wall_clock_s": round(time.perf_counter() - self.t0, 3), **self.info}
        if exc is not None:
            event["error"] = f"{type(exc).__name__}: {exc}"
        self.m.append(event)
        return False


# ---------------------------------------------------------------------------
# stage helpers
# ---------------------------------------------------------------------------

def write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def build_splits(spec: DatasetSpec):
    """(teacher-train, generator corpus, held-out) datasets."""
    spec.validate()
    if spec.source == "digits":
        full = load_digits(spec.classes, spec.resolution)
        teach, gen, held = split_dataset(full, spec.fractions, spec.split_seed)
    else:
        tr, held = make_bars_split(resolution=spec.resolution, seed=spec.split_seed)
        teach, gen = split_dataset(tr, [0.5, 0.5], spec.split_seed)
    return teach, generator_corpus(gen, [tuple(s) for s in spec.styles]), held


def new_student(cfg: RunConfig, image_shape, seed: int) -> Classifier:
    torch.manual_seed(seed)
    return Classifier(image_shape[0], cfg.synthesis.num_classes, tuple(cfg.student.widths),
                      cfg.student.convs_per_stage)


def _paths(out):
    out = Path(out)
    return {"root": out, "data": out / "data", "ckpt": out / "checkpoints", "syn": out / "synthetic",
            "metrics": out / "metrics", "figures": out / "figures"}


def _load_checked(path, expected_hash: str, what: str):
    if not Path(path).exists():
        raise ContractError(f"missing {what} checkpoint at {path}; run the producing stage first")
    module, meta = load_checkpoint(path)
    got = meta.get("extra", {}).get("stage_hash")
    if got != expected_hash:
        raise ContractError(f"{what} checkpoint was produced under stage hash {got}, "
                            f"current config expects {expected_hash}")
    return module, meta


def stage_prepare(cfg: RunConfig, out):
    p = _paths(out)
    teach, gen, held = build_splits(cfg.dataset)
    teach.save(p["data"] / "teacher.npz")
    gen.save(p["data"] / "generator.npz")
    held.save(p["data"] / "heldout.npz")
    return teach, gen, held


def _splits(cfg, out):
    p = _paths(out)
    files = [p["data"] / f"{n}.npz" for n in ("teacher", "generator", "heldout")]
    if all(f.exists() for f in files):
        return tuple(ImageDataset.load(f) for f in files)
    return stage_prepare(cfg, out)


def stage_train_teacher(cfg: RunConfig, out):
    p, hashes = _paths(out), cfg.stage_hashes()
    manifest = RunManifest(p["root"])
    with _Stage(manifest, "train-teacher", cfg) as st:
        teach, _, held = _splits(cfg, out)
        model, metrics = train_teacher(teach, cfg.teacher, held)
        acc = evaluate(model, *teach.tensors())["accuracy"]
        metrics["train_split_acc"] = acc
        ckpt = p["ckpt"] / "teacher.pt"
        st.info["checkpoint_hash"] = save_checkpoint(
            ckpt, model, cfg.hash(), cfg.teacher.seed,
            {"stage_hash": hashes["teacher"], "train_split_acc": acc, "eval_acc": metrics["eval_acc"]})
        write_jsonl(p["metrics"] / "teacher.jsonl", metrics["history"])
        st.info["metrics"] = str(p["metrics"] / "teacher.jsonl")
    return model, metrics


def _make_codec(cfg: RunConfig, image_shape, gen: ImageDataset):
    if cfg.codec == "identity":
        return IdentityCodec(image_shape)
    codec = ConvAutoencoder(image_shape)
    train_codec(codec, gen.tensors()[0], seed=cfg.denoiser.seed)
    return codec


def stage_train_diffusion(cfg: RunConfig, out):
    p, hashes = _paths(out), cfg.stage_hashes()
    with _Stage(RunManifest(p["root"]), "train-diffusion", cfg) as st:
        _, gen, _ = _splits(cfg, out)
        codec = _make_codec(cfg, gen.image_shape, gen)
        model, metrics = train_denoiser(gen, cfg.denoiser, codec if cfg.codec != "identity" else None)
        extra = {"stage_hash": hashes["denoiser"]}
        st.info["checkpoint_hash"] = save_checkpoint(p["ckpt"] / "denoiser.pt", model, cfg.hash(),
                                                     cfg.denoiser.seed, extra)
        save_checkpoint(p["ckpt"] / "codec.pt", codec, cfg.hash(), cfg.denoiser.seed, extra)
        write_jsonl(p["metrics"] / "denoiser.jsonl", metrics["history"])
        st.info["metrics"] = str(p["metrics"] / "denoiser.jsonl")
    return model, codec


def stage_generate(cfg: RunConfig, out, student: Optional[Classifier] = None):
    """Two-stage generation (or the whole alternating loop when mode == 'alternating')."""
    if cfg.mode == "alternating":
        return run_alternating(cfg, out)
    p, hashes = _paths(out), cfg.stage_hashes()
    with _Stage(RunManifest(p["root"]), "generate", cfg) as st:
        teacher, _ = _load_checked(p["ckpt"] / "teacher.pt", hashes["teacher"], "teacher")
        denoiser, _ = _load_checked(p["ckpt"] / "denoiser.pt", hashes["denoiser"], "denoiser")
        codec, _ = _load_checked(p["ckpt"] / "codec.pt", hashes["denoiser"], "codec")
        if student is None:
            student = new_student(cfg, codec.image_shape, cfg.seed)
        st.info["student_init_hash"] = save_checkpoint(p["ckpt"] / "student_init.pt", student, cfg.hash(),
                                                       cfg.seed, {"stage_hash": hashes["generate"]})
        manifest = build_dataset(p["syn"], teacher, student, denoiser, codec, None, cfg.synthesis,
                                 config_hash=hashes["generate"], metrics_path=p["metrics"] / "synthesis.jsonl")
        st.info.update({"records": len(manifest), "manifest_digest": manifest.digest(),
                        "metrics": str(p["metrics"] / "synthesis.jsonl")})
    return manifest


def stage_distill(cfg: RunConfig, out):
    """Distil the initial student on the stored synthetic set. Never reads the denoiser."""
    p, hashes = _paths(out), cfg.stage_hashes()
    with _Stage(RunManifest(p["root"]), "distill", cfg) as st:
        teacher, _ = _load_checked(p["ckpt"] / "teacher.pt", hashes["teacher"], "teacher")
        manifest = SyntheticManifest.load(p["syn"])
        if not manifest.valid:
            raise ContractError("synthetic manifest is marked invalid")
        if manifest.config_hash != hashes["generate"]:
            raise ContractError(f"manifest built under {manifest.config_hash}, config expects {hashes['generate']}")
        student, _ = _load_checked(p["ckpt"] / "student_init.pt", hashes["generate"], "initial student")
        _, _, held = _splits(cfg, out)
        teacher_hash = state_hash(teacher)
        x, y = manifest.load_arrays()
        history = distill_round(student, teacher, x, y, cfg.kd, *held.tensors())
        if state_hash(teacher) != teacher_hash:
            raise RuntimeError("teacher parameters changed during distillation")
        st.info["checkpoint_hash"] = save_checkpoint(p["ckpt"] / "student.pt", student, cfg.hash(), cfg.seed,
                                                     {"stage_hash": hashes["distill"]})
        write_jsonl(p["metrics"] / "distill.jsonl", history)
        st.info["metrics"] = str(p["metrics"] / "distill.jsonl")
        st.info["final_eval_acc"] = history[-1].get("eval_acc") if history else None
    return student, history


def run_alternating(cfg: RunConfig, out):
    """Round i is generated with the student distilled on rounds < i; a last pass distils on all of D'."""
    p, hashes = _paths(out), cfg.stage_hashes()
    log = RunManifest(p["root"])
    with _Stage(log, "generate", cfg) as st:
        teacher, _ = _load_checked(p["ckpt"] / "teacher.pt", hashes["teacher"], "teacher")
        denoiser, _ = _load_checked(p["ckpt"] / "denoiser.pt", hashes["denoiser"], "denoiser")
        codec, _ = _load_checked(p["ckpt"] / "codec.pt", hashes["denoiser"], "codec")
        _, _, held = _splits(cfg, out)
        student = new_student(cfg, codec.image_shape, cfg.seed)
        history: list = []

        def distill_so_far(manifest, round_index):
            x, y = manifest.load_arrays()
            history.extend(distill_round(student, teacher, x, y, cfg.kd, *held.tensors(), round_index=round_index))
            h = save_checkpoint(p["ckpt"] / f"student_r{round_index:03d}.pt", student, cfg.hash(), cfg.seed,
                                {"stage_hash": hashes["distill"], "round": round_index})
            log.append({"stage": f"distill-round-{round_index:03d}", "status": "ok", "config_hash": cfg.hash(),
                        "checkpoint_hash": h, "images": len(x)})

        def hook(i, manifest):
            if i > 0 and len(manifest):
                distill_so_far(manifest, i - 1)
            log.append({"stage": f"generate-round-{i:03d}", "status": "ok", "config_hash": cfg.hash(),
                        "generation_student_hash": state_hash(student)})

        manifest = build_dataset(p["syn"], teacher, student, denoiser, codec, None, cfg.synthesis,
                                 config_hash=hashes["generate"], metrics_path=p["metrics"] / "synthesis.jsonl",
                                 round_hook=hook)
        distill_so_far(manifest, cfg.synthesis.rounds - 1)
        st.info.update({"records": len(manifest), "manifest_digest": manifest.digest()})
        st.info["checkpoint_hash"] = save_checkpoint(p["ckpt"] / "student.pt", student, cfg.hash(), cfg.seed,
                                                     {"stage_hash": hashes["distill"]})
        write_jsonl(p["metrics"] / "distill.jsonl", history)
    return manifest, student, history


def stage_evaluate(cfg: RunConfig, out, checkpoint=None, split: str = "heldout"):
    p = _paths(out)
    ckpt = Path(checkpoint) if checkpoint else p["ckpt"] / "student.pt"
    with _Stage(RunManifest(p["root"]), f"evaluate:{ckpt.stem}", cfg) as st:
        if not ckpt.exists():
            raise ContractError(f"missing checkpoint {ckpt}")
        model, _ = load_checkpoint(ckpt)
        teach, _, held = _splits(cfg, out)
        ds = {"heldout": held, "train": teach}[split]
        res = evaluate(model, *ds.tensors(), num_classes=ds.num_classes)
        res.update({"checkpoint": str(ckpt), "split": split})
        path = p["metrics"] / f"eval_{ckpt.stem}_{split}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        st.info.update({"metrics": str(path), "accuracy": res["accuracy"]})
    return res


def run_pipeline(cfg: RunConfig, out, reuse_pretrained: bool = True):
    """All stages; teacher and denoiser are reused when valid checkpoints already exist."""
    cfg.validate()
    p = _paths(out)
    p["root"].mkdir(parents=True, exist_ok=True)
    cfg.save(p["root"] / "config.json")
    hashes = cfg.stage_hashes()
    if not (reuse_pretrained and _valid(p["ckpt"] / "teacher.pt", hashes["teacher"])):
        stage_train_teacher(cfg, out)
    if not (reuse_pretrained and _valid(p["ckpt"] / "denoiser.pt", hashes["denoiser"])):
        stage_train_diffusion(cfg, out)
    if cfg.mode == "alternating":
        run_alternating(cfg, out)
    else:
        stage_generate(cfg, out)
        stage_distill(cfg, out)
    return stage_evaluate(cfg, out)


def _valid(path, stage_hash):
    if not Path(path).exists():
        return False
    try:
        _, meta = load_checkpoint(path)
    except Exception:
        return False
    return meta.get("extra", {}).get("stage_hash") == stage_hash


# ---------------------------------------------------------------------------
# in-memory experiments (shared pretrained models, several arms/seeds)
# ---------------------------------------------------------------------------

@dataclass
class Pretrained:
    teacher: Classifier
    denoiser: torch.nn.Module
    codec: torch.nn.Module
    teacher_split: ImageDataset
    heldout: ImageDataset


def pretrain(cfg: RunConfig, out=None) -> Pretrained:
    """Teacher and denoiser for ``cfg``; loaded from ``out`` when already trained there."""
    if out is not None:
        p, hashes = _paths(out), cfg.stage_hashes()
        if not _valid(p["ckpt"] / "teacher.pt", hashes["teacher"]):
            stage_train_teacher(cfg, out)
        if not _valid(p["ckpt"] / "denoiser.pt", hashes["denoiser"]):
            stage_train_diffusion(cfg, out)
        teacher, _ = load_checkpoint(p["ckpt"] / "teacher.pt")
        denoiser, _ = load_checkpoint(p["ckpt"] / "denoiser.pt")
        codec, _ = load_checkpoint(p["ckpt"] / "codec.pt")
        teach, _, held = _splits(cfg, out)
        return Pretrained(teacher, denoiser, codec, teach, held)
    teach, gen, held = build_splits(cfg.dataset)
    teacher, _ = train_teacher(teach, cfg.teacher, held)
    codec = _make_codec(cfg, gen.image_shape, gen)
    denoiser, _ = train_denoiser(gen, cfg.denoiser, codec if cfg.codec != "identity" else None)
    return Pretrained(teacher, denoiser, codec, teach, held)


def synthesize_and_distill(cfg: RunConfig, pre: Pretrained, seed: int) -> dict:
    """Generate D' under ``cfg`` (with ``seed``) in memory and distil a fresh student on it."""
    syn = dataclasses.replace(cfg.synthesis, seed=seed)
    kd = dataclasses.replace(cfg.kd, seed=seed)
    student = new_student(cfg, pre.codec.image_shape, seed)
    records = []
    for i in range(syn.rounds):
        records += generate_round(i, pre.teacher, student, pre.denoiser, pre.codec, None, syn)
    # round-trip through 8-bit like the on-disk set
    x = torch.stack([r.image for r in records]).clamp(-1, 1)
    x = torch.round((x + 1) * 127.5) / 127.5 - 1
    y = torch.tensor([r.label for r in records])
    history = distill_round(student, pre.teacher, x, y, kd)
    res = evaluate(student, *pre.heldout.tensors())
    return {"accuracy": res["accuracy"], "records": len(records), "final_loss": history[-1]["total"],
            "seed": seed}


def noise_baseline(cfg: RunConfig, pre: Pretrained, seed: int, num_images: Optional[int] = None) -> dict:
    """Distil a fresh student on uniform noise images labelled by the teacher's argmax."""
    n = num_images or cfg.synthesis.rounds * cfg.synthesis.batch_size * len(cfg.synthesis.harvest_steps())
    g = torch.Generator().manual_seed(seed)
    x = torch.rand((n, *pre.codec.image_shape), generator=g) * 2 - 1
    with torch.no_grad():
        y = pre.teacher(x).argmax(1)
    student = new_student(cfg, pre.codec.image_shape, seed)
    distill_round(student, pre.teacher, x, y, dataclasses.replace(cfg.kd, seed=seed))
    return {"accuracy": evaluate(student, *pre.heldout.tensors())["accuracy"], "records": n, "seed": seed}


def ablate_lca(cfg: RunConfig, out, seeds=(0, 1, 2), pre: Optional[Pretrained] = None) -> dict:
    """Student accuracy for each latent-augmentation arm and seed; writes a comparison table."""
    p = _paths(out)
    pre = pre or pretrain(cfg, out)
    rows = []
    for arm in ARMS:
        arm_cfg = dataclasses.replace(cfg, synthesis=dataclasses.replace(cfg.synthesis, augmentation=arm))
        for s in seeds:
            r = synthesize_and_distill(arm_cfg, pre, s)
            rows.append({"arm": arm, **r})
            logger.info("ablate-lca arm=%s seed=%d acc=%.4f", arm, s, r["accuracy"])
    table = {arm: {"accuracies": [r["accuracy"] for r in rows if r["arm"] == arm]} for arm in ARMS}
    for arm, v in table.items():
        v["median"] = float(np.median(v["accuracies"]))
        v["mean"] = float(np.mean(v["accuracies"]))
    write_jsonl(p["metrics"] / "ablate_lca.jsonl", rows)
    lines = ["| arm | " + " | ".join(f"seed {s}" for s in seeds) + " | median |",
             "|---|" + "---|" * (len(seeds) + 1)]
    for arm in ARMS:
        accs = " | ".join(f"{100 * a:.2f}" for a in table[arm]["accuracies"])
        lines.append(f"| {arm} | {accs} | {100 * table[arm]['median']:.2f} |")
    (p["metrics"] / "ablate_lca.md").write_text("\n".join(lines) + "\n")
    return table


def visualize(out, manifest_dir=None, per_class: int = 8, harvest_t: Optional[int] = 0):
    """Image grid of harvested samples, one row per class. Returns the PNG path."""
    from PIL import Image

    from .synthesis import load_image

    p = _paths(out)
    syn = SyntheticManifest.load(manifest_dir or p["syn"])
    rows = []
    for c in range(syn.num_classes):
        recs = [r for r in syn.records if r["label"] == c and (harvest_t is None or r["harvest_t"] == harvest_t)]
        imgs = [load_image(syn.root / r["path"]) for r in recs[:per_class]]
        rows.append(imgs)
    first = next((r[0] for r in rows if r), None)
    if first is None:
        raise ContractError("no records to visualise")
    c, h, w = first.shape
    pad = 1
    grid = np.ones((c, len(rows) * (h + pad) + pad, per_class * (w + pad) + pad), dtype=np.float32)
    for i, imgs in enumerate(rows):
        for j, im in enumerate(imgs):
            y0, x0 = pad + i * (h + pad), pad + j * (w + pad)
            grid[:, y0:y0 + h, x0:x0 + w] = im
    arr = ((np.clip(grid, -1, 1) + 1) * 127.5).round().astype(np.uint8)
    img = Image.fromarray(arr[0], "L") if c == 1 else Image.fromarray(np.moveaxis(arr, 0, -1), "RGB")
    p["figures"].mkdir(parents=True, exist_ok=True)
    path = p["figures"] / "samples_by_class.png"
    img.save(path)
    return path
