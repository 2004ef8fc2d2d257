"""Command line entry point: ``python -m latent_dfkd <subcommand> [flags]``.

Exit codes: 0 ok, 1 domain error (missing checkpoint, hash mismatch, divergence),
2 usage or config error. Failures print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError

OUT_ENV = "LATENT_DFKD_OUT"
SUBCOMMANDS = ("train-teacher", "train-diffusion", "generate", "distill", "evaluate", "ablate-lca", "visualize")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (defaults are used when omitted)")
    common.add_argument("--out", type=Path, help=f"run directory (default: ${OUT_ENV} or ./runs/default)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. synthesis.total_steps=10")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="latent_dfkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("train-teacher", parents=[common], help="train the teacher classifier")
    sub.add_parser("train-diffusion", parents=[common], help="train the conditional denoiser")
    sub.add_parser("generate", parents=[common], help="synthesise D' (or run the alternating loop)")
    sub.add_parser("distill", parents=[common], help="distil the student on a stored synthetic set")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on real data")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--split", choices=("heldout", "train"), default="heldout")
    ab = sub.add_parser("ablate-lca", parents=[common], help="compare latent augmentation arms")
    ab.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    vz = sub.add_parser("visualize", parents=[common], help="image grid of harvested samples per class")
    vz.add_argument("--per-class", type=int, default=8)
    vz.add_argument("--harvest-t", type=int, default=0, help="harvest step to show; -1 shows all")
    return parser


def resolve_config(args) -> harness.RunConfig:
    cfg = harness.RunConfig.load(args.config) if args.config else harness.RunConfig().validate()
    overrides = dict(_parse_override(s) for s in args.overrides)
    return cfg.with_overrides(overrides) if overrides else cfg


def resolve_out(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs/default"))


def run(args) -> dict:
    cfg = resolve_config(args)
    out = resolve_out(args)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    cmd = args.command
    if cmd == "train-teacher":
        _, metrics = harness.stage_train_teacher(cfg, out)
        return {"eval_acc": metrics["eval_acc"]}
    if cmd == "train-diffusion":
        harness.stage_train_diffusion(cfg, out)
        return {"checkpoint": str(out / "checkpoints" / "denoiser.pt")}
    if cmd == "generate":
        res = harness.stage_generate(cfg, out)
        manifest = res[0] if isinstance(res, tuple) else res
        return {"records": len(manifest), "per_class_counts": manifest.per_class_counts}
    if cmd == "distill":
        _, history = harness.stage_distill(cfg, out)
        return {"epochs": len(history), "final_eval_acc": history[-1].get("eval_acc") if history else None}
    if cmd == "evaluate":
        res = harness.stage_evaluate(cfg, out, args.checkpoint, args.split)
        return {"accuracy": res["accuracy"], "per_class_recall": res["per_class_recall"]}
    if cmd == "ablate-lca":
        table = harness.ablate_lca(cfg, out, tuple(args.seeds))
        print((out / "metrics" / "ablate_lca.md").read_text(), end="")
        return {arm: v["median"] for arm, v in table.items()}
    if cmd == "visualize":
        path = harness.visualize(out, per_class=args.per_class,
                                 harvest_t=None if args.harvest_t < 0 else args.harvest_t)
        return {"figure": str(path)}
    raise UsageError(f"unknown subcommand {cmd!r}")


def _fail(code: int, exc: BaseException) -> int:
    record = {"status": "error", "exit_code": code, "type": type(exc).__name__, "message": str(exc)}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        record["diagnostics"] = diag
    print(json.dumps(record, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
    except UsageError as exc:
        return _fail(2, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        result = run(args)
    except (UsageError, ConfigError) as exc:
        return _fail(2, exc)
    except Exception as exc:  # domain errors surface as a record, not a traceback
        logging.getLogger(__name__).debug("stage failed", exc_info=True)
        return _fail(1, exc)
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=str))
    return 0
