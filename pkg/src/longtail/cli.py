"""Command-line interface: task generation, training, evaluation, reports.

Configuration lives in a flat plain-text file of dotted keys::

    task.num_classes = 30
    fcbl.alpha = 0.85
    train.batch_size = 512

Command-line flags override file values.  All randomness in a run flows from
one --seed through named sub-streams, and every run writes a manifest.json
recording the resolved configuration and artifact checksums, so a run can be
reproduced exactly from its manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .classifier import load_checkpoint, save_checkpoint
from .core import INDICATOR_KINDS, HyperParams, validate_params
from .datagen import (
    TaskSpec,
    load_dataset,
    make_task,
    power_for_range,
    save_dataset,
    save_groups,
)
from .fhm import dump_distribution
from .indicators import export_snapshot_csv
from .metrics import (
    balance_report,
    compare_runs,
    write_balance_report,
    write_comparison,
    write_norm_curve,
)
from .trainer import (
    MODES,
    TrainConfig,
    evaluate,
    read_runlog,
    run_training,
    write_runlog,
)

MANIFEST_FORMAT = "longtail-manifest-v1"


class CliError(Exception):
    """User-facing error: printed as one line, exit status 1."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_epochs(text: str) -> tuple:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _parse_power(text: str):
    return "auto" if text.strip().lower() == "auto" else float(text)


# key -> (section, field, parser)
CONFIG_SCHEMA = {
    "task.num_classes": ("task", "num_classes", int),
    "task.feature_dim": ("task", "feature_dim", int),
    "task.max_count": ("task", "max_count", int),
    "task.min_count": ("task", "min_count", int),
    "task.power": ("task", "power", _parse_power),
    "task.background_count": ("task", "background_count", int),
    "task.class_sep": ("task", "class_sep", float),
    "task.noise_scale": ("task", "noise_scale", float),
    "fcbl.alpha": ("hp", "alpha", float),
    "fcbl.p_thresh": ("hp", "p_thresh", float),
    "indicators.gamma": ("hp", "gamma", float),
    "indicators.kind": ("hp", "indicator_kind", str),
    "fhm.beta": ("hp", "beta", float),
    "fhm.c_sampled": ("hp", "c_sampled", int),
    "fhm.m_per_class": ("hp", "m_per_class", int),
    "train.lr": ("hp", "lr", float),
    "train.lr_decay": ("hp", "lr_decay", float),
    "train.lr_decay_epochs": ("hp", "lr_decay_epochs", _parse_epochs),
    "train.momentum": ("hp", "momentum", float),
    "train.weight_decay": ("hp", "weight_decay", float),
    "train.epochs_stage1": ("hp", "epochs_stage1", int),
    "train.epochs_stage2": ("hp", "epochs_stage2", int),
    "train.batch_size": ("run", "batch_size", int),
    "train.reinit_head": ("run", "reinit_head", _parse_bool),
    "train.use_margin": ("run", "use_margin", _parse_bool),
    "train.use_weight_term": ("run", "use_weight_term", _parse_bool),
    "train.use_fhm": ("run", "use_fhm", _parse_bool),
    "eval.per_class": ("run", "eval_per_class", int),
    "eval.background": ("run", "eval_background", int),
}


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; # starts a comment; unknown keys rejected."""
    sections = {"task": {}, "hp": {}, "run": {}}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise CliError(f"{path}:{lineno}: unknown config key: {key}")
        section, field, parser = CONFIG_SCHEMA[key]
        try:
            sections[section][field] = parser(value)
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return sections


def resolve_config(args) -> tuple[TaskSpec, HyperParams, dict]:
    """Defaults, then config file, then command-line flags."""
    sections = (
        parse_config_file(args.config)
        if getattr(args, "config", None)
        else {"task": {}, "hp": {}, "run": {}}
    )
    task_kw = dict(sections["task"])
    if task_kw.get("power") == "auto":
        probe = TaskSpec(**{**task_kw, "power": 0.0})
        task_kw["power"] = power_for_range(
            probe.max_count, probe.min_count, probe.num_classes
        )
    try:
        spec = TaskSpec(**task_kw)
        hp_kw = dict(sections["hp"])
        if getattr(args, "indicator", None):
            hp_kw["indicator_kind"] = args.indicator
        hp = validate_params(hp_kw)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    run_kw = dict(sections["run"])
    for flag, field in (
        ("no_margin", "use_margin"),
        ("no_weight_term", "use_weight_term"),
        ("no_fhm", "use_fhm"),
    ):
        if getattr(args, flag, False):
            run_kw[field] = False
    return spec, hp, run_kw


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, args, spec, hp, run_kw, artifacts) -> None:
    manifest = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "config_path": getattr(args, "config", None),
        "seed": args.seed,
        "out_dir": str(out),
        "resolved": {
            "task": asdict(spec),
            "hyperparams": asdict(hp),
            "run": run_kw,
        },
        "artifacts": {name: _sha256(out / name) for name in sorted(artifacts)},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_or_make_dataset(args, spec):
    if getattr(args, "data", None):
        try:
            return load_dataset(args.data)
        except (OSError, ValueError, KeyError, IndexError) as exc:
            raise CliError(f"cannot load dataset {args.data}: {exc}") from exc
    return make_task(spec, args.seed)


def cmd_gen(args) -> int:
    spec, hp, run_kw = resolve_config(args)
    out = _out_dir(args)
    dataset = make_task(spec, args.seed)
    save_dataset(dataset, out / "dataset.txt")
    save_groups(dataset, out / "groups.csv")
    _write_manifest(out, "gen", args, spec, hp, run_kw, ["dataset.txt", "groups.csv"])
    groups = dataset.groups().groups
    print(
        f"gen: wrote {dataset.size} examples across {spec.num_classes} classes "
        f"({groups.count('rare')} rare / {groups.count('common')} common / "
        f"{groups.count('frequent')} frequent) to {out}"
    )
    return 0


def _train_config(args, hp, run_kw) -> TrainConfig:
    try:
        return TrainConfig(hp=hp, mode=args.mode, **run_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def cmd_train(args) -> int:
    spec, hp, run_kw = resolve_config(args)
    if args.mode not in MODES:
        raise CliError(f"mode {args.mode!r} not one of {MODES}")
    stage = args.stage if args.stage is not None else (2 if args.mode == "bacl" else 1)
    if args.mode == "bacl" and stage != 2:
        raise CliError("mode bacl is the stage-2 fine-tune; run it with --stage 2")
    if args.mode != "bacl" and stage != 1:
        raise CliError(f"mode {args.mode} trains end to end; run it with --stage 1")

    stage1_model = None
    if args.mode == "bacl":
        if not args.checkpoint:
            raise CliError(
                "stage 2 requires --checkpoint pointing at a stage-1 checkpoint"
            )
        try:
            stage1_model, _ = load_checkpoint(args.checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc

    out = _out_dir(args)
    dataset = _load_or_make_dataset(args, spec)
    config = _train_config(args, hp, run_kw)
    started = time.time()
    try:
        model, log, extras = run_training(dataset, config, args.seed, stage1_model)
    except (ValueError, RuntimeError) as exc:
        raise CliError(str(exc)) from exc
    wall = time.time() - started

    save_checkpoint(out / "checkpoint.npz", model, {"mode": config.mode, "seed": args.seed})
    write_runlog(log, out / "runlog.csv")
    artifacts = ["checkpoint.npz", "runlog.csv", "summary.json"]
    if "indicators" in extras:
        export_snapshot_csv(
            extras["indicators"],
            out / "indicators_per_class.csv",
            out / "indicators_matrix.csv",
        )
        dump_distribution(extras["distribution"], out / "feature_distribution.csv")
        artifacts += [
            "indicators_per_class.csv",
            "indicators_matrix.csv",
            "feature_distribution.csv",
        ]

    final = log.final
    summary = {
        "label": log.label,
        "mode": log.mode,
        "stage": stage,
        "indicator_kind": log.indicator_kind,
        "num_classes": log.num_classes,
        "seed": args.seed,
        "epochs": final.epoch,
        "final": {
            "loss": final.loss,
            "acc_overall": final.acc_overall,
            "acc_rare": final.acc_rare,
            "acc_common": final.acc_common,
            "acc_frequent": final.acc_frequent,
            "norm_cv": final.norm_cv,
        },
        "toggles": {
            "use_margin": config.use_margin,
            "use_weight_term": config.use_weight_term,
            "use_fhm": config.use_fhm,
            "reinit_head": config.reinit_head,
        },
        "wall_time_s": wall,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(out, "train", args, spec, hp, run_kw, artifacts)
    print(
        f"train[{log.label}]: {final.epoch} epochs, loss {final.loss:.4f}, "
        f"acc {final.acc_overall:.3f} (rare {final.acc_rare:.3f} / common "
        f"{final.acc_common:.3f} / frequent {final.acc_frequent:.3f}), "
        f"norm_cv {final.norm_cv:.3f} -> {out}"
    )
    return 0


def cmd_eval(args) -> int:
    spec, hp, run_kw = resolve_config(args)
    if not args.checkpoint:
        raise CliError("eval requires --checkpoint")
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    dataset = _load_or_make_dataset(args, spec)
    out = _out_dir(args)
    result = evaluate(
        model,
        dataset,
        n_per_class=run_kw.get("eval_per_class", 100),
        n_background=run_kw.get("eval_background", 1000),
    )
    report = balance_report(model, dataset, eval_result=result)
    write_balance_report(report, out / "balance_report.csv")
    write_norm_curve(report, out / "norm_curve.csv")
    _write_manifest(
        out, "eval", args, spec, hp, run_kw, ["balance_report.csv", "norm_curve.csv"]
    )
    print(
        f"eval: acc {result.acc_overall:.3f} (rare {result.acc_rare:.3f} / common "
        f"{result.acc_common:.3f} / frequent {result.acc_frequent:.3f} / background "
        f"{result.acc_background:.3f}), norm_cv {report.norm_cv:.3f} -> {out}"
    )
    return 0


def _load_run_dir(run_dir: str):
    path = Path(run_dir)
    summary_path = path / "summary.json"
    runlog_path = path / "runlog.csv"
    if not summary_path.is_file() or not runlog_path.is_file():
        raise CliError(f"{run_dir} is not a training run dir (needs summary.json and runlog.csv)")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    return read_runlog(
        runlog_path,
        label=summary["label"],
        mode=summary["mode"],
        indicator_kind=summary["indicator_kind"],
        num_classes=summary["num_classes"],
    )


def cmd_report(args) -> int:
    logs = [_load_run_dir(d) for d in args.run_dirs]
    try:
        comparison = compare_runs(logs)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = _out_dir(args)
    write_comparison(
        comparison, out / "final_comparison.csv", out / "epochs_comparison.csv"
    )
    artifacts = ["final_comparison.csv", "epochs_comparison.csv"]
    manifest = {
        "format": MANIFEST_FORMAT,
        "command": "report",
        "run_dirs": list(args.run_dirs),
        "out_dir": str(out),
        "artifacts": {name: _sha256(out / name) for name in sorted(artifacts)},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"report: compared {len(logs)} runs "
        f"({', '.join(comparison.labels)}) -> {out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longtail",
        description="Long-tailed classification testbed: balanced classifier "
        "fine-tuning with margins, weight masks, and feature hallucination.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_seed=True):
        p.add_argument("--config", help="flat key=value config file")
        if with_seed:
            p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", required=True, help="output directory")

    p_gen = sub.add_parser("gen", help="materialize a synthetic task to disk")
    add_common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="run one training configuration")
    add_common(p_train)
    p_train.add_argument("--mode", required=True, choices=MODES)
    p_train.add_argument("--stage", type=int, choices=(1, 2))
    p_train.add_argument("--data", help="dataset file from `gen` (default: generate from config+seed)")
    p_train.add_argument("--checkpoint", help="stage-1 checkpoint (required for bacl)")
    p_train.add_argument("--indicator", choices=INDICATOR_KINDS)
    p_train.add_argument("--no-margin", action="store_true", dest="no_margin")
    p_train.add_argument("--no-weight-term", action="store_true", dest="no_weight_term")
    p_train.add_argument("--no-fhm", action="store_true", dest="no_fhm")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint and report balance")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="dataset file (default: generate from config+seed)")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="compare finished training runs")
    p_report.add_argument("run_dirs", nargs="+", help="training output directories")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
