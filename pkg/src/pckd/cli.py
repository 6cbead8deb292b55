"""Command-line surface: pretrain, distill (with sweeps), and report.

Exit codes: 0 on success, 1 on runtime failures (missing data, numeric
aborts), 2 on configuration errors. Flag overrides beat config-file values,
which beat registry defaults; the resolved configuration is printed at run
start and written into the run directory.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import sys
from pathlib import Path

from .config import (
    ExperimentConfig,
    apply_overrides,
    load_experiment_config,
)
from .data import generate_synthetic, load_bundle
from .errors import ConfigError, PckdError
from .models import count_parameters, load_checkpoint, save_checkpoint
from .report import generate_report
from .train import distill, evaluate, pretrain_teacher

FLOAT_FLAGS = {
    "alpha": "loss.alpha",
    "beta_cc": "loss.beta_cc",
    "beta_fa": "loss.beta_fa",
    "beta_ca": "loss.beta_ca",
    "tau_kd": "loss.tau_kd",
    "tau_cc": "loss.tau_cc",
    "epsilon": "preview.epsilon",
    "focal_gamma": "preview.focal_gamma",
    "lr": "train.lr",
}
INT_FLAGS = {
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
}
STR_FLAGS = {
    "policy": "preview.policy",
    "data_root": "dataset.root",
    "output_dir": "output_dir",
    "run_name": "run_name",
    "student_backbone": "student.backbone",
    "teacher_backbone": "teacher.backbone",
    "teacher_checkpoint": "teacher.checkpoint",
}


def parse_sweep(text: str) -> list[float]:
    """A float, or an inclusive range 'START..STOP step SIZE' (also '..:')."""
    text = text.strip()
    if ".." in text:
        lo_part, rest = text.split("..", 1)
        if " step " in rest:
            hi_part, step_part = rest.split(" step ", 1)
        elif ":" in rest:
            hi_part, step_part = rest.split(":", 1)
        else:
            raise ConfigError(f"sweep {text!r} needs 'step SIZE' after the range")
        try:
            lo, hi, step = float(lo_part), float(hi_part), float(step_part)
        except ValueError as err:
            raise ConfigError(f"cannot parse sweep {text!r}: {err}") from err
        if step <= 0 or hi < lo:
            raise ConfigError(f"sweep {text!r} must have step > 0 and stop >= start")
        values, v = [], lo
        while v <= hi + 1e-9:
            values.append(round(v, 10))
            v += step
        return values
    try:
        return [float(text)]
    except ValueError as err:
        raise ConfigError(f"cannot parse number {text!r}") from err


def _collect_overrides(args) -> tuple[dict, dict]:
    """Split flags into fixed overrides and swept (multi-valued) ones."""
    fixed, swept = {}, {}
    for flag, path in FLOAT_FLAGS.items():
        raw = getattr(args, flag, None)
        if raw is None:
            continue
        values = parse_sweep(raw)
        if len(values) == 1:
            fixed[path] = values[0]
        else:
            swept[path] = values
    for flag, path in INT_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            fixed[path] = value
    for flag, path in STR_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            fixed[path] = value
    seeds = getattr(args, "seed", None)
    if seeds is not None:
        try:
            seed_values = [int(s) for s in str(seeds).split(",")]
        except ValueError as err:
            raise ConfigError(f"cannot parse --seed {seeds!r}") from err
        if len(seed_values) == 1:
            fixed["train.seed"] = seed_values[0]
        else:
            swept["train.seed"] = seed_values
    preview_on = getattr(args, "preview_on", None)
    if preview_on is not None:
        names = [] if preview_on.strip() in ("", "none") else [
            n.strip() for n in preview_on.split(",")
        ]
        fixed["preview.applies_to"] = names
    if getattr(args, "no_deterministic", False):
        fixed["train.deterministic"] = False
    return fixed, swept


def _build_bundle(config: ExperimentConfig):
    if config.dataset.kind == "synthetic":
        return generate_synthetic(config.dataset.synthetic_spec())
    return load_bundle(config.dataset.root, config.dataset.name,
                       config.dataset.mean, config.dataset.std)


def _run_dir(config: ExperimentConfig, sweep_tags: dict) -> Path:
    base = Path(config.output_dir)
    parts = []
    if config.run_name:
        parts.append(config.run_name)
    parts += [f"{path.split('.')[-1]}={value:g}" for path, value in sweep_tags.items()]
    return base / "-".join(parts) if parts else base


def _write_run_outputs(run_dir: Path, config: ExperimentConfig, log, results: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml())
    log.save(run_dir / "log.ndjson")
    (run_dir / "results.json").write_text(json.dumps(results, indent=2))


def cmd_pretrain(args) -> int:
    fixed, swept = _collect_overrides(args)
    if swept:
        raise ConfigError("pretrain does not support sweep values")
    config = apply_overrides(load_experiment_config(args.config), fixed)
    print(config.to_yaml())
    bundle = _build_bundle(config)
    run_dir = _run_dir(config, {})
    ckpt_path = Path(config.teacher.checkpoint) if config.teacher.checkpoint \
        else run_dir / "teacher.pt"
    result = pretrain_teacher(config.teacher.backbone, config.train, bundle,
                              checkpoint_path=ckpt_path)
    test_top1, test_top5 = evaluate(result.model, bundle.test, bundle.mean, bundle.std)
    _write_run_outputs(run_dir, config, result.run_log, {
        "test_top1": test_top1, "test_top5": test_top5,
        "final_val_top1": result.final_val_top1,
        "best_val_top1": result.best_val_top1,
        "teacher_params": count_parameters(result.model),
        "checkpoint": str(ckpt_path),
    })
    print(f"teacher checkpoint: {ckpt_path} (test top-1 {test_top1:.2f}%)")
    return 0


def _distill_one(config: ExperimentConfig, run_dir: Path, sweep_tags: dict) -> dict:
    bundle = _build_bundle(config)
    if not config.teacher.checkpoint:
        raise PckdError("teacher.checkpoint is required for distillation")
    teacher, _ = load_checkpoint(config.teacher.checkpoint)
    result = distill(teacher, config.student.backbone, config.train, bundle)
    if len(sweep_tags) == 1:
        ((path, value),) = sweep_tags.items()
        result.run_log.meta["sweep_param"] = path.split(".")[-1]
        result.run_log.meta["sweep_value"] = value

    save_checkpoint(run_dir / "student.pt", result.student,
                    step=len(result.run_log.step_records))
    best_student = copy.deepcopy(result.student)
    if result.best_state is not None:
        best_student.load_state_dict(result.best_state["student"])
    save_checkpoint(run_dir / "student-best.pt", best_student,
                    extra={"best_epoch": result.best_epoch})

    test_top1, test_top5 = evaluate(result.student, bundle.test, bundle.mean, bundle.std)
    best_top1, _ = evaluate(best_student, bundle.test, bundle.mean, bundle.std)
    head_params = count_parameters(result.projection_head) \
        if result.projection_head is not None else 0
    results = {
        "test_top1": test_top1, "test_top5": test_top5,
        "test_top1_best": best_top1,
        "final_val_top1": result.final_val_top1,
        "best_val_top1": result.best_val_top1, "best_epoch": result.best_epoch,
        "student_params": count_parameters(result.student),
        "head_params": head_params,
    }
    _write_run_outputs(run_dir, config, result.run_log, results)
    print(f"run {run_dir}: test top-1 {test_top1:.2f}%")
    return results


def cmd_distill(args) -> int:
    fixed, swept = _collect_overrides(args)
    base_config = apply_overrides(load_experiment_config(args.config), fixed)
    print(base_config.to_yaml())
    if not swept:
        _distill_one(base_config, _run_dir(base_config, {}), {})
        return 0
    paths = sorted(swept)
    for combo in itertools.product(*(swept[p] for p in paths)):
        tags = dict(zip(paths, combo))
        config = apply_overrides(base_config, tags)
        _distill_one(config, _run_dir(config, tags), tags)
    return 0


def cmd_report(args) -> int:
    out = generate_report(args.run_dirs, args.out, baseline=args.baseline,
                          feature_classes=args.feature_classes)
    print(f"report written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pckd",
        description="Preview-weighted category-contrastive knowledge distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", help="seed or comma list, e.g. 0,1,2")
        p.add_argument("--data-root", dest="data_root")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--run-name", dest="run_name")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr")
        p.add_argument("--no-deterministic", dest="no_deterministic",
                       action="store_true", help="allow multi-threaded kernels")

    p_pre = sub.add_parser("pretrain", help="train a teacher with cross-entropy")
    add_common(p_pre)
    p_pre.add_argument("--teacher-backbone", dest="teacher_backbone")
    p_pre.add_argument("--teacher-checkpoint", dest="teacher_checkpoint")
    p_pre.set_defaults(func=cmd_pretrain)

    p_dis = sub.add_parser("distill", help="distill a student from a teacher")
    add_common(p_dis)
    p_dis.add_argument("--teacher-checkpoint", dest="teacher_checkpoint")
    p_dis.add_argument("--teacher-backbone", dest="teacher_backbone")
    p_dis.add_argument("--student-backbone", dest="student_backbone")
    p_dis.add_argument("--policy", choices=["preview", "curriculum", "focal", "none"])
    p_dis.add_argument("--preview-on", dest="preview_on",
                       help="comma list of losses the weight applies to; 'none' for empty")
    for flag in ("alpha", "beta-cc", "beta-fa", "beta-ca", "tau-kd", "tau-cc",
                 "epsilon", "focal-gamma"):
        p_dis.add_argument(f"--{flag}", dest=flag.replace("-", "_"),
                           help="value or sweep 'LO..HI step S'")
    p_dis.set_defaults(func=cmd_distill)

    p_rep = sub.add_parser("report", help="tables, traces, and figures from run logs")
    p_rep.add_argument("run_dirs", nargs="+", help="run directories to compare")
    p_rep.add_argument("--out", default="report")
    p_rep.add_argument("--baseline", help="run name the delta column compares against")
    p_rep.add_argument("--feature-classes", dest="feature_classes", type=int, default=10)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except PckdError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failures keep the scripted-sweep contract
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
