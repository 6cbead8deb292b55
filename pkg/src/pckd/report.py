"""Run reports: accuracy tables, weight traces, sweep curves, feature exports.

Every table is written as comma-separated text with a header row and
6-decimal floats; the weight-trace and sweep series are additionally rendered
as figures next to the CSV files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from .config import load_experiment_config
from .data import extract_features, generate_synthetic, load_bundle
from .errors import PckdError
from .models import load_checkpoint
from .preview import mean_weight_trace
from .train import RunLog

FLOAT_FMT = "{:.6f}"


@dataclass
class RunRecord:
    """One run directory's parsed artifacts."""

    name: str
    path: Path
    log: RunLog
    results: dict


def _fmt(value) -> str:
    if isinstance(value, float):
        return FLOAT_FMT.format(value)
    return str(value)


def write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def load_runs(run_dirs) -> list[RunRecord]:
    """Parse the log and results of each run directory; fail listing absences."""
    missing = [str(Path(d) / "log.ndjson") for d in run_dirs
               if not (Path(d) / "log.ndjson").exists()]
    if missing:
        raise PckdError("missing run logs: " + ", ".join(missing))
    records = []
    for d in run_dirs:
        d = Path(d)
        log = RunLog.load(d / "log.ndjson")
        results_path = d / "results.json"
        results = json.loads(results_path.read_text()) if results_path.exists() else {}
        records.append(RunRecord(name=d.name, path=d, log=log, results=results))
    return records


def accuracy_table(runs: list[RunRecord], baseline: str | None = None):
    """Comparison rows with a delta column against the baseline run."""
    base = None
    if baseline is not None:
        for run in runs:
            if run.name == baseline:
                base = run
        if base is None:
            raise PckdError(f"baseline run {baseline!r} not among {[r.name for r in runs]}")
    else:
        base = runs[0]
    base_acc = base.results.get("test_top1", float("nan"))
    rows = []
    for run in runs:
        acc = run.results.get("test_top1", float("nan"))
        delta = acc - base_acc
        rows.append({
            "run": run.name,
            "policy": run.log.meta.get("policy", "?"),
            "test_top1": acc,
            "val_top1": run.results.get("best_val_top1", float("nan")),
            "delta_vs_baseline": delta,
        })
    return rows, base.name


def write_accuracy_report(runs, out_dir: Path, baseline=None) -> None:
    rows, base_name = accuracy_table(runs, baseline)
    write_csv(
        out_dir / "accuracy.csv",
        ["run", "policy", "test_top1", "val_top1", "delta_vs_baseline"],
        [[r["run"], r["policy"], r["test_top1"], r["val_top1"], r["delta_vs_baseline"]]
         for r in rows],
    )
    lines = [
        f"| run | policy | test top-1 | vs {base_name} |",
        "|---|---|---|---|",
    ]
    for r in rows:
        d = r["delta_vs_baseline"]
        arrow = "=" if abs(d) < 5e-7 else (f"↑{d:.2f}" if d > 0 else f"↓{abs(d):.2f}")
        lines.append(f"| {r['run']} | {r['policy']} | {r['test_top1']:.2f} | ({arrow}) |")
    (out_dir / "accuracy.md").write_text("\n".join(lines) + "\n")

    fig, ax = plt.subplots(figsize=(6, 3.2))
    names = [r["run"] for r in rows]
    ax.bar(range(len(rows)), [r["test_top1"] for r in rows], color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("test top-1 (%)")
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy.png", dpi=150)
    plt.close(fig)


def write_weight_trace(runs, out_dir: Path) -> None:
    """Per-epoch mean learning weight of every run, CSV plus figure."""
    rows = []
    for run in runs:
        policy = run.log.meta.get("policy", "?")
        frac = {rec["epoch"]: rec.get("frac_easy", float("nan"))
                for rec in run.log.epoch_records}
        for epoch, mean_v in mean_weight_trace(run.log):
            rows.append([epoch, policy, mean_v, frac.get(epoch, float("nan"))])
    write_csv(out_dir / "weight_trace.csv",
              ["epoch", "policy", "mean_weight", "frac_easy"], rows)

    fig, ax = plt.subplots(figsize=(6, 3.2))
    for run in runs:
        trace = mean_weight_trace(run.log)
        if trace:
            ax.plot([e for e, _ in trace], [v for _, v in trace],
                    marker="o", markersize=3,
                    label=f"{run.name} ({run.log.meta.get('policy', '?')})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean sample weight")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "weight_trace.png", dpi=150)
    plt.close(fig)


def write_sweep_curve(runs, out_dir: Path) -> None:
    """Accuracy against the swept hyperparameter for runs created by a sweep."""
    rows = []
    for run in runs:
        param = run.log.meta.get("sweep_param")
        if param is None:
            continue
        rows.append([param, float(run.log.meta.get("sweep_value", float("nan"))),
                     run.results.get("test_top1", float("nan"))])
    if not rows:
        return
    rows.sort(key=lambda r: (r[0], r[1]))
    write_csv(out_dir / "sweep.csv", ["param", "value", "test_top1"], rows)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    params = sorted({r[0] for r in rows})
    for param in params:
        pts = [(r[1], r[2]) for r in rows if r[0] == param]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=param)
    ax.set_xlabel("hyperparameter value")
    ax.set_ylabel("test top-1 (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", dpi=150)
    plt.close(fig)


def export_features(run: RunRecord, out_dir: Path, max_classes: int = 10) -> Path | None:
    """Penultimate features of the test split, one row per sample plus label."""
    ckpt = run.path / "student.pt"
    if not ckpt.exists():
        ckpt = run.path / "teacher.pt"
    cfg_path = run.path / "config.yaml"
    if not ckpt.exists() or not cfg_path.exists():
        return None
    config = load_experiment_config(cfg_path)
    if config.dataset.kind == "synthetic":
        bundle = generate_synthetic(config.dataset.synthetic_spec())
    else:
        bundle = load_bundle(config.dataset.root, config.dataset.name,
                             config.dataset.mean, config.dataset.std)
    model, _ = load_checkpoint(ckpt)
    keep = torch.isin(bundle.test.labels, torch.arange(min(max_classes, bundle.num_classes)))
    split = type(bundle.test)(images=bundle.test.images[keep],
                              labels=bundle.test.labels[keep])
    feats = extract_features(model, split, bundle.mean, bundle.std)
    header = [f"f{i}" for i in range(feats.shape[1])] + ["label"]
    rows = [[float(x) for x in feats[i]] + [int(split.labels[i])]
            for i in range(feats.shape[0])]
    path = out_dir / f"features_{run.name}.csv"
    write_csv(path, header, rows)
    return path


def generate_report(run_dirs, out_dir, baseline=None, feature_classes: int = 10) -> Path:
    """Produce all report artifacts for the given run directories."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = load_runs(run_dirs)
    write_accuracy_report(runs, out_dir, baseline)
    write_weight_trace(runs, out_dir)
    write_sweep_curve(runs, out_dir)
    for run in runs:
        export_features(run, out_dir, max_classes=feature_classes)
    return out_dir
