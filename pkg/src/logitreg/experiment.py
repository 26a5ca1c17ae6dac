"""Config-driven pipelines: data, training, evaluation and artifact writing."""

from __future__ import annotations

import contextlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DataSpec, ExperimentConfig
from .data import Dataset, load_idx_dataset, train_test_split_synthetic
from .evaluation import (
    LogitStats,
    RobustnessReport,
    TransferMatrix,
    blackbox_transfer,
    logit_statistics,
    masking_probe,
    robustness_report,
)
from .models import ModelParams
from .plotting import plot_accuracy_bars, plot_logit_histograms, plot_transfer_matrix
from .report import render_report
from .training import train

CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train_log.jsonl"
REPORT_JSON = "report.json"
TRANSFER_JSON = "transfer.json"
PROBE_JSON = "probe.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def build_datasets(spec: DataSpec, seed: int, conv: bool = False) -> tuple[Dataset, Dataset]:
    """Train and test splits. Synthetic class structure depends on ``seed`` only."""
    if spec.kind == "idx":
        train_set = load_idx_dataset(spec.train_images, spec.train_labels, spec.num_classes, "train", channel_axis=conv)
        test_set = load_idx_dataset(spec.test_images, spec.test_labels, spec.num_classes, "test", channel_axis=conv)
        return train_set, test_set
    options = {}
    if spec.noise is not None:
        options["noise"] = spec.noise
    if spec.kind == "glyphs":
        options["size"] = spec.size
    if spec.kind == "blobs":
        options["dim"] = spec.dim
    return train_test_split_synthetic(spec.kind, spec.train_size, spec.test_size, spec.num_classes, seed, **options)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stats_dict(s: LogitStats) -> dict:
    return {
        "mean": s.mean,
        "variance": s.variance,
        "min": s.min,
        "max": s.max,
        "bin_edges": s.bin_edges.tolist(),
        "counts": s.counts.tolist(),
    }


def _stats_from_dict(d: dict) -> LogitStats:
    return LogitStats(d["mean"], d["variance"], d["min"], d["max"], np.asarray(d["bin_edges"]), np.asarray(d["counts"]))


def _eval_set(config: ExperimentConfig, test: Dataset) -> Dataset:
    n = config.evaluation.size
    return test.subset(np.arange(min(n, len(test)))) if n else test


def _load(config: ExperimentConfig, path) -> ModelParams:
    return load_checkpoint(path, config.model).params


def run_train(config: ExperimentConfig) -> ModelParams:
    """Train (or reuse ``experiment.checkpoint``) and write the checkpoint and training log."""
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    with stage("data"):
        train_set, _ = build_datasets(config.data, config.seed, config.model.kind == "small-conv")
    if config.checkpoint is not None:
        with stage("checkpoint"):
            return _load(config, config.checkpoint)
    with stage("training"):
        result = train(config.model, train_set, config.training, config.objective, config.threat)
    with stage("checkpoint"):
        save_checkpoint(result.params, out / CHECKPOINT, result.steps)
        (out / TRAIN_LOG).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.log))
    return result.params


def run_evaluate(config: ExperimentConfig, params: ModelParams) -> RobustnessReport:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    with stage("data"):
        _, test = build_datasets(config.data, config.seed, config.model.kind == "small-conv")
        test = _eval_set(config, test)
    with stage("evaluation"):
        ev = config.evaluation
        report = robustness_report(config.name, params, test, ev.attacks, config.threat, ev.seed)
        stats = logit_statistics(params, test, ev.histogram_bins)
    with stage("report"):
        _dump(out / REPORT_JSON, {"reports": [report.to_dict()], "logit_stats": {config.name: _stats_dict(stats)}})
        render_outputs(out)
    return report


def run_transfer(config: ExperimentConfig, params: ModelParams) -> list[TransferMatrix]:
    """Black-box matrices with the configured source checkpoints plus this model."""
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    with stage("checkpoint"):
        models = {Path(p).stem: _load(config, p) for p in config.evaluation.transfer_sources}
        models[config.name] = params
    with stage("data"):
        _, test = build_datasets(config.data, config.seed, config.model.kind == "small-conv")
        test = _eval_set(config, test)
    with stage("transfer"):
        specs = [a for a in config.evaluation.attacks if a.kind != "natural"] or list(config.evaluation.attacks)
        matrices = [blackbox_transfer(models, models, s, test, config.threat, config.evaluation.seed) for s in specs]
    with stage("report"):
        _dump(out / TRANSFER_JSON, {"matrices": [m.to_dict() for m in matrices]})
        render_outputs(out)
    return matrices


def run_probe(config: ExperimentConfig, params: ModelParams) -> dict:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    if config.threat is None:
        raise PipelineError("probe", ValueError("the masking probe needs a [threat] section"))
    with stage("data"):
        _, test = build_datasets(config.data, config.seed, config.model.kind == "small-conv")
        test = _eval_set(config, test)
    with stage("probe"):
        ev = config.evaluation
        probe = masking_probe(params, test, config.threat, ev.probe_depths, ev.spsa, ev.seed)
        record = asdict(probe)
        record["pgd"] = {str(k): v for k, v in probe.pgd.items()}
        record["subsample"] = list(probe.subsample)
    with stage("report"):
        _dump(out / PROBE_JSON, record)
    return record


def render_outputs(out, format: str | None = None) -> dict[str, str]:
    """Render every saved report in ``out`` to markdown and csv (or one ``format``) plus figures."""
    out = Path(out)
    reports, matrices, stats = [], [], {}
    if (out / REPORT_JSON).is_file():
        blob = json.loads((out / REPORT_JSON).read_text())
        reports = [RobustnessReport.from_dict(d) for d in blob["reports"]]
        stats = {k: _stats_from_dict(v) for k, v in blob.get("logit_stats", {}).items()}
    if (out / TRANSFER_JSON).is_file():
        matrices = [TransferMatrix.from_dict(d) for d in json.loads((out / TRANSFER_JSON).read_text())["matrices"]]
    if not reports and not matrices:
        raise FileNotFoundError(f"no saved reports in {out}")
    rendered = {}
    for fmt in [format] if format else ["markdown", "csv"]:
        text = render_report(reports + matrices, fmt, stats or None)
        (out / ("report.md" if fmt == "markdown" else "report.csv")).write_text(text)
        rendered[fmt] = text
    if reports:
        plot_accuracy_bars(reports, out / "accuracy.png")
    if stats:
        plot_logit_histograms(stats, out / "logits.png")
    for i, m in enumerate(matrices):
        plot_transfer_matrix(m, out / f"transfer_{i}.png")
    return rendered
