"""Pipeline stages. Each stage reads only on-disk artifacts plus the config.

Artifacts in the output directory:

    config.json      resolved configuration
    model.ckpt       trained model            (train)
    trace.json       TraceReport              (estimate)
    sensitivity.json per-channel records      (prune)
    plan.json        PrunePlan                (prune)
    pruned.ckpt      rebuilt model            (prune)
    finetuned.ckpt   fine-tuned pruned model  (finetune)
    model.q8         INT8 export              (qat)
    quant.json       QAT metrics              (qat)
    bench.json       FP32 vs FP16 comparison  (bench)
    report.json      RunReport                (report)
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from ..errors import MissingArtifact
from ..hutchinson import HessianBatch, TraceReport, compare_modes, estimate_trace
from ..models import accuracy, build_model, count_params_flops, load_checkpoint, save_checkpoint, train
from ..pruner import PrunePlan, apply_prune, channel_sensitivity, fine_tune, select_channels
from ..quant import export_int8, qat_train, quantized_eval
from ..report import canonical_json
from .config import PipelineConfig, build_config
from .datasets import DatasetSplit, load_dataset

log = logging.getLogger(__name__)

CONFIG = "config.json"
MODEL = "model.ckpt"
TRACE = "trace.json"
SENSITIVITY = "sensitivity.json"
PLAN = "plan.json"
PRUNED = "pruned.ckpt"
FINETUNED = "finetuned.ckpt"
QUANTIZED = "model.q8"
QUANT_METRICS = "quant.json"
BENCH = "bench.json"
REPORT = "report.json"


def _out(cfg: PipelineConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"missing artifact {path}")
    return path


def _write_json(path: Path, obj) -> str:
    text = canonical_json(obj)
    path.write_text(text)
    return text


def _load_model(path: Path):
    return load_checkpoint(_need(path).read_bytes())


def save_config(cfg: PipelineConfig) -> None:
    _write_json(_out(cfg) / CONFIG, cfg.to_dict())


def config_from_dir(out_dir) -> PipelineConfig:
    values = json.loads(_need(Path(out_dir) / CONFIG).read_text())
    values["output.dir"] = str(out_dir)
    return build_config(values)


def dataset(cfg: PipelineConfig) -> DatasetSplit:
    return load_dataset(cfg.dataset_spec())


def hessian_batch(cfg: PipelineConfig, data: DatasetSplit) -> HessianBatch:
    """The first ``hessian_batch_size`` training samples, clamped to the split size."""
    size = cfg["hutchinson.hessian_batch_size"]
    if size > len(data.train):
        log.warning("hessian batch size %d clamped to training set size %d", size, len(data.train))
        size = len(data.train)
    return HessianBatch(data.train.x[:size], data.train.y[:size])


def run_train(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    data = dataset(cfg)
    spec = cfg.model_spec(data.num_classes, data.input_shape)
    model = build_model(spec, cfg["seeds.init"])
    trained, history = train(model, data.train, cfg.train, cfg["seeds.train"])
    (out / MODEL).write_bytes(save_checkpoint(trained))
    acc = accuracy(trained, data.test.x, data.test.y)
    summary = {"stage": "train", "test_accuracy": acc, "params": trained.num_params(), "history": history.to_dict()}
    _write_json(out / "train.json", summary)
    return summary


def run_estimate(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    model = _load_model(out / MODEL)
    report = estimate_trace(model, hessian_batch(cfg, dataset(cfg)), cfg["hutchinson.n_v"], cfg.mode,
                            cfg["seeds.hutchinson"], scales=cfg.scales)
    _write_json(out / TRACE, report.to_dict())
    return report.to_dict()


def run_prune(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    model = _load_model(out / MODEL)
    report = TraceReport.from_dict(json.loads(_need(out / TRACE).read_text()))
    records = channel_sensitivity(report, model)
    plan = select_channels(records, cfg["pruning.target_compression"], cfg["pruning.prune_ratio_limit"],
                           total_params=model.num_params())
    pruned = apply_prune(model, plan)
    _write_json(out / SENSITIVITY, [r.to_dict() for r in records])
    _write_json(out / PLAN, plan.to_dict())
    (out / PRUNED).write_bytes(save_checkpoint(pruned))
    return plan.to_dict()


def run_finetune(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    pruned = _load_model(out / PRUNED)
    data = dataset(cfg)
    tuned, history = fine_tune(pruned, data.train, cfg.finetune, cfg["seeds.train"])
    (out / FINETUNED).write_bytes(save_checkpoint(tuned))
    return {"stage": "finetune", "test_accuracy": accuracy(tuned, data.test.x, data.test.y),
            "history": history.to_dict()}


def run_qat(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    tuned = _load_model(out / FINETUNED)
    data = dataset(cfg)
    qat = qat_train(tuned, data.train, cfg.qat, cfg["seeds.train"])
    blob = export_int8(qat)
    (out / QUANTIZED).write_bytes(blob)
    metrics = {
        "pruned_acc": accuracy(tuned, data.test.x, data.test.y),
        "quantized_acc": quantized_eval(blob, data.test),
        "file_bytes": len(blob),
    }
    _write_json(out / QUANT_METRICS, metrics)
    return metrics


def run_bench(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    model = _load_model(out / MODEL)
    cmp = compare_modes(model, hessian_batch(cfg, dataset(cfg)), cfg["hutchinson.n_v"], cfg["seeds.hutchinson"])
    result = cmp.to_dict()
    result["fp32_wall_time_s"] = cmp.fp32.instrumentation["wall_time"]
    result["fp16_wall_time_s"] = cmp.fp16.instrumentation["wall_time"]
    _write_json(out / BENCH, result)
    return result


def build_report(out_dir) -> dict:
    """RunReport recomputed from the artifacts in ``out_dir``.

    Needs at least the config and the trained checkpoint; later-stage
    entries are null when their artifacts are absent. Wall-times are left
    out so the report is reproducible byte for byte.
    """
    out = Path(out_dir)
    if not out.is_dir():
        raise MissingArtifact(f"no such output directory {out}")
    cfg = config_from_dir(out)
    original = _load_model(out / MODEL)
    data = dataset(cfg)
    params0, flops0 = count_params_flops(original)
    report: dict = {
        "original_accuracy": accuracy(original, data.test.x, data.test.y),
        "original_params": params0,
        "original_flops": flops0,
        "pruned_accuracy": None,
        "finetuned_accuracy": None,
        "quantized_accuracy": None,
        "pruned_params": None,
        "pruned_flops": None,
        "achieved_compression": None,
        "flops_ratio": None,
        "trace": None,
        "file_bytes": {"model.ckpt": (out / MODEL).stat().st_size},
        "mode_comparison": None,
    }
    if (out / TRACE).is_file():
        t = json.loads((out / TRACE).read_text())
        report["trace"] = {k: t[k] for k in ("mode", "n_v", "scale", "global_trace", "residue_trace")}
    if (out / PRUNED).is_file():
        pruned = _load_model(out / PRUNED)
        p1, f1 = count_params_flops(pruned)
        report.update(pruned_accuracy=accuracy(pruned, data.test.x, data.test.y), pruned_params=p1,
                      pruned_flops=f1, achieved_compression=p1 / params0, flops_ratio=f1 / flops0)
        report["file_bytes"]["pruned.ckpt"] = (out / PRUNED).stat().st_size
    if (out / PLAN).is_file():
        plan = PrunePlan.from_dict(json.loads((out / PLAN).read_text()))
        report["plan_predicted_compression"] = plan.achieved_compression_ratio
    if (out / FINETUNED).is_file():
        tuned = _load_model(out / FINETUNED)
        report["finetuned_accuracy"] = accuracy(tuned, data.test.x, data.test.y)
        report["file_bytes"]["finetuned.ckpt"] = (out / FINETUNED).stat().st_size
    if (out / QUANTIZED).is_file():
        blob = (out / QUANTIZED).read_bytes()
        report["quantized_accuracy"] = quantized_eval(blob, data.test)
        report["file_bytes"]["model.q8"] = len(blob)
    if (out / BENCH).is_file():
        bench = json.loads((out / BENCH).read_text())
        report["mode_comparison"] = {k: v for k, v in bench.items() if "wall_time" not in k}
    return report


def run_report(cfg: PipelineConfig) -> dict:
    report = build_report(cfg.out_dir)
    _write_json(Path(cfg.out_dir) / REPORT, report)
    return report


def run_pipeline(cfg: PipelineConfig) -> dict:
    save_config(cfg)
    for stage in (run_train, run_estimate, run_prune, run_finetune, run_qat):
        log.info("running %s", stage.__name__[4:])
        stage(cfg)
    return run_report(cfg)


STAGES = {
    "train": run_train,
    "estimate": run_estimate,
    "prune": run_prune,
    "finetune": run_finetune,
    "qat": run_qat,
    "bench": run_bench,
    "report": run_report,
    "pipeline": run_pipeline,
}
