"""Transfer studies: fine-tune every initialization over the sub-sampling plan and report.

Two entry points share the reporting code:

* :func:`run_study` fine-tunes existing checkpoints over a split plan
  (optionally after a learning-rate sweep on the full training split).
* :func:`run_desk_experiment` additionally pre-trains the multimodal and
  SimCLR towers once per seed, then fine-tunes all three initializations on
  the split set matching that seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .datamodel import read_manifest
from .evaluation import (
    DEFAULT_LRS,
    METRICS,
    RunResult,
    lr_sweep,
    per_class_delta,
    result_table,
    write_delta_file,
)
from .pairing import find_split, read_splits
from .trainer import (
    ConfigError,
    FinetuneConfig,
    PretrainConfig,
    config_from_dict,
    finetune,
    finetune_arrays,
    pretrain,
    pretrain_arrays,
    select_split,
)

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    init: str
    fraction: float
    set_index: int
    seed: int
    lr: float
    metrics: dict
    per_class_iou: list
    best_step: int
    steps_to_peak: int
    curve: list


@dataclass
class StudyReport:
    records: list[RunRecord]
    lrs: dict[str, float]
    delta: list | None
    paths: dict[str, Path] = field(default_factory=dict)

    def mean(self, init: str, fraction: float, metric: str = "mean_iou") -> float:
        vals = [r.metrics[metric] for r in self.records if r.init == init and r.fraction == fraction]
        return float(np.mean(vals))


def _load_dataset(data_root, modality: str) -> tuple[dict, list]:
    root = Path(data_root)
    train = read_manifest(root / "train.manifest")
    validation = read_manifest(root / "validation.manifest")
    splits = read_splits(root / "splits.tsv")
    return finetune_arrays(train, validation, modality), splits


def _finetune_one(base: FinetuneConfig, init: str, ckpt_path, ckpt, lr: float, data: dict,
                  fraction: float, set_index: int, seed: int, out_dir) -> RunRecord:
    cfg = config_from_dict(FinetuneConfig, {
        **asdict(base), "init": init, "init_checkpoint": None if init == "random" else str(ckpt_path),
        "base_lr": lr, "fraction": fraction, "set_index": set_index, "seed": seed,
    })
    res = finetune(cfg, data, out_dir=out_dir, init_ckpt=ckpt)
    m = res.best_metrics
    log.info("%s f=%g set=%d lr=%g: best %s=%.4f at step %d", init, fraction, set_index, lr,
             cfg.select_metric, m[cfg.select_metric], res.best_step)
    return RunRecord(init, fraction, set_index, seed, lr,
                     {k: m[k] for k in METRICS}, list(m["per_class_iou"]), res.best_step,
                     res.steps_to_peak, res.log.series("validation", cfg.select_metric))


# ---------------------------------------------------------------- reports


def write_reports(records: Sequence[RunRecord], lrs: Mapping[str, float], out_dir,
                  class_names: Sequence[str], compare=("multimodal_ckpt", "simclr_ckpt"),
                  delta_fraction: float = 0.01, highlight: Sequence[int] = ()) -> StudyReport:
    """Result tables, per-class delta, steps-to-peak report and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    rows = ["init\tfraction\tset_index\tseed\tlr\tmean_iou\toverall_accuracy\twater_iou\tbest_step"]
    for r in records:
        vals = ["" if r.metrics[k] is None else repr(r.metrics[k]) for k in ("mean_iou", "overall_accuracy", "water_iou")]
        rows.append("\t".join([r.init, f"{r.fraction:g}", str(r.set_index), str(r.seed), f"{r.lr:g}", *vals,
                               str(r.best_step)]))
    paths["runs"] = out / "runs.tsv"
    paths["runs"].write_text("\n".join(rows) + "\n")

    for metric in METRICS:
        results = [RunResult("synthetic", r.init, r.fraction, r.set_index, metric, r.metrics[metric], r.steps_to_peak)
                   for r in records if r.metrics[metric] is not None]
        paths[f"table_{metric}"] = out / f"table_{metric}.tsv"
        paths[f"table_{metric}"].write_text(result_table(results, lrs, metric))

    peak = ["init\tfraction\tset_index\tsteps_to_peak\tpeak_value"]
    for r in records:
        best = max(v for _, v in r.curve) if r.curve else float("nan")
        peak.append(f"{r.init}\t{r.fraction:g}\t{r.set_index}\t{r.steps_to_peak}\t{best!r}")
    paths["steps_to_peak"] = out / "steps_to_peak.tsv"
    paths["steps_to_peak"].write_text("\n".join(peak) + "\n")

    a, b = compare
    side = {name: {r.set_index: r.per_class_iou for r in records if r.init == name and r.fraction == delta_fraction}
            for name in compare}
    delta = None
    if side[a] and side[b]:
        delta = per_class_delta(side[a], side[b])
        short = {"multimodal_ckpt": "multimodal", "simclr_ckpt": "simclr"}
        paths["class_delta"] = out / "class_delta.tsv"
        write_delta_file(delta, class_names, paths["class_delta"], short.get(a, a), short.get(b, b))
        paths["class_delta_png"] = plotting.plot_class_delta(
            delta, class_names, out / "class_delta.png",
            title=f"IoU({short.get(a, a)}) - IoU({short.get(b, b)})", highlight=highlight)

    curves = {}
    for init in dict.fromkeys(r.init for r in records):
        runs = [r.curve for r in records if r.init == init and r.fraction == delta_fraction and r.curve]
        if runs and all(len(c) == len(runs[0]) for c in runs):
            curves[init] = [(s, float(np.mean([c[i][1] for c in runs]))) for i, (s, _) in enumerate(runs[0])]
    if curves:
        paths["curves_png"] = plotting.plot_curves(curves, out / "validation_curves.png")
    return StudyReport(list(records), dict(lrs), delta, paths)


# ---------------------------------------------------------------- study over existing checkpoints


@dataclass
class StudyPlan:
    inits: dict = field(default_factory=lambda: {"random": None})  # init -> checkpoint path
    fractions: dict = field(default_factory=lambda: {0.01: 5, 0.1: 5, 1.0: 3})
    lrs: tuple = DEFAULT_LRS
    sweep: bool = True
    compare: tuple = ("multimodal_ckpt", "simclr_ckpt")
    delta_fraction: float = 0.01
    finetune: dict = field(default_factory=dict)


def run_study(plan: StudyPlan, data_root, out_dir, seed: int = 0,
              class_names: Sequence[str] | None = None, highlight: Sequence[int] = ()) -> StudyReport:
    base = config_from_dict(FinetuneConfig, {**plan.finetune, "seed": seed})
    full, splits = _load_dataset(data_root, base.modality)
    out = Path(out_dir)
    names = class_names or [str(c) for c in range(base.num_classes)]
    records, chosen = [], {}
    for init, path in plan.inits.items():
        ckpt = None if init == "random" else load_checkpoint(path)
        if plan.sweep and len(plan.lrs) > 1:
            sweep_data = select_split(full, find_split(splits, 1.0, 0))

            def score(lr, init=init, path=path, ckpt=ckpt):
                rec = _finetune_one(base, init, path, ckpt, lr, sweep_data, 1.0, 0, seed,
                                    out / "sweep" / init / f"lr_{lr:g}")
                return rec.metrics[base.select_metric]

            chosen[init], scores = lr_sweep(score, plan.lrs)
            log.info("%s sweep: %s -> %g", init, scores, chosen[init])
        else:
            chosen[init] = plan.lrs[0]
        for fraction, count in sorted(plan.fractions.items()):
            for k in range(count):
                data = select_split(full, find_split(splits, fraction, k))
                run_dir = out / "runs" / init / f"f{fraction:g}_set{k}"
                records.append(_finetune_one(base, init, path, ckpt, chosen[init], data, fraction, k, seed, run_dir))
    return write_reports(records, chosen, out, names, plan.compare, plan.delta_fraction, highlight)


# ---------------------------------------------------------------- desk experiment


# Narrow tiny encoder shared by both stages so pre-training fits near native resolution.
DESK_ENCODER = {"profile": "tiny", "widths": [16, 32, 64, 128]}


@dataclass
class DeskConfig:
    seeds: tuple = (0, 1, 2)
    fraction: float = 0.01
    pretrain: dict = field(default_factory=lambda: {
        "batch_size": 32, "total_steps": 2000, "base_lr": 0.01, "trust_coeff": 0.2, "crop_size": 48,
        "area_range": (0.6, 1.0), "ckpt_every": 1000, "encoder": dict(DESK_ENCODER)})
    finetune: dict = field(default_factory=lambda: {
        "batch_size": 8, "crop_size": 64, "base_lr": 0.01, "total_steps": 300, "eval_every": 30,
        "encoder": dict(DESK_ENCODER)})
    methods: tuple = ("multimodal", "simclr")


def run_desk_experiment(cfg: DeskConfig, data_root, out_dir, class_names: Sequence[str] | None = None,
                        highlight: Sequence[int] = ()) -> StudyReport:
    """Pre-train both methods and fine-tune three inits on the 1% set matching each seed."""
    root, out = Path(data_root), Path(out_dir)
    for key in ("method", "seed"):
        if key in cfg.pretrain:
            raise ConfigError(f"pretrain.{key} is set by the experiment")
    base = config_from_dict(FinetuneConfig, cfg.finetune)
    train = read_manifest(root / "train.manifest")
    full, splits = _load_dataset(root, base.modality)
    unlabeled = None
    records = []
    for seed in cfg.seeds:
        ckpts = {}
        for method in cfg.methods:
            pcfg = config_from_dict(PretrainConfig, {**cfg.pretrain, "method": method, "seed": seed,
                                                    "modality": base.modality})
            if unlabeled is None:
                unlabeled = pretrain_arrays(train, config_from_dict(PretrainConfig, {"method": "multimodal"}))
            run_dir = out / "pretrain" / f"{method}_seed{seed}"
            res = pretrain(pcfg, data=unlabeled, out_dir=run_dir)
            first, last = res.log.records[0][3], res.log.records[-1][3]
            log.info("pretrain %s seed %d: loss %.3f -> %.3f in %.0fs", method, seed, first, last, res.seconds)
            path = run_dir / "final.ckpt"
            save_checkpoint(res.checkpoint, path)
            ckpts[f"{method}_ckpt"] = (path, res.checkpoint)
        data = select_split(full, find_split(splits, cfg.fraction, seed))
        inits = {"random": (None, None), **ckpts}
        for init, (path, ckpt) in inits.items():
            run_dir = out / "finetune" / f"{init}_seed{seed}"
            records.append(_finetune_one(base, init, path, ckpt, base.base_lr, data, cfg.fraction, seed, seed, run_dir))
    names = class_names or [str(c) for c in range(base.num_classes)]
    lrs = {r.init: r.lr for r in records}
    report = write_reports(records, lrs, out, names, delta_fraction=cfg.fraction, highlight=highlight)
    (out / "experiment.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True, default=str) + "\n")
    return report
