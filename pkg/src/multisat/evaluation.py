"""Segmentation metrics, run aggregation, learning-rate sweep and comparison reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .datamodel import IGNORE_INDEX

METRICS = ("water_iou", "overall_accuracy", "mean_iou")
DEFAULT_LRS = (1e-1, 1e-2, 1e-3, 1e-4)


class EvaluationError(ValueError):
    pass


class AllRunsDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- confusion matrix


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def confusion_accumulate(cm: np.ndarray, pred, truth, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Add pixel counts (rows = truth, columns = prediction); ignored truth pixels are skipped."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise EvaluationError(f"shape mismatch {pred.shape} vs {truth.shape}")
    k = cm.shape[0]
    keep = truth != ignore_index
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k):
        raise EvaluationError("class id outside the confusion matrix")
    cm += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


def iou(cm: np.ndarray, c: int) -> float | None:
    tp = cm[c, c]
    denom = cm[c, :].sum() + cm[:, c].sum() - tp
    if denom == 0:
        return None
    return float(tp / denom)


def per_class_iou(cm: np.ndarray) -> list[float | None]:
    return [iou(cm, c) for c in range(cm.shape[0])]


def mean_iou(cm: np.ndarray) -> float | None:
    """Mean over classes whose IoU is defined; undefined classes are left out."""
    vals = [v for v in per_class_iou(cm) if v is not None]
    return float(np.mean(vals)) if vals else None


def overall_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    return float(np.trace(cm) / total)


def summarize(cm: np.ndarray, water_class: int = 0) -> dict:
    return {
        "mean_iou": mean_iou(cm),
        "overall_accuracy": overall_accuracy(cm),
        "water_iou": iou(cm, water_class),
        "per_class_iou": per_class_iou(cm),
    }


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class RunResult:
    dataset: str
    init: str
    fraction: float
    set_index: int
    metric: str
    value: float
    peak_step: int | None = None


def aggregate_runs(values: Iterable[float]) -> tuple[float, float | None]:
    """Arithmetic mean and sample (n - 1) standard deviation; the std is None for one value."""
    vals = [float(v) for v in values]
    if not vals:
        raise EvaluationError("no values to aggregate")
    mean = math.fsum(vals) / len(vals)
    if len(vals) == 1:
        return mean, None
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var)


def format_mean_std(mean: float, std: float | None, scale: float = 100.0) -> str:
    if std is None:
        return f"{mean * scale:.2f}"
    return f"{mean * scale:.2f} ± {std * scale:.2f}"


def fraction_label(f: float) -> str:
    return f"{f * 100:g}%"


def result_table(results: Sequence[RunResult], lrs: Mapping[str, float], metric: str) -> str:
    """Tab-delimited table: checkpoint, lr, then mean ± std per fraction."""
    fractions = sorted({r.fraction for r in results if r.metric == metric})
    inits = list(dict.fromkeys(r.init for r in results if r.metric == metric))
    lines = ["\t".join(["checkpoint", "lr"] + [f"{fraction_label(f)} split" for f in fractions])]
    for init in inits:
        row = [init, f"{lrs.get(init, float('nan')):g}"]
        for f in fractions:
            vals = [r.value for r in results if r.init == init and r.fraction == f and r.metric == metric]
            row.append(format_mean_std(*aggregate_runs(vals)) if vals else "")
        lines.append("\t".join(row))
    lines.append(f"# metric={metric}; values are mean ± sample std (n-1) over split sets, x100")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- sweep / curves


def lr_sweep(run: Callable[[float], float], lrs: Sequence[float] = DEFAULT_LRS) -> tuple[float, dict]:
    """Call ``run(lr)`` for each rate and return ``(best_lr, scores)``.

    ``run`` returns the best validation metric of a full-data fine-tune, or
    raises / returns NaN when training diverged. Ties go to the smaller rate.
    """
    scores = {}
    for lr in lrs:
        try:
            score = float(run(lr))
        except (FloatingPointError, ArithmeticError, RuntimeError):
            score = float("nan")
        scores[lr] = score
    valid = {lr: s for lr, s in scores.items() if not math.isnan(s)}
    if not valid:
        raise AllRunsDiverged(f"every learning rate diverged: {sorted(scores)}")
    best = max(valid.values())
    return min(lr for lr, s in valid.items() if s == best), scores


def steps_to_peak(log: Sequence[tuple[int, float]]) -> int:
    """Earliest step at which the validation metric reaches its maximum."""
    if not log:
        raise EvaluationError("empty metric log")
    best = max(v for _, v in log)
    return min(step for step, v in log if v == best)


def per_class_delta(results_a: Mapping[int, Sequence[float | None]],
                    results_b: Mapping[int, Sequence[float | None]]) -> list[float | None]:
    """Per-class mean over set indices of ``IoU_a - IoU_b``.

    Sets where either side leaves a class undefined do not contribute to that
    class; a class undefined everywhere yields None.
    """
    if set(results_a) != set(results_b):
        raise EvaluationError("result sets cover different set indices")
    ks = {len(v) for v in results_a.values()} | {len(v) for v in results_b.values()}
    if len(ks) != 1:
        raise EvaluationError("result sets cover different classes")
    k = ks.pop()
    out = []
    for c in range(k):
        diffs = [results_a[s][c] - results_b[s][c] for s in sorted(results_a)
                 if results_a[s][c] is not None and results_b[s][c] is not None]
        out.append(math.fsum(diffs) / len(diffs) if diffs else None)
    return out


def write_delta_file(delta: Sequence[float | None], class_names: Sequence[str], path,
                     label_a: str = "multimodal", label_b: str = "simclr") -> None:
    lines = ["class_id\tclass\tmean_iou_delta"]
    for c, d in enumerate(delta):
        lines.append(f"{c}\t{class_names[c]}\t{'' if d is None else repr(d)}")
    lines.append(f"# delta = IoU({label_a}) - IoU({label_b}) averaged over split sets; "
                 "undefined IoUs are excluded")
    Path(path).write_text("\n".join(lines) + "\n")


def read_delta_file(path) -> list[float | None]:
    out = []
    for line in Path(path).read_text().splitlines()[1:]:
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        out.append(float(cols[2]) if cols[2] else None)
    return out
