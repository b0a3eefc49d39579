"""Optimizers, learning-rate schedules and the pre-training / fine-tuning loops."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as aug
from .checkpoint import Checkpoint, load_checkpoint, module_state, save_checkpoint
from .datamodel import IGNORE_INDEX, S1, S2, DatasetManifest
from .evaluation import confusion_accumulate, new_confusion, steps_to_peak, summarize
from .loss import LossConfig, multimodal_nce, ntxent
from .model import (
    ContrastiveTower,
    EncoderSpec,
    ProjectionSpec,
    SegmentationNet,
    SegmentationSpec,
    TransferReport,
    param_fingerprint,
    spec_fingerprint,
    transfer_encoder,
)
from .pairing import SplitPlan

log = logging.getLogger(__name__)

CHANNELS = {S1: 2, S2: 3}
INITS = ("random", "imagenet_adapted", "simclr_ckpt", "multimodal_ckpt")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, step=None, last_checkpoint=None):
        super().__init__(msg)
        self.step = step
        self.last_checkpoint = last_checkpoint


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- schedules


def _check_step(step, total_steps):
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    _check_step(step, total_steps)
    if step == total_steps:
        return 0.0
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def polynomial_lr(step: int, total_steps: int, base_lr: float, power: float = 0.9) -> float:
    _check_step(step, total_steps)
    return base_lr * (1.0 - step / total_steps) ** power


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimState:
    momentum: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def buffer(self, name: str, like: torch.Tensor) -> torch.Tensor:
        buf = self.momentum.get(name)
        if buf is None:
            buf = torch.zeros_like(like)
            self.momentum[name] = buf
        elif buf.shape != like.shape:
            raise ValueError(f"momentum buffer for {name} has shape {tuple(buf.shape)}, expected {tuple(like.shape)}")
        return buf


def _check_finite(name, g):
    if not torch.isfinite(g).all():
        raise TrainingDiverged(f"non-finite gradient for {name}")


@torch.no_grad()
def lars_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: OptimState,
              global_lr: float, weight_decay: float, momentum: float = 0.9, trust_coeff: float = 0.001,
              exclusions=(), adapt: bool = True) -> OptimState:
    """One in-place LARS update.

    Per tensor ``w``: ``g' = g + wd * w``, local rate ``trust * |w| / |g'|``
    (1 if either norm is zero), ``m = momentum * m + local * lr * g'`` and
    ``w -= m``. Names in ``exclusions`` skip both decay and trust scaling.
    """
    excluded = set(exclusions)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        _check_finite(name, g)
        skip = name in excluded
        gp = g if (skip or weight_decay == 0) else g + weight_decay * w
        local = 1.0
        if adapt and not skip:
            wn, gn = torch.linalg.vector_norm(w), torch.linalg.vector_norm(gp)
            if wn > 0 and gn > 0:
                local = trust_coeff * wn / gn
        m = state.buffer(name, w)
        m.mul_(momentum).add_(gp * (local * global_lr))
        w.sub_(m)
    state.step += 1
    return state


@torch.no_grad()
def momentum_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: OptimState,
                  lr: float, weight_decay: float, momentum: float = 0.9) -> OptimState:
    """Heavy-ball update ``m = momentum * m + g + wd * w; w -= lr * m``."""
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        _check_finite(name, g)
        m = state.buffer(name, w)
        m.mul_(momentum).add_(g)
        if weight_decay:
            m.add_(w, alpha=weight_decay)
        w.sub_(m, alpha=lr)
    state.step += 1
    return state


def adaptation_exclusions(module: torch.nn.Module, prefix: str = "") -> list[str]:
    """Names of biases and normalization scales/offsets under ``module``."""
    out = []
    for mname, sub in module.named_modules():
        for pname, _ in sub.named_parameters(recurse=False):
            full = f"{prefix}{mname}.{pname}" if mname else f"{prefix}{pname}"
            if pname == "bias" or isinstance(sub, (torch.nn.BatchNorm2d, torch.nn.GroupNorm, torch.nn.LayerNorm)):
                out.append(full)
    return out


# ---------------------------------------------------------------- metric log


class MetricLog:
    """Append-only ``step<TAB>split<TAB>metric<TAB>value`` records."""

    HEADER = "step\tsplit\tmetric\tvalue"

    def __init__(self, path=None):
        self.records: list[tuple[int, str, str, float]] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(self.HEADER + "\n")

    def add(self, step: int, split: str, metric: str, value: float):
        self.records.append((step, split, metric, float(value)))
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(f"{step}\t{split}\t{metric}\t{float(value)!r}\n")

    def series(self, split: str, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, sp, m, v in self.records if sp == split and m == metric]

    @classmethod
    def read(cls, path) -> "MetricLog":
        out = cls()
        for line in Path(path).read_text().splitlines()[1:]:
            s, sp, m, v = line.split("\t")
            out.records.append((int(s), sp, m, float(v)))
        return out


# ---------------------------------------------------------------- data helpers


class EpochSampler:
    """Batches drawn without replacement, reshuffled every epoch; the last partial batch is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size > n:
            raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.epoch = 0
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self.epoch += 1
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _to_input(images: list[np.ndarray]) -> torch.Tensor:
    # Normalized [0, 255] tiles scaled to [0, 1], channels-first.
    x = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _encoder_spec(enc: Mapping, modality: str) -> EncoderSpec:
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in dict(enc).items()}
    kw["input_channels"] = CHANNELS[modality]
    return EncoderSpec(**kw)


# ---------------------------------------------------------------- pre-training


@dataclass
class PretrainConfig:
    method: str = "multimodal"  # multimodal | simclr
    modality: str = S1  # simclr only
    augment: str | None = None  # defaults per method
    batch_size: int = 256
    total_steps: int = 2000
    base_lr: float = 2.0
    weight_decay: float = 1e-4
    momentum: float = 0.9
    trust_coeff: float = 0.001
    temperature: float = 0.1
    crop_size: int = 256
    area_range: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    encoder: dict = field(default_factory=lambda: {"profile": "tiny"})
    projection_dim: int = 128
    ckpt_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("multimodal", "simclr"):
            raise ConfigError(f"unknown pre-training method {self.method!r}")
        if self.modality not in CHANNELS:
            raise ConfigError(f"unknown modality {self.modality!r}")
        for name in ("batch_size", "total_steps", "base_lr", "temperature", "crop_size", "ckpt_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        self.area_range = tuple(self.area_range)
        self.aspect_range = tuple(self.aspect_range)

    @property
    def preset(self) -> str:
        if self.augment:
            return self.augment
        if self.method == "multimodal":
            return "multimodal_spatial"
        return "simclr_s1" if self.modality == S1 else "simclr_s2"

    @property
    def modalities(self) -> tuple[str, ...]:
        return (S1, S2) if self.method == "multimodal" else (self.modality,)


# Settings of the full-scale run, for reference and config templates.
PAPER_PRETRAIN = dict(batch_size=4096, total_steps=160_000, base_lr=0.48, weight_decay=1e-4,
                      temperature=0.1, crop_size=256, encoder={"profile": "resnet50_mod"})


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    log: MetricLog
    checkpoint_paths: list[Path]
    seconds: float


def build_towers(cfg: PretrainConfig) -> dict[str, ContrastiveTower]:
    torch.manual_seed(cfg.seed)
    proj = ProjectionSpec(output_dim=cfg.projection_dim)
    return {m: ContrastiveTower(_encoder_spec(cfg.encoder, m), proj) for m in cfg.modalities}


def towers_checkpoint(towers: Mapping[str, ContrastiveTower], step: int, rng_state=None, meta=None) -> Checkpoint:
    groups, specs, fps = {}, {}, {}
    for m, t in towers.items():
        groups[f"encoder/{m}"] = module_state(t.encoder)
        groups[f"projection/{m}"] = module_state(t.projection)
        specs[f"encoder/{m}"] = asdict(t.enc_spec)
        specs[f"projection/{m}"] = asdict(t.proj_spec)
        fps[f"encoder/{m}"] = spec_fingerprint(t.enc_spec)
        fps[f"projection/{m}"] = spec_fingerprint(t.proj_spec)
    return Checkpoint(groups, specs, fps, step, rng_state or {}, meta or {})


def pretrain_arrays(manifest: DatasetManifest, cfg: PretrainConfig) -> dict[str, np.ndarray]:
    from .synthetic import load_arrays

    if manifest.split != "train":
        raise ConfigError(f"pre-training reads the train split only, got {manifest.split!r}")
    roles = tuple(m.lower() for m in cfg.modalities)
    return load_arrays(manifest, roles=roles, with_labels=False)


def pretrain(cfg: PretrainConfig, pairs: DatasetManifest | None = None, out_dir=None,
             data: Mapping[str, np.ndarray] | None = None,
             on_step: Callable[[int, float], None] | None = None) -> PretrainResult:
    """Contrastive pre-training; never reads labels.

    ``data`` may carry preloaded ``s1``/``s2`` arrays (``N x H x W x C`` in
    ``[0, 255]``) instead of a manifest.
    """
    t0 = time.time()
    if data is None:
        if pairs is None:
            raise ConfigError("pretrain needs a manifest or preloaded arrays")
        data = pretrain_arrays(pairs, cfg)
    arrays = {m: data[m.lower()] for m in cfg.modalities}
    n = len(next(iter(arrays.values())))
    out = Path(out_dir) if out_dir else None
    pipeline = aug.build_pipeline(cfg.preset, cfg.crop_size, cfg.area_range, cfg.aspect_range)
    towers = build_towers(cfg)
    params, exclusions = {}, []
    for m, t in towers.items():
        for name, p in t.named_parameters():
            params[f"{m}.{name}"] = p
        exclusions += adaptation_exclusions(t, prefix=f"{m}.")
    state = OptimState()
    loss_cfg = LossConfig(cfg.temperature)
    sampler_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    sampler = EpochSampler(n, cfg.batch_size, sampler_rng)
    metric_log = MetricLog(out / "metrics.tsv" if out else None)
    ckpt_paths: list[Path] = []
    for t in towers.values():
        t.train()

    def snapshot(step):
        return towers_checkpoint(towers, step, {"sampler": _rng_state(sampler_rng), "epoch": sampler.epoch},
                                 {"method": cfg.method, "preset": cfg.preset, "seed": cfg.seed})

    for step in range(cfg.total_steps):
        idx = sampler.next()
        views_a, views_b = [], []
        for j, i in enumerate(idx):
            ra, rb = aug.pair_streams(cfg.seed, step, j)
            if cfg.method == "multimodal":
                views_a.append(aug.apply_pipeline(arrays[S1][i], pipeline, ra))
                views_b.append(aug.apply_pipeline(arrays[S2][i], pipeline, rb))
            else:
                img = arrays[cfg.modality][i]
                views_a.append(aug.apply_pipeline(img, pipeline, ra))
                views_b.append(aug.apply_pipeline(img, pipeline, rb))
        if cfg.method == "multimodal":
            za = towers[S1](_to_input(views_a))
            zb = towers[S2](_to_input(views_b))
            loss, _ = multimodal_nce(za, zb, loss_cfg)
        else:
            tower = towers[cfg.modality]
            za, zb = tower(_to_input(views_a)), tower(_to_input(views_b))
            loss = ntxent(za, zb, loss_cfg)
        value = float(loss.detach())
        if not math.isfinite(value):
            last = ckpt_paths[-1] if ckpt_paths else None
            raise TrainingDiverged(f"loss became {value} at step {step}", step, last)
        for p in params.values():
            p.grad = None
        loss.backward()
        lr = cosine_lr(step, cfg.total_steps, cfg.base_lr)
        try:
            lars_step(params, {k: p.grad for k, p in params.items()}, state, lr, cfg.weight_decay,
                      cfg.momentum, cfg.trust_coeff, exclusions)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"{exc} at step {step}", step, ckpt_paths[-1] if ckpt_paths else None) from exc
        metric_log.add(step, "train", "loss", value)
        if on_step:
            on_step(step, value)
        done = step + 1
        if out and (done % cfg.ckpt_every == 0 or done == cfg.total_steps):
            path = out / f"step_{done:07d}.ckpt"
            save_checkpoint(snapshot(done), path)
            ckpt_paths.append(path)
    final = snapshot(cfg.total_steps)
    return PretrainResult(final, metric_log, ckpt_paths, time.time() - t0)


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    modality: str = S1
    num_classes: int = 6
    batch_size: int = 64
    crop_size: int = 321
    weight_decay: float = 1e-6
    momentum: float = 0.9
    power: float = 0.9
    base_lr: float = 0.01
    total_steps: int = 20_000
    eval_every: int = 500
    init: str = "random"
    init_checkpoint: str | None = None
    init_group: str | None = None
    fraction: float = 1.0
    set_index: int = 0
    select_metric: str = "mean_iou"
    water_class: int = 0
    encoder: dict = field(default_factory=lambda: {"profile": "tiny"})
    atrous_rates: tuple[int, ...] = (3, 6, 9)
    seed: int = 0

    def __post_init__(self):
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}; choose from {INITS}")
        if self.modality not in CHANNELS:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.init != "random" and not self.init_checkpoint:
            raise ConfigError(f"init {self.init!r} needs init_checkpoint")
        if self.select_metric not in ("mean_iou", "overall_accuracy", "water_iou"):
            raise ConfigError(f"unknown selection metric {self.select_metric!r}")
        for name in ("batch_size", "crop_size", "base_lr", "total_steps", "eval_every", "num_classes"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        self.atrous_rates = tuple(self.atrous_rates)

    @property
    def group(self) -> str:
        if self.init_group:
            return self.init_group
        if self.init == "imagenet_adapted":
            return "encoder/imagenet"
        return f"encoder/{self.modality}"


@dataclass
class FinetuneResult:
    best_metrics: dict
    best_step: int
    steps_to_peak: int
    log: MetricLog
    checkpoint: Checkpoint
    init_report: TransferReport | None
    initial_fingerprints: dict[str, str]
    seconds: float


def build_segmentation(cfg: FinetuneConfig) -> SegmentationNet:
    torch.manual_seed(cfg.seed)
    return SegmentationNet(_encoder_spec(cfg.encoder, cfg.modality),
                           SegmentationSpec(cfg.num_classes, cfg.atrous_rates))


def initialize(cfg: FinetuneConfig, ckpt: Checkpoint | None = None) -> tuple[SegmentationNet, TransferReport | None]:
    """Fresh segmentation net with the encoder optionally taken from a checkpoint."""
    net = build_segmentation(cfg)
    if cfg.init == "random":
        return net, None
    if ckpt is None:
        ckpt = load_checkpoint(cfg.init_checkpoint)
    report = transfer_encoder(ckpt, net, cfg.group, allow_adapt=cfg.init == "imagenet_adapted")
    return net, report


def seg_checkpoint(net: SegmentationNet, step: int, meta=None) -> Checkpoint:
    groups = {"encoder": module_state(net.encoder), "decoder": module_state(net.decoder)}
    specs = {"encoder": asdict(net.enc_spec), "decoder": asdict(net.seg_spec)}
    fps = {"encoder": spec_fingerprint(net.enc_spec), "decoder": spec_fingerprint(net.seg_spec)}
    return Checkpoint(groups, specs, fps, step, {}, meta or {})


@torch.no_grad()
def evaluate_segmentation(net: SegmentationNet, images: np.ndarray, labels: np.ndarray,
                          num_classes: int, batch: int = 64) -> np.ndarray:
    was_training = net.training
    net.eval()
    cm = new_confusion(num_classes)
    for s in range(0, len(images), batch):
        x = torch.from_numpy(images[s:s + batch].astype(np.float32) / 255.0).permute(0, 3, 1, 2)
        pred = net(x).argmax(dim=1).numpy()
        confusion_accumulate(cm, pred, labels[s:s + batch])
    net.train(was_training)
    return cm


def _crop_flip(img, lab, crop, rng):
    h, w = lab.shape
    if crop < h or crop < w:
        ch, cw = min(crop, h), min(crop, w)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img, lab = img[top:top + ch, left:left + cw], lab[top:top + ch, left:left + cw]
    u = rng.random(2)
    if u[0] < 0.5:
        img, lab = img[:, ::-1], lab[:, ::-1]
    if u[1] < 0.5:
        img, lab = img[::-1], lab[::-1]
    return img, lab


def finetune_arrays(train: DatasetManifest, validation: DatasetManifest, modality: str,
                    split: SplitPlan | None = None) -> dict:
    from .synthetic import load_arrays

    if train.split != "train":
        raise ConfigError(f"fine-tuning updates on the train split only, got {train.split!r}")
    if validation.split != "validation":
        raise ConfigError(f"model selection uses the validation split, got {validation.split!r}")
    role = modality.lower()
    tr = load_arrays(train, roles=(role,), with_labels=True)
    va = load_arrays(validation, roles=(role,), with_labels=True)
    return select_split({"train_x": tr[role], "train_y": tr["label"], "train_ids": tr["ids"],
                         "val_x": va[role], "val_y": va["label"]}, split)


def select_split(data: dict, split: SplitPlan | None) -> dict:
    if split is None:
        return data
    pos = {eid: i for i, eid in enumerate(data["train_ids"])}
    missing = [m for m in split.member_ids if m not in pos]
    if missing:
        raise ConfigError(f"split members not in the labeled train set: {missing[:3]}")
    idx = np.array([pos[m] for m in split.member_ids], dtype=np.int64)
    return {**data, "train_x": data["train_x"][idx], "train_y": data["train_y"][idx],
            "train_ids": [data["train_ids"][i] for i in idx]}


def finetune(cfg: FinetuneConfig, data: Mapping, out_dir=None, init_ckpt: Checkpoint | None = None,
             on_eval: Callable[[int, dict], None] | None = None) -> FinetuneResult:
    """Supervised segmentation training with validation-based checkpoint selection.

    ``data`` holds ``train_x``/``train_y`` (already restricted to the split
    plan) and ``val_x``/``val_y``; see :func:`finetune_arrays`.
    """
    t0 = time.time()
    x_tr, y_tr = data["train_x"], data["train_y"]
    if len(x_tr) == 0:
        raise ConfigError("empty training split")
    net, report = initialize(cfg, init_ckpt)
    initial = {"encoder": param_fingerprint(net.encoder.state_dict()),
               "decoder": param_fingerprint(net.decoder.state_dict())}
    out = Path(out_dir) if out_dir else None
    metric_log = MetricLog(out / "metrics.tsv" if out else None)
    params = dict(net.named_parameters())
    state = OptimState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    batch = min(cfg.batch_size, len(x_tr))
    sampler = EpochSampler(len(x_tr), batch, rng)
    best = (-math.inf, -1, None, None)
    net.train()

    def validate(step):
        nonlocal best
        cm = evaluate_segmentation(net, data["val_x"], data["val_y"], cfg.num_classes)
        metrics = summarize(cm, cfg.water_class)
        for name in ("mean_iou", "overall_accuracy", "water_iou"):
            if metrics[name] is not None:
                metric_log.add(step, "validation", name, metrics[name])
        score = metrics[cfg.select_metric]
        score = -math.inf if score is None else score
        if score > best[0]:
            best = (score, step, metrics, seg_checkpoint(net, step, {"init": cfg.init, "seed": cfg.seed}))
        if on_eval:
            on_eval(step, metrics)

    validate(0)
    for step in range(cfg.total_steps):
        idx = sampler.next()
        imgs, labs = zip(*(_crop_flip(x_tr[i], y_tr[i], cfg.crop_size, rng) for i in idx))
        x = _to_input(list(imgs))
        y = torch.from_numpy(np.stack(labs).astype(np.int64))
        logits = net(x)
        loss = F.cross_entropy(logits, y, ignore_index=IGNORE_INDEX)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"fine-tuning loss became {value} at step {step}", step)
        for p in params.values():
            p.grad = None
        loss.backward()
        lr = polynomial_lr(step, cfg.total_steps, cfg.base_lr, cfg.power)
        momentum_step(params, {k: p.grad for k, p in params.items()}, state, lr, cfg.weight_decay, cfg.momentum)
        metric_log.add(step, "train", "loss", value)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            validate(done)
    _, best_step, best_metrics, best_ckpt = best
    peak = steps_to_peak(metric_log.series("validation", cfg.select_metric))
    if out:
        save_checkpoint(best_ckpt, out / "best.ckpt")
        save_checkpoint(seg_checkpoint(net, cfg.total_steps), out / "final.ckpt")
    return FinetuneResult(best_metrics, best_step, peak, metric_log, best_ckpt, report, initial, time.time() - t0)


def config_from_dict(cls, d: Mapping):
    """Build a config dataclass, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**copy.deepcopy(dict(d)))
