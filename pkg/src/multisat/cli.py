"""Command-line driver: ``multisat {synth,pair,pretrain,finetune,eval}``.

Configuration comes from a YAML document whose top-level sections mirror the
library config types. Resolution order is built-in defaults, then the file,
then command-line flags; every run directory receives the resolved config as
``config.yaml``. The data root defaults to ``$MULTISAT_DATA_ROOT``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__
from .checkpoint import save_checkpoint
from .datamodel import DatasetManifest, ManifestEntry, read_manifest, write_manifest
from .evaluation import DEFAULT_LRS, AllRunsDiverged
from .experiment import DeskConfig, StudyPlan, run_desk_experiment, run_study
from .pairing import Anchor, build_pairs_with_stats, find_split, read_catalog, read_splits
from .synthetic import SceneRecipe, gen_dataset, tree_checksum
from .trainer import (
    ConfigError,
    FinetuneConfig,
    PretrainConfig,
    TrainingDiverged,
    config_from_dict,
    finetune,
    finetune_arrays,
    pretrain,
)

log = logging.getLogger("multisat")

DATA_ROOT_ENV = "MULTISAT_DATA_ROOT"
COMMANDS = ("synth", "pair", "pretrain", "finetune", "eval")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


@dataclass
class SynthSection:
    n_pairs: int = 2000
    labeled_fraction: float = 1.0
    name: str = "synthetic"
    distractors: bool = True
    recipe: dict = field(default_factory=dict)


@dataclass
class PairingSection:
    s1_catalog: str = "catalog_s1.tsv"
    s2_catalog: str = "catalog_s2.tsv"
    anchors: str = "anchors.tsv"
    window_days: float = 30.0
    max_cloud: float = 0.15


@dataclass
class EvalSection:
    mode: str = "desk"  # desk: pre-train per seed then fine-tune; study: fine-tune given checkpoints
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    fraction: float = 0.01
    inits: dict = field(default_factory=lambda: {"random": None})
    fractions: dict = field(default_factory=lambda: {0.01: 5, 0.1: 5, 1.0: 3})
    lrs: list = field(default_factory=lambda: list(DEFAULT_LRS))
    sweep: bool = True
    compare: list = field(default_factory=lambda: ["multimodal_ckpt", "simclr_ckpt"])
    delta_fraction: float = 0.01


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_root: str | None = None
    synthetic: SynthSection = field(default_factory=SynthSection)
    pairing: PairingSection = field(default_factory=PairingSection)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    # Typed views; the seed always comes from the top level.
    def pretrain_config(self) -> PretrainConfig:
        return config_from_dict(PretrainConfig, {**self.pretrain, "seed": self.seed})

    def finetune_config(self) -> FinetuneConfig:
        return config_from_dict(FinetuneConfig, {**self.finetune, "seed": self.seed})

    def recipe(self) -> SceneRecipe:
        return config_from_dict(SceneRecipe, {**self.synthetic.recipe, "seed": self.seed})


def _section(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    return config_from_dict(cls, raw)


def parse_config(doc: dict | None) -> ExperimentConfig:
    """Validate a config document; unknown keys anywhere are rejected."""
    doc = copy.deepcopy(doc or {})
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for name in ("pretrain", "finetune"):
        sec = doc.get(name) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"{name} must be a mapping")
        if "seed" in sec:
            raise ConfigError(f"{name}.seed is not allowed; set the top-level seed")
        doc[name] = sec
    if "seed" in (doc.get("synthetic") or {}).get("recipe", {}):
        raise ConfigError("synthetic.recipe.seed is not allowed; set the top-level seed")
    cfg = ExperimentConfig(
        seed=int(doc.get("seed", 0)),
        data_root=doc.get("data_root"),
        synthetic=_section(SynthSection, doc.get("synthetic"), "synthetic"),
        pairing=_section(PairingSection, doc.get("pairing"), "pairing"),
        pretrain=doc["pretrain"],
        finetune=doc["finetune"],
        eval=_section(EvalSection, doc.get("eval"), "eval"),
    )
    # Build the typed configs once so their own checks run now.
    cfg.pretrain_config()
    cfg.finetune_config()
    cfg.recipe()
    if cfg.eval.mode not in ("desk", "study"):
        raise ConfigError(f"eval.mode must be 'desk' or 'study', got {cfg.eval.mode!r}")
    cfg.eval.fractions = {float(k): int(v) for k, v in cfg.eval.fractions.items()}
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return parse_config({})
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(doc)


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "data_root", None):
        cfg.data_root = args.data_root
    if cfg.data_root is None:
        cfg.data_root = os.environ.get(DATA_ROOT_ENV)
    if args.init is not None:
        cfg.finetune["init"] = args.init
    if args.init_checkpoint is not None:
        cfg.finetune["init_checkpoint"] = args.init_checkpoint
    if args.fraction is not None:
        cfg.finetune["fraction"] = args.fraction
    if args.set_index is not None:
        cfg.finetune["set_index"] = args.set_index
    return parse_config(cfg.to_dict())


def _require(path: Path, what: str):
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")


def check_files(cfg: ExperimentConfig, command: str) -> None:
    """Check that the files a command will read exist."""
    if command == "synth":
        return
    if not cfg.data_root:
        raise ConfigError(f"no data root: set data_root, --data-root or ${DATA_ROOT_ENV}")
    root = Path(cfg.data_root)
    if command == "pair":
        for name in ("s1_catalog", "s2_catalog", "anchors"):
            _require(root / getattr(cfg.pairing, name), f"pairing.{name}")
        return
    _require(root / "train.manifest", "train manifest")
    if command in ("finetune", "eval"):
        _require(root / "validation.manifest", "validation manifest")
        _require(root / "splits.tsv", "split plan")
    if command == "finetune":
        ft = cfg.finetune_config()
        if ft.init != "random":
            _require(Path(ft.init_checkpoint), "init checkpoint")
    if command == "eval" and cfg.eval.mode == "study":
        for init, path in cfg.eval.inits.items():
            if init != "random":
                _require(Path(path), f"checkpoint for {init}")


def new_run_dir(parent, command: str) -> Path:
    """Create a fresh ``<command>-NNN`` directory; existing runs are never reused."""
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    n = 0
    while True:
        path = parent / f"{command}-{n:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1


def freeze(cfg: ExperimentConfig, run_dir: Path) -> None:
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: ExperimentConfig, out: Path) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"dataset directory {out} is not empty")
    s = cfg.synthetic
    gen_dataset(cfg.recipe(), s.n_pairs, s.labeled_fraction, out, name=s.name, distractors=s.distractors)
    freeze(cfg, out)
    log.info("dataset written to %s (checksum %s)", out, tree_checksum(out)[:16])
    return out


def _read_anchors(path) -> list[Anchor]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["lat", "lon", "timestamp"]:
        raise ConfigError(f"{path}: expected header lat<TAB>lon<TAB>timestamp")
    return [Anchor(*(float(v) for v in line.split("\t"))) for line in lines[1:] if line.strip()]


def cmd_pair(cfg: ExperimentConfig, run_dir: Path) -> dict:
    root, p = Path(cfg.data_root), cfg.pairing
    s1 = read_catalog(root / p.s1_catalog)
    s2 = read_catalog(root / p.s2_catalog)
    anchors = _read_anchors(root / p.anchors)
    pairs, counts = build_pairs_with_stats(s1, s2, anchors, p.window_days * 86400, p.max_cloud)
    entries = []
    for i, pr in enumerate(pairs):
        entries.append(ManifestEntry(f"pair{i:07d}", {"s1": str((root / pr.s1.uri).resolve()),
                                                      "s2": str((root / pr.s2.uri).resolve())}))
    write_manifest(DatasetManifest("pairs", "train", entries, root=run_dir), run_dir / "pairs.manifest")
    rows = ["pair_id\tanchor_lat\tanchor_lon\tanchor_t\ts1_scene\ts2_scene\tdelta_t_s1\tdelta_t_s2"]
    for e, pr in zip(entries, pairs):
        a = pr.anchor
        rows.append(f"{e.entry_id}\t{a.lat!r}\t{a.lon!r}\t{a.timestamp!r}\t{pr.s1.scene_id}\t{pr.s2.scene_id}"
                    f"\t{pr.delta_t_s1!r}\t{pr.delta_t_s2!r}")
    (run_dir / "pairs.tsv").write_text("\n".join(rows) + "\n")
    (run_dir / "skip_counts.tsv").write_text(
        "reason\tcount\n" + "".join(f"{k}\t{counts[k]}\n" for k in ("paired", "no_s1", "no_s2", "cloud")))
    log.info("paired %d of %d anchors: %s", counts["paired"], len(anchors), counts)
    return counts


def cmd_pretrain(cfg: ExperimentConfig, run_dir: Path):
    pcfg = cfg.pretrain_config()
    train = read_manifest(Path(cfg.data_root) / "train.manifest")
    res = pretrain(pcfg, train, out_dir=run_dir)
    save_checkpoint(res.checkpoint, run_dir / "final.ckpt")
    log.info("pre-training finished in %.0fs; checkpoint %s", res.seconds, run_dir / "final.ckpt")
    return res


def cmd_finetune(cfg: ExperimentConfig, run_dir: Path):
    fcfg = cfg.finetune_config()
    root = Path(cfg.data_root)
    split = find_split(read_splits(root / "splits.tsv"), fcfg.fraction, fcfg.set_index)
    data = finetune_arrays(read_manifest(root / "train.manifest"), read_manifest(root / "validation.manifest"),
                           fcfg.modality, split)
    res = finetune(fcfg, data, out_dir=run_dir)
    (run_dir / "steps_to_peak.tsv").write_text(
        f"init\tfraction\tset_index\tsteps_to_peak\n{fcfg.init}\t{fcfg.fraction:g}\t{fcfg.set_index}\t{res.steps_to_peak}\n")
    log.info("best %s %.4f at step %d (steps to peak %d)", fcfg.select_metric,
             res.best_metrics[fcfg.select_metric], res.best_step, res.steps_to_peak)
    return res


def _class_names(cfg: ExperimentConfig):
    root = Path(cfg.data_root)
    recipe_file = root / "recipe.json"
    if recipe_file.exists():
        return json.loads(recipe_file.read_text())["class_names"]
    return None


def cmd_eval(cfg: ExperimentConfig, run_dir: Path):
    e = cfg.eval
    names = _class_names(cfg)
    highlight = SceneRecipe().optical_distinct_only_classes() if names == list(SceneRecipe().class_names) else ()
    if e.mode == "desk":
        pre = {k: v for k, v in cfg.pretrain.items() if k not in ("method", "seed")}
        desk = DeskConfig(seeds=tuple(e.seeds), fraction=e.fraction,
                          pretrain={**DeskConfig().pretrain, **pre},
                          finetune={**DeskConfig().finetune, **cfg.finetune})
        report = run_desk_experiment(desk, cfg.data_root, run_dir, names, highlight)
    else:
        plan = StudyPlan(inits=dict(e.inits), fractions=dict(e.fractions), lrs=tuple(e.lrs), sweep=e.sweep,
                         compare=tuple(e.compare), delta_fraction=e.delta_fraction, finetune=dict(cfg.finetune))
        report = run_study(plan, cfg.data_root, run_dir, cfg.seed, names, highlight)
    print((run_dir / "table_mean_iou.tsv").read_text(), end="")
    return report


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multisat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (dataset dir for synth, parent of run dirs otherwise)")
        p.add_argument("--data-root", help=f"dataset directory (default ${DATA_ROOT_ENV})")
        p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
        p.add_argument("--init", help="fine-tuning initialization")
        p.add_argument("--init-checkpoint")
        p.add_argument("--fraction", type=float)
        p.add_argument("--set-index", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        check_files(cfg, args.command)
        if args.dry_run:
            sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
            return EXIT_OK
        if args.command == "synth":
            out = args.out or cfg.data_root
            if not out:
                raise ConfigError(f"synth needs --out or ${DATA_ROOT_ENV}")
            cmd_synth(cfg, Path(out))
            return EXIT_OK
        run_dir = new_run_dir(args.out or "runs", args.command)
        freeze(cfg, run_dir)
        {"pair": cmd_pair, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval}[args.command](cfg, run_dir)
        print(run_dir)
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (TrainingDiverged, AllRunsDiverged) as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
