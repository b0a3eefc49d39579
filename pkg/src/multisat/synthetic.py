"""Paired SAR/optical scenes rendered from a shared latent label map.

The default recipe has six classes with two designed confusions: water and
smooth bare ground share an optical palette but differ in SAR backscatter,
while the two vegetation classes share a mean SAR signature (they differ only
in speckle texture) but are optically distinct.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import normalize
from .datamodel import (
    IGNORE_INDEX,
    MAX_S2_CLOUD,
    PAIR_WINDOW_S,
    S1,
    S2,
    DatasetManifest,
    LabelMap,
    ManifestEntry,
    PairedSample,
    SceneMeta,
    Tile,
    validate_manifest,
    write_label,
    write_manifest,
    write_tile,
)
from .pairing import PRETRAIN_END, PRETRAIN_START, make_subsample_splits, write_catalog, write_splits

CLASS_NAMES = ("water", "bare_smooth", "trees", "crops", "built", "shrub")
# Optical palettes in scaled-reflectance digital numbers (B4, B3, B2).
DEFAULT_PALETTE = (
    (450.0, 650.0, 900.0),
    (450.0, 650.0, 900.0),
    (500.0, 1300.0, 450.0),
    (1300.0, 1900.0, 700.0),
    (2200.0, 2100.0, 2000.0),
    (1500.0, 1250.0, 950.0),
)
# SAR (VV, VH) means in dB.
DEFAULT_SIGNATURE = (
    (-17.0, -19.0),
    (-9.0, -15.0),
    (-7.0, -12.5),
    (-7.0, -12.5),
    (1.0, -4.0),
    (-11.5, -16.0),
)
# Per-class multiplier on the SAR noise level.
DEFAULT_SAR_TEXTURE = (1.0, 1.0, 0.6, 1.6, 1.0, 1.0)


@dataclass
class SceneRecipe:
    size: int = 64
    num_classes: int = 6
    palette: tuple = DEFAULT_PALETTE
    sar_signature: tuple = DEFAULT_SIGNATURE
    sar_texture: tuple = DEFAULT_SAR_TEXTURE
    optical_noise: float = 120.0
    sar_noise_db: float = 2.5
    cloud_blob_rate: float = 0.6
    cloud_dn: float = 7000.0
    smoothing: float = 4.0
    seed: int = 0
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        self.palette = tuple(tuple(float(v) for v in p) for p in self.palette)
        self.sar_signature = tuple(tuple(float(v) for v in p) for p in self.sar_signature)
        self.sar_texture = tuple(float(v) for v in self.sar_texture)
        self.class_names = tuple(self.class_names)
        self.validate()

    def validate(self):
        k = self.num_classes
        if k < 2:
            raise ValueError("recipe needs at least two classes")
        if not (len(self.palette) == len(self.sar_signature) == len(self.sar_texture) == k):
            raise ValueError("palette, signature and texture must have one row per class")
        if self.size <= 0 or self.smoothing <= 0:
            raise ValueError("size and smoothing must be positive")
        if not self.confusion_pairs()["optical_alike"] or not self.confusion_pairs()["sar_alike"]:
            raise ValueError("recipe needs one optical-alike/SAR-distinct pair and one SAR-alike/optical-distinct pair")

    def confusion_pairs(self) -> dict[str, list[tuple[int, int]]]:
        opt, sar = [], []
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                same_opt = self.palette[a] == self.palette[b]
                same_sar = self.sar_signature[a] == self.sar_signature[b]
                if same_opt and not same_sar:
                    opt.append((a, b))
                if same_sar and not same_opt:
                    sar.append((a, b))
        return {"optical_alike": opt, "sar_alike": sar}

    def optical_distinct_only_classes(self) -> list[int]:
        """Classes that SAR cannot tell apart by mean signature but optics can."""
        return sorted({c for pair in self.confusion_pairs()["sar_alike"] for c in pair})

    def to_dict(self) -> dict:
        return asdict(self)


def gen_latent_scene(recipe: SceneRecipe, rng: np.random.Generator) -> LabelMap:
    n = recipe.size
    fields_ = rng.standard_normal((recipe.num_classes, n, n))
    for i in range(recipe.num_classes):
        fields_[i] = ndimage.gaussian_filter(fields_[i], recipe.smoothing, mode="wrap")
    return LabelMap(fields_.argmax(axis=0).astype(np.int64), recipe.num_classes)


def _cloud_mask(size: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if rate <= 0:
        return mask
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.poisson(rate)):
        cy, cx = rng.uniform(0, size, 2)
        ay, ax = rng.uniform(0.05, 0.2, 2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    return mask


def render_optical(label: LabelMap, recipe: SceneRecipe, rng: np.random.Generator,
                   lat=0.0, lon=0.0, timestamp=0.0) -> tuple[Tile, np.ndarray]:
    palette = np.asarray(recipe.palette)
    px = palette[label.classes] + rng.standard_normal(label.classes.shape + (3,)) * recipe.optical_noise
    px = np.maximum(px, 0.0)
    mask = _cloud_mask(label.classes.shape[0], recipe.cloud_blob_rate, rng)
    if mask.any():
        px[mask] = recipe.cloud_dn + rng.standard_normal((int(mask.sum()), 3)) * recipe.optical_noise
        px = np.maximum(px, 0.0)
    tile = Tile(S2, px.astype(np.float32), lat, lon, timestamp, cloud_fraction=float(mask.mean()))
    return tile, mask


def render_sar(label: LabelMap, recipe: SceneRecipe, rng: np.random.Generator,
               lat=0.0, lon=0.0, timestamp=0.0) -> Tile:
    sig = np.asarray(recipe.sar_signature)
    tex = np.asarray(recipe.sar_texture)
    noise = rng.standard_normal(label.classes.shape + (2,)) * (recipe.sar_noise_db * tex[label.classes])[..., None]
    px = sig[label.classes] + noise
    return Tile(S1, px.astype(np.float32), lat, lon, timestamp)


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def gen_pair(recipe: SceneRecipe, index: int, max_cloud: float = MAX_S2_CLOUD):
    """Render pair ``index``: returns ``(PairedSample, LabelMap, cloud_mask)``."""
    rng = _scene_rng(recipe.seed, index)
    label = gen_latent_scene(recipe, rng)
    # Each scene sits on its own cell of a 0.01 degree grid.
    lat = round(-50.0 + 0.01 * (index // 10000) + 0.005, 6)
    lon = round(-170.0 + 0.01 * (index % 10000) + 0.005, 6)
    anchor = int(rng.integers(PRETRAIN_START + PAIR_WINDOW_S, PRETRAIN_END))
    dt1, dt2 = (int(v) for v in rng.integers(0, PAIR_WINDOW_S + 1, 2))
    sar = render_sar(label, recipe, rng, lat, lon, anchor - dt1)
    for _ in range(20):
        opt, mask = render_optical(label, recipe, rng, lat, lon, anchor - dt2)
        if opt.cloud_fraction <= max_cloud:
            break
    else:
        clear = SceneRecipe(**{**recipe.to_dict(), "cloud_blob_rate": 0.0})
        opt, mask = render_optical(label, clear, rng, lat, lon, anchor - dt2)
    pair = PairedSample(sar, opt, anchor, dt1, dt2)
    return pair, label, mask


def file_checksums(root) -> dict[str, str]:
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def tree_checksum(root) -> str:
    h = hashlib.sha256()
    for name, digest in file_checksums(root).items():
        h.update(f"{name}:{digest}\n".encode())
    return h.hexdigest()


def assign_splits(n: int, seed: int, fractions=(0.70, 0.15, 0.15)) -> list[str]:
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = ["test"] * n
    for rank, i in enumerate(order):
        split[i] = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
    return split


def gen_dataset(recipe: SceneRecipe, n_pairs: int, labeled_fraction: float, out_dir,
                name: str = "synthetic", distractors: bool = True,
                subsample_plan: dict | None = None) -> dict[str, DatasetManifest]:
    """Write a paired dataset with labels, catalogs, anchors and sub-sample splits.

    Returns the manifests keyed by split. Tiles are stored already normalized.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_labeled = int(round(labeled_fraction * n_pairs))
    split_of = assign_splits(n_pairs, recipe.seed)
    norm_id = normalize.manifest_normalization_id()
    entries = {s: [] for s in ("train", "validation", "test")}
    s1_scenes, s2_scenes, anchors = [], [], []
    for i in range(n_pairs):
        pair, label, _ = gen_pair(recipe, i)
        sid = f"p{i:06d}"
        s1_uri, s2_uri = f"tiles/s1/{sid}.bin", f"tiles/s2/{sid}.bin"
        write_tile(normalize.normalize_s1(pair.s1), out / s1_uri)
        write_tile(normalize.normalize_s2(pair.s2), out / s2_uri)
        label_uri = None
        if i < n_labeled:
            label_uri = f"labels/{sid}.bin"
            write_label(label, out / label_uri)
        entries[split_of[i]].append(ManifestEntry(sid, {"s1": s1_uri, "s2": s2_uri}, label_uri))
        s1_scenes.append(SceneMeta(f"S1_{sid}", S1, pair.s1.center_lat, pair.s1.center_lon,
                                   pair.s1.timestamp, 0.0, s1_uri))
        s2_scenes.append(SceneMeta(f"S2_{sid}", S2, pair.s2.center_lat, pair.s2.center_lon,
                                   pair.s2.timestamp, pair.s2.cloud_fraction, s2_uri))
        anchors.append((pair.s1.center_lat, pair.s1.center_lon, pair.anchor_timestamp))
        if distractors and i % 5 == 0:
            # A cloudier optical acquisition closer to the anchor that the join must pass over.
            rng = _scene_rng(recipe.seed, 10_000_000 + i)
            cloudy = SceneRecipe(**{**recipe.to_dict(), "cloud_blob_rate": 8.0})
            t_cloud = min(pair.anchor_timestamp, pair.s2.timestamp + 3600)
            opt, _ = render_optical(label, cloudy, rng, pair.s2.center_lat, pair.s2.center_lon, t_cloud)
            if opt.cloud_fraction > MAX_S2_CLOUD:
                uri = f"tiles/s2/{sid}_cloudy.bin"
                write_tile(normalize.normalize_s2(opt), out / uri)
                s2_scenes.append(SceneMeta(f"S2_{sid}_cloudy", S2, opt.center_lat, opt.center_lon,
                                           opt.timestamp, opt.cloud_fraction, uri))
    write_catalog(s1_scenes, out / "catalog_s1.tsv")
    write_catalog(s2_scenes, out / "catalog_s2.tsv")
    (out / "anchors.tsv").write_text(
        "lat\tlon\ttimestamp\n" + "".join(f"{a!r}\t{b!r}\t{t!r}\n" for a, b, t in anchors)
    )
    manifests = {}
    for split, ents in entries.items():
        m = DatasetManifest(name, split, ents, norm_id, "1", root=out)
        write_manifest(m, out / f"{split}.manifest")
        m.declared_count = len(ents)
        issues = validate_manifest(m, check_payloads=True)
        if issues:
            raise RuntimeError(f"generated manifest {split} is invalid: {issues[:3]}")
        manifests[split] = m
    labeled_train = [e.entry_id for e in entries["train"] if e.label]
    plan = subsample_plan or default_plan(len(labeled_train))
    if labeled_train:
        write_splits(make_subsample_splits(labeled_train, plan, recipe.seed), out / "splits.tsv")
    (out / "recipe.json").write_text(json.dumps(recipe.to_dict(), indent=1, sort_keys=True) + "\n")
    return manifests


def default_plan(n_train: int) -> dict[float, int]:
    plan = {1.0: 3}
    for f in (0.1, 0.01):
        size = int(np.floor(f * n_train + 0.5))
        if size > 0 and 5 * size <= n_train:
            plan[f] = 5
    return plan


def load_arrays(manifest: DatasetManifest, roles=("s1", "s2"), with_labels: bool = False):
    """Stack a manifest's tiles into float32 arrays keyed by role (plus ``label``)."""
    from .datamodel import read_label, read_tile

    out = {r: [] for r in roles}
    labels, ids = [], []
    for e in manifest.entries:
        if with_labels and not e.label:
            continue
        for r in roles:
            out[r].append(read_tile(manifest.resolve(e.uris[r])).pixels)
        if with_labels:
            labels.append(read_label(manifest.resolve(e.label)).classes.astype(np.int64))
        ids.append(e.entry_id)
    arrays = {r: np.stack(v).astype(np.float32) if v else np.zeros((0,)) for r, v in out.items()}
    if with_labels:
        arrays["label"] = np.stack(labels) if labels else np.zeros((0,), dtype=np.int64)
    arrays["ids"] = ids
    return arrays


__all__ = [
    "SceneRecipe",
    "gen_latent_scene",
    "render_optical",
    "render_sar",
    "gen_pair",
    "gen_dataset",
    "file_checksums",
    "tree_checksum",
    "load_arrays",
    "IGNORE_INDEX",
]
