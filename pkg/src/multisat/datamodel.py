"""Domain types and the on-disk tile, label and manifest formats.

A tile on disk is two files: ``<uri>`` holding the raw little-endian float32
payload in row-major ``H x W x C`` order, and ``<uri>.meta.json`` holding the
dimensions, dtype tag and every metadata field. Label maps use the same layout
with a uint8 payload.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

S1 = "S1"
S2 = "S2"
CHANNELS = {S1: ("VV", "VH"), S2: ("B4", "B3", "B2")}
GEO_EPS = 1e-6
PAIR_WINDOW_S = 30 * 86400
MAX_S2_CLOUD = 0.15
IGNORE_INDEX = 255
SPLITS = ("train", "validation", "test")
FORMAT_VERSION = 1

_PIXEL_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("u1")


class ValidationError(ValueError):
    """A domain invariant does not hold."""


class CorruptFileError(IOError):
    """A tile or label file is unreadable, truncated or inconsistent."""


def sidecar_path(uri) -> Path:
    uri = Path(uri)
    return uri.with_name(uri.name + ".meta.json")


@dataclass
class Tile:
    modality: str
    pixels: np.ndarray
    center_lat: float
    center_lon: float
    timestamp: float
    resolution_m: float = 10.0
    cloud_fraction: float = 0.0
    channel_names: tuple[str, ...] | None = None
    normalization_id: str | None = None

    def __post_init__(self):
        if self.channel_names is None and self.modality in CHANNELS:
            self.channel_names = CHANNELS[self.modality]
        self.channel_names = tuple(self.channel_names or ())
        self.validate()

    def validate(self):
        if self.modality not in CHANNELS:
            raise ValidationError(f"unknown modality {self.modality!r}")
        px = np.asarray(self.pixels)
        if px.ndim != 3:
            raise ValidationError(f"pixels must be H x W x C, got shape {px.shape}")
        h, w, c = px.shape
        if h <= 0 or w <= 0:
            raise ValidationError("tile must have positive height and width")
        expected = CHANNELS[self.modality]
        if c != len(expected) or self.channel_names != expected:
            raise ValidationError(
                f"{self.modality} tile needs channels {expected}, got C={c} {self.channel_names}"
            )
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValidationError(f"cloud_fraction {self.cloud_fraction} outside [0, 1]")
        if self.modality == S1 and self.cloud_fraction != 0.0:
            raise ValidationError("S1 tiles carry cloud_fraction 0")
        if abs(self.center_lat) > 90 or abs(self.center_lon) > 180:
            raise ValidationError(f"center ({self.center_lat}, {self.center_lon}) out of range")
        if self.resolution_m <= 0:
            raise ValidationError("resolution_m must be positive")

    @property
    def shape(self):
        return self.pixels.shape

    def with_pixels(self, pixels, normalization_id=None) -> "Tile":
        return replace(self, pixels=pixels, normalization_id=normalization_id or self.normalization_id)


@dataclass(frozen=True)
class SceneMeta:
    scene_id: str
    modality: str
    lat: float
    lon: float
    timestamp: float
    cloud_fraction: float = 0.0
    uri: str = ""

    def __post_init__(self):
        if self.modality not in CHANNELS:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValidationError(f"{self.scene_id}: cloud_fraction outside [0, 1]")
        if abs(self.lat) > 90 or abs(self.lon) > 180:
            raise ValidationError(f"{self.scene_id}: location out of range")


@dataclass
class PairedSample:
    s1: Tile
    s2: Tile
    anchor_timestamp: float
    delta_t_s1: float
    delta_t_s2: float

    def __post_init__(self):
        validate_pair(self)


def validate_pair(p: PairedSample, geo_eps: float = GEO_EPS, window_s: float = PAIR_WINDOW_S,
                  max_cloud: float = MAX_S2_CLOUD):
    if p.s1.modality != S1 or p.s2.modality != S2:
        raise ValidationError("pair must hold an S1 tile and an S2 tile")
    if abs(p.s1.center_lat - p.s2.center_lat) > geo_eps or abs(p.s1.center_lon - p.s2.center_lon) > geo_eps:
        raise ValidationError("pair tiles are not co-located")
    for name, dt in (("delta_t_s1", p.delta_t_s1), ("delta_t_s2", p.delta_t_s2)):
        if not 0 <= dt <= window_s:
            raise ValidationError(f"{name}={dt} outside [0, {window_s}]")
    if p.s2.cloud_fraction > max_cloud:
        raise ValidationError(f"S2 cloud_fraction {p.s2.cloud_fraction} > {max_cloud}")


@dataclass
class LabelMap:
    classes: np.ndarray
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        self.classes = np.asarray(self.classes)
        if self.classes.ndim != 2:
            raise ValidationError("label map must be H x W")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        bad = (self.classes != self.ignore_index) & ((self.classes < 0) | (self.classes >= self.num_classes))
        if bad.any():
            raise ValidationError(f"{int(bad.sum())} label entries outside [0, {self.num_classes}) and not ignore")


# ---------------------------------------------------------------- tile I/O


def _write_payload(arr: np.ndarray, uri: Path, meta: dict):
    uri.parent.mkdir(parents=True, exist_ok=True)
    arr.tofile(uri)
    with open(sidecar_path(uri), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_payload(uri: Path, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    if not uri.exists():
        raise FileNotFoundError(uri)
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = uri.stat().st_size
    if actual != expected:
        if actual % dtype.itemsize:
            raise CorruptFileError(f"{uri}: corrupt payload ({actual} bytes is not a whole number of values)")
        raise CorruptFileError(
            f"{uri}: dimension/payload mismatch, header says {shape} "
            f"({expected // dtype.itemsize} values) but payload holds {actual // dtype.itemsize}"
        )
    return np.fromfile(uri, dtype=dtype).reshape(shape)


def _read_meta(uri: Path, kind: str) -> dict:
    side = sidecar_path(uri)
    if not side.exists():
        raise FileNotFoundError(side)
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{side}: corrupt header ({exc})") from exc
    if meta.get("kind") != kind:
        raise CorruptFileError(f"{side}: expected a {kind} header")
    return meta


def write_tile(tile: Tile, uri) -> None:
    tile.validate()
    uri = Path(uri)
    px = np.ascontiguousarray(tile.pixels, dtype=_PIXEL_DTYPE)
    meta = {
        "kind": "tile",
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "height": px.shape[0],
        "width": px.shape[1],
        "channels": px.shape[2],
        "modality": tile.modality,
        "channel_names": list(tile.channel_names),
        "center_lat": tile.center_lat,
        "center_lon": tile.center_lon,
        "resolution_m": tile.resolution_m,
        "timestamp": tile.timestamp,
        "cloud_fraction": tile.cloud_fraction,
        "normalization_id": tile.normalization_id,
    }
    _write_payload(px, uri, meta)


def read_tile(uri) -> Tile:
    uri = Path(uri)
    meta = _read_meta(uri, "tile")
    try:
        shape = (int(meta["height"]), int(meta["width"]), int(meta["channels"]))
        if meta["dtype"] != "float32-le":
            raise CorruptFileError(f"{uri}: unsupported dtype tag {meta['dtype']!r}")
        px = _read_payload(uri, _PIXEL_DTYPE, shape)
        return Tile(
            modality=meta["modality"],
            pixels=px.astype(np.float32),
            center_lat=meta["center_lat"],
            center_lon=meta["center_lon"],
            timestamp=meta["timestamp"],
            resolution_m=meta["resolution_m"],
            cloud_fraction=meta["cloud_fraction"],
            channel_names=tuple(meta["channel_names"]),
            normalization_id=meta.get("normalization_id"),
        )
    except KeyError as exc:
        raise CorruptFileError(f"{uri}: header lacks field {exc}") from exc


def write_label(label: LabelMap, uri) -> None:
    uri = Path(uri)
    arr = np.ascontiguousarray(label.classes, dtype=_LABEL_DTYPE)
    meta = {
        "kind": "label",
        "format_version": FORMAT_VERSION,
        "dtype": "uint8",
        "height": arr.shape[0],
        "width": arr.shape[1],
        "num_classes": label.num_classes,
        "ignore_index": label.ignore_index,
    }
    _write_payload(arr, uri, meta)


def read_label(uri) -> LabelMap:
    uri = Path(uri)
    meta = _read_meta(uri, "label")
    arr = _read_payload(uri, _LABEL_DTYPE, (int(meta["height"]), int(meta["width"])))
    return LabelMap(arr.astype(np.int64), int(meta["num_classes"]), int(meta["ignore_index"]))


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    entry_id: str
    uris: dict[str, str]  # role ("s1", "s2", "label") -> path
    label: str | None = None

    def all_uris(self) -> list[str]:
        out = list(self.uris.values())
        if self.label:
            out.append(self.label)
        return out


@dataclass
class DatasetManifest:
    name: str
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    normalization_id: str = "none"
    version: str = "1"
    root: Path | None = None  # directory relative uris resolve against
    declared_count: int | None = None

    def resolve(self, uri: str) -> Path:
        p = Path(uri)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def __len__(self):
        return len(self.entries)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        f"#manifest name={manifest.name} split={manifest.split} version={manifest.version} "
        f"normalization_id={manifest.normalization_id} count={len(manifest.entries)}"
    )
    lines = [header]
    for e in manifest.entries:
        cols = [e.entry_id] + [f"{k}={v}" for k, v in sorted(e.uris.items())]
        if e.label:
            cols.append(f"label={e.label}")
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#manifest "):
        raise CorruptFileError(f"{path}: missing manifest header line")
    head = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
    for key in ("name", "split", "version", "normalization_id", "count"):
        if key not in head:
            raise CorruptFileError(f"{path}: header lacks {key}")
    entries = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        cols = ln.split("\t")
        uris = {}
        label = None
        for col in cols[1:]:
            role, _, uri = col.partition("=")
            if role == "label":
                label = uri
            else:
                uris[role] = uri
        entries.append(ManifestEntry(cols[0], uris, label))
    return DatasetManifest(
        name=head["name"],
        split=head["split"],
        entries=entries,
        normalization_id=head["normalization_id"],
        version=head["version"],
        root=path.parent,
        declared_count=int(head["count"]),
    )


@dataclass(frozen=True, order=True)
class Issue:
    kind: str  # missing-uri | duplicate-id | invalid | count-mismatch
    entry_id: str
    detail: str


def validate_manifest(manifest: DatasetManifest, check_payloads: bool = False) -> list[Issue]:
    """Return every problem found in ``manifest``; an empty list means valid.

    The result is sorted, so it does not depend on entry order.
    """
    issues: set[Issue] = set()
    if manifest.split not in SPLITS:
        issues.add(Issue("invalid", "", f"unknown split {manifest.split!r}"))
    if manifest.declared_count is not None and manifest.declared_count != len(manifest.entries):
        issues.add(Issue("count-mismatch", "", f"header count {manifest.declared_count} != {len(manifest.entries)} entries"))
    counts = Counter(e.entry_id for e in manifest.entries)
    for eid, n in counts.items():
        if n > 1:
            issues.add(Issue("duplicate-id", eid, f"appears {n} times"))
    for e in manifest.entries:
        for role, uri in list(e.uris.items()) + ([("label", e.label)] if e.label else []):
            p = manifest.resolve(uri)
            if not p.exists() or not sidecar_path(p).exists():
                issues.add(Issue("missing-uri", e.entry_id, f"{role}: {uri}"))
                continue
            if check_payloads:
                try:
                    obj = read_label(p) if role == "label" else read_tile(p)
                except (ValidationError, CorruptFileError, OSError) as exc:
                    issues.add(Issue("invalid", e.entry_id, f"{role}: {exc}"))
                    continue
                if role != "label" and manifest.normalization_id != "none" \
                        and obj.normalization_id not in manifest.normalization_id.split("+"):
                    issues.add(Issue("invalid", e.entry_id,
                                     f"{role}: normalization {obj.normalization_id} != {manifest.normalization_id}"))
    return sorted(issues)


def load_pair(manifest: DatasetManifest, entry: ManifestEntry) -> tuple[Tile, Tile]:
    return read_tile(manifest.resolve(entry.uris["s1"])), read_tile(manifest.resolve(entry.uris["s2"]))


def iter_tiles(manifest: DatasetManifest, role: str) -> Iterable[Tile]:
    for e in manifest.entries:
        yield read_tile(manifest.resolve(e.uris[role]))
