"""Anchor sampling, the closest-scene join and fixed sub-sampling splits.

Scene locations are treated as pre-gridded: two records are "at the same
place" when both coordinates agree within ``GEO_EPS`` degrees. Lookups go
through :class:`CatalogIndex`, a hash on quantized coordinates with
time-sorted arrays per cell; the ``*_scan`` functions are the brute-force
equivalents kept for cross-checking.
"""

from __future__ import annotations

import bisect
import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely
from shapely.geometry import LinearRing, Polygon

from .datamodel import (
    GEO_EPS,
    MAX_S2_CLOUD,
    PAIR_WINDOW_S,
    S1,
    S2,
    CorruptFileError,
    PairedSample,
    SceneMeta,
    ValidationError,
    read_tile,
)

DOWNSTREAM_WINDOW_S = 90 * 86400
# 2016-12-31T00:00:00Z and 2021-12-31T00:00:00Z
PRETRAIN_START = 1483142400
PRETRAIN_END = 1640908800


class SamplingError(RuntimeError):
    pass


class InfeasiblePlan(ValueError):
    pass


# ---------------------------------------------------------------- regions


@dataclass(frozen=True)
class RegionSet:
    polygons: tuple[tuple[tuple[float, float], ...], ...]  # rings of (lat, lon)

    def __post_init__(self):
        if not self.polygons:
            raise ValidationError("region set is empty")
        for i, ring in enumerate(self.polygons):
            pts = list(ring)
            if len(pts) > 1 and pts[0] == pts[-1]:
                pts = pts[:-1]
            if len(pts) < 3:
                raise ValidationError(f"polygon {i} has fewer than 3 vertices")
            if not LinearRing([(lon, lat) for lat, lon in pts]).is_simple:
                raise ValidationError(f"polygon {i} self-intersects")

    def geometry(self):
        polys = [Polygon([(lon, lat) for lat, lon in ring]) for ring in self.polygons]
        return shapely.union_all(polys)

    def bounds(self) -> tuple[float, float, float, float]:
        lats = [p[0] for ring in self.polygons for p in ring]
        lons = [p[1] for ring in self.polygons for p in ring]
        return min(lats), max(lats), min(lons), max(lons)


def read_regions(path) -> RegionSet:
    """Polygons as blocks of ``lat lon`` lines separated by blank lines; ``#`` starts a comment."""
    rings, cur = [], []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            if cur:
                rings.append(tuple(cur))
                cur = []
            continue
        lat, lon = (float(v) for v in line.replace(",", " ").split())
        cur.append((lat, lon))
    if cur:
        rings.append(tuple(cur))
    return RegionSet(tuple(rings))


def write_regions(regions: RegionSet, path) -> None:
    blocks = ["\n".join(f"{lat!r} {lon!r}" for lat, lon in ring) for ring in regions.polygons]
    Path(path).write_text("\n\n".join(blocks) + "\n")


def sample_locations(regions: RegionSet, n: int, rng: np.random.Generator,
                     max_draws: int = 10_000_000, chunk: int = 4096) -> np.ndarray:
    """Draw ``n`` area-uniform points inside the polygon union, as an ``n x 2`` (lat, lon) array.

    Candidates come from the bounding box with latitude drawn through
    ``sin(lat)`` (density proportional to ``cos(lat)``); points outside the
    union are rejected. Raises :class:`SamplingError` once ``max_draws``
    candidates have been spent.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    geom = regions.geometry()
    shapely.prepare(geom)
    lat0, lat1, lon0, lon1 = regions.bounds()
    s0, s1 = math.sin(math.radians(lat0)), math.sin(math.radians(lat1))
    out = np.empty((0, 2))
    drawn = 0
    while len(out) < n:
        if drawn >= max_draws:
            raise SamplingError(f"rejection budget of {max_draws} draws exhausted with {len(out)}/{n} points")
        m = min(chunk, max_draws - drawn)
        lat = np.degrees(np.arcsin(rng.uniform(s0, s1, m)))
        lon = rng.uniform(lon0, lon1, m)
        drawn += m
        keep = shapely.contains_xy(geom, lon, lat)
        out = np.concatenate([out, np.stack([lat[keep], lon[keep]], axis=1)])
    return out[:n]


def sample_timestamps(start: int, end: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` IID uniform integer UTC seconds in ``[start, end)``."""
    if start >= end:
        raise ValueError(f"start {start} must precede end {end}")
    return rng.integers(start, end, size=n, dtype=np.int64)


def snap_to_grid(points: np.ndarray, step_deg: float) -> np.ndarray:
    """Snap (lat, lon) points to the centers of a regular tile grid."""
    return (np.floor(np.asarray(points) / step_deg) + 0.5) * step_deg


@dataclass(frozen=True)
class Anchor:
    lat: float
    lon: float
    timestamp: float


def make_anchors(locations: np.ndarray, timestamps: np.ndarray) -> list[Anchor]:
    return [Anchor(float(a), float(b), float(t)) for (a, b), t in zip(locations, timestamps)]


# ---------------------------------------------------------------- catalogs

CATALOG_FIELDS = ("scene_id", "modality", "lat", "lon", "timestamp", "cloud_fraction", "uri")


def write_catalog(scenes: Iterable[SceneMeta], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(CATALOG_FIELDS)
        for s in scenes:
            w.writerow([s.scene_id, s.modality, repr(s.lat), repr(s.lon), repr(s.timestamp),
                        repr(s.cloud_fraction), s.uri])


def read_catalog(path) -> list[SceneMeta]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != CATALOG_FIELDS:
        raise CorruptFileError(f"{path}: catalog header must be {CATALOG_FIELDS}")
    scenes = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(CATALOG_FIELDS):
            raise CorruptFileError(f"{path}:{lineno}: expected {len(CATALOG_FIELDS)} columns")
        sid, mod, lat, lon, ts, cloud, uri = row
        scenes.append(SceneMeta(sid, mod, float(lat), float(lon), float(ts), float(cloud), uri))
    ids = Counter(s.scene_id for s in scenes)
    dup = [k for k, v in ids.items() if v > 1]
    if dup:
        raise ValidationError(f"{path}: duplicate scene ids {dup[:5]}")
    return scenes


class CatalogIndex:
    """Immutable spatial hash over one modality's scenes with time-sorted cells."""

    def __init__(self, scenes: Sequence[SceneMeta], modality: str, geo_eps: float = GEO_EPS):
        self.modality = modality
        self.geo_eps = geo_eps
        cells: dict[tuple[int, int], list[SceneMeta]] = defaultdict(list)
        for s in scenes:
            if s.modality == modality:
                cells[self._key(s.lat, s.lon)].append(s)
        self._cells = {}
        for key, items in cells.items():
            items.sort(key=lambda s: (s.timestamp, s.scene_id))
            self._cells[key] = (tuple(s.timestamp for s in items), tuple(items))

    def _key(self, lat, lon):
        return (math.floor(lat / self.geo_eps), math.floor(lon / self.geo_eps))

    def _near(self, lat, lon):
        ki, kj = self._key(lat, lon)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                cell = self._cells.get((ki + di, kj + dj))
                if cell is not None:
                    yield cell

    def in_window(self, lat: float, lon: float, t_lo: float, t_hi: float) -> list[SceneMeta]:
        """Co-located scenes with ``t_lo <= timestamp <= t_hi``."""
        out = []
        for times, items in self._near(lat, lon):
            lo = bisect.bisect_left(times, t_lo)
            hi = bisect.bisect_right(times, t_hi)
            for s in items[lo:hi]:
                if abs(s.lat - lat) <= self.geo_eps and abs(s.lon - lon) <= self.geo_eps:
                    out.append(s)
        return out


def _colocated(s: SceneMeta, lat, lon, eps):
    return abs(s.lat - lat) <= eps and abs(s.lon - lon) <= eps


def _closest_past(cands: Iterable[SceneMeta], anchor_t, max_cloud):
    best = None
    for s in cands:
        if s.cloud_fraction > max_cloud:
            continue
        key = (anchor_t - s.timestamp, s.scene_id)
        if best is None or key < best[0]:
            best = (key, s)
    return None if best is None else best[1]


def find_scene(catalog, modality: str, loc: tuple[float, float], anchor_t: float,
               window_s: float = PAIR_WINDOW_S, max_cloud: float = 1.0,
               geo_eps: float = GEO_EPS) -> SceneMeta | None:
    """Most recent co-located scene in ``[anchor_t - window_s, anchor_t]`` with acceptable cloud.

    ``catalog`` may be a sequence of scenes or a prebuilt :class:`CatalogIndex`.
    Ties on time go to the lexicographically smallest ``scene_id``.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    index = catalog if isinstance(catalog, CatalogIndex) else CatalogIndex(catalog, modality, geo_eps)
    cands = index.in_window(loc[0], loc[1], anchor_t - window_s, anchor_t)
    return _closest_past(cands, anchor_t, max_cloud)


def find_scene_scan(catalog: Sequence[SceneMeta], modality, loc, anchor_t, window_s=PAIR_WINDOW_S,
                    max_cloud=1.0, geo_eps=GEO_EPS) -> SceneMeta | None:
    cands = [
        s for s in catalog
        if s.modality == modality
        and _colocated(s, loc[0], loc[1], geo_eps)
        and anchor_t - window_s <= s.timestamp <= anchor_t
    ]
    return _closest_past(cands, anchor_t, max_cloud)


# ---------------------------------------------------------------- pairing


@dataclass(frozen=True)
class ScenePair:
    """Catalog-level positive pair; :func:`materialize` loads its tiles."""

    anchor: Anchor
    s1: SceneMeta
    s2: SceneMeta

    @property
    def delta_t_s1(self) -> float:
        return self.anchor.timestamp - self.s1.timestamp

    @property
    def delta_t_s2(self) -> float:
        return self.anchor.timestamp - self.s2.timestamp


def materialize(pair: ScenePair, root=None) -> PairedSample:
    base = Path(root) if root is not None else Path()
    return PairedSample(
        s1=read_tile(base / pair.s1.uri),
        s2=read_tile(base / pair.s2.uri),
        anchor_timestamp=pair.anchor.timestamp,
        delta_t_s1=pair.delta_t_s1,
        delta_t_s2=pair.delta_t_s2,
    )


def build_pairs_with_stats(s1_catalog, s2_catalog, anchors: Sequence[Anchor],
                           window_s: float = PAIR_WINDOW_S, max_cloud: float = MAX_S2_CLOUD):
    """Pairs plus skip-reason counts (``paired``, ``no_s1``, ``no_s2``, ``cloud``)."""
    i1 = s1_catalog if isinstance(s1_catalog, CatalogIndex) else CatalogIndex(s1_catalog, S1)
    i2 = s2_catalog if isinstance(s2_catalog, CatalogIndex) else CatalogIndex(s2_catalog, S2)
    stats = Counter({"paired": 0, "no_s1": 0, "no_s2": 0, "cloud": 0})
    pairs = []
    for a in anchors:
        loc = (a.lat, a.lon)
        s1 = find_scene(i1, S1, loc, a.timestamp, window_s, 1.0)
        if s1 is None:
            stats["no_s1"] += 1
            continue
        s2 = find_scene(i2, S2, loc, a.timestamp, window_s, max_cloud)
        if s2 is None:
            any_s2 = find_scene(i2, S2, loc, a.timestamp, window_s, 1.0)
            stats["cloud" if any_s2 is not None else "no_s2"] += 1
            continue
        stats["paired"] += 1
        pairs.append(ScenePair(a, s1, s2))
    return pairs, dict(stats)


def build_pairs(s1_catalog, s2_catalog, anchors: Sequence[Anchor]) -> list[ScenePair]:
    return build_pairs_with_stats(s1_catalog, s2_catalog, anchors)[0]


def build_pairs_scan(s1_catalog, s2_catalog, anchors) -> list[ScenePair]:
    out = []
    for a in anchors:
        s1 = find_scene_scan(s1_catalog, S1, (a.lat, a.lon), a.timestamp, max_cloud=1.0)
        s2 = find_scene_scan(s2_catalog, S2, (a.lat, a.lon), a.timestamp, max_cloud=MAX_S2_CLOUD)
        if s1 is not None and s2 is not None:
            out.append(ScenePair(a, s1, s2))
    return out


@dataclass(frozen=True)
class DownstreamJoin:
    s2: SceneMeta
    s1: SceneMeta

    @property
    def delta_t(self) -> float:
        return self.s1.timestamp - self.s2.timestamp


def _closest_abs(cands, t):
    best = None
    for s in cands:
        key = (abs(s.timestamp - t), s.scene_id)
        if best is None or key < best[0]:
            best = (key, s)
    return None if best is None else best[1]


def join_downstream(s2_entries: Sequence[SceneMeta], s1_catalog,
                    window_s: float = DOWNSTREAM_WINDOW_S) -> list[DownstreamJoin]:
    """Join each labeled S2 scene to the co-located S1 scene nearest in time (either direction).

    Entries with no S1 scene within ``window_s`` are dropped.
    """
    index = s1_catalog if isinstance(s1_catalog, CatalogIndex) else CatalogIndex(s1_catalog, S1)
    out = []
    for e in s2_entries:
        cands = index.in_window(e.lat, e.lon, e.timestamp - window_s, e.timestamp + window_s)
        best = _closest_abs(cands, e.timestamp)
        if best is not None:
            out.append(DownstreamJoin(e, best))
    return out


def join_downstream_scan(s2_entries, s1_catalog, window_s=DOWNSTREAM_WINDOW_S) -> list[DownstreamJoin]:
    out = []
    for e in s2_entries:
        cands = [
            s for s in s1_catalog
            if s.modality == S1 and _colocated(s, e.lat, e.lon, GEO_EPS)
            and abs(s.timestamp - e.timestamp) <= window_s
        ]
        best = _closest_abs(cands, e.timestamp)
        if best is not None:
            out.append(DownstreamJoin(e, best))
    return out


# ---------------------------------------------------------------- sub-sampling


@dataclass(frozen=True)
class SplitPlan:
    fraction: float
    set_index: int
    member_ids: tuple[str, ...]
    seed: int


def split_size(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 0.5))


def make_subsample_splits(train_ids: Sequence[str], plan: Mapping[float, int], seed: int) -> list[SplitPlan]:
    """Fixed label-scarcity subsets.

    One seeded shuffle of ``train_ids`` is cut into consecutive chunks of
    ``round(f * N)`` ids for each fraction ``f``, so sets sharing a fraction
    never overlap. Fraction 1.0 yields the full id set for each requested
    repeat.
    """
    ids = list(train_ids)
    n = len(ids)
    if len(set(ids)) != n:
        raise InfeasiblePlan("train ids contain duplicates")
    order = np.random.default_rng(seed).permutation(n)
    out = []
    for fraction in sorted(plan):
        k = plan[fraction]
        if not 0 < fraction <= 1:
            raise InfeasiblePlan(f"fraction {fraction} outside (0, 1]")
        if fraction == 1.0:
            out.extend(SplitPlan(1.0, j, tuple(ids), seed) for j in range(k))
            continue
        size = split_size(fraction, n)
        if size == 0 or k * size > n:
            raise InfeasiblePlan(f"{k} disjoint sets of {size} do not fit in {n} ids")
        for j in range(k):
            members = np.sort(order[j * size:(j + 1) * size])
            out.append(SplitPlan(fraction, j, tuple(ids[i] for i in members), seed))
    return out


def write_splits(splits: Sequence[SplitPlan], path) -> None:
    lines = ["fraction\tset_index\tseed\tmembers"]
    for s in splits:
        lines.append(f"{s.fraction!r}\t{s.set_index}\t{s.seed}\t{','.join(s.member_ids)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_splits(path) -> list[SplitPlan]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != "fraction\tset_index\tseed\tmembers":
        raise CorruptFileError(f"{path}: bad splits header")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        f, j, seed, members = row.split("\t")
        out.append(SplitPlan(float(f), int(j), tuple(m for m in members.split(",") if m), int(seed)))
    return out


def find_split(splits: Sequence[SplitPlan], fraction: float, set_index: int) -> SplitPlan:
    for s in splits:
        if math.isclose(s.fraction, fraction) and s.set_index == set_index:
            return s
    raise KeyError(f"no split at fraction {fraction} set {set_index}")
