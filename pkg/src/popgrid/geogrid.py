"""Analysis grid, microcensus aggregation, tile curation state, spatial folds.

The grid is a regular lattice of 100 m cells in one projected CRS. Tiles are
addressed by (row, col) from the top-left corner; row indices grow southwards.
Every cell covers a half-open box (closed on its minimum edge, open on its
maximum edge) so a survey point always lands in exactly one cell.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from pathlib import Path
from typing import Iterable, Sequence

STATUS_UNLABELLED = "unlabelled"
STATUS_SURVEYED = "surveyed"
STATUS_CURATED = "curated"
STATUS_EXCLUDED = "excluded"
STATUS_ZERO = "zero"
TILE_STATUSES = (
    STATUS_UNLABELLED,
    STATUS_SURVEYED,
    STATUS_CURATED,
    STATUS_EXCLUDED,
    STATUS_ZERO,
)

DECISION_CURATE = "curate"
DECISION_EXCLUDE = "exclude"
DECISION_ZERO = "zero"
DECISIONS = (DECISION_CURATE, DECISION_EXCLUDE, DECISION_ZERO)


@dataclass(frozen=True)
class GridDef:
    """Regular analysis grid in a projected, metre-unit CRS.

    (origin_x, origin_y) is the top-left corner. Tile (r, c) covers
    [origin_x + c*cell, origin_x + (c+1)*cell) in x and
    [origin_y - (r+1)*cell, origin_y - r*cell) in y.
    """

    origin_x: float
    origin_y: float
    n_rows: int
    n_cols: int
    crs_code: str
    district_id: str
    cell_size: float = 100.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one row and one column")

    def tile_box(self, row: int, col: int) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the half-open cell box."""
        s = self.cell_size
        xmin = self.origin_x + col * s
        ymax = self.origin_y - row * s
        return (xmin, ymax - s, xmin + s, ymax)

    def tile_centroid(self, row: int, col: int) -> tuple[float, float]:
        s = self.cell_size
        return (self.origin_x + (col + 0.5) * s, self.origin_y - (row + 0.5) * s)

    def locate(self, x: float, y: float) -> tuple[int, int] | None:
        """Cell containing (x, y), or None when outside the grid extent.

        x is closed on the left cell edge; y is closed on the bottom edge,
        matching the half-open box convention.
        """
        s = self.cell_size
        u = (x - self.origin_x) / s
        v = (self.origin_y - y) / s
        col = math.floor(u)
        row = math.ceil(v) - 1
        if col < 0 or col >= self.n_cols or row < 0 or row >= self.n_rows:
            return None
        return (row, col)

    def tile_id(self, row: int, col: int) -> str:
        return make_tile_id(self.district_id, row, col)

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "crs_code": self.crs_code,
            "district_id": self.district_id,
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridDef":
        return cls(**d)


def make_tile_id(district_id: str, row: int, col: int) -> str:
    return f"{district_id}:{row}:{col}"


def parse_tile_id(tile_id: str) -> tuple[str, int, int]:
    district, row, col = tile_id.rsplit(":", 2)
    return district, int(row), int(col)


@dataclass(frozen=True)
class MicrocensusRecord:
    x: float
    y: float
    household_size: int
    psu_id: str
    survey_date: date

    def __post_init__(self):
        if self.household_size < 0:
            raise ValueError(f"household_size must be >= 0, got {self.household_size}")


@dataclass
class Tile:
    """One 100 m grid cell: the unit of labelling and prediction."""

    tile_id: str
    row: int
    col: int
    population: float | None = None
    status: str = STATUS_UNLABELLED
    region_key: str = ""

    def __post_init__(self):
        if self.status not in TILE_STATUSES:
            raise ValueError(f"unknown tile status {self.status!r}")
        if self.status == STATUS_ZERO and self.population != 0:
            raise ValueError(f"tile {self.tile_id}: status=zero requires population 0")
        if self.status == STATUS_CURATED and self.population is None:
            raise ValueError(f"tile {self.tile_id}: curated tile must carry a population")
        if self.population is not None and self.population < 0:
            raise ValueError(f"tile {self.tile_id}: population must be >= 0")

    @property
    def labelled(self) -> bool:
        return self.population is not None

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "row": self.row,
            "col": self.col,
            "population": self.population,
            "status": self.status,
            "region_key": self.region_key,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tile":
        return cls(
            tile_id=d["tile_id"],
            row=int(d["row"]),
            col=int(d["col"]),
            population=None if d.get("population") is None else float(d["population"]),
            status=d.get("status", STATUS_UNLABELLED),
            region_key=d.get("region_key", ""),
        )


@dataclass(frozen=True)
class CurationDecision:
    """A human keep/exclude/zero call on one tile; the log is append-only."""

    tile_id: str
    decision: str
    annotator: str
    timestamp: datetime
    note: str | None = None

    def __post_init__(self):
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r}")

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "decision": self.decision,
            "annotator": self.annotator,
            "timestamp": self.timestamp.isoformat(),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurationDecision":
        return cls(
            tile_id=d["tile_id"],
            decision=d["decision"],
            annotator=d["annotator"],
            timestamp=datetime.fromisoformat(d["timestamp"]),
            note=d.get("note"),
        )


@dataclass
class FoldSpec:
    """Partition of the labelled tiles into spatially contiguous folds."""

    n_folds: int
    assignment: dict[str, int]

    def fold_of(self, tile_id: str) -> int:
        return self.assignment[tile_id]

    def validate(self, tiles: Sequence[Tile]) -> None:
        """Raise when the assignment is not a partition of the labelled tiles."""
        labelled = [t.tile_id for t in tiles if t.labelled]
        if len(set(labelled)) != len(labelled):
            dupes = sorted({i for i in labelled if labelled.count(i) > 1})
            raise ValueError(f"duplicate tile_ids in tile list: {dupes}")
        labelled_set = set(labelled)
        assigned = set(self.assignment)
        missing = sorted(labelled_set - assigned)
        extra = sorted(assigned - labelled_set)
        if missing:
            raise ValueError(f"fold assignment missing labelled tiles: {missing}")
        if extra:
            raise ValueError(f"fold assignment names unknown tiles: {extra}")
        bad = {i: f for i, f in self.assignment.items() if not 0 <= f < self.n_folds}
        if bad:
            raise ValueError(f"fold indices out of range 0..{self.n_folds - 1}: {bad}")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.assignment, indent=0, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "FoldSpec":
        assignment = {str(k): int(v) for k, v in json.loads(Path(path).read_text()).items()}
        n_folds = max(assignment.values()) + 1 if assignment else 0
        return cls(n_folds=n_folds, assignment=assignment)


@dataclass
class AggregationResult:
    tiles: list[Tile]
    rejects: list[tuple[MicrocensusRecord, str]] = field(default_factory=list)


def aggregate_microcensus(
    records: Iterable[MicrocensusRecord],
    grid: GridDef,
    records_crs: str | None = None,
) -> AggregationResult:
    """Sum household sizes into the grid cells containing the survey points.

    Returns surveyed tiles for occupied cells only, plus a rejects report for
    points outside the grid extent. Declaring a CRS that differs from the
    grid's is an error; the toolkit never reprojects.
    """
    if records_crs is not None and records_crs != grid.crs_code:
        raise ValueError(
            f"microcensus CRS {records_crs!r} does not match grid CRS {grid.crs_code!r}"
        )
    sums: dict[tuple[int, int], int] = defaultdict(int)
    rejects: list[tuple[MicrocensusRecord, str]] = []
    for rec in records:
        cell = grid.locate(rec.x, rec.y)
        if cell is None:
            rejects.append((rec, "outside grid extent"))
            continue
        sums[cell] += rec.household_size
    tiles = [
        Tile(
            tile_id=grid.tile_id(r, c),
            row=r,
            col=c,
            population=float(total),
            status=STATUS_SURVEYED,
            region_key=grid.district_id,
        )
        for (r, c), total in sorted(sums.items())
    ]
    return AggregationResult(tiles=tiles, rejects=rejects)


def apply_curation(tiles: Sequence[Tile], decisions: Sequence[CurationDecision]) -> list[Tile]:
    """Apply a decision log to tiles; the latest decision per tile wins.

    surveyed -> curated | excluded; unlabelled -> zero (sets population 0).
    Replaying the same log is idempotent.
    """
    by_id = {t.tile_id: t for t in tiles}
    for d in decisions:
        if d.tile_id not in by_id:
            raise ValueError(f"curation decision for unknown tile_id {d.tile_id!r}")
    last: dict[str, CurationDecision] = {}
    for d in sorted(decisions, key=lambda d: d.timestamp):
        last[d.tile_id] = d
    out = []
    for t in tiles:
        d = last.get(t.tile_id)
        if d is None:
            out.append(replace(t))
            continue
        if d.decision == DECISION_CURATE:
            if t.population is None:
                raise ValueError(f"cannot curate unlabelled tile {t.tile_id}")
            out.append(replace(t, status=STATUS_CURATED))
        elif d.decision == DECISION_EXCLUDE:
            out.append(replace(t, status=STATUS_EXCLUDED))
        else:  # zero: only for tiles without survey labels
            if t.status not in (STATUS_UNLABELLED, STATUS_ZERO):
                raise ValueError(
                    f"zero decision invalid for tile {t.tile_id} with survey label"
                )
            out.append(replace(t, status=STATUS_ZERO, population=0.0))
    return out


# --- spatial folds -----------------------------------------------------------

_HILBERT_ORDER = 16  # 2^16 cells per axis is far below 100 m tile spacing


def hilbert_index(order: int, x: int, y: int) -> int:
    """Distance along the Hilbert curve of 2^order x 2^order cells at (x, y)."""
    rx = ry = 0
    d = 0
    s = 1 << (order - 1)
    while s > 0:
        rx = 1 if (x & s) > 0 else 0
        ry = 1 if (y & s) > 0 else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            x, y = y, x
        s >>= 1
    return d


def _quantize(values: list[float], order: int) -> list[int]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0] * len(values)
    top = (1 << order) - 1
    return [min(top, int((v - lo) / (hi - lo) * top + 0.5)) for v in values]


def make_spatial_folds(
    tiles: Sequence[Tile],
    n_folds: int = 4,
    grid_lookup: dict[str, GridDef] | None = None,
) -> FoldSpec:
    """Split labelled tiles into n_folds spatially contiguous groups per region.

    Within each region, tiles are ordered by the Hilbert-curve index of their
    centroid and cut into n_folds contiguous runs of near-equal size; fold f
    is the union of run f over all regions. `grid_lookup` maps region_key to
    its GridDef for centroid computation; without it, (col, row) indices are
    used directly, which is equivalent for a single shared grid.
    """
    if n_folds < 2:
        raise ValueError(f"n_folds must be >= 2, got {n_folds}")
    labelled = [t for t in tiles if t.labelled]
    by_region: dict[str, list[Tile]] = defaultdict(list)
    for t in labelled:
        by_region[t.region_key].append(t)

    assignment: dict[str, int] = {}
    for region in sorted(by_region):
        group = by_region[region]
        if len(group) < n_folds:
            raise ValueError(
                f"region {region!r} has {len(group)} labelled tiles, fewer than "
                f"{n_folds} folds; lower n_folds"
            )
        if grid_lookup and region in grid_lookup:
            g = grid_lookup[region]
            cents = [g.tile_centroid(t.row, t.col) for t in group]
            xs = [c[0] for c in cents]
            ys = [c[1] for c in cents]
        else:
            xs = [float(t.col) for t in group]
            ys = [-float(t.row) for t in group]  # y grows northwards
        qx = _quantize(xs, _HILBERT_ORDER)
        qy = _quantize(ys, _HILBERT_ORDER)
        keys = [hilbert_index(_HILBERT_ORDER, x, y) for x, y in zip(qx, qy)]
        order = sorted(range(len(group)), key=lambda i: (keys[i], group[i].tile_id))
        base, rem = divmod(len(group), n_folds)
        pos = 0
        for f in range(n_folds):
            size = base + (1 if f < rem else 0)
            for i in order[pos : pos + size]:
                assignment[group[i].tile_id] = f
            pos += size
    return FoldSpec(n_folds=n_folds, assignment=assignment)


# --- file formats ------------------------------------------------------------


def write_tile_manifest(tiles: Iterable[Tile], path: str | Path) -> None:
    """One JSON object per line with all Tile fields."""
    with open(path, "w") as fh:
        for t in tiles:
            fh.write(json.dumps(t.to_dict()) + "\n")


def read_tile_manifest(path: str | Path) -> list[Tile]:
    tiles = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                tiles.append(Tile.from_dict(json.loads(line)))
    return tiles


def load_microcensus_csv(path: str | Path) -> list[MicrocensusRecord]:
    """CSV with header x,y,household_size,psu_id,survey_date."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"x", "y", "household_size", "psu_id", "survey_date"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(
                f"microcensus CSV must have columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            records.append(
                MicrocensusRecord(
                    x=float(row["x"]),
                    y=float(row["y"]),
                    household_size=int(row["household_size"]),
                    psu_id=row["psu_id"],
                    survey_date=date.fromisoformat(row["survey_date"]),
                )
            )
    return records


def load_microcensus_geojson(path: str | Path) -> tuple[list[MicrocensusRecord], str | None]:
    """GeoJSON points with the CSV properties; returns (records, declared CRS)."""
    doc = json.loads(Path(path).read_text())
    crs = None
    crs_member = doc.get("crs")
    if isinstance(crs_member, dict):
        crs = crs_member.get("properties", {}).get("name")
    records = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            raise ValueError(f"expected Point geometry, got {geom.get('type')!r}")
        x, y = geom["coordinates"][:2]
        props = feat.get("properties", {})
        records.append(
            MicrocensusRecord(
                x=float(x),
                y=float(y),
                household_size=int(props["household_size"]),
                psu_id=str(props["psu_id"]),
                survey_date=date.fromisoformat(props["survey_date"]),
            )
        )
    return records, crs
