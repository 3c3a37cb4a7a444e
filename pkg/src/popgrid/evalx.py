"""Evaluation metrics and pooled spatial cross-validation.

All metrics are computed once over the pooled predictions of every
validation fold, never averaged across folds. MeAPE is undefined at y = 0,
so those entries are excluded and counted; a region whose observed total is
zero is likewise excluded from AggPE. Quantiles use linear interpolation and
the median of an even count is the mean of the two central order statistics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .geogrid import FoldSpec, Tile

FLAG_R2_UNDEFINED = "r2_undefined"
FLAG_MEAPE_EMPTY = "meape_no_positive_observations"
FLAG_AGGPE_ZERO_REGIONS = "aggpe_zero_total_regions_excluded"


@dataclass(frozen=True)
class PredictionEntry:
    tile_id: str
    y: float
    y_hat: float
    region_key: str
    fold: int | None = None


@dataclass
class PredictionSet:
    """Aligned observed/predicted pairs; the input to every metric."""

    entries: list[PredictionEntry]

    def __post_init__(self):
        ids = [e.tile_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate tile_ids in prediction set: {dupes}")
        for e in self.entries:
            if e.y < 0 or e.y_hat < 0:
                raise ValueError(
                    f"tile {e.tile_id}: observed and predicted population must be >= 0"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def observed(self) -> np.ndarray:
        return np.array([e.y for e in self.entries], dtype=float)

    def predicted(self) -> np.ndarray:
        return np.array([e.y_hat for e in self.entries], dtype=float)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tile_id", "y", "y_hat", "region_key", "fold"])
            for e in self.entries:
                w.writerow([e.tile_id, e.y, e.y_hat, e.region_key,
                            "" if e.fold is None else e.fold])

    @classmethod
    def from_csv(cls, path: str | Path) -> "PredictionSet":
        entries = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                fold = row.get("fold", "")
                entries.append(
                    PredictionEntry(
                        tile_id=row["tile_id"],
                        y=float(row["y"]),
                        y_hat=float(row["y_hat"]),
                        region_key=row["region_key"],
                        fold=int(fold) if fold not in ("", None) else None,
                    )
                )
        return cls(entries)


@dataclass
class MetricsReport:
    r2: float
    meape: float
    meae: float
    iqr_abs_err: float
    aggpe: float
    n: int
    excluded_from_meape: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def _num(v):
            return None if (isinstance(v, float) and math.isnan(v)) else v

        return {
            "r2": _num(self.r2),
            "meape": _num(self.meape),
            "meae": _num(self.meae),
            "iqr_abs_err": _num(self.iqr_abs_err),
            "aggpe": _num(self.aggpe),
            "n": self.n,
            "excluded_from_meape": self.excluded_from_meape,
            "flags": self.flags,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def compute_metrics(p: PredictionSet) -> MetricsReport:
    """R^2, MeAE, MeAPE, IQR of absolute errors, and AggPE over regions."""
    if len(p) == 0:
        raise ValueError("cannot compute metrics on an empty prediction set")
    # canonical entry order makes every metric exactly permutation-invariant
    p = PredictionSet(sorted(p.entries, key=lambda e: e.tile_id))
    y = p.observed()
    y_hat = p.predicted()
    flags: list[str] = []

    abs_err = np.abs(y - y_hat)
    meae = float(np.median(abs_err))
    q1, q3 = np.quantile(abs_err, [0.25, 0.75])
    iqr = float(q3 - q1)

    positive = y > 0
    excluded = int(np.sum(~positive))
    if positive.any():
        with np.errstate(over="ignore"):  # a subnormal y legitimately gives inf
            meape = float(np.median(abs_err[positive] / y[positive]))
    else:
        meape = float("nan")
        flags.append(FLAG_MEAPE_EMPTY)

    ss_tot = float(np.sum((y - y.mean()) ** 2)) if len(p) >= 2 else 0.0
    if ss_tot == 0.0:
        r2 = float("nan")
        flags.append(FLAG_R2_UNDEFINED)
    else:
        r2 = 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot

    region_ratios = []
    zero_regions = 0
    for region in sorted({e.region_key for e in p.entries}):
        mask = np.array([e.region_key == region for e in p.entries])
        total_y = float(y[mask].sum())
        total_hat = float(y_hat[mask].sum())
        if total_y == 0.0:
            zero_regions += 1
            continue
        region_ratios.append(abs(total_y - total_hat) / total_y)
    if zero_regions:
        flags.append(FLAG_AGGPE_ZERO_REGIONS)
    aggpe = float(np.median(region_ratios)) if region_ratios else float("nan")

    return MetricsReport(
        r2=r2,
        meape=meape,
        meae=meae,
        iqr_abs_err=iqr,
        aggpe=aggpe,
        n=len(p),
        excluded_from_meape=excluded,
        flags=flags,
    )


class Pipeline(Protocol):
    """Anything that can be spatially cross-validated."""

    def fit(self, tiles: Sequence[Tile]) -> None: ...

    def predict(self, tiles: Sequence[Tile]) -> Mapping[str, float]: ...


def crossvalidate(
    pipeline: Pipeline,
    tiles: Sequence[Tile],
    folds: FoldSpec,
) -> tuple[PredictionSet, MetricsReport]:
    """Fit on the complement of each fold, predict the fold, pool, score.

    Each labelled tile appears in exactly one validation fold; a tile found
    in both the train and validation side of any fold aborts the run (data
    leakage guard).
    """
    labelled = [t for t in tiles if t.labelled]
    folds.validate(labelled)
    entries: list[PredictionEntry] = []
    seen: set[str] = set()
    for f in range(folds.n_folds):
        val = [t for t in labelled if folds.assignment[t.tile_id] == f]
        train = [t for t in labelled if folds.assignment[t.tile_id] != f]
        if not train:
            raise ValueError(f"fold {f} leaves no training tiles")
        overlap = {t.tile_id for t in train} & {t.tile_id for t in val}
        if overlap:
            raise ValueError(
                f"data leakage: tiles in both train and validation of fold {f}: "
                f"{sorted(overlap)}"
            )
        pipeline.fit(train)
        preds = pipeline.predict(val)
        for t in val:
            if t.tile_id in seen:
                raise ValueError(f"tile {t.tile_id} predicted more than once")
            seen.add(t.tile_id)
            entries.append(
                PredictionEntry(
                    tile_id=t.tile_id,
                    y=float(t.population),
                    y_hat=max(0.0, float(preds[t.tile_id])),
                    region_key=t.region_key,
                    fold=f,
                )
            )
    missing = {t.tile_id for t in labelled} - seen
    if missing:
        raise ValueError(f"pooled predictions missing tiles: {sorted(missing)}")
    pooled = PredictionSet(entries)
    return pooled, compute_metrics(pooled)
