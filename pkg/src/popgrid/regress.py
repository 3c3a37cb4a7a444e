"""Random Forest population model, hyperparameter grid search, null model.

The forest regresses population on encoder representations or on externally
supplied feature tables. Rows are canonicalized by tile_id before fitting so
predictions do not depend on the order callers assemble their tables in.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import joblib
import numpy as np
from sklearn.ensemble import RandomForestRegressor

from .geogrid import FoldSpec

GRID_NUM_ESTIMATORS = (100, 200, 300, 400, 500)
GRID_MIN_SAMPLES_SPLIT = (2, 5)
GRID_MIN_SAMPLES_LEAF = (1, 2)


@dataclass(frozen=True)
class RFConfig:
    num_estimators: int = 300
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_estimators < 1:
            raise ValueError("num_estimators must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    def sort_key(self) -> tuple[int, int, int]:
        return (self.num_estimators, self.min_samples_split, self.min_samples_leaf)


def search_grid(seed: int = 0) -> list[RFConfig]:
    """The full 5 x 2 x 2 candidate grid in lexicographic order."""
    return [
        RFConfig(n, s, l, seed)
        for n in GRID_NUM_ESTIMATORS
        for s in GRID_MIN_SAMPLES_SPLIT
        for l in GRID_MIN_SAMPLES_LEAF
    ]


@dataclass
class FeatureTable:
    """tile_id -> fixed-length feature vector, with named columns."""

    rows: dict[str, np.ndarray]
    feature_names: list[str]
    source: str = "representation"

    def __post_init__(self):
        width = len(self.feature_names)
        for tile_id, vec in self.rows.items():
            vec = np.asarray(vec, dtype=float)
            if vec.shape != (width,):
                raise ValueError(
                    f"row {tile_id}: expected {width} features, got {vec.shape}"
                )
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"row {tile_id}: non-finite feature values")
            self.rows[tile_id] = vec

    def matrix(self, tile_ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in tile_ids if i not in self.rows]
        if missing:
            raise ValueError(f"feature table missing tiles: {missing}")
        return np.stack([self.rows[i] for i in tile_ids])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tile_id", *self.feature_names])
            for tile_id in sorted(self.rows):
                w.writerow([tile_id, *(repr(float(v)) for v in self.rows[tile_id])])

    @classmethod
    def from_csv(cls, path: str | Path, source: str = "public") -> "FeatureTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "tile_id":
                raise ValueError(f"{path}: first column must be tile_id")
            names = header[1:]
            rows = {}
            for row in reader:
                rows[row[0]] = np.array([float(v) for v in row[1:]], dtype=float)
        return cls(rows=rows, feature_names=names, source=source)


@dataclass
class PopulationModel:
    kind: str  # "random_forest" | "null"
    rf_config: RFConfig | None = None
    training_mean: float | None = None
    feature_source: str = ""
    fitted: bool = False
    feature_names: list[str] = field(default_factory=list)
    training_fingerprint: str = ""
    _forest: RandomForestRegressor | None = None

    def __post_init__(self):
        if self.kind == "null" and self.fitted and self.training_mean is None:
            raise ValueError("null model requires a training mean")
        if self.kind == "random_forest" and self.rf_config is None:
            raise ValueError("random_forest model requires an RFConfig")

    def save(self, path_prefix: str | Path) -> None:
        """Serialized forest plus a JSON metadata sidecar."""
        prefix = Path(path_prefix)
        meta = {
            "kind": self.kind,
            "rf_config": None
            if self.rf_config is None
            else {
                "num_estimators": self.rf_config.num_estimators,
                "min_samples_split": self.rf_config.min_samples_split,
                "min_samples_leaf": self.rf_config.min_samples_leaf,
                "seed": self.rf_config.seed,
            },
            "training_mean": self.training_mean,
            "feature_source": self.feature_source,
            "fitted": self.fitted,
            "feature_names": self.feature_names,
            "training_fingerprint": self.training_fingerprint,
        }
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=2))
        if self._forest is not None:
            joblib.dump(self._forest, prefix.with_suffix(".joblib"))

    @classmethod
    def load(cls, path_prefix: str | Path) -> "PopulationModel":
        prefix = Path(path_prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text())
        cfg = meta["rf_config"]
        forest_path = prefix.with_suffix(".joblib")
        return cls(
            kind=meta["kind"],
            rf_config=None if cfg is None else RFConfig(**cfg),
            training_mean=meta["training_mean"],
            feature_source=meta["feature_source"],
            fitted=meta["fitted"],
            feature_names=meta["feature_names"],
            training_fingerprint=meta["training_fingerprint"],
            _forest=joblib.load(forest_path) if forest_path.exists() else None,
        )


def _training_fingerprint(ids: Sequence[str], x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    for i in ids:
        h.update(i.encode())
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    return h.hexdigest()[:16]


def fit(table: FeatureTable, labels: Mapping[str, float], cfg: RFConfig) -> PopulationModel:
    """Bootstrap-aggregated forest on (feature, label) pairs, seeded."""
    if len(labels) < 2:
        raise ValueError(f"need at least 2 labelled samples, got {len(labels)}")
    ids = sorted(labels)
    x = table.matrix(ids)
    y = np.array([labels[i] for i in ids], dtype=float)
    forest = RandomForestRegressor(
        n_estimators=cfg.num_estimators,
        min_samples_split=cfg.min_samples_split,
        min_samples_leaf=cfg.min_samples_leaf,
        criterion="squared_error",
        random_state=cfg.seed,
        n_jobs=-1,
    )
    forest.fit(x, y)
    return PopulationModel(
        kind="random_forest",
        rf_config=cfg,
        feature_source=table.source,
        fitted=True,
        feature_names=list(table.feature_names),
        training_fingerprint=_training_fingerprint(ids, x, y),
        _forest=forest,
    )


def fit_null(labels: Mapping[str, float]) -> PopulationModel:
    """Predicts the training-set mean everywhere, whatever the features."""
    if not labels:
        raise ValueError("cannot fit the null model on empty labels")
    return PopulationModel(
        kind="null",
        training_mean=float(np.mean(list(labels.values()))),
        feature_source="none",
        fitted=True,
    )


def predict(model: PopulationModel, table: FeatureTable | None, tile_ids: Sequence[str]) -> dict[str, float]:
    means, _ = predict_with_uncertainty(model, table, tile_ids)
    return means


def predict_with_uncertainty(
    model: PopulationModel,
    table: FeatureTable | None,
    tile_ids: Sequence[str],
) -> tuple[dict[str, float], dict[str, float]]:
    """Forest mean (clamped at 0) and the spread of individual tree outputs.

    The std is the unbiased sample standard deviation over trees; a single
    tree has no spread and reports 0. The null model is exact, so its std
    is 0 as well.
    """
    if not model.fitted:
        raise ValueError("model is not fitted")
    if model.kind == "null":
        return (
            {i: max(0.0, model.training_mean) for i in tile_ids},
            {i: 0.0 for i in tile_ids},
        )
    if table is None:
        raise ValueError("random_forest model requires a feature table")
    x = table.matrix(tile_ids)
    if x.shape[1] != len(model.feature_names):
        raise ValueError(
            f"feature width {x.shape[1]} does not match training width "
            f"{len(model.feature_names)}"
        )
    per_tree = tree_predictions(model, table, tile_ids)
    mean = per_tree.mean(axis=0)
    if per_tree.shape[0] > 1:
        std = per_tree.std(axis=0, ddof=1)
    else:
        std = np.zeros(per_tree.shape[1])
    means = {i: max(0.0, float(m)) for i, m in zip(tile_ids, mean)}
    stds = {i: float(s) for i, s in zip(tile_ids, std)}
    return means, stds


def tree_predictions(
    model: PopulationModel, table: FeatureTable, tile_ids: Sequence[str]
) -> np.ndarray:
    """(n_trees, n_tiles) raw per-tree outputs, unclamped."""
    if model.kind != "random_forest" or model._forest is None:
        raise ValueError("per-tree predictions only exist for a fitted forest")
    x = table.matrix(tile_ids)
    return np.stack([tree.predict(x) for tree in model._forest.estimators_])


@dataclass(frozen=True)
class GridScore:
    config: RFConfig
    pooled_meae: float


def grid_search(
    table: FeatureTable,
    labels: Mapping[str, float],
    folds: FoldSpec,
    seed: int = 0,
) -> tuple[RFConfig, list[GridScore]]:
    """Evaluate the full candidate grid by pooled cross-validated MeAE.

    Every configuration is scored on the same folds; ties resolve to the
    lexicographically smallest configuration.
    """
    for tile_id in labels:
        if tile_id not in folds.assignment:
            raise ValueError(f"labelled tile {tile_id} missing from fold assignment")
    scores: list[GridScore] = []
    best: RFConfig | None = None
    best_score = float("inf")
    for cfg in search_grid(seed):
        abs_errors: list[float] = []
        for f in range(folds.n_folds):
            train = {i: v for i, v in labels.items() if folds.assignment[i] != f}
            val_ids = sorted(i for i in labels if folds.assignment[i] == f)
            if not val_ids:
                continue
            model = fit(table, train, cfg)
            preds = predict(model, table, val_ids)
            abs_errors.extend(abs(labels[i] - preds[i]) for i in val_ids)
        meae = float(np.median(abs_errors))
        scores.append(GridScore(config=cfg, pooled_meae=meae))
        if meae < best_score:
            best_score = meae
            best = cfg
    assert best is not None
    return best, scores


def save_score_table(scores: Sequence[GridScore], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["num_estimators", "min_samples_split", "min_samples_leaf", "pooled_meae"])
        for s in scores:
            c = s.config
            w.writerow([c.num_estimators, c.min_samples_split, c.min_samples_leaf, s.pooled_meae])
