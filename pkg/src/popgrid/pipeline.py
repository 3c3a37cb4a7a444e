"""Fit/predict pipelines that plug into spatial cross-validation and mapping.

A pipeline owns whatever it needs to turn tiles into predictions: the null
model needs nothing, the feature pipeline needs a feature table, and the
encoder pipeline needs a chip source plus an encoder to fine-tune. Each
cross-validation fold calls fit() afresh, so fine-tuning trains one network
per fold.
"""

from __future__ import annotations

from typing import Mapping, Protocol, Sequence

from . import regress
from .encoder import Encoder, FinetuneConfig, TrainingLog, extract, finetune, predict_mc_dropout
from .geogrid import FoldSpec, GridDef, Tile, make_spatial_folds
from .geotiff import RasterSource
from .imagery import Chip, extract_chip, prepare_for_model
from .regress import FeatureTable, RFConfig


class ChipSource(Protocol):
    def get(self, tile: Tile) -> Chip: ...


class InMemoryChips:
    """Prepared chips from a dict of raw chips; prepares lazily and caches."""

    def __init__(self, chips: Mapping[str, Chip], mean=None, std=None):
        self._raw = dict(chips)
        self._prepared: dict[str, Chip] = {}
        self._mean = mean
        self._std = std

    def get(self, tile: Tile) -> Chip:
        tid = tile.tile_id
        if tid not in self._prepared:
            chip = self._raw[tid]
            if chip.pixels_model is None:
                kwargs = {}
                if self._mean is not None:
                    kwargs = {"mean": self._mean, "std": self._std}
                chip = prepare_for_model(chip, **kwargs)
            self._prepared[tid] = chip
        return self._prepared[tid]


class RasterChips:
    """Windowed chip extraction straight from an imagery mosaic."""

    def __init__(self, raster: RasterSource, grid: GridDef, mean=None, std=None):
        self.raster = raster
        self.grid = grid
        self._mean = mean
        self._std = std
        self._cache: dict[str, Chip] = {}

    def get(self, tile: Tile) -> Chip:
        tid = tile.tile_id
        if tid not in self._cache:
            chip = extract_chip(self.raster, tile, self.grid)
            kwargs = {}
            if self._mean is not None:
                kwargs = {"mean": self._mean, "std": self._std}
            self._cache[tid] = prepare_for_model(chip, **kwargs)
        return self._cache[tid]


def _labels(tiles: Sequence[Tile]) -> dict[str, float]:
    out = {}
    for t in tiles:
        if t.population is None:
            raise ValueError(f"tile {t.tile_id} has no population label")
        out[t.tile_id] = float(t.population)
    return out


class NullPipeline:
    """Predicts the training mean everywhere; the baseline to beat."""

    def __init__(self):
        self.model: regress.PopulationModel | None = None

    @property
    def fingerprint(self) -> str:
        return "null"

    def fit(self, tiles: Sequence[Tile]) -> None:
        self.model = regress.fit_null(_labels(tiles))

    def predict(self, tiles: Sequence[Tile], chips=None) -> dict[str, float]:
        if self.model is None:
            raise ValueError("pipeline is not fitted")
        ids = [t.tile_id for t in tiles]
        return regress.predict(self.model, None, ids)

    def predict_with_uncertainty(self, tiles, chips=None, seed: int = 0):
        if self.model is None:
            raise ValueError("pipeline is not fitted")
        ids = [t.tile_id for t in tiles]
        return regress.predict_with_uncertainty(self.model, None, ids)


class FeatureRFPipeline:
    """Random Forest over a precomputed feature table."""

    def __init__(
        self,
        table: FeatureTable,
        rf_config: RFConfig | None = None,
        grid_search: bool = False,
        cv_folds: FoldSpec | None = None,
        inner_folds: int = 4,
        seed: int = 0,
    ):
        if rf_config is None and not grid_search:
            raise ValueError("need either an RFConfig or grid_search=True")
        self.table = table
        self.rf_config = rf_config
        self.grid_search = grid_search
        self.cv_folds = cv_folds
        self.inner_folds = inner_folds
        self.seed = seed
        self.model: regress.PopulationModel | None = None
        self.score_table: list[regress.GridScore] | None = None

    @property
    def fingerprint(self) -> str:
        cfg = self.model.rf_config if self.model else self.rf_config
        return f"rf[{self.table.source}]{'' if cfg is None else cfg.sort_key()}"

    def _search_folds(self, tiles: Sequence[Tile]) -> FoldSpec:
        if self.cv_folds is not None:
            ids = {t.tile_id for t in tiles}
            kept = {i: f for i, f in self.cv_folds.assignment.items() if i in ids}
            # compact fold indices: the held-out fold of the outer loop is empty here
            remap = {f: i for i, f in enumerate(sorted(set(kept.values())))}
            if len(remap) >= 2:
                return FoldSpec(
                    n_folds=len(remap),
                    assignment={i: remap[f] for i, f in kept.items()},
                )
        return make_spatial_folds(tiles, n_folds=self.inner_folds)

    def fit(self, tiles: Sequence[Tile]) -> None:
        labels = _labels(tiles)
        if self.grid_search:
            folds = self._search_folds(tiles)
            best, scores = regress.grid_search(self.table, labels, folds, seed=self.seed)
            self.score_table = scores
            cfg = best
        else:
            cfg = self.rf_config
        self.model = regress.fit(self.table, labels, cfg)

    def predict(self, tiles: Sequence[Tile], chips=None) -> dict[str, float]:
        if self.model is None:
            raise ValueError("pipeline is not fitted")
        return regress.predict(self.model, self.table, [t.tile_id for t in tiles])

    def predict_with_uncertainty(self, tiles, chips=None, seed: int = 0):
        if self.model is None:
            raise ValueError("pipeline is not fitted")
        return regress.predict_with_uncertainty(
            self.model, self.table, [t.tile_id for t in tiles]
        )


class EncoderRFPipeline:
    """Fine-tune an encoder on the training tiles, regress on its features.

    fit() always starts from the supplied base encoder, so consecutive folds
    never share fine-tuned weights.
    """

    def __init__(
        self,
        base_encoder: Encoder,
        chip_source: ChipSource,
        finetune_config: FinetuneConfig | None = None,
        rf_config: RFConfig | None = None,
        grid_search: bool = False,
        cv_folds: FoldSpec | None = None,
        inner_folds: int = 4,
        uncertainty: str = "rf_trees",  # or "mc_dropout"
        mc_passes: int = 30,
        mc_p: float = 0.1,
        seed: int = 0,
    ):
        if rf_config is None and not grid_search:
            raise ValueError("need either an RFConfig or grid_search=True")
        if uncertainty not in ("rf_trees", "mc_dropout"):
            raise ValueError(f"unknown uncertainty mode {uncertainty!r}")
        self.base_encoder = base_encoder
        self.chip_source = chip_source
        self.finetune_config = finetune_config
        self.rf_config = rf_config
        self.grid_search = grid_search
        self.cv_folds = cv_folds
        self.inner_folds = inner_folds
        self.uncertainty = uncertainty
        self.mc_passes = mc_passes
        self.mc_p = mc_p
        self.seed = seed
        self.encoder: Encoder | None = None
        self.model: regress.PopulationModel | None = None
        self.training_log: TrainingLog | None = None
        self.score_table: list[regress.GridScore] | None = None

    @property
    def fingerprint(self) -> str:
        enc = self.encoder or self.base_encoder
        return f"encoder:{enc.fingerprint[:12]}"

    def _chips_for(self, tiles: Sequence[Tile], chips=None) -> list[Chip]:
        if chips is not None:
            out = []
            for t in tiles:
                chip = chips[t.tile_id]
                if chip.pixels_model is None:
                    chip = prepare_for_model(chip)
                out.append(chip)
            return out
        return [self.chip_source.get(t) for t in tiles]

    def _feature_table(self, tiles: Sequence[Tile], chips=None) -> FeatureTable:
        prepared = self._chips_for(tiles, chips)
        reps = extract(self.encoder, prepared)
        dim = self.encoder.repr_dim
        return FeatureTable(
            rows={r.tile_id: r.vector.astype(float) for r in reps},
            feature_names=[f"repr_{i:04d}" for i in range(dim)],
            source="representation",
        )

    def fit(self, tiles: Sequence[Tile]) -> None:
        labels = _labels(tiles)
        prepared = self._chips_for(tiles)
        if self.finetune_config is not None:
            pairs = [(chip, labels[chip.tile_id]) for chip in prepared]
            self.encoder, self.training_log = finetune(
                self.base_encoder, pairs, self.finetune_config
            )
        else:
            self.encoder = self.base_encoder
        table = self._feature_table(tiles)
        if self.grid_search:
            if self.cv_folds is not None:
                ids = {t.tile_id for t in tiles}
                kept = {i: f for i, f in self.cv_folds.assignment.items() if i in ids}
                remap = {f: i for i, f in enumerate(sorted(set(kept.values())))}
                folds = FoldSpec(len(remap), {i: remap[f] for i, f in kept.items()})
            else:
                folds = make_spatial_folds(tiles, n_folds=self.inner_folds)
            best, scores = regress.grid_search(table, labels, folds, seed=self.seed)
            self.score_table = scores
            cfg = best
        else:
            cfg = self.rf_config
        self.model = regress.fit(table, labels, cfg)

    def predict(self, tiles: Sequence[Tile], chips=None) -> dict[str, float]:
        if self.model is None or self.encoder is None:
            raise ValueError("pipeline is not fitted")
        table = self._feature_table(tiles, chips)
        return regress.predict(self.model, table, [t.tile_id for t in tiles])

    def predict_with_uncertainty(self, tiles, chips=None, seed: int = 0):
        if self.model is None or self.encoder is None:
            raise ValueError("pipeline is not fitted")
        if self.uncertainty == "mc_dropout":
            prepared = self._chips_for(tiles, chips)
            means, stds = predict_mc_dropout(
                self.encoder, prepared, n_passes=self.mc_passes, p=self.mc_p, seed=seed
            )
            ids = [t.tile_id for t in tiles]
            return (
                {i: float(m) for i, m in zip(ids, means)},
                {i: float(s) for i, s in zip(ids, stds)},
            )
        table = self._feature_table(tiles, chips)
        return regress.predict_with_uncertainty(
            self.model, table, [t.tile_id for t in tiles]
        )
