"""District-scale population rasters, product comparison, census totals.

Third-party products must arrive pre-aligned to the analysis grid; the
toolkit verifies alignment and never resamples. Estimate rasters are 32-bit
float GeoTIFFs, band 1 the estimate, optional band 2 the uncertainty std,
nodata -1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .geogrid import GridDef, Tile
from .geotiff import GeoRef, RasterSource, read_geotiff, write_geotiff

NODATA = -1.0


@dataclass
class PopulationRaster:
    """Gridded estimates over a district; NaN marks nodata cells."""

    grid: GridDef
    values: np.ndarray
    uncertainty: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        expected = (self.grid.n_rows, self.grid.n_cols)
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != grid shape {expected}")
        finite = self.values[np.isfinite(self.values)]
        if np.any(finite < 0):
            raise ValueError("population estimates must be non-negative")
        if self.uncertainty is not None:
            self.uncertainty = np.asarray(self.uncertainty, dtype=np.float32)
            if self.uncertainty.shape != expected:
                raise ValueError("uncertainty shape does not match grid")

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    def total(self) -> float:
        return float(np.nansum(self.values.astype(np.float64)))


@dataclass
class MapReport:
    n_cells: int
    n_valid: int
    n_nodata: int


def generate_map(
    pipeline,
    grid: GridDef,
    raster_source: RasterSource,
    with_uncertainty: bool = False,
    seed: int = 0,
) -> tuple[PopulationRaster, MapReport]:
    """Predict every grid cell from imagery; failed extractions become nodata.

    The pipeline must already be fitted. Cells whose chips cannot be
    extracted (imagery gaps, nodata pixels) are flagged and counted rather
    than imputed.
    """
    from .imagery import extract_chip

    tiles = []
    chips = {}
    for r in range(grid.n_rows):
        for c in range(grid.n_cols):
            tile = Tile(
                tile_id=grid.tile_id(r, c),
                row=r,
                col=c,
                region_key=grid.district_id,
            )
            try:
                chips[tile.tile_id] = extract_chip(raster_source, tile, grid)
            except ValueError:
                continue
            tiles.append(tile)

    values = np.full((grid.n_rows, grid.n_cols), np.nan, dtype=np.float32)
    uncertainty = None
    if tiles:
        if with_uncertainty:
            preds, stds = pipeline.predict_with_uncertainty(tiles, chips=chips, seed=seed)
            uncertainty = np.full((grid.n_rows, grid.n_cols), np.nan, dtype=np.float32)
        else:
            preds = pipeline.predict(tiles, chips=chips)
            stds = {}
        for t in tiles:
            values[t.row, t.col] = max(0.0, float(preds[t.tile_id]))
            if uncertainty is not None:
                uncertainty[t.row, t.col] = max(0.0, float(stds[t.tile_id]))

    raster = PopulationRaster(
        grid=grid,
        values=values,
        uncertainty=uncertainty,
        provenance=f"{getattr(pipeline, 'fingerprint', 'pipeline')}|seed={seed}",
    )
    n_valid = int(raster.valid_mask.sum())
    report = MapReport(
        n_cells=grid.n_rows * grid.n_cols,
        n_valid=n_valid,
        n_nodata=grid.n_rows * grid.n_cols - n_valid,
    )
    return raster, report


@dataclass
class ProductComparison:
    spearman: float
    pearson: float
    n_cells: int
    difference: np.ndarray  # ours - theirs over the common valid cells
    aggregate_pct_error: float


def _grids_aligned(a: GridDef, b: GridDef) -> bool:
    return (
        a.origin_x == b.origin_x
        and a.origin_y == b.origin_y
        and a.cell_size == b.cell_size
        and a.n_rows == b.n_rows
        and a.n_cols == b.n_cols
        and a.crs_code == b.crs_code
    )


def compare_products(ours: PopulationRaster, theirs: PopulationRaster) -> ProductComparison:
    """Rank and moment correlations over the cells valid in both rasters."""
    if not _grids_aligned(ours.grid, theirs.grid):
        raise ValueError(
            "rasters are not aligned to the same grid; resample externally first"
        )
    both = ours.valid_mask & theirs.valid_mask
    if not both.any():
        raise ValueError("rasters share no valid cells")
    a = ours.values[both].astype(np.float64)
    b = theirs.values[both].astype(np.float64)
    difference = np.full(ours.values.shape, np.nan, dtype=np.float32)
    difference[both] = (a - b).astype(np.float32)
    total_theirs = float(b.sum())
    if total_theirs == 0:
        raise ValueError("comparison product sums to zero over the common cells")
    spearman = float(stats.spearmanr(a, b).statistic)
    pearson = float(stats.pearsonr(a, b).statistic)
    return ProductComparison(
        spearman=spearman,
        pearson=pearson,
        n_cells=int(both.sum()),
        difference=difference,
        aggregate_pct_error=abs(float(a.sum()) - total_theirs) / total_theirs,
    )


def census_check(raster: PopulationRaster, projected_total: float) -> float:
    """Signed relative difference of the raster total against a projection."""
    if projected_total <= 0:
        raise ValueError("projected_total must be positive")
    return (raster.total() - projected_total) / projected_total


def load_census_totals(path: str | Path) -> dict[str, float]:
    """JSON mapping district_id -> projected total."""
    return {str(k): float(v) for k, v in json.loads(Path(path).read_text()).items()}


# --- raster files ---------------------------------------------------------------


def write_population_raster(raster: PopulationRaster, path: str | Path) -> None:
    values = raster.values.copy()
    values[~np.isfinite(values)] = NODATA
    if raster.uncertainty is not None:
        unc = raster.uncertainty.copy()
        unc[~np.isfinite(unc)] = NODATA
        array = np.stack([values, unc])
    else:
        array = values
    georef = GeoRef(
        origin_x=raster.grid.origin_x,
        origin_y=raster.grid.origin_y,
        pixel_size_x=raster.grid.cell_size,
        pixel_size_y=raster.grid.cell_size,
        crs_code=raster.grid.crs_code,
    )
    description = json.dumps(
        {"district_id": raster.grid.district_id, "provenance": raster.provenance},
        sort_keys=True,
    )
    write_geotiff(path, array, georef, nodata=NODATA, description=description)


def read_population_raster(path: str | Path, district_id: str | None = None) -> PopulationRaster:
    array, georef, nodata, desc = read_geotiff(path)
    meta = {}
    if desc:
        try:
            meta = json.loads(desc)
        except json.JSONDecodeError:
            meta = {}
    if array.ndim == 2:
        array = array[None, :, :]
    values = array[0].astype(np.float32)
    uncertainty = array[1].astype(np.float32) if array.shape[0] > 1 else None
    if nodata is not None:
        values = values.copy()
        values[values == nodata] = np.nan
        if uncertainty is not None:
            uncertainty = uncertainty.copy()
            uncertainty[uncertainty == nodata] = np.nan
    if georef.pixel_size_x != georef.pixel_size_y:
        raise ValueError("population rasters must have square cells")
    grid = GridDef(
        origin_x=georef.origin_x,
        origin_y=georef.origin_y,
        n_rows=values.shape[0],
        n_cols=values.shape[1],
        crs_code=georef.crs_code or "",
        district_id=district_id or meta.get("district_id", ""),
        cell_size=georef.pixel_size_x,
    )
    return PopulationRaster(
        grid=grid,
        values=values,
        uncertainty=uncertainty,
        provenance=meta.get("provenance", ""),
    )
