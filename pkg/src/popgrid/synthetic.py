"""Synthetic blob-count benchmark data.

Tiles are dark noisy backgrounds scattered with bright blobs; the population
label is the blob count plus clipped Gaussian noise. The signal is strong
enough for a small encoder to learn on a CPU in minutes, which makes it the
end-to-end benchmark for the whole pipeline.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .geogrid import GridDef, Tile, make_tile_id
from .geotiff import GeoRef, write_geotiff
from .imagery import RAW_SIZE, Chip

PIXEL_SIZE = 0.5


def make_blob_chip(
    rng: np.random.Generator, n_blobs: int, size: int = RAW_SIZE
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """(pixels, blob centers); blobs are bright discs on a dark noisy field."""
    img = rng.normal(30.0, 8.0, size=(size, size, 3))
    centers = []
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_blobs):
        cy = int(rng.integers(10, size - 10))
        cx = int(rng.integers(10, size - 10))
        radius = float(rng.uniform(4.0, 9.0))
        brightness = float(rng.uniform(180.0, 250.0))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        img[mask] = brightness + rng.normal(0.0, 5.0, size=(int(mask.sum()), 3))
        centers.append((cy, cx))
    return np.clip(img, 0, 255).astype(np.uint8), centers


def make_blob_dataset(
    n_tiles: int = 400,
    seed: int = 0,
    max_blobs: int = 15,
    noise_sigma: float = 0.3,
    regions: tuple[str, ...] = ("BOA", "MGD"),
    crs_code: str = "EPSG:32736",
) -> tuple[list[Tile], dict[str, Chip], dict[str, GridDef]]:
    """Labelled tiles, their raw chips, and one grid per region."""
    rng = np.random.default_rng(seed)
    per_region = [n_tiles // len(regions)] * len(regions)
    per_region[0] += n_tiles - sum(per_region)

    tiles: list[Tile] = []
    chips: dict[str, Chip] = {}
    grids: dict[str, GridDef] = {}
    for ri, (region, count) in enumerate(zip(regions, per_region)):
        n_cols = int(np.ceil(np.sqrt(count)))
        n_rows = int(np.ceil(count / n_cols))
        grids[region] = GridDef(
            origin_x=500_000.0 + ri * 1_000_000.0,
            origin_y=8_000_000.0,
            n_rows=n_rows,
            n_cols=n_cols,
            crs_code=crs_code,
            district_id=region,
        )
        for i in range(count):
            row, col = divmod(i, n_cols)
            n_blobs = int(rng.integers(0, max_blobs + 1))
            pixels, _ = make_blob_chip(rng, n_blobs)
            label = max(0.0, n_blobs + float(rng.normal(0.0, noise_sigma)))
            tile_id = make_tile_id(region, row, col)
            tiles.append(
                Tile(
                    tile_id=tile_id,
                    row=row,
                    col=col,
                    population=label,
                    status="curated",
                    region_key=region,
                )
            )
            chips[tile_id] = Chip(tile_id=tile_id, pixels_raw=pixels)
    return tiles, chips, grids


def write_mosaic(
    chips: dict[str, Chip],
    tiles: list[Tile],
    grid: GridDef,
    path: str | Path,
) -> None:
    """Assemble per-tile chips into one georeferenced district mosaic."""
    height = grid.n_rows * RAW_SIZE
    width = grid.n_cols * RAW_SIZE
    mosaic = np.zeros((height, width, 3), dtype=np.uint8)
    for t in tiles:
        chip = chips.get(t.tile_id)
        if chip is None or chip.pixels_raw is None:
            continue
        r0, c0 = t.row * RAW_SIZE, t.col * RAW_SIZE
        mosaic[r0 : r0 + RAW_SIZE, c0 : c0 + RAW_SIZE] = chip.pixels_raw
    georef = GeoRef(
        origin_x=grid.origin_x,
        origin_y=grid.origin_y,
        pixel_size_x=PIXEL_SIZE,
        pixel_size_y=PIXEL_SIZE,
        crs_code=grid.crs_code,
    )
    write_geotiff(path, np.moveaxis(mosaic, -1, 0), georef)


def build_demo_district(
    directory: str | Path,
    n_tiles: int = 48,
    seed: int = 7,
    max_blobs: int = 12,
) -> dict[str, Path]:
    """Write a one-district demo dataset: mosaic, microcensus, grid config.

    The microcensus has one single-person household at each blob centre, so
    aggregating it reproduces each tile's blob count exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_cols = int(np.ceil(np.sqrt(n_tiles)))
    n_rows = int(np.ceil(n_tiles / n_cols))
    grid = GridDef(
        origin_x=500_000.0,
        origin_y=8_000_000.0,
        n_rows=n_rows,
        n_cols=n_cols,
        crs_code="EPSG:32736",
        district_id="SYN",
    )
    mosaic = np.zeros((n_rows * RAW_SIZE, n_cols * RAW_SIZE, 3), dtype=np.uint8)
    households = []
    for i in range(n_rows * n_cols):
        row, col = divmod(i, n_cols)
        n_blobs = int(rng.integers(0, max_blobs + 1)) if i < n_tiles else 0
        pixels, centers = make_blob_chip(rng, n_blobs)
        mosaic[row * RAW_SIZE : (row + 1) * RAW_SIZE, col * RAW_SIZE : (col + 1) * RAW_SIZE] = pixels
        xmin, _, _, ymax = grid.tile_box(row, col)
        for cy, cx in centers:
            households.append(
                (xmin + (cx + 0.5) * PIXEL_SIZE, ymax - (cy + 0.5) * PIXEL_SIZE)
            )
    georef = GeoRef(grid.origin_x, grid.origin_y, PIXEL_SIZE, PIXEL_SIZE, grid.crs_code)
    imagery_path = directory / "imagery.tif"
    write_geotiff(imagery_path, np.moveaxis(mosaic, -1, 0), georef)

    micro_path = directory / "microcensus.csv"
    with open(micro_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "household_size", "psu_id", "survey_date"])
        for j, (x, y) in enumerate(households):
            w.writerow([x, y, 1, f"psu-{j % 5}", "2019-06-01"])

    config_path = directory / "run.yaml"
    config_path.write_text(
        "grid:\n"
        f"  origin_x: {grid.origin_x}\n"
        f"  origin_y: {grid.origin_y}\n"
        f"  n_rows: {grid.n_rows}\n"
        f"  n_cols: {grid.n_cols}\n"
        f"  cell_size: 100.0\n"
        f"  crs_code: {grid.crs_code}\n"
        f"  district_id: {grid.district_id}\n"
    )
    return {"imagery": imagery_path, "microcensus": micro_path, "config": config_path}
