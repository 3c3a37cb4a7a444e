#!/usr/bin/env python3
"""Spin up the curation service on a synthetic district.

Builds a state directory with surveyed tiles, chip PNGs, survey-point
overlays, and a reference settlement raster, then serves it. Open
http://127.0.0.1:<port>/ui/ once the frontend is built (`npm run build` in
frontend/), or drive the JSON API directly.
"""

import argparse
from pathlib import Path

import numpy as np

from popgrid.geogrid import GridDef, Tile, make_tile_id
from popgrid.imagery import Chip
from popgrid.mapgen import PopulationRaster, write_population_raster
from popgrid.service import init_state_dir, serve_api
from popgrid.synthetic import make_blob_chip


def build_state(state_dir: Path, n_tiles: int, seed: int) -> Path:
    rng = np.random.default_rng(seed)
    n_cols = int(np.ceil(np.sqrt(n_tiles))) * 2
    n_rows = n_cols
    grid = GridDef(
        origin_x=500_000.0, origin_y=8_000_000.0, n_rows=n_rows, n_cols=n_cols,
        crs_code="EPSG:32736", district_id="DEMO",
    )
    tiles, chips, points = [], {}, {}
    reference = np.zeros((n_rows, n_cols), dtype=np.float32)
    for i in range(n_tiles):
        row, col = divmod(i, n_cols)
        n_blobs = int(rng.integers(0, 9))
        pixels, centers = make_blob_chip(rng, n_blobs)
        tile_id = make_tile_id("DEMO", row, col)
        tiles.append(
            Tile(tile_id=tile_id, row=row, col=col, population=float(n_blobs),
                 status="surveyed", region_key="DEMO")
        )
        chips[tile_id] = Chip(tile_id=tile_id, pixels_raw=pixels)
        # drop a few survey markers, deliberately offset on some tiles so the
        # reviewer has real mismatches to exclude
        offset = 40 if rng.random() < 0.3 else 0
        points[tile_id] = [
            {"x_px": min(199, cx + offset), "y_px": cy, "household_size": int(rng.integers(1, 9))}
            for cy, cx in centers
        ]
        reference[row, col] = float(n_blobs)
    state = init_state_dir(state_dir, tiles, chips=chips, grid=grid, survey_points=points)
    write_population_raster(
        PopulationRaster(grid=grid, values=reference), state / "reference.tif"
    )
    return state


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--state-dir", default="data/curation-demo")
    parser.add_argument("--n-tiles", type=int, default=30)
    parser.add_argument("--seed", type=int, default=3)
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args()

    state = build_state(Path(args.state_dir), args.n_tiles, args.seed)
    print(f"state dir ready: {state}")
    serve_api(state, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
