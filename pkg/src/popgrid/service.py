"""Curation service: serves tiles and chips, records keep/exclude/zero calls.

State lives in one directory: a tile manifest, a chip cache of PNGs, and an
append-only newline-delimited decision log. Statuses are always derivable by
replaying the log over the manifest, which is exactly what happens on every
restart. Writes are serialized; reads never mutate anything.
"""

from __future__ import annotations

import io
import json
import threading
from collections import Counter
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel

from .geogrid import (
    STATUS_UNLABELLED,
    CurationDecision,
    GridDef,
    Tile,
    apply_curation,
    parse_tile_id,
    read_tile_manifest,
)
from .mapgen import PopulationRaster, read_population_raster

MANIFEST_FILE = "tiles.jsonl"
DECISIONS_FILE = "decisions.ndjson"
PROPOSALS_FILE = "proposals.ndjson"
CHIP_DIR = "chips"
SURVEY_FILE = "survey_points.json"
REFERENCE_FILE = "reference.tif"
GRID_FILE = "grid.json"


def sample_zero_candidates(
    reference: PopulationRaster,
    grid: GridDef,
    n_per_region: dict[str, int],
    seed: int = 0,
    region_map: np.ndarray | None = None,
    exclude_cells: set[tuple[int, int]] | None = None,
) -> list[Tile]:
    """Seeded sample of settlement-free cells, without replacement, per region.

    Candidate cells are those where the reference raster reads exactly zero,
    minus `exclude_cells` (cells that already carry survey labels or
    decisions). The proposals come back unlabelled; a human confirms each one
    before it becomes a zero tile.
    """
    if reference.values.shape != (grid.n_rows, grid.n_cols):
        raise ValueError("reference raster is not aligned to the grid")
    if region_map is None:
        region_map = np.full((grid.n_rows, grid.n_cols), grid.district_id, dtype=object)
    rng = np.random.default_rng(seed)
    proposals: list[Tile] = []
    for region in sorted(n_per_region):
        quota = n_per_region[region]
        mask = (region_map == region) & (reference.values == 0)
        for r, c in exclude_cells or ():
            if 0 <= r < grid.n_rows and 0 <= c < grid.n_cols:
                mask[r, c] = False
        rows, cols = np.nonzero(mask)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        if len(rows) == 0:
            raise ValueError(f"region {region!r}: no zero cells in the reference raster")
        if quota > len(rows):
            raise ValueError(
                f"region {region!r}: requested {quota} zero candidates but only "
                f"{len(rows)} zero cells available"
            )
        picked = rng.choice(len(rows), size=quota, replace=False)
        for i in sorted(picked):
            r, c = int(rows[i]), int(cols[i])
            proposals.append(
                Tile(
                    tile_id=grid.tile_id(r, c),
                    row=r,
                    col=c,
                    status=STATUS_UNLABELLED,
                    region_key=region,
                )
            )
    return proposals


class CurationStore:
    """Tile statuses derived from manifest + proposals + decision log replay."""

    def __init__(self, state_dir: str | Path):
        self.state_dir = Path(state_dir)
        manifest = self.state_dir / MANIFEST_FILE
        if not manifest.exists():
            raise ValueError(f"state dir {self.state_dir} has no {MANIFEST_FILE}")
        try:
            tiles = read_tile_manifest(manifest)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"corrupt tile manifest: {exc}") from exc
        self.tiles: dict[str, Tile] = {t.tile_id: t for t in tiles}
        self.proposals: set[str] = set()
        self.decisions: list[CurationDecision] = []
        self._write_lock = threading.Lock()
        self._last_ts: dict[str, datetime] = {}
        self._replay()

    def _replay(self) -> None:
        proposals_path = self.state_dir / PROPOSALS_FILE
        if proposals_path.exists():
            for line in proposals_path.read_text().splitlines():
                if not line.strip():
                    continue
                try:
                    tile = Tile.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"corrupt proposals file: {exc}") from exc
                self.tiles.setdefault(tile.tile_id, tile)
                self.proposals.add(tile.tile_id)
        decisions_path = self.state_dir / DECISIONS_FILE
        if decisions_path.exists():
            for line in decisions_path.read_text().splitlines():
                if not line.strip():
                    continue
                try:
                    decision = CurationDecision.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"corrupt decision log: {exc}") from exc
                self.decisions.append(decision)
        if self.decisions:
            updated = apply_curation(list(self.tiles.values()), self.decisions)
            self.tiles = {t.tile_id: t for t in updated}

    def grid(self) -> GridDef | None:
        path = self.state_dir / GRID_FILE
        if not path.exists():
            return None
        return GridDef.from_dict(json.loads(path.read_text()))

    def reference(self) -> PopulationRaster | None:
        path = self.state_dir / REFERENCE_FILE
        if not path.exists():
            return None
        return read_population_raster(path)

    def survey_points(self, tile_id: str) -> list[dict]:
        path = self.state_dir / SURVEY_FILE
        if not path.exists():
            return []
        return json.loads(path.read_text()).get(tile_id, [])

    def next_timestamp(self, annotator: str) -> datetime:
        now = datetime.now(timezone.utc)
        last = self._last_ts.get(annotator)
        if last is not None and now <= last:
            now = last + timedelta(microseconds=1)
        self._last_ts[annotator] = now
        return now

    def record_decision(self, decision: CurationDecision) -> Tile:
        with self._write_lock:
            tile = self.tiles.get(decision.tile_id)
            if tile is None:
                raise KeyError(f"unknown tile_id {decision.tile_id!r}")
            (updated,) = apply_curation([tile], [decision])
            with open(self.state_dir / DECISIONS_FILE, "a") as fh:
                fh.write(json.dumps(decision.to_dict()) + "\n")
            self.decisions.append(decision)
            self.tiles[decision.tile_id] = updated
            return updated

    def record_proposals(self, proposals: list[Tile]) -> list[Tile]:
        with self._write_lock:
            fresh = []
            with open(self.state_dir / PROPOSALS_FILE, "a") as fh:
                for tile in proposals:
                    existing = self.tiles.get(tile.tile_id)
                    if existing is not None and existing.status != STATUS_UNLABELLED:
                        continue  # already surveyed or decided; not a candidate
                    fh.write(json.dumps(tile.to_dict()) + "\n")
                    self.tiles.setdefault(tile.tile_id, tile)
                    self.proposals.add(tile.tile_id)
                    fresh.append(self.tiles[tile.tile_id])
            return fresh

    def counts(self) -> dict[str, int]:
        counter = Counter(t.status for t in self.tiles.values())
        return {status: counter.get(status, 0) for status in (
            "unlabelled", "surveyed", "curated", "excluded", "zero"
        )}

    def tile_payload(self, tile: Tile) -> dict:
        payload = tile.to_dict()
        payload["zero_proposed"] = tile.tile_id in self.proposals
        return payload


class DecisionBody(BaseModel):
    decision: str
    annotator: str
    note: str | None = None


class ZeroCandidatesBody(BaseModel):
    quotas: dict[str, int]
    seed: int = 0


def _chip_png(store: CurationStore, tile_id: str) -> bytes | None:
    safe = tile_id.replace(":", "_")
    path = store.state_dir / CHIP_DIR / f"{safe}.png"
    if not path.exists():
        return None
    return path.read_bytes()


def _reference_png(store: CurationStore, tile: Tile) -> bytes | None:
    reference = store.reference()
    if reference is None:
        return None
    from PIL import Image

    half = 8
    values = reference.values
    r0, r1 = max(0, tile.row - half), min(values.shape[0], tile.row + half + 1)
    c0, c1 = max(0, tile.col - half), min(values.shape[1], tile.col + half + 1)
    window = np.nan_to_num(values[r0:r1, c0:c1].astype(float), nan=0.0)
    hi = window.max()
    scaled = (window / hi * 255).astype(np.uint8) if hi > 0 else window.astype(np.uint8)
    img = Image.fromarray(scaled, mode="L").resize(
        (scaled.shape[1] * 10, scaled.shape[0] * 10), Image.NEAREST
    )
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(state_dir: str | Path) -> FastAPI:
    store = CurationStore(state_dir)
    app = FastAPI(title="tile curation service")
    app.state.store = store

    @app.get("/api/tiles")
    def list_tiles(
        status: str | None = None,
        region: str | None = None,
        page: int = Query(1, ge=1),
        page_size: int = Query(50, ge=1, le=500),
    ):
        tiles = sorted(store.tiles.values(), key=lambda t: t.tile_id)
        if status:
            tiles = [t for t in tiles if t.status == status]
        if region:
            tiles = [t for t in tiles if t.region_key == region]
        start = (page - 1) * page_size
        return {
            "total": len(tiles),
            "page": page,
            "page_size": page_size,
            "tiles": [store.tile_payload(t) for t in tiles[start : start + page_size]],
        }

    @app.get("/api/tiles/{tile_id}")
    def tile_detail(tile_id: str):
        tile = store.tiles.get(tile_id)
        if tile is None:
            raise HTTPException(status_code=404, detail=f"unknown tile {tile_id!r}")
        payload = store.tile_payload(tile)
        payload["survey_points"] = store.survey_points(tile_id)
        return payload

    @app.get("/api/tiles/{tile_id}/image.png")
    def tile_image(tile_id: str, layer: str | None = None):
        tile = store.tiles.get(tile_id)
        if tile is None:
            raise HTTPException(status_code=404, detail=f"unknown tile {tile_id!r}")
        if layer == "reference":
            png = _reference_png(store, tile)
            if png is None:
                raise HTTPException(status_code=404, detail="no reference raster")
        else:
            png = _chip_png(store, tile_id)
            if png is None:
                raise HTTPException(status_code=404, detail=f"no chip for {tile_id!r}")
        return Response(content=png, media_type="image/png")

    @app.post("/api/tiles/{tile_id}/decision")
    def post_decision(tile_id: str, body: DecisionBody):
        decision = CurationDecision(
            tile_id=tile_id,
            decision=body.decision,
            annotator=body.annotator,
            timestamp=store.next_timestamp(body.annotator),
            note=body.note,
        )
        try:
            updated = store.record_decision(decision)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return store.tile_payload(updated)

    @app.get("/api/progress")
    def progress():
        counts = store.counts()
        return {
            "counts": counts,
            "total": sum(counts.values()),
            "zero_proposals_pending": len(
                [i for i in store.proposals if store.tiles[i].status == STATUS_UNLABELLED]
            ),
        }

    @app.post("/api/zero-candidates")
    def zero_candidates(body: ZeroCandidatesBody):
        grid = store.grid()
        reference = store.reference()
        if grid is None or reference is None:
            raise HTTPException(
                status_code=400, detail="state dir has no grid.json or reference.tif"
            )
        region_map = np.full((grid.n_rows, grid.n_cols), grid.district_id, dtype=object)
        occupied: set[tuple[int, int]] = set()
        for t in store.tiles.values():
            district, row, col = parse_tile_id(t.tile_id)
            in_grid = 0 <= row < grid.n_rows and 0 <= col < grid.n_cols
            if district != grid.district_id or not in_grid:
                continue
            if t.region_key:
                region_map[row, col] = t.region_key
            if t.status != STATUS_UNLABELLED:
                occupied.add((row, col))
        try:
            proposals = sample_zero_candidates(
                reference,
                grid,
                body.quotas,
                seed=body.seed,
                region_map=region_map,
                exclude_cells=occupied,
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        recorded = store.record_proposals(proposals)
        return {"proposals": [store.tile_payload(t) for t in recorded]}

    ui_dir = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dir.exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def init_state_dir(
    state_dir: str | Path,
    tiles: list[Tile],
    chips: dict | None = None,
    grid: GridDef | None = None,
    survey_points: dict[str, list[dict]] | None = None,
) -> Path:
    """Lay out a fresh service state directory."""
    from .geogrid import write_tile_manifest
    from .imagery import save_chip

    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    write_tile_manifest(tiles, state_dir / MANIFEST_FILE)
    if chips:
        for chip in chips.values():
            save_chip(chip, state_dir / CHIP_DIR)
    if grid is not None:
        (state_dir / GRID_FILE).write_text(json.dumps(grid.to_dict()))
    if survey_points is not None:
        (state_dir / SURVEY_FILE).write_text(json.dumps(survey_points))
    return state_dir


def serve_api(state_dir: str | Path, port: int = 8000, host: str = "127.0.0.1") -> None:
    """Run the service; corrupt state refuses to start."""
    import uvicorn

    app = create_app(state_dir)  # raises on corrupt state before binding
    uvicorn.run(app, host=host, port=port, log_level="info")
