import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from popgrid.geogrid import GridDef, Tile, make_tile_id
from popgrid.imagery import Chip
from popgrid.mapgen import PopulationRaster, write_population_raster
from popgrid.service import (
    CurationStore,
    create_app,
    init_state_dir,
    sample_zero_candidates,
)

GRID = GridDef(
    origin_x=0.0,
    origin_y=1000.0,
    n_rows=10,
    n_cols=10,
    crs_code="EPSG:32736",
    district_id="D",
)


def surveyed(i, pop=5.0):
    return Tile(
        tile_id=make_tile_id("D", 0, i), row=0, col=i, population=pop,
        status="surveyed", region_key="D",
    )


def state_with(tmp_path, n=5, with_reference=False, chips=False):
    tiles = [surveyed(i) for i in range(n)]
    chip_map = {}
    if chips:
        rng = np.random.default_rng(0)
        for t in tiles:
            chip_map[t.tile_id] = Chip(
                tile_id=t.tile_id,
                pixels_raw=rng.integers(0, 255, size=(200, 200, 3), dtype=np.uint8),
            )
    state_dir = init_state_dir(
        tmp_path / "state", tiles, chips=chip_map, grid=GRID,
        survey_points={tiles[0].tile_id: [{"x_px": 10, "y_px": 20, "household_size": 4}]},
    )
    if with_reference:
        values = np.zeros((10, 10), dtype=np.float32)
        values[0, :] = 9.0  # the surveyed row is settled
        write_population_raster(
            PopulationRaster(grid=GRID, values=values), state_dir / "reference.tif"
        )
    return state_dir


class TestSampleZeroCandidates:
    def reference(self, settled_rows=1):
        values = np.zeros((10, 10), dtype=np.float32)
        values[:settled_rows, :] = 5.0
        return PopulationRaster(grid=GRID, values=values)

    def test_quota_split_over_regions(self):
        region_map = np.full((10, 10), "BOA", dtype=object)
        region_map[5:, :] = "MGD"
        proposals = sample_zero_candidates(
            self.reference(), GRID, {"BOA": 30, "MGD": 25}, seed=0, region_map=region_map
        )
        assert len(proposals) == 55
        by_region = {}
        for t in proposals:
            by_region.setdefault(t.region_key, 0)
            by_region[t.region_key] += 1
        assert by_region == {"BOA": 30, "MGD": 25}
        assert all(t.status == "unlabelled" for t in proposals)

    def test_all_positive_reference_errors(self):
        values = np.full((10, 10), 3.0, dtype=np.float32)
        with pytest.raises(ValueError, match="no zero cells"):
            sample_zero_candidates(
                PopulationRaster(grid=GRID, values=values), GRID, {"D": 5}, seed=0
            )

    def test_quota_exceeding_available_reports_count(self):
        values = np.full((10, 10), 1.0, dtype=np.float32)
        values[0, 0] = 0.0
        values[0, 1] = 0.0
        with pytest.raises(ValueError, match="only 2"):
            sample_zero_candidates(
                PopulationRaster(grid=GRID, values=values), GRID, {"D": 5}, seed=0
            )

    def test_seeded_determinism(self):
        p1 = sample_zero_candidates(self.reference(), GRID, {"D": 10}, seed=3)
        p2 = sample_zero_candidates(self.reference(), GRID, {"D": 10}, seed=3)
        assert [t.tile_id for t in p1] == [t.tile_id for t in p2]
        p3 = sample_zero_candidates(self.reference(), GRID, {"D": 10}, seed=4)
        assert [t.tile_id for t in p1] != [t.tile_id for t in p3]

    def test_samples_only_zero_cells(self):
        ref = self.reference(settled_rows=9)
        proposals = sample_zero_candidates(ref, GRID, {"D": 5}, seed=0)
        assert all(t.row == 9 for t in proposals)

    def test_excluded_cells_never_proposed(self):
        ref = self.reference(settled_rows=8)  # rows 8-9 read zero
        surveyed_cells = {(8, c) for c in range(10)}
        proposals = sample_zero_candidates(
            ref, GRID, {"D": 5}, seed=0, exclude_cells=surveyed_cells
        )
        assert all(t.row == 9 for t in proposals)
        with pytest.raises(ValueError, match="only 10"):
            sample_zero_candidates(
                ref, GRID, {"D": 11}, seed=0, exclude_cells=surveyed_cells
            )

    def test_service_excludes_surveyed_cells_from_proposals(self, tmp_path):
        # reference reads zero on a surveyed cell: it must not be proposed
        tiles = [surveyed(i) for i in range(5)]
        state_dir = init_state_dir(tmp_path / "state", tiles, grid=GRID)
        values = np.ones((10, 10), dtype=np.float32)
        values[0, 0] = 0.0  # surveyed tile D:0:0 sits here
        values[9, :] = 0.0
        write_population_raster(
            PopulationRaster(grid=GRID, values=values), state_dir / "reference.tif"
        )
        client = TestClient(create_app(state_dir))
        r = client.post("/api/zero-candidates", json={"quotas": {"D": 10}, "seed": 0})
        proposed = {p["tile_id"] for p in r.json()["proposals"]}
        assert len(proposed) == 10
        assert "D:0:0" not in proposed


class TestService:
    def test_read_your_writes(self, tmp_path):
        client = TestClient(create_app(state_with(tmp_path)))
        tile_id = make_tile_id("D", 0, 0)
        r = client.post(
            f"/api/tiles/{tile_id}/decision",
            json={"decision": "curate", "annotator": "ann"},
        )
        assert r.status_code == 200
        assert r.json()["status"] == "curated"
        assert client.get(f"/api/tiles/{tile_id}").json()["status"] == "curated"

    def test_last_write_wins_log_retains_both(self, tmp_path):
        state_dir = state_with(tmp_path)
        client = TestClient(create_app(state_dir))
        tile_id = make_tile_id("D", 0, 1)
        client.post(f"/api/tiles/{tile_id}/decision",
                    json={"decision": "curate", "annotator": "a"})
        client.post(f"/api/tiles/{tile_id}/decision",
                    json={"decision": "exclude", "annotator": "a"})
        assert client.get(f"/api/tiles/{tile_id}").json()["status"] == "excluded"
        log_lines = (state_dir / "decisions.ndjson").read_text().strip().splitlines()
        assert len(log_lines) == 2

    def test_restart_replays_log(self, tmp_path):
        state_dir = state_with(tmp_path)
        client = TestClient(create_app(state_dir))
        client.post(f"/api/tiles/{make_tile_id('D', 0, 0)}/decision",
                    json={"decision": "exclude", "annotator": "a"})
        client.post(f"/api/tiles/{make_tile_id('D', 0, 1)}/decision",
                    json={"decision": "curate", "annotator": "a"})
        before = client.get("/api/progress").json()["counts"]
        restarted = TestClient(create_app(state_dir))
        after = restarted.get("/api/progress").json()["counts"]
        assert before == after
        assert after["excluded"] == 1
        assert after["curated"] == 1

    def test_get_does_not_mutate(self, tmp_path):
        state_dir = state_with(tmp_path)
        client = TestClient(create_app(state_dir))
        snapshot = client.get("/api/progress").json()
        client.get("/api/tiles")
        client.get(f"/api/tiles/{make_tile_id('D', 0, 0)}")
        assert client.get("/api/progress").json() == snapshot
        assert not (state_dir / "decisions.ndjson").exists()

    def test_counts_sum_to_total(self, tmp_path):
        state_dir = state_with(tmp_path, with_reference=True)
        client = TestClient(create_app(state_dir))
        client.post("/api/zero-candidates", json={"quotas": {"D": 7}, "seed": 1})
        client.post(f"/api/tiles/{make_tile_id('D', 0, 0)}/decision",
                    json={"decision": "exclude", "annotator": "a"})
        progress = client.get("/api/progress").json()
        assert sum(progress["counts"].values()) == progress["total"]

    def test_unknown_tile_404(self, tmp_path):
        client = TestClient(create_app(state_with(tmp_path)))
        r = client.post("/api/tiles/D:9:9/decision",
                        json={"decision": "curate", "annotator": "a"})
        assert r.status_code == 404

    def test_invalid_transition_400(self, tmp_path):
        client = TestClient(create_app(state_with(tmp_path)))
        r = client.post(f"/api/tiles/{make_tile_id('D', 0, 0)}/decision",
                        json={"decision": "zero", "annotator": "a"})
        assert r.status_code == 400

    def test_zero_candidates_then_confirm(self, tmp_path):
        state_dir = state_with(tmp_path, with_reference=True)
        client = TestClient(create_app(state_dir))
        r = client.post("/api/zero-candidates", json={"quotas": {"D": 3}, "seed": 0})
        proposals = r.json()["proposals"]
        assert len(proposals) == 3
        assert all(p["zero_proposed"] for p in proposals)
        tile_id = proposals[0]["tile_id"]
        r = client.post(f"/api/tiles/{tile_id}/decision",
                        json={"decision": "zero", "annotator": "a"})
        assert r.json()["status"] == "zero"
        assert r.json()["population"] == 0.0

    def test_zero_candidates_survive_restart(self, tmp_path):
        state_dir = state_with(tmp_path, with_reference=True)
        client = TestClient(create_app(state_dir))
        r = client.post("/api/zero-candidates", json={"quotas": {"D": 4}, "seed": 0})
        ids = {p["tile_id"] for p in r.json()["proposals"]}
        restarted = TestClient(create_app(state_dir))
        listed = restarted.get("/api/tiles", params={"status": "unlabelled"}).json()
        proposed = {t["tile_id"] for t in listed["tiles"] if t["zero_proposed"]}
        assert ids <= proposed

    def test_tile_listing_filters_and_pages(self, tmp_path):
        client = TestClient(create_app(state_with(tmp_path, n=5)))
        r = client.get("/api/tiles", params={"status": "surveyed", "page_size": 2})
        body = r.json()
        assert body["total"] == 5
        assert len(body["tiles"]) == 2
        r2 = client.get("/api/tiles", params={"status": "surveyed", "page": 3,
                                              "page_size": 2})
        assert len(r2.json()["tiles"]) == 1
        assert client.get("/api/tiles", params={"region": "D"}).json()["total"] == 5
        assert client.get("/api/tiles", params={"region": "nope"}).json()["total"] == 0

    def test_tile_detail_includes_survey_points(self, tmp_path):
        client = TestClient(create_app(state_with(tmp_path)))
        body = client.get(f"/api/tiles/{make_tile_id('D', 0, 0)}").json()
        assert body["survey_points"] == [{"x_px": 10, "y_px": 20, "household_size": 4}]

    def test_chip_png_served(self, tmp_path):
        client = TestClient(create_app(state_with(tmp_path, chips=True)))
        r = client.get(f"/api/tiles/{make_tile_id('D', 0, 0)}/image.png")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_reference_thumbnail(self, tmp_path):
        client = TestClient(create_app(state_with(tmp_path, with_reference=True)))
        r = client.get(f"/api/tiles/{make_tile_id('D', 0, 0)}/image.png",
                       params={"layer": "reference"})
        assert r.status_code == 200
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_corrupt_manifest_refuses_start(self, tmp_path):
        state_dir = state_with(tmp_path)
        (state_dir / "tiles.jsonl").write_text("{broken json\n")
        with pytest.raises(ValueError, match="corrupt"):
            CurationStore(state_dir)

    def test_corrupt_decision_log_refuses_start(self, tmp_path):
        state_dir = state_with(tmp_path)
        (state_dir / "decisions.ndjson").write_text("not json either\n")
        with pytest.raises(ValueError, match="corrupt"):
            CurationStore(state_dir)

    def test_timestamps_strictly_increase_per_annotator(self, tmp_path):
        state_dir = state_with(tmp_path)
        client = TestClient(create_app(state_dir))
        for i in range(3):
            client.post(f"/api/tiles/{make_tile_id('D', 0, i)}/decision",
                        json={"decision": "curate", "annotator": "fast"})
        lines = (state_dir / "decisions.ndjson").read_text().strip().splitlines()
        stamps = [json.loads(l)["timestamp"] for l in lines]
        assert stamps == sorted(stamps)
        assert len(set(stamps)) == 3
