import hashlib
import json
from pathlib import Path

import pytest

from popgrid.cli import main
from popgrid.encoder import load_encoder, save_encoder
from popgrid.regress import fit_null
from popgrid.runconfig import load_config
from popgrid.synthetic import build_demo_district

from conftest import tiny_manifest


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    paths = build_demo_district(root, n_tiles=48, seed=7)
    enc = load_encoder(tiny_manifest(stages=4, width=4, seed=0))
    saved = save_encoder(enc, root / "encoder")
    config = root / "run.yaml"
    config.write_text(
        config.read_text()
        + "paths:\n"
        + f"  microcensus: {paths['microcensus']}\n"
        + f"  imagery: {paths['imagery']}\n"
        + f"  manifest: {root / 'tiles.jsonl'}\n"
        + f"  folds: {root / 'folds.json'}\n"
        + f"  chip_cache: {root / 'chips'}\n"
        + f"  features: {root / 'features.csv'}\n"
        + f"  encoder: {root / 'encoder.manifest.json'}\n"
        + f"  outdir: {root / 'out'}\n"
        + "rf:\n"
        + "  num_estimators: 50\n"
        + "run:\n"
        + "  n_folds: 4\n"
        + "  seed: 0\n"
    )
    return {**paths, "root": root, "config": str(config)}


def run(*argv):
    return main(list(argv))


class TestGridCommand:
    def test_aggregates_and_makes_folds(self, demo):
        assert run("grid", "--config", demo["config"]) == 0
        root = demo["root"]
        manifest = (root / "tiles.jsonl").read_text().strip().splitlines()
        assert len(manifest) >= 30
        tile = json.loads(manifest[0])
        assert tile["status"] == "surveyed"
        folds = json.loads((root / "folds.json").read_text())
        assert set(folds.values()) == {0, 1, 2, 3}
        rejects = json.loads((root / "out" / "rejects.json").read_text())
        assert rejects["n_rejected"] == 0
        run_manifest = json.loads((root / "out" / "run_manifest_grid.json").read_text())
        assert run_manifest["command"] == "grid"
        assert "config_hash" in run_manifest


class TestExtractCommand:
    def test_chips_and_features(self, demo):
        assert run("extract", "--config", demo["config"]) == 0
        root = demo["root"]
        pngs = list((root / "chips").glob("*.png"))
        manifest_lines = (root / "tiles.jsonl").read_text().strip().splitlines()
        assert len(pngs) == len(manifest_lines)
        features = (root / "features.csv").read_text().strip().splitlines()
        assert features[0].startswith("tile_id,repr_0000")
        assert len(features) == len(manifest_lines) + 1


class TestPretextCommand:
    def test_deepcluster_objective(self, demo, tmp_path):
        out = tmp_path / "pretext_dc"
        assert run(
            "pretext", "--config", demo["config"], "--objective", "deepcluster",
            "--epochs", "1", "--k", "3", "--outdir", str(out),
        ) == 0
        log = (out / "pretext_deepcluster_log.csv").read_text().strip().splitlines()
        assert log[0] == "epoch,loss,cluster_sizes"
        assert len(log) == 2
        assert (out / "encoder_deepcluster.pt").exists()

    def test_barlow_objective(self, demo, tmp_path):
        out = tmp_path / "pretext_bt"
        assert run(
            "pretext", "--config", demo["config"], "--objective", "barlow",
            "--epochs", "1", "--batch-size", "16", "--embed-dim", "8",
            "--outdir", str(out),
        ) == 0
        log = (out / "pretext_barlow_log.csv").read_text().strip().splitlines()
        assert log[0] == "epoch,loss"
        assert len(log) == 2


class TestFinetuneCommand:
    def test_finetune_then_ram(self, demo, tmp_path):
        cfg_path = tmp_path / "ft.yaml"
        cfg_path.write_text(
            Path(demo["config"]).read_text()
            + "finetune:\n"
            + "  head_epochs: 1\n"
            + "  batch_size: 16\n"
            + "  max_epochs: 1\n"
            + "  patience: 1\n"
            + "  seed: 0\n"
        )
        out = tmp_path / "ft_out"
        assert run("finetune", "--config", str(cfg_path), "--outdir", str(out)) == 0
        assert (out / "encoder_finetuned.pt").exists()
        log = (out / "training_log.csv").read_text().strip().splitlines()
        assert log[0] == "epoch,phase,train_loss,val_loss,lr_top"
        assert len(log) == 3  # one head epoch + one full epoch

        ram_out = tmp_path / "ram_out"
        assert run(
            "explain", "--config", str(cfg_path),
            "--encoder", str(out / "encoder_finetuned.manifest.json"),
            "--limit", "2", "--outdir", str(ram_out),
        ) == 0
        rams = list((ram_out / "ram").glob("*.ram.json"))
        assert len(rams) == 2
        payload = json.loads(rams[0].read_text())
        import numpy as np

        heat = np.array(payload["heat"])
        assert abs(heat.mean() + payload["bias"] - payload["prediction"]) < 1e-5


class TestTrainCommand:
    def test_grid_search_score_table_has_twenty_rows(self, demo):
        assert run("train", "--config", demo["config"], "--grid-search") == 0
        scores = (demo["root"] / "out" / "score_table.csv").read_text().strip().splitlines()
        assert len(scores) == 21  # header + 20 configurations
        assert (demo["root"] / "out" / "model.json").exists()
        assert (demo["root"] / "out" / "model.joblib").exists()


class TestCvCommand:
    def test_features_pipeline_metrics_json(self, demo):
        assert run("cv", "--config", demo["config"], "--pipeline", "features") == 0
        metrics = json.loads((demo["root"] / "out" / "metrics.json").read_text())
        for key in ("r2", "meape", "meae", "iqr_abs_err", "aggpe"):
            assert key in metrics and metrics[key] is not None
        predictions = (demo["root"] / "out" / "predictions.csv").read_text().splitlines()
        manifest_lines = (demo["root"] / "tiles.jsonl").read_text().strip().splitlines()
        assert len(predictions) == len(manifest_lines) + 1

    def test_null_pipeline(self, demo, tmp_path):
        out = tmp_path / "null_out"
        assert run("cv", "--config", demo["config"], "--pipeline", "null",
                   "--outdir", str(out)) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["n"] > 0


class TestPredictMapCommand:
    def test_null_map_rerun_byte_identical(self, demo, tmp_path):
        model_prefix = tmp_path / "nullmodel"
        fit_null({"a": 4.0, "b": 4.0}).save(model_prefix)
        digests = []
        for i in range(2):
            out = tmp_path / f"map{i}"
            assert run(
                "predict-map", "--config", demo["config"], "--pipeline", "null",
                "--model", str(model_prefix), "--outdir", str(out),
            ) == 0
            digests.append(hashlib.sha256((out / "population_map.tif").read_bytes()).hexdigest())
        assert digests[0] == digests[1]
        report = json.loads((tmp_path / "map0" / "map_report.json").read_text())
        assert report["n_valid"] == 49
        assert report["total_population"] == pytest.approx(4.0 * 49)


class TestCompareCommand:
    def test_compare_and_census(self, demo, tmp_path):
        # the encoder-pipeline map varies by tile, so self-correlation is 1
        out = tmp_path / "m"
        assert run(
            "predict-map", "--config", demo["config"], "--pipeline", "encoder",
            "--model", str(demo["root"] / "out" / "model"), "--outdir", str(out),
        ) == 0
        map_path = out / "population_map.tif"
        total = json.loads((out / "map_report.json").read_text())["total_population"]
        totals = tmp_path / "totals.json"
        totals.write_text(json.dumps({"SYN": 100.0}))
        cmp_out = tmp_path / "cmp"
        assert run(
            "compare", "--config", demo["config"],
            "--ours", str(map_path), "--theirs", str(map_path),
            "--census-totals", str(totals), "--outdir", str(cmp_out),
        ) == 0
        payload = json.loads((cmp_out / "comparison.json").read_text())
        assert payload["pearson"] == pytest.approx(1.0)
        assert payload["spearman"] == pytest.approx(1.0)
        assert payload["census_pct_difference"] == pytest.approx(
            (total - 100.0) / 100.0
        )
        assert (cmp_out / "difference.tif").exists()


class TestExplainCommand:
    def test_embedding_csv(self, demo, tmp_path):
        out = tmp_path / "emb"
        assert run("explain", "--config", demo["config"], "--embed",
                   "--outdir", str(out)) == 0
        lines = (out / "embedding.csv").read_text().strip().splitlines()
        assert lines[0] == "tile_id,x,y,population,region_key"
        assert len(lines) > 5


class TestStrictConfig:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("run:\n  n_folds: 4\n  typo_key: 1\n")
        assert run("cv", "--config", str(bad)) == 1
        assert "typo_key" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("grids:\n  n_rows: 2\n")
        with pytest.raises(ValueError, match="unknown section"):
            load_config(bad)

    def test_known_config_parses(self, demo):
        cfg = load_config(demo["config"])
        assert cfg.grid.district_id == "SYN"
        assert cfg.rf.num_estimators == 50
        assert cfg.run.n_folds == 4


class TestFailureCleanup:
    def test_partial_outputs_removed(self, demo, tmp_path, capsys):
        out = tmp_path / "broken"
        out.mkdir()
        (out / "metrics.json").mkdir()  # metrics.save will fail on a directory
        code = run("cv", "--config", demo["config"], "--pipeline", "null",
                   "--outdir", str(out))
        assert code == 1
        assert not (out / "predictions.csv").exists()  # cleaned, not left partial
