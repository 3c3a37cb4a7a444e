"""Command-line entry point: the pipeline end to end, one command per stage.

Every command reads one YAML config (strict keys, flag overrides), writes its
artifacts plus a run-manifest JSON into the output directory, and cleans up
partial outputs when it fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evalx, explain, regress, service
from .encoder import EncoderManifest, extract, finetune, load_encoder, save_encoder
from .geogrid import (
    CurationDecision,
    FoldSpec,
    Tile,
    aggregate_microcensus,
    apply_curation,
    load_microcensus_csv,
    load_microcensus_geojson,
    make_spatial_folds,
    read_tile_manifest,
    write_tile_manifest,
)
from .geotiff import RasterSource
from .imagery import chip_cache_ids, extract_chip, load_chip, prepare_for_model, save_chip
from .mapgen import (
    census_check,
    compare_products,
    generate_map,
    load_census_totals,
    read_population_raster,
    write_population_raster,
)
from .pipeline import EncoderRFPipeline, FeatureRFPipeline, InMemoryChips, NullPipeline, RasterChips
from .pretext import BarlowConfig, run_barlow, run_deepcluster
from .regress import FeatureTable, PopulationModel
from .runconfig import OutputGuard, RunConfig, load_config, write_run_manifest


def _require(value, name: str):
    if value is None:
        raise ValueError(f"missing required setting: {name}")
    return value


def _load_cfg(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _outdir(cfg: RunConfig, args) -> Path:
    outdir = Path(getattr(args, "outdir", None) or cfg.paths.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return outdir


def training_tiles(tiles: list[Tile]) -> list[Tile]:
    """Curated + zero tiles when curation happened, else surveyed + zero."""
    curated = [t for t in tiles if t.status == "curated"]
    zeros = [t for t in tiles if t.status == "zero"]
    if curated:
        return curated + zeros
    return [t for t in tiles if t.status == "surveyed"] + zeros


def _read_decisions(path: str | Path) -> list[CurationDecision]:
    decisions = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            decisions.append(CurationDecision.from_dict(json.loads(line)))
    return decisions


def _load_encoder_from(path: str) -> "Encoder":
    return load_encoder(EncoderManifest.load(path))


def _prepared_chips(tiles, cache_dir, manifest: EncoderManifest):
    chips = []
    for t in tiles:
        chip = load_chip(t.tile_id, cache_dir)
        chips.append(
            prepare_for_model(
                chip,
                mean=manifest.normalization_stats.mean,
                std=manifest.normalization_stats.std,
            )
        )
    return chips


# --- commands --------------------------------------------------------------------


def cmd_grid(args) -> int:
    cfg = _load_cfg(args)
    grid = _require(cfg.grid, "grid section")
    micro_path = _require(args.microcensus or cfg.paths.microcensus, "paths.microcensus")
    manifest_path = args.manifest or cfg.paths.manifest or "tiles.jsonl"
    outdir = _outdir(cfg, args)

    if str(micro_path).endswith(".geojson") or str(micro_path).endswith(".json"):
        records, crs = load_microcensus_geojson(micro_path)
        records_crs = crs or cfg.run.microcensus_crs
    else:
        records = load_microcensus_csv(micro_path)
        records_crs = cfg.run.microcensus_crs
    result = aggregate_microcensus(records, grid, records_crs=records_crs)
    tiles = result.tiles
    decisions_path = args.decisions or cfg.paths.decisions
    if decisions_path:
        tiles = apply_curation(tiles, _read_decisions(decisions_path))

    folds_path = args.folds_out or cfg.paths.folds
    with OutputGuard() as guard:
        guard.declare(manifest_path)
        write_tile_manifest(tiles, manifest_path)
        rejects_path = outdir / "rejects.json"
        guard.declare(rejects_path)
        rejects_path.write_text(
            json.dumps(
                {
                    "n_accepted_records": len(records) - len(result.rejects),
                    "n_rejected": len(result.rejects),
                    "rejects": [
                        {"x": r.x, "y": r.y, "psu_id": r.psu_id, "reason": reason}
                        for r, reason in result.rejects
                    ],
                },
                indent=2,
            )
        )
        outputs = [str(manifest_path), str(rejects_path)]
        if folds_path:
            guard.declare(folds_path)
            folds = make_spatial_folds(training_tiles(tiles), cfg.run.n_folds)
            folds.save(folds_path)
            outputs.append(str(folds_path))
    write_run_manifest(outdir, "grid", cfg, {"microcensus": str(micro_path)}, outputs)
    print(f"aggregated {len(tiles)} tiles ({len(result.rejects)} records rejected)")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_cfg(args)
    grid = _require(cfg.grid, "grid section")
    imagery = _require(args.imagery or cfg.paths.imagery, "paths.imagery")
    manifest_path = _require(args.manifest or cfg.paths.manifest, "paths.manifest")
    cache_dir = Path(args.chip_cache or cfg.paths.chip_cache or "chips")
    outdir = _outdir(cfg, args)

    raster = RasterSource.open(imagery)
    tiles = read_tile_manifest(manifest_path)
    failed = []
    kept = []
    for t in tiles:
        try:
            chip = extract_chip(raster, t, grid)
        except ValueError as exc:
            failed.append({"tile_id": t.tile_id, "error": str(exc)})
            continue
        save_chip(chip, cache_dir)
        kept.append(t)
    outputs = [str(cache_dir)]

    encoder_path = args.encoder or cfg.paths.encoder
    features_path = args.features or cfg.paths.features
    if encoder_path:
        features_path = features_path or str(outdir / "features.csv")
        enc = _load_encoder_from(encoder_path)
        chips = _prepared_chips(kept, cache_dir, enc.manifest)
        reps = extract(enc, chips)
        table = FeatureTable(
            rows={r.tile_id: r.vector.astype(float) for r in reps},
            feature_names=[f"repr_{i:04d}" for i in range(enc.repr_dim)],
            source="representation",
        )
        with OutputGuard() as guard:
            guard.declare(features_path)
            table.to_csv(features_path)
        outputs.append(str(features_path))
    report = outdir / "extract_report.json"
    report.write_text(json.dumps({"n_chips": len(kept), "failures": failed}, indent=2))
    write_run_manifest(outdir, "extract", cfg, {"imagery": str(imagery)}, outputs)
    print(f"extracted {len(kept)} chips, {len(failed)} failures")
    return 0


def cmd_pretext(args) -> int:
    cfg = _load_cfg(args)
    cache_dir = _require(args.chip_cache or cfg.paths.chip_cache, "paths.chip_cache")
    encoder_path = _require(args.encoder or cfg.paths.encoder, "paths.encoder")
    outdir = _outdir(cfg, args)

    enc = _load_encoder_from(encoder_path)
    ids = chip_cache_ids(cache_dir)
    chips = [
        prepare_for_model(
            load_chip(i, cache_dir),
            mean=enc.manifest.normalization_stats.mean,
            std=enc.manifest.normalization_stats.std,
        )
        for i in ids
    ]
    log_path = outdir / f"pretext_{args.objective}_log.csv"
    with OutputGuard() as guard:
        guard.declare(log_path)
        if args.objective == "barlow":
            bc = BarlowConfig(embed_dim=args.embed_dim, batch_size=args.batch_size)
            run_barlow(enc, chips, bc, epochs=args.epochs, seed=cfg.run.seed, log_path=log_path)
        else:
            run_deepcluster(
                enc, chips, k=args.k, epochs=args.epochs, seed=cfg.run.seed, log_path=log_path
            )
        prefix = outdir / f"encoder_{args.objective}"
        save_encoder(enc, prefix)
    write_run_manifest(
        outdir, "pretext", cfg, {"chip_cache": str(cache_dir)}, [str(log_path), str(prefix) + ".pt"]
    )
    print(f"pretext {args.objective} done: log at {log_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    manifest_path = _require(args.manifest or cfg.paths.manifest, "paths.manifest")
    cache_dir = _require(args.chip_cache or cfg.paths.chip_cache, "paths.chip_cache")
    encoder_path = _require(args.encoder or cfg.paths.encoder, "paths.encoder")
    outdir = _outdir(cfg, args)

    tiles = training_tiles(read_tile_manifest(manifest_path))
    enc = _load_encoder_from(encoder_path)
    chips = _prepared_chips(tiles, cache_dir, enc.manifest)
    pairs = [(chip, float(t.population)) for chip, t in zip(chips, tiles)]
    tuned, log = finetune(enc, pairs, cfg.finetune)
    prefix = outdir / "encoder_finetuned"
    log_path = outdir / "training_log.csv"
    with OutputGuard() as guard:
        guard.declare(log_path)
        save_encoder(tuned, prefix)
        log.to_csv(log_path)
    write_run_manifest(
        outdir,
        "finetune",
        cfg,
        {"manifest": str(manifest_path), "encoder": str(encoder_path)},
        [str(prefix) + ".pt", str(log_path)],
    )
    print(f"fine-tuned on {len(pairs)} tiles; best val loss {log.best_val():.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    features_path = _require(args.features or cfg.paths.features, "paths.features")
    manifest_path = _require(args.manifest or cfg.paths.manifest, "paths.manifest")
    outdir = _outdir(cfg, args)

    table = FeatureTable.from_csv(features_path)
    tiles = training_tiles(read_tile_manifest(manifest_path))
    labels = {t.tile_id: float(t.population) for t in tiles if t.population is not None}
    labels = {i: v for i, v in labels.items() if i in table.rows}
    outputs = []
    grid_search = args.grid_search or cfg.run.grid_search
    if grid_search:
        folds_path = args.folds or cfg.paths.folds
        if folds_path and Path(folds_path).exists():
            folds = FoldSpec.load(folds_path)
        else:
            folds = make_spatial_folds([t for t in tiles if t.tile_id in labels], cfg.run.n_folds)
        best, scores = regress.grid_search(table, labels, folds, seed=cfg.run.seed)
        score_path = outdir / "score_table.csv"
        with OutputGuard() as guard:
            guard.declare(score_path)
            regress.save_score_table(scores, score_path)
        outputs.append(str(score_path))
        rf_cfg = best
        print(f"grid search best: {best}")
    else:
        rf_cfg = cfg.rf
    model = regress.fit(table, labels, rf_cfg)
    prefix = outdir / "model"
    model.save(prefix)
    outputs += [str(prefix) + ".json", str(prefix) + ".joblib"]
    write_run_manifest(outdir, "train", cfg, {"features": str(features_path)}, outputs)
    print(f"trained forest on {len(labels)} tiles")
    return 0


def _build_cv_pipeline(cfg: RunConfig, args, folds: FoldSpec):
    kind = args.pipeline or cfg.run.pipeline
    rf_cfg = None if (args.grid_search or cfg.run.grid_search) else cfg.rf
    use_grid = args.grid_search or cfg.run.grid_search
    if kind == "null":
        return NullPipeline()
    if kind == "features":
        features_path = _require(args.features or cfg.paths.features, "paths.features")
        table = FeatureTable.from_csv(features_path)
        return FeatureRFPipeline(
            table, rf_config=rf_cfg, grid_search=use_grid, cv_folds=folds, seed=cfg.run.seed
        )
    if kind == "encoder":
        encoder_path = _require(args.encoder or cfg.paths.encoder, "paths.encoder")
        enc = _load_encoder_from(encoder_path)
        stats = enc.manifest.normalization_stats
        if args.imagery or cfg.paths.imagery:
            grid = _require(cfg.grid, "grid section")
            raster = RasterSource.open(args.imagery or cfg.paths.imagery)
            source = RasterChips(raster, grid, mean=stats.mean, std=stats.std)
        else:
            cache_dir = _require(args.chip_cache or cfg.paths.chip_cache, "paths.chip_cache")
            raw = {i: load_chip(i, cache_dir) for i in chip_cache_ids(cache_dir)}
            source = InMemoryChips(raw, mean=stats.mean, std=stats.std)
        return EncoderRFPipeline(
            base_encoder=enc,
            chip_source=source,
            finetune_config=cfg.finetune,
            rf_config=rf_cfg,
            grid_search=use_grid,
            cv_folds=folds,
            uncertainty=cfg.run.uncertainty,
            mc_passes=cfg.run.mc_passes,
            mc_p=cfg.run.mc_p,
            seed=cfg.run.seed,
        )
    raise ValueError(f"unknown pipeline kind {kind!r}")


def cmd_cv(args) -> int:
    cfg = _load_cfg(args)
    manifest_path = _require(args.manifest or cfg.paths.manifest, "paths.manifest")
    outdir = _outdir(cfg, args)
    tiles = training_tiles(read_tile_manifest(manifest_path))
    folds_path = args.folds or cfg.paths.folds
    if folds_path and Path(folds_path).exists():
        folds = FoldSpec.load(folds_path)
    else:
        folds = make_spatial_folds(tiles, cfg.run.n_folds)
    pipeline = _build_cv_pipeline(cfg, args, folds)
    predictions, metrics = evalx.crossvalidate(pipeline, tiles, folds)
    pred_path = outdir / "predictions.csv"
    metrics_path = outdir / "metrics.json"
    with OutputGuard() as guard:
        guard.declare(pred_path, metrics_path)
        predictions.to_csv(pred_path)
        metrics.save(metrics_path)
    write_run_manifest(
        outdir, "cv", cfg, {"manifest": str(manifest_path)}, [str(pred_path), str(metrics_path)]
    )
    print(json.dumps(metrics.to_dict(), indent=2))
    return 0


def cmd_predict_map(args) -> int:
    cfg = _load_cfg(args)
    grid = _require(cfg.grid, "grid section")
    imagery = _require(args.imagery or cfg.paths.imagery, "paths.imagery")
    outdir = _outdir(cfg, args)

    kind = args.pipeline or cfg.run.pipeline
    if kind == "null":
        model_path = _require(args.model or cfg.paths.model, "paths.model")
        model = PopulationModel.load(model_path)
        pipeline = NullPipeline()
        pipeline.model = model
    else:
        encoder_path = _require(args.encoder or cfg.paths.encoder, "paths.encoder")
        model_path = _require(args.model or cfg.paths.model, "paths.model")
        enc = _load_encoder_from(encoder_path)
        stats = enc.manifest.normalization_stats
        raster = RasterSource.open(imagery)
        pipeline = EncoderRFPipeline(
            base_encoder=enc,
            chip_source=RasterChips(raster, grid, mean=stats.mean, std=stats.std),
            rf_config=cfg.rf,
            uncertainty=cfg.run.uncertainty,
            mc_passes=cfg.run.mc_passes,
            mc_p=cfg.run.mc_p,
            seed=cfg.run.seed,
        )
        pipeline.encoder = enc
        pipeline.model = PopulationModel.load(model_path)

    raster_source = RasterSource.open(imagery)
    pop_raster, report = generate_map(
        pipeline, grid, raster_source, with_uncertainty=args.uncertainty, seed=cfg.run.seed
    )
    map_path = outdir / "population_map.tif"
    report_path = outdir / "map_report.json"
    with OutputGuard() as guard:
        guard.declare(map_path, report_path)
        write_population_raster(pop_raster, map_path)
        report_path.write_text(
            json.dumps(
                {
                    "n_cells": report.n_cells,
                    "n_valid": report.n_valid,
                    "n_nodata": report.n_nodata,
                    "total_population": pop_raster.total(),
                },
                indent=2,
            )
        )
    write_run_manifest(
        outdir, "predict-map", cfg, {"imagery": str(imagery)}, [str(map_path), str(report_path)]
    )
    print(f"map written to {map_path} ({report.n_valid}/{report.n_cells} cells valid)")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(cfg, args)
    ours = read_population_raster(args.ours)
    theirs = read_population_raster(args.theirs)
    comparison = compare_products(ours, theirs)
    payload = {
        "spearman": comparison.spearman,
        "pearson": comparison.pearson,
        "n_cells": comparison.n_cells,
        "aggregate_pct_error": comparison.aggregate_pct_error,
    }
    if args.census_totals:
        totals = load_census_totals(args.census_totals)
        district = ours.grid.district_id
        if district in totals:
            payload["census_pct_difference"] = census_check(ours, totals[district])
    out_path = outdir / "comparison.json"
    diff_path = outdir / "difference.tif"
    with OutputGuard() as guard:
        guard.declare(out_path, diff_path)
        out_path.write_text(json.dumps(payload, indent=2))
        # the difference raster is signed, so it bypasses PopulationRaster
        from .geotiff import GeoRef, write_geotiff

        g = ours.grid
        diff = comparison.difference.copy()
        diff[~np.isfinite(diff)] = -9999.0
        write_geotiff(
            diff_path,
            diff,
            GeoRef(g.origin_x, g.origin_y, g.cell_size, g.cell_size, g.crs_code),
            nodata=-9999.0,
            description=json.dumps({"provenance": "ours-minus-theirs"}),
        )
    write_run_manifest(
        outdir, "compare", cfg, {"ours": args.ours, "theirs": args.theirs},
        [str(out_path), str(diff_path)],
    )
    print(json.dumps(payload, indent=2))
    return 0


def cmd_explain(args) -> int:
    cfg = _load_cfg(args)
    outdir = _outdir(cfg, args)
    outputs = []
    if args.embed:
        features_path = _require(args.features or cfg.paths.features, "paths.features")
        table = FeatureTable.from_csv(features_path)
        from .encoder import Representation

        reps = [
            Representation(tile_id=i, vector=v, encoder_fingerprint="features")
            for i, v in sorted(table.rows.items())
        ]
        points = explain.project_embeddings(reps, seed=cfg.run.seed)
        tiles = (
            read_tile_manifest(args.manifest or cfg.paths.manifest)
            if (args.manifest or cfg.paths.manifest)
            else []
        )
        embed_path = outdir / "embedding.csv"
        with OutputGuard() as guard:
            guard.declare(embed_path)
            explain.write_embedding_csv(points, tiles, embed_path)
        outputs.append(str(embed_path))
    else:
        encoder_path = _require(args.encoder or cfg.paths.encoder, "paths.encoder")
        cache_dir = _require(args.chip_cache or cfg.paths.chip_cache, "paths.chip_cache")
        enc = _load_encoder_from(encoder_path)
        ids = args.tiles or chip_cache_ids(cache_dir)[: args.limit]
        ram_dir = outdir / "ram"
        for tile_id in ids:
            chip = prepare_for_model(
                load_chip(tile_id, cache_dir),
                mean=enc.manifest.normalization_stats.mean,
                std=enc.manifest.normalization_stats.std,
            )
            ram = explain.regression_activation_map(enc, chip)
            explain.save_activation_map(ram, ram_dir)
        outputs.append(str(ram_dir))
    write_run_manifest(outdir, "explain", cfg, {}, outputs)
    print(f"explanation artifacts: {outputs}")
    return 0


def cmd_serve(args) -> int:
    service.serve_api(args.state_dir, port=args.port, host=args.host)
    return 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popgrid", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--outdir", help="output directory (overrides paths.outdir)")

    sp = sub.add_parser("grid", help="aggregate microcensus onto the analysis grid")
    common(sp)
    sp.add_argument("--microcensus")
    sp.add_argument("--manifest")
    sp.add_argument("--decisions", help="curation decision log to apply (NDJSON)")
    sp.add_argument("--folds-out", help="write a spatial fold file here")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("extract", help="extract chips and, optionally, representations")
    common(sp)
    sp.add_argument("--imagery")
    sp.add_argument("--manifest")
    sp.add_argument("--chip-cache")
    sp.add_argument("--encoder", help="encoder manifest JSON for representation extraction")
    sp.add_argument("--features", help="output features CSV")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("pretext", help="desk-scale self-supervised training")
    common(sp)
    sp.add_argument("--objective", choices=["barlow", "deepcluster"], required=True)
    sp.add_argument("--chip-cache")
    sp.add_argument("--encoder", help="encoder manifest JSON")
    sp.add_argument("--epochs", type=int, default=3)
    sp.add_argument("--k", type=int, default=4, help="clusters for deepcluster")
    sp.add_argument("--embed-dim", type=int, default=32)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.set_defaults(func=cmd_pretext)

    sp = sub.add_parser("finetune", help="two-phase supervised fine-tuning")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--chip-cache")
    sp.add_argument("--encoder")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("train", help="fit the Random Forest population model")
    common(sp)
    sp.add_argument("--features")
    sp.add_argument("--manifest")
    sp.add_argument("--folds")
    sp.add_argument("--grid-search", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("cv", help="pooled spatial cross-validation")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--folds")
    sp.add_argument("--features")
    sp.add_argument("--encoder")
    sp.add_argument("--chip-cache")
    sp.add_argument("--imagery")
    sp.add_argument("--pipeline", choices=["null", "features", "encoder"])
    sp.add_argument("--grid-search", action="store_true")
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("predict-map", help="predict a district population raster")
    common(sp)
    sp.add_argument("--imagery")
    sp.add_argument("--model")
    sp.add_argument("--encoder")
    sp.add_argument("--pipeline", choices=["null", "encoder"])
    sp.add_argument("--uncertainty", action="store_true")
    sp.set_defaults(func=cmd_predict_map)

    sp = sub.add_parser("compare", help="compare against a third-party product")
    common(sp)
    sp.add_argument("--ours", required=True)
    sp.add_argument("--theirs", required=True)
    sp.add_argument("--census-totals")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("explain", help="activation maps or embedding projection")
    common(sp)
    sp.add_argument("--encoder")
    sp.add_argument("--chip-cache")
    sp.add_argument("--tiles", nargs="*")
    sp.add_argument("--limit", type=int, default=8)
    sp.add_argument("--embed", action="store_true")
    sp.add_argument("--features")
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("serve", help="run the curation service")
    sp.add_argument("--state-dir", required=True)
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--host", default="127.0.0.1")
    sp.set_defaults(func=cmd_serve)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean message, non-zero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
