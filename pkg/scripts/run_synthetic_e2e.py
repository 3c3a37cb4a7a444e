#!/usr/bin/env python3
"""The full pipeline on synthetic blob tiles, pooled 4-fold spatial CV.

Per fold: fine-tune a small scratch encoder (head first, then discriminative
learning rates with early stopping), extract representations, grid-search the
Random Forest, predict the held-out fold. Reports pooled metrics against the
null model. Mirrors the benchmark in tests/test_acceptance.py with knobs.
"""

import argparse
import json
import time

from popgrid.encoder import EncoderManifest, FinetuneConfig, load_encoder
from popgrid.evalx import crossvalidate
from popgrid.geogrid import make_spatial_folds
from popgrid.pipeline import EncoderRFPipeline, InMemoryChips, NullPipeline
from popgrid.synthetic import make_blob_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-tiles", type=int, default=400)
    parser.add_argument("--max-blobs", type=int, default=15)
    parser.add_argument("--noise-sigma", type=float, default=0.3)
    parser.add_argument("--n-folds", type=int, default=4)
    parser.add_argument("--max-epochs", type=int, default=20)
    parser.add_argument("--arch", default="tinyconv-4x8")
    parser.add_argument("--repr-dim", type=int, default=64)
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--metrics-out", help="write the pooled metrics JSON here")
    args = parser.parse_args()

    start = time.perf_counter()
    tiles, chips, _ = make_blob_dataset(
        n_tiles=args.n_tiles, seed=args.seed, max_blobs=args.max_blobs,
        noise_sigma=args.noise_sigma,
    )
    folds = make_spatial_folds(tiles, args.n_folds)
    base = load_encoder(
        EncoderManifest(
            architecture=args.arch, repr_dim=args.repr_dim, pretraining="scratch", seed=0
        )
    )
    pipeline = EncoderRFPipeline(
        base_encoder=base,
        chip_source=InMemoryChips(chips),
        finetune_config=FinetuneConfig(seed=0, max_epochs=args.max_epochs),
        grid_search=True,
        cv_folds=folds,
        seed=0,
    )
    print(f"{args.n_tiles} tiles, {args.n_folds} folds, encoder {args.arch}")
    pooled, metrics = crossvalidate(pipeline, tiles, folds)
    _, null_metrics = crossvalidate(NullPipeline(), tiles, folds)
    elapsed = time.perf_counter() - start

    print(f"\nelapsed                 {elapsed:8.1f} s")
    print(f"pooled R^2              {metrics.r2:8.3f}   (null {null_metrics.r2:8.3f})")
    print(f"pooled MeAE             {metrics.meae:8.3f}   (null {null_metrics.meae:8.3f})")
    print(f"pooled MeAPE            {metrics.meape:8.3f}   (null {null_metrics.meape:8.3f})")
    print(f"pooled IQR abs err      {metrics.iqr_abs_err:8.3f}")
    print(f"pooled AggPE            {metrics.aggpe:8.3f}")
    improvement = 1.0 - metrics.meae / null_metrics.meae
    print(f"MeAE improvement over null: {improvement:.1%}")
    if args.metrics_out:
        with open(args.metrics_out, "w") as fh:
            json.dump(
                {"pipeline": metrics.to_dict(), "null": null_metrics.to_dict(),
                 "elapsed_s": elapsed},
                fh, indent=2,
            )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
