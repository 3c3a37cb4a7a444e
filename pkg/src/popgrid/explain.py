"""Regression activation maps and 2-D embedding projections.

A RAM is defined for a linear head over global-average-pooled features: the
per-pixel heat is the weighted sum of the final convolutional feature map,
and its spatial mean plus the head bias reproduces the head's prediction
exactly. That identity is the testable core of the method.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from sklearn.manifold import TSNE
from torch import nn

from .encoder import Encoder, Representation
from .geogrid import Tile
from .imagery import MODEL_SIZE, Chip, resize_bilinear


@dataclass
class ActivationMap:
    tile_id: str
    heat: np.ndarray  # (h, w) at final-convolution resolution
    bias: float
    prediction: float  # raw head output, before any clamping

    def display_heat(self, size: int = MODEL_SIZE) -> np.ndarray:
        """Bilinear upsample for overlay rendering; display only."""
        return resize_bilinear(self.heat, size, size)

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "bias": self.bias,
            "prediction": self.prediction,
            "heat": self.heat.tolist(),
        }


def ram_from_features(features: np.ndarray, weights: np.ndarray, bias: float) -> tuple[np.ndarray, float]:
    """heat(u,v) = sum_c w_c * F_c(u,v); prediction = mean(heat) + bias."""
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError(f"expected (channels, h, w) features, got {features.shape}")
    if weights.shape != (features.shape[0],):
        raise ValueError(
            f"weights length {weights.shape} does not match {features.shape[0]} channels"
        )
    heat = np.tensordot(weights, features, axes=(0, 0))
    return heat, float(heat.mean() + bias)


def regression_activation_map(encoder: Encoder, chip: Chip) -> ActivationMap:
    """Heat map of the linear head's contribution at each spatial position."""
    if encoder.net.head is None:
        raise ValueError("activation maps require a linear regression head")
    if not isinstance(encoder.net.head, nn.Linear) or encoder.net.head.out_features != 1:
        raise ValueError("activation maps are defined for a single-output linear head")
    weights, bias = encoder.head_weights()
    features = encoder.feature_map(chip)
    heat, prediction = ram_from_features(features, weights, bias)
    return ActivationMap(tile_id=chip.tile_id, heat=heat, bias=bias, prediction=prediction)


def save_activation_map(ram: ActivationMap, directory: str | Path) -> tuple[Path, Path]:
    """Unnormalized JSON plus a min-max display-normalized PNG."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    safe = ram.tile_id.replace(":", "_")
    json_path = directory / f"{safe}.ram.json"
    json_path.write_text(json.dumps(ram.to_dict()))
    disp = ram.display_heat()
    lo, hi = disp.min(), disp.max()
    scaled = np.zeros_like(disp) if hi == lo else (disp - lo) / (hi - lo)
    png_path = directory / f"{safe}.ram.png"
    Image.fromarray((scaled * 255).astype(np.uint8), mode="L").save(png_path)
    return json_path, png_path


def project_embeddings(
    reps: Sequence[Representation],
    method: str = "tsne",
    seed: int = 0,
) -> list[tuple[str, float, float]]:
    """Seeded 2-D projection of representations, input order preserved."""
    if method != "tsne":
        raise ValueError(f"unknown projection method {method!r}")
    if len(reps) < 5:
        raise ValueError(f"need at least 5 representations, got {len(reps)}")
    ids = [r.tile_id for r in reps]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate tile_ids: {dupes}")
    x = np.stack([r.vector for r in reps]).astype(np.float64)
    perplexity = min(30.0, (len(reps) - 1) / 3.0)
    coords = TSNE(
        n_components=2,
        perplexity=perplexity,
        random_state=seed,
        init="pca",
    ).fit_transform(x)
    return [(tile_id, float(cx), float(cy)) for tile_id, (cx, cy) in zip(ids, coords)]


def write_embedding_csv(
    points: Sequence[tuple[str, float, float]],
    tiles: Sequence[Tile],
    path: str | Path,
) -> None:
    by_id = {t.tile_id: t for t in tiles}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "x", "y", "population", "region_key"])
        for tile_id, x, y in points:
            t = by_id.get(tile_id)
            w.writerow([
                tile_id,
                x,
                y,
                "" if t is None or t.population is None else t.population,
                "" if t is None else t.region_key,
            ])
