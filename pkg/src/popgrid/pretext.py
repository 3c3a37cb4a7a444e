"""Desk-scale self-supervised objectives: redundancy reduction and
cluster-then-classify pseudo-labelling.

The redundancy-reduction loss drives the cross-correlation matrix of two
augmented views' embeddings toward the identity: unit diagonal for
invariance, zero off-diagonal for decorrelation. The cluster loop alternates
k-means over representations with one epoch of classifier training on the
resulting pseudo-labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

from .imagery import MODEL_SIZE, Chip, resize_bilinear

AUGMENTATIONS = (
    "crop-resize",
    "horizontal flip",
    "color jitter",
    "grayscale",
    "gaussian blur",
    "solarization",
)


@dataclass
class BarlowConfig:
    lambda_offdiag: float = 5e-3
    embed_dim: int = 64
    batch_size: int = 32
    view_augmentations: tuple[str, ...] = AUGMENTATIONS

    def __post_init__(self):
        if self.lambda_offdiag <= 0:
            raise ValueError("lambda_offdiag must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        unknown = [a for a in self.view_augmentations if a not in AUGMENTATIONS]
        if unknown:
            raise ValueError(f"unknown augmentations {unknown}; choose from {AUGMENTATIONS}")


def _standardize_columns(z: torch.Tensor, view_name: str) -> torch.Tensor:
    mean = z.mean(dim=0)
    std = z.std(dim=0, unbiased=False)
    dead = torch.nonzero(std == 0).reshape(-1)
    if len(dead):
        raise ValueError(
            f"zero-variance column: dimension {int(dead[0])} of view {view_name} "
            "cannot be standardized"
        )
    return (z - mean) / std


def barlow_loss_torch(
    z_a: torch.Tensor, z_b: torch.Tensor, lambda_offdiag: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable loss and cross-correlation matrix for a batch of views."""
    if z_a.shape != z_b.shape:
        raise ValueError(f"view shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    batch, _ = z_a.shape
    if batch < 2:
        raise ValueError("need a batch of at least 2 to standardize")
    za = _standardize_columns(z_a, "a")
    zb = _standardize_columns(z_b, "b")
    c = (za.T @ zb) / batch
    on_diag = torch.sum((1.0 - torch.diagonal(c)) ** 2)
    off_diag = torch.sum(c**2) - torch.sum(torch.diagonal(c) ** 2)
    return on_diag + lambda_offdiag * off_diag, c


def barlow_loss(z_a, z_b, lambda_offdiag: float = 5e-3) -> tuple[float, np.ndarray]:
    """Loss value and D x D cross-correlation matrix (float64)."""
    ta = torch.as_tensor(np.asarray(z_a, dtype=np.float64))
    tb = torch.as_tensor(np.asarray(z_b, dtype=np.float64))
    loss, c = barlow_loss_torch(ta, tb, lambda_offdiag)
    return float(loss), c.numpy()


def barlow_loss_grad(z_a, z_b, lambda_offdiag: float = 5e-3) -> np.ndarray:
    """Gradient of the loss with respect to the first view's embeddings."""
    ta = torch.as_tensor(np.asarray(z_a, dtype=np.float64)).requires_grad_(True)
    tb = torch.as_tensor(np.asarray(z_b, dtype=np.float64))
    loss, _ = barlow_loss_torch(ta, tb, lambda_offdiag)
    loss.backward()
    return ta.grad.numpy()


# --- view generation ------------------------------------------------------------


def _color_jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    brightness, contrast, saturation = rng.uniform(0.6, 1.4, size=3)
    out = img * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=2, keepdims=True)
    out = gray + (out - gray) * saturation
    return out


def _grayscale(img: np.ndarray) -> np.ndarray:
    luma = img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114
    return np.repeat(luma[:, :, None], 3, axis=2)


def _solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi == lo:
        return img.copy()
    unit = (img - lo) / (hi - lo)
    flipped = np.where(unit >= threshold, 1.0 - unit, unit)
    return flipped * (hi - lo) + lo


def _augment_once(img: np.ndarray, augmentations: Sequence[str], rng: np.random.Generator) -> np.ndarray:
    out = img.astype(np.float64)
    for aug in augmentations:
        if aug == "crop-resize":
            scale = rng.uniform(0.5, 1.0)
            size = max(8, int(round(MODEL_SIZE * np.sqrt(scale))))
            top = rng.integers(0, MODEL_SIZE - size + 1)
            left = rng.integers(0, MODEL_SIZE - size + 1)
            out = resize_bilinear(out[top : top + size, left : left + size], MODEL_SIZE, MODEL_SIZE)
        elif aug == "horizontal flip":
            if rng.random() < 0.5:
                out = out[:, ::-1].copy()
        elif aug == "color jitter":
            out = _color_jitter(out, rng)
        elif aug == "grayscale":
            out = _grayscale(out)
        elif aug == "gaussian blur":
            sigma = rng.uniform(0.1, 2.0)
            out = gaussian_filter(out, sigma=(sigma, sigma, 0))
        elif aug == "solarization":
            out = _solarize(out, rng.uniform(0.5, 0.9))
    return out


def make_views(chip: Chip, cfg: BarlowConfig, seed: int) -> tuple[Chip, Chip]:
    """Two independently augmented 224x224x3 views from one seeded stream."""
    if chip.pixels_model is None:
        raise ValueError(f"chip {chip.tile_id} has no model pixels; prepare it first")
    rng = np.random.default_rng(seed)
    view_a = _augment_once(chip.pixels_model, cfg.view_augmentations, rng)
    view_b = _augment_once(chip.pixels_model, cfg.view_augmentations, rng)
    return (
        replace(chip, pixels_raw=None, pixels_model=view_a.astype(np.float32)),
        replace(chip, pixels_raw=None, pixels_model=view_b.astype(np.float32)),
    )


# --- k-means and the cluster loop ---------------------------------------------


@dataclass
class ClusterState:
    k: int
    centroids: np.ndarray | None = None
    assignments: dict[str, int] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        if self.centroids is not None and not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")
        bad = {s: c for s, c in self.assignments.items() if not 0 <= c < self.k}
        if bad:
            raise ValueError(f"assignments outside 0..{self.k - 1}: {bad}")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    wcss_history: list[float]
    n_iter: int


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(
            ((points[:, None, :] - np.asarray(centroids)[None, :, :]) ** 2).sum(-1), axis=1
        )
        total = d2.sum()
        if total == 0:
            centroids.append(points[rng.integers(n)])
            continue
        centroids.append(points[rng.choice(n, p=d2 / total)])
    return np.asarray(centroids, dtype=float)


def kmeans_fit(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    init_centroids: np.ndarray | None = None,
) -> KMeansResult:
    """Lloyd iterations from a k-means++ (or warm) start.

    An emptied cluster is re-seeded at the point farthest from its assigned
    centroid. The within-cluster sum of squares is recorded per iteration
    and never increases.
    """
    points = np.asarray(points, dtype=float)
    if k > len(points):
        raise ValueError(f"k={k} exceeds the number of points ({len(points)})")
    rng = np.random.default_rng(seed)
    if init_centroids is not None:
        centroids = np.array(init_centroids, dtype=float)
        if centroids.shape != (k, points.shape[1]):
            raise ValueError("warm-start centroids have the wrong shape")
    else:
        centroids = _kmeans_pp_init(points, k, rng)
    assignments = np.zeros(len(points), dtype=int)
    wcss_history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        new_assignments = d2.argmin(axis=1)
        dist_to_own = d2[np.arange(len(points)), new_assignments]
        for c in range(k):
            if not np.any(new_assignments == c):
                farthest = int(np.argmax(dist_to_own))
                centroids[c] = points[farthest]
                d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
                new_assignments = d2.argmin(axis=1)
                dist_to_own = d2[np.arange(len(points)), new_assignments]
        wcss_history.append(float(dist_to_own.sum()))
        converged = np.array_equal(new_assignments, assignments) and n_iter > 1
        assignments = new_assignments
        for c in range(k):
            members = assignments == c
            if members.any():  # duplicate points can defeat the re-seed rule
                centroids[c] = points[members].mean(axis=0)
        if converged:
            break
    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        wcss_history=wcss_history,
        n_iter=n_iter,
    )


@dataclass
class ClusterEpochStats:
    classifier_loss: float
    cluster_sizes: list[int]
    wcss: float


def deepcluster_epoch(
    encoder,
    chips: Sequence[Chip],
    state: ClusterState,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> tuple[object, ClusterState, ClusterEpochStats]:
    """One alternation: represent, cluster, retrain on pseudo-labels.

    The encoder only needs a `represent(chips)` method. When it is a torch
    encoder and lr > 0, the classification gradient flows into the backbone;
    otherwise only the linear classifier is trained on fixed representations.
    """
    if state.k > len(chips):
        raise ValueError(f"k={state.k} exceeds the number of chips ({len(chips)})")
    reps = np.asarray(encoder.represent(chips), dtype=float)
    km = kmeans_fit(
        reps,
        state.k,
        seed=seed,
        init_centroids=state.centroids if state.iteration > 0 else None,
    )
    labels = torch.from_numpy(km.assignments.astype(np.int64))
    torch.manual_seed(seed)

    trainable = lr > 0 and hasattr(encoder, "net")
    classifier = nn.Linear(reps.shape[1], state.k)
    if trainable:
        net = encoder.net
        net.train()
        params = list(net.parameters()) + list(classifier.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        x_all = encoder._batch_tensor(chips)
    else:
        opt = torch.optim.Adam(classifier.parameters(), lr=max(lr, 1e-3))
        x_feats = torch.from_numpy(reps.astype(np.float32))

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(chips))
    total = 0.0
    for i in range(0, len(perm), batch_size):
        idx = torch.from_numpy(perm[i : i + batch_size].copy())
        if trainable:
            feats = net.represent_batch(x_all[idx])
        else:
            feats = x_feats[idx]
        logits = classifier(feats)
        loss = F.cross_entropy(logits, labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += float(loss.detach()) * len(idx)
    if trainable:
        net.eval()

    new_state = ClusterState(
        k=state.k,
        centroids=km.centroids,
        assignments={chip.tile_id: int(a) for chip, a in zip(chips, km.assignments)},
        iteration=state.iteration + 1,
    )
    sizes = [int(np.sum(km.assignments == c)) for c in range(state.k)]
    stats = ClusterEpochStats(
        classifier_loss=total / len(chips),
        cluster_sizes=sizes,
        wcss=km.wcss_history[-1],
    )
    return encoder, new_state, stats


# --- desk-scale training loops ---------------------------------------------------


def run_barlow(
    encoder,
    chips: Sequence[Chip],
    cfg: BarlowConfig,
    epochs: int = 5,
    lr: float = 1e-3,
    seed: int = 0,
    log_path: str | Path | None = None,
) -> list[float]:
    """Train backbone + linear projector with the redundancy-reduction loss."""
    torch.manual_seed(seed)
    net = encoder.net
    projector = nn.Linear(net.feat_dim, cfg.embed_dim)
    opt = torch.optim.Adam(list(net.parameters()) + list(projector.parameters()), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        net.train()
        perm = rng.permutation(len(chips))
        total = 0.0
        count = 0
        for i in range(0, len(perm), cfg.batch_size):
            batch = [chips[j] for j in perm[i : i + cfg.batch_size]]
            if len(batch) < 2:
                continue
            views = [make_views(c, cfg, seed=int(rng.integers(2**31))) for c in batch]
            xa = torch.from_numpy(
                np.stack([v[0].pixels_model for v in views])
            ).permute(0, 3, 1, 2)
            xb = torch.from_numpy(
                np.stack([v[1].pixels_model for v in views])
            ).permute(0, 3, 1, 2)
            za = projector(net.represent_batch(xa))
            zb = projector(net.represent_batch(xb))
            loss, _ = barlow_loss_torch(za, zb, cfg.lambda_offdiag)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        net.eval()
        losses.append(total / max(count, 1))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for e, l in enumerate(losses, start=1):
                w.writerow([e, l])
    return losses


def run_deepcluster(
    encoder,
    chips: Sequence[Chip],
    k: int,
    epochs: int = 5,
    lr: float = 1e-3,
    seed: int = 0,
    log_path: str | Path | None = None,
) -> ClusterState:
    """Alternate clustering and pseudo-label training for several epochs."""
    state = ClusterState(k=k)
    history = []
    for epoch in range(epochs):
        encoder, state, stats = deepcluster_epoch(encoder, chips, state, seed=seed + epoch, lr=lr)
        history.append((epoch + 1, stats.classifier_loss, stats.cluster_sizes))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "cluster_sizes"])
            for e, loss, sizes in history:
                w.writerow([e, loss, " ".join(map(str, sizes))])
    return state
