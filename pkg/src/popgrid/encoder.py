"""Convolutional encoders: representation extraction, fine-tuning, MC dropout.

An encoder is a staged convolutional backbone ending in global average
pooling, optionally carrying a linear regression head. Fine-tuning runs the
two-phase schedule: the head alone first, then the whole network under
per-stage learning rates that grow from the earliest stage to the head.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imagery import DEFAULT_NORM_MEAN, DEFAULT_NORM_STD, Chip

PRETRAINING_TAGS = ("supervised", "swav", "deepcluster", "barlow_twins", "scratch")


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float] = DEFAULT_NORM_MEAN
    std: tuple[float, float, float] = DEFAULT_NORM_STD

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=tuple(d["mean"]), std=tuple(d["std"]))


@dataclass
class EncoderManifest:
    """Sidecar describing a checkpoint: architecture, stats, provenance."""

    architecture: str = "resnet50"
    repr_dim: int = 2048
    pretraining: str = "scratch"
    normalization_stats: NormalizationStats = field(default_factory=NormalizationStats)
    weights_uri: str = ""
    fingerprint: str = ""
    seed: int = 0
    training_log: str = ""

    def __post_init__(self):
        if self.repr_dim <= 0:
            raise ValueError("repr_dim must be positive")
        if self.pretraining not in PRETRAINING_TAGS:
            raise ValueError(
                f"pretraining must be one of {PRETRAINING_TAGS}, got {self.pretraining!r}"
            )

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "repr_dim": self.repr_dim,
            "pretraining": self.pretraining,
            "normalization_stats": self.normalization_stats.to_dict(),
            "weights_uri": self.weights_uri,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "training_log": self.training_log,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "EncoderManifest":
        d = json.loads(Path(path).read_text())
        d["normalization_stats"] = NormalizationStats.from_dict(d["normalization_stats"])
        return cls(**d)


@dataclass
class Representation:
    tile_id: str
    vector: np.ndarray
    encoder_fingerprint: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise ValueError("representation vector must be 1-D")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"representation for {self.tile_id} has non-finite entries")


@dataclass
class FinetuneConfig:
    head_epochs: int = 5
    head_lr: float = 2e-3
    base_lr_top: float = 1e-3
    base_lr_bottom: float = 1e-5
    batch_size: int = 32
    patience: int = 2
    train_fraction: float = 0.8
    seed: int = 0
    max_epochs: int = 50  # cap on the full-network phase

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if min(self.head_lr, self.base_lr_top, self.base_lr_bottom) <= 0:
            raise ValueError("learning rates must be positive")
        if self.base_lr_bottom > self.base_lr_top:
            raise ValueError("base_lr_bottom must not exceed base_lr_top")


# --- network ------------------------------------------------------------------


class EncoderNet(nn.Module):
    """Staged backbone + global average pooling + optional linear head.

    Dropout for Monte Carlo uncertainty sits after each residual stage and is
    only active while `mc_active` is set; plain inference stays deterministic.
    """

    def __init__(self, stages: Sequence[nn.Module], feat_dim: int, dropout_stages: Sequence[int]):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.feat_dim = feat_dim
        self.dropout_stages = frozenset(dropout_stages)
        self.head: nn.Linear | None = None
        self.dropout_p = 0.0
        self.mc_active = False

    def attach_head(self) -> None:
        self.head = nn.Linear(self.feat_dim, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if self.mc_active and self.dropout_p > 0 and i in self.dropout_stages:
                x = F.dropout(x, p=self.dropout_p, training=True)
        return x

    def represent_batch(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        v = self.represent_batch(x)
        if self.head is None:
            return v
        return self.head(v).squeeze(-1)


def _resnet50_net() -> EncoderNet:
    from torchvision.models import resnet50

    m = resnet50(weights=None)
    stem = nn.Sequential(m.conv1, m.bn1, m.relu, m.maxpool)
    stages = [stem, m.layer1, m.layer2, m.layer3, m.layer4]
    # dropout after each residual stage, not after the stem
    return EncoderNet(stages, feat_dim=2048, dropout_stages=[1, 2, 3, 4])


_TINY_RE = re.compile(r"^tinyconv-(\d+)x(\d+)$")


def _tinyconv_net(n_stages: int, width: int) -> EncoderNet:
    stages = []
    in_ch = 3
    out_ch = width
    for _ in range(n_stages):
        stages.append(
            nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            )
        )
        in_ch = out_ch
        out_ch = out_ch * 2
    return EncoderNet(stages, feat_dim=in_ch, dropout_stages=range(n_stages))


def build_net(architecture: str) -> EncoderNet:
    if architecture == "resnet50":
        return _resnet50_net()
    m = _TINY_RE.match(architecture)
    if m:
        return _tinyconv_net(int(m.group(1)), int(m.group(2)))
    raise ValueError(
        f"unknown architecture {architecture!r}; expected 'resnet50' or 'tinyconv-<stages>x<width>'"
    )


def state_fingerprint(state_dict: dict) -> str:
    """Content hash over parameter names and raw tensor bytes."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name]
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Encoder:
    """A loaded network with its manifest and a content fingerprint."""

    def __init__(self, net: EncoderNet, manifest: EncoderManifest):
        self.net = net
        self.net.eval()
        self.manifest = manifest
        self.fingerprint = state_fingerprint(net.state_dict())

    @property
    def repr_dim(self) -> int:
        return self.net.feat_dim

    @property
    def has_head(self) -> bool:
        return self.net.head is not None

    def clone(self) -> "Encoder":
        return Encoder(copy.deepcopy(self.net), replace(self.manifest))

    def _batch_tensor(self, chips: Sequence[Chip]) -> torch.Tensor:
        arrays = []
        for c in chips:
            if c.pixels_model is None:
                raise ValueError(f"chip {c.tile_id} has no model pixels; prepare it first")
            arrays.append(c.pixels_model)
        x = torch.from_numpy(np.stack(arrays).astype(np.float32))
        return x.permute(0, 3, 1, 2).contiguous()

    @torch.no_grad()
    def represent(self, chips: Sequence[Chip], batch_size: int = 32) -> np.ndarray:
        self.net.eval()
        out = []
        for i in range(0, len(chips), batch_size):
            x = self._batch_tensor(chips[i : i + batch_size])
            out.append(self.net.represent_batch(x).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.repr_dim), dtype=np.float32)

    @torch.no_grad()
    def predict(self, chips: Sequence[Chip], batch_size: int = 32) -> np.ndarray:
        """Head predictions clamped at 0; population is never negative."""
        if self.net.head is None:
            raise ValueError("encoder has no regression head")
        self.net.eval()
        out = []
        for i in range(0, len(chips), batch_size):
            x = self._batch_tensor(chips[i : i + batch_size])
            out.append(self.net(x).reshape(-1).numpy())
        preds = np.concatenate(out) if out else np.zeros(0, dtype=np.float32)
        return np.maximum(preds, 0.0)

    @torch.no_grad()
    def feature_map(self, chip: Chip) -> np.ndarray:
        """(channels, h, w) output of the final convolutional stage."""
        self.net.eval()
        x = self._batch_tensor([chip])
        return self.net.features(x)[0].numpy()

    def head_weights(self) -> tuple[np.ndarray, float]:
        if self.net.head is None:
            raise ValueError("encoder has no regression head")
        w = self.net.head.weight.detach().numpy().reshape(-1)
        b = float(self.net.head.bias.detach().numpy().reshape(()))
        return w, b


def load_encoder(manifest: EncoderManifest) -> Encoder:
    """Build the architecture and load (or seed) its weights.

    Weight/architecture mismatches fail before any partial encoder escapes,
    naming the first offending layer.
    """
    torch.manual_seed(manifest.seed)
    net = build_net(manifest.architecture)
    if net.feat_dim != manifest.repr_dim:
        raise ValueError(
            f"architecture {manifest.architecture!r} yields {net.feat_dim}-d "
            f"representations but manifest declares repr_dim={manifest.repr_dim}"
        )
    if manifest.pretraining != "scratch" or manifest.weights_uri:
        path = Path(manifest.weights_uri)
        if not path.exists():
            raise FileNotFoundError(f"weights file not found: {path}")
        try:
            loaded = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ValueError(f"corrupted weights file {path}: {exc}") from exc
        if any(k.startswith("head.") for k in loaded):
            net.attach_head()
        expected = net.state_dict()
        for name in expected:
            if name not in loaded:
                raise ValueError(f"weights missing layer {name!r}")
            if tuple(loaded[name].shape) != tuple(expected[name].shape):
                raise ValueError(
                    f"shape mismatch at layer {name!r}: weights "
                    f"{tuple(loaded[name].shape)} vs architecture {tuple(expected[name].shape)}"
                )
        unexpected = [k for k in loaded if k not in expected]
        if unexpected:
            raise ValueError(f"weights contain unknown layer {unexpected[0]!r}")
        net.load_state_dict(loaded)
    encoder = Encoder(net, manifest)
    encoder.manifest = replace(manifest, fingerprint=encoder.fingerprint)
    return encoder


def save_encoder(encoder: Encoder, prefix: str | Path) -> EncoderManifest:
    """Opaque weights blob + JSON manifest sidecar."""
    prefix = Path(prefix)
    weights_path = prefix.with_suffix(".pt")
    torch.save(encoder.net.state_dict(), weights_path)
    manifest = replace(
        encoder.manifest,
        weights_uri=str(weights_path),
        fingerprint=encoder.fingerprint,
    )
    manifest.save(prefix.with_suffix(".manifest.json"))
    return manifest


def extract(encoder: Encoder, chips: Sequence[Chip], batch_size: int = 32) -> list[Representation]:
    """One representation per chip, batch order preserved."""
    vectors = encoder.represent(chips, batch_size=batch_size)
    return [
        Representation(tile_id=c.tile_id, vector=v, encoder_fingerprint=encoder.fingerprint)
        for c, v in zip(chips, vectors)
    ]


# --- fine-tuning --------------------------------------------------------------


@dataclass
class LogRow:
    epoch: int
    phase: int
    train_loss: float
    val_loss: float
    lr_top: float


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)

    def best_val(self) -> float:
        return min(r.val_loss for r in self.rows)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,phase,train_loss,val_loss,lr_top\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.phase},{r.train_loss},{r.val_loss},{r.lr_top}\n")


class EarlyStopper:
    """Halt after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _dihedral_tensor(x: torch.Tensor, code: int) -> torch.Tensor:
    if code >= 4:
        x = torch.flip(x, dims=[-1])
    k = code % 4
    if k:
        x = torch.rot90(x, k=k, dims=[-2, -1])
    return x


def _eval_loss(net: EncoderNet, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> float:
    net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            pred = net(x[i : i + batch_size])
            total += float(F.mse_loss(pred, y[i : i + batch_size], reduction="sum"))
    return total / len(x)


def finetune(
    encoder: Encoder,
    labelled_chips: Sequence[tuple[Chip, float]],
    cfg: FinetuneConfig,
) -> tuple[Encoder, TrainingLog]:
    """Two-phase supervised fine-tuning with a linear regression head.

    Phase 1 trains the head alone (backbone frozen, normalization statistics
    fixed). Phase 2 unfreezes everything under per-stage learning rates
    log-spaced from `base_lr_bottom` at the earliest stage to `base_lr_top`
    at the head, with dihedral augmentation on the training split only and
    early stopping on validation l2 loss. Returns the checkpoint with the
    best validation loss seen in either phase.
    """
    if not labelled_chips:
        raise ValueError("finetune requires at least one labelled chip")
    for chip, label in labelled_chips:
        if label < 0:
            raise ValueError(f"chip {chip.tile_id}: population label must be >= 0")
    if len(labelled_chips) < 2 * cfg.batch_size:
        warnings.warn(
            f"only {len(labelled_chips)} labelled chips; fewer than twice the "
            f"batch size ({cfg.batch_size}) makes validation noisy",
            stacklevel=2,
        )

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = copy.deepcopy(encoder.net)
    if net.head is None:
        net.attach_head()

    n = len(labelled_chips)
    order = rng.permutation(n)
    n_train = min(n - 1, max(1, int(round(cfg.train_fraction * n)))) if n > 1 else 1
    train_idx = order[:n_train]
    val_idx = order[n_train:] if n > 1 else order[:1]

    def tensors(indices):
        xs = np.stack([labelled_chips[i][0].pixels_model for i in indices]).astype(np.float32)
        ys = np.array([labelled_chips[i][1] for i in indices], dtype=np.float32)
        return (
            torch.from_numpy(xs).permute(0, 3, 1, 2).contiguous(),
            torch.from_numpy(ys),
        )

    for chip, _ in labelled_chips:
        if chip.pixels_model is None:
            raise ValueError(f"chip {chip.tile_id} has no model pixels; prepare it first")
    x_train, y_train = tensors(train_idx)
    x_val, y_val = tensors(val_idx)

    log = TrainingLog()
    best_state: dict | None = None
    best_val = float("inf")
    epoch = 0

    def train_one_epoch(optimizer, phase: int, lr_top: float, backbone_frozen: bool):
        nonlocal epoch, best_state, best_val
        if backbone_frozen:
            net.eval()  # freeze batch-norm statistics alongside the weights
        else:
            net.train()
        perm = rng.permutation(len(x_train))
        total = 0.0
        for i in range(0, len(perm), cfg.batch_size):
            idx = torch.from_numpy(perm[i : i + cfg.batch_size].copy())
            xb = x_train[idx]
            codes = rng.integers(0, 8, size=len(idx))
            xb = torch.stack([_dihedral_tensor(xb[j], int(codes[j])) for j in range(len(idx))])
            yb = y_train[idx]
            optimizer.zero_grad()
            loss = F.mse_loss(net(xb), yb)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch + 1}; lower the learning rate"
                )
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
        train_loss = total / len(x_train)
        val_loss = _eval_loss(net, x_val, y_val, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise RuntimeError(f"non-finite validation loss at epoch {epoch + 1}")
        epoch += 1
        log.rows.append(LogRow(epoch, phase, train_loss, val_loss, lr_top))
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
        return val_loss

    # Phase 1: head only.
    for p in net.stages.parameters():
        p.requires_grad_(False)
    head_opt = torch.optim.Adam(net.head.parameters(), lr=cfg.head_lr)
    for _ in range(cfg.head_epochs):
        train_one_epoch(head_opt, phase=1, lr_top=cfg.head_lr, backbone_frozen=True)

    # Phase 2: everything, discriminative learning rates.
    for p in net.stages.parameters():
        p.requires_grad_(True)
    n_stages = len(net.stages)
    lrs = np.logspace(math.log10(cfg.base_lr_bottom), math.log10(cfg.base_lr_top), n_stages + 1)
    groups = [
        {"params": list(stage.parameters()), "lr": float(lrs[i])}
        for i, stage in enumerate(net.stages)
    ]
    groups.append({"params": list(net.head.parameters()), "lr": float(lrs[-1])})
    full_opt = torch.optim.Adam(groups)
    stopper = EarlyStopper(cfg.patience)
    for _ in range(cfg.max_epochs):
        val_loss = train_one_epoch(full_opt, phase=2, lr_top=cfg.base_lr_top, backbone_frozen=False)
        if stopper.update(val_loss):
            break

    assert best_state is not None
    net.load_state_dict(best_state)
    tuned = Encoder(net, replace(encoder.manifest))
    tuned.manifest = replace(tuned.manifest, fingerprint=tuned.fingerprint)
    return tuned, log


# --- Monte Carlo dropout --------------------------------------------------------


def predict_mc_dropout(
    encoder: Encoder,
    chips: Sequence[Chip],
    n_passes: int = 30,
    p: float = 0.1,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic forward passes with dropout after each residual stage.

    Every chip consumes the same seeded noise stream, so a duplicated chip
    reports an identical (mean, std) pair. Returns per-chip sample mean and
    unbiased sample standard deviation of the clamped predictions.
    """
    if n_passes < 2:
        raise ValueError("n_passes must be >= 2")
    if not 0 <= p < 1:
        raise ValueError("dropout probability must lie in [0, 1)")
    if encoder.net.head is None:
        raise ValueError("MC dropout needs a regression head")
    net = encoder.net
    net.eval()
    means = np.zeros(len(chips))
    stds = np.zeros(len(chips))
    if p == 0:  # no stochasticity: one deterministic pass, zero spread
        means[:] = encoder.predict(chips)
        return means, stds
    net.dropout_p = p
    net.mc_active = True
    try:
        with torch.no_grad():
            for i, chip in enumerate(chips):
                torch.manual_seed(seed)
                x = encoder._batch_tensor([chip]).repeat(n_passes, 1, 1, 1)
                preds = np.maximum(net(x).reshape(-1).numpy(), 0.0)
                means[i] = preds.mean()
                stds[i] = preds.std(ddof=1)
    finally:
        net.dropout_p = 0.0
        net.mc_active = False
    return means, stds
