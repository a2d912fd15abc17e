"""Leakage probes against a frozen mask.

The mask is treated as a fixed encoder. A white-box attacker trains a fresh
classifier on its readouts, and a decoder learns to invert readouts back into
scenes under pixel-wise MSE.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

from .data import DatasetSplit, SampleSet, trivial_accuracy
from .models import (ClassifierSpec, Reconstructor, ReconstructorSpec, build_classifier,
                     build_reconstructor)
from .optics import OpticalKernel, OpticalLayer
from .training import TrainConfig, TrainingDivergence, cross_entropy, readout

log = logging.getLogger(__name__)


class KernelMutated(RuntimeError):
    """The attacked mask changed while it was supposed to be frozen."""


@dataclass
class AttackReport:
    attribute: str
    attacker_accuracy: float
    val_accuracy: float
    trivial_accuracy: float
    kernel_fingerprint: str
    attacker: dict = field(default_factory=dict)
    budget: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    config_fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        return cls(**json.loads(text))


@torch.no_grad()
def sensor_features(kernel: OpticalKernel, part: SampleSet, backend: str = "auto",
                    batch_size: int = 256) -> torch.Tensor:
    """Readouts (N, 1, oh, ow) of a frozen mask over a whole split."""
    optics = OpticalLayer(kernel, backend).requires_grad_(False)
    x = torch.from_numpy(part.images)[:, None]
    chunks = [readout(optics, x[s : s + batch_size]) for s in range(0, len(x), batch_size)]
    if not chunks:
        return torch.zeros((0, 1) + kernel.geometry.output_size)
    return torch.cat(chunks)


def _check_frozen(kernel: OpticalKernel, fingerprint: str):
    if kernel.fingerprint() != fingerprint:
        raise KernelMutated("attacked kernel changed during the attack")


@torch.no_grad()
def _accuracy(model, feats: torch.Tensor, labels: np.ndarray, batch_size: int = 512) -> float:
    model.eval()
    preds = torch.cat([model(feats[s : s + batch_size]).argmax(1)
                       for s in range(0, len(feats), batch_size)])
    return float((preds.numpy() == labels).mean())


def train_post_adversary(kernel: OpticalKernel, data: DatasetSplit, sensitive: str,
                         attacker_spec: ClassifierSpec = ClassifierSpec(),
                         cfg: TrainConfig = TrainConfig(), backend: str = "auto") -> AttackReport:
    """Train a fresh attacker on the frozen mask's readouts; report test accuracy."""
    fingerprint = kernel.fingerprint()
    feats = {name: sensor_features(kernel, part, backend) for name, part in data.parts().items()}
    labels = {name: part.labels_of(sensitive) for name, part in data.parts().items()}

    attacker = build_classifier(attacker_spec, cfg.seed)
    opt = torch.optim.Adam(attacker.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    x, y = feats["train"], torch.from_numpy(labels["train"])
    n = len(x)
    bs = min(cfg.batch_size, n)
    history = []
    for epoch in range(cfg.epochs):
        attacker.train()
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            loss = cross_entropy(attacker(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"attacker loss non-finite at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        row = {"epoch": epoch, "loss": total / max(count, 1)}
        if len(labels["val"]):
            row["val_acc"] = _accuracy(attacker, feats["val"], labels["val"])
        history.append(row)
        _check_frozen(kernel, fingerprint)

    test_acc = _accuracy(attacker, feats["test"], labels["test"]) if len(labels["test"]) else float("nan")
    val_acc = _accuracy(attacker, feats["val"], labels["val"]) if len(labels["val"]) else float("nan")
    _check_frozen(kernel, fingerprint)
    return AttackReport(
        attribute=sensitive,
        attacker_accuracy=test_acc,
        val_accuracy=val_acc,
        trivial_accuracy=trivial_accuracy(labels["test"]) if len(labels["test"]) else float("nan"),
        kernel_fingerprint=fingerprint,
        attacker=attacker_spec.to_dict(),
        budget=asdict(cfg),
        history=history,
    )


def pixel_variance(part: SampleSet) -> float:
    """Mean over pixels of the across-sample variance: the MSE of the mean image."""
    return float(part.images.astype(np.float64).var(axis=0).mean())


@torch.no_grad()
def _mse(decoder, feats, target, batch_size=256) -> float:
    decoder.eval()
    err = 0.0
    for s in range(0, len(feats), batch_size):
        err += float(((decoder(feats[s : s + batch_size]) - target[s : s + batch_size]) ** 2).sum())
    return err / target.numel()


def train_reconstructor(kernel: OpticalKernel, data: DatasetSplit,
                        recon_spec: ReconstructorSpec = ReconstructorSpec(),
                        cfg: TrainConfig = TrainConfig(), backend: str = "auto"
                        ) -> tuple[Reconstructor, dict]:
    """Fit a decoder that inverts the frozen mask; returns it with an MSE log."""
    fingerprint = kernel.fingerprint()
    decoder = build_reconstructor(recon_spec, kernel.geometry, cfg.seed)
    f_train = sensor_features(kernel, data.train, backend)
    f_val = sensor_features(kernel, data.val, backend)
    t_train = torch.from_numpy(data.train.images)[:, None]
    t_val = torch.from_numpy(data.val.images)[:, None]
    decoder.fit_input(f_train)

    opt = torch.optim.Adam(decoder.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(f_train)
    bs = min(cfg.batch_size, n)
    history = []
    for epoch in range(cfg.epochs):
        decoder.train()
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            loss = torch.mean((decoder(f_train[idx]) - t_train[idx]) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"reconstructor loss non-finite at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        row = {"epoch": epoch, "train_mse": total / max(count, 1)}
        if len(t_val):
            row["val_mse"] = _mse(decoder, f_val, t_val)
        history.append(row)
        log.info("reconstructor epoch %d %s", epoch, row)
        _check_frozen(kernel, fingerprint)

    decoder.eval()
    out = {
        "kernel_fingerprint": fingerprint,
        "history": history,
        "train_mse": _mse(decoder, f_train, t_train),
        "val_mse": _mse(decoder, f_val, t_val) if len(t_val) else float("nan"),
        "val_pixel_variance": pixel_variance(data.val) if len(t_val) else float("nan"),
        "decoder": recon_spec.to_dict(),
        "budget": asdict(cfg),
    }
    return decoder, out


@torch.no_grad()
def reconstruct(decoder: Reconstructor, features) -> np.ndarray:
    """Decode readouts (oh, ow) or (B, [1,] oh, ow) into images clipped to [0, 1]."""
    f = torch.as_tensor(np.asarray(features, dtype=np.float32)) if not isinstance(features, torch.Tensor) \
        else features.float()
    squeeze = f.ndim == 2
    if f.ndim == 2:
        f = f[None, None]
    elif f.ndim == 3:
        f = f[:, None]
    decoder.eval()
    out = decoder(f).clamp(0.0, 1.0)[:, 0].numpy()
    return out[0] if squeeze else out


def save_grid(originals: np.ndarray, reconstructions: np.ndarray, path: Union[str, Path],
              gap: int = 2) -> Path:
    """One row per sample: original on the left, reconstruction on the right."""
    originals = np.asarray(originals)
    reconstructions = np.asarray(reconstructions)
    if originals.shape != reconstructions.shape or originals.ndim != 3:
        raise ValueError(f"need matching (N, H, W) stacks, got {originals.shape} and {reconstructions.shape}")
    n, h, w = originals.shape
    canvas = np.ones((n * h + (n - 1) * gap, 2 * w + gap), dtype=np.float64)
    for i in range(n):
        top = i * (h + gap)
        canvas[top : top + h, :w] = originals[i]
        canvas[top : top + h, w + gap :] = reconstructions[i]
    img = np.floor(np.clip(canvas, 0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")
    return Path(path)
