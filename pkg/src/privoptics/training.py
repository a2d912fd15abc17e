"""Joint optimisation of the mask and the digital networks.

Three regimes share one loop so that their desired-attribute path consumes
exactly the same random streams:

* baseline: mask + analyzer minimise the desired cross-entropy.
* GAP: mask + analyzer minimise ``ce_desired - lam * ce_sensitive`` against a
  frozen adversary, then the adversary takes ``n_adv_steps`` steps on fresh
  batches with mask and analyzer frozen.
* IS: mask + analyzer minimise ``ce_desired - lam * contrastive`` where the
  contrastive term repels same-sensitive-label readouts and attracts the rest.

Every optimizer step on the mask is followed by a clamp into [0, 1].
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import AttributePair, DatasetSplit, SampleSet
from .models import ClassifierSpec, build_classifier
from .optics import OpticalKernel, OpticalLayer, SensorGeometry, init_kernel

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "gap", "is")

GAP_LAMBDA_GRID = (0.01, 0.1, 0.5, 1.0, 2.0)
GAP_STEPS_GRID = (1, 2, 5)
IS_LAMBDA_GRID = GAP_LAMBDA_GRID

# offsets that keep the adversary's streams apart from the desired path
_ADVERSARY_SEED = 1
_ADVERSARY_BATCH_SEED = 7919


class ConfigError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


def _positive(cfg, *names):
    for n in names:
        if not getattr(cfg, n) > 0:
            raise ConfigError(f"{n} must be positive, got {getattr(cfg, n)!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.002
    batch_size: int = 64
    seed: int = 0
    init_scheme: str = "midpoint-noise"

    def __post_init__(self):
        _positive(self, "epochs", "lr", "batch_size")


@dataclass(frozen=True)
class GapConfig:
    lam: float = 1.0
    n_adv_steps: int = 2
    epochs: int = 100
    lr: float = 0.002
    batch_size: int = 64
    seed: int = 0
    init_scheme: str = "midpoint-noise"

    def __post_init__(self):
        _positive(self, "epochs", "lr", "batch_size", "n_adv_steps")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam!r}")


@dataclass(frozen=True)
class IsConfig:
    lam: float = 0.1
    batch_size: int = 32
    epochs: int = 100
    lr: float = 0.002
    seed: int = 0
    distance_cap: Optional[float] = None
    init_scheme: str = "midpoint-noise"

    def __post_init__(self):
        _positive(self, "epochs", "lr")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam!r}")
        if self.batch_size < 2:
            raise ConfigError("IS needs batch_size >= 2 to form pairs")
        if self.distance_cap is not None and not self.distance_cap > 0:
            raise ConfigError("distance_cap must be positive when set")


@dataclass
class TrainedSystem:
    strategy: str
    kernel: OpticalKernel
    analyzer: nn.Module
    adversary: Optional[nn.Module]
    history: list = field(default_factory=list)
    batch_log: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true class under softmax."""
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy of an empty batch")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"batch mismatch: {logits.shape[0]} logits vs {labels.shape[0]} labels")
    return F.cross_entropy(logits, labels)


def gap_analyzer_loss(ce_desired, ce_sensitive, lam: float):
    return ce_desired - lam * ce_sensitive


def is_contrastive_term(features: torch.Tensor, sensitive_labels: torch.Tensor,
                        distance_cap: Optional[float] = None) -> torch.Tensor:
    """Same-label pair distances minus different-label pair distances, over |B|.

    Pairs are unordered (i < j). Distances are plain Euclidean norms of the
    flattened readout difference; the norm's gradient at zero is taken as 0.
    """
    b = features.shape[0]
    if b < 2:
        raise ValueError("contrastive term needs at least two samples")
    flat = features.reshape(b, -1)
    i, j = torch.triu_indices(b, b, offset=1)
    diff = flat[i] - flat[j]
    sq = (diff * diff).sum(dim=1)
    nonzero = sq > 0
    # sqrt has an infinite slope at 0; route zero pairs around it
    dist = torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))
    if distance_cap is not None:
        dist = dist.clamp(max=distance_cap)
    same = sensitive_labels[i] == sensitive_labels[j]
    return (dist[same].sum() - dist[~same].sum()) / b


def adversary_step(features: torch.Tensor, sensitive_labels: torch.Tensor, adversary: nn.Module,
                   optimizer: torch.optim.Optimizer) -> float:
    """One optimizer step of the adversary on detached readouts."""
    adversary.train()
    optimizer.zero_grad(set_to_none=True)
    loss = cross_entropy(adversary(features.detach()), sensitive_labels)
    _guard(loss, "adversary")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _guard(value: torch.Tensor, what: str, **where):
    if not torch.isfinite(value).all():
        ctx = ", ".join(f"{k}={v}" for k, v in where.items())
        raise TrainingDivergence(f"non-finite {what} loss ({ctx}): {value.detach().tolist()}")


def readout(optics: OpticalLayer, x: torch.Tensor) -> torch.Tensor:
    """Sensor readout seen by the digital side: intensity times the sensor gain."""
    return optics(x) * optics.geometry.readout_scale


@torch.no_grad()
def predict(optics: OpticalLayer, model: nn.Module, part: SampleSet, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    x = torch.from_numpy(part.images)[:, None]
    preds = [model(readout(optics, x[s : s + batch_size])).argmax(1) for s in range(0, len(x), batch_size)]
    model.train(was_training)
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


def _acc(optics, model, part, attr) -> float:
    return float((predict(optics, model, part) == part.labels_of(attr)).mean())


StepHook = Callable[[OpticalLayer, int], None]
EpochHook = Callable[[dict, Callable[[], "TrainedSystem"]], None]


def _run(strategy: str, data: DatasetSplit, desired: str, sensitive: Optional[str],
         analyzer_spec: ClassifierSpec, adversary_spec: Optional[ClassifierSpec],
         geometry: SensorGeometry, cfg, *, backend: str = "auto",
         step_hook: Optional[StepHook] = None, on_epoch: Optional[EpochHook] = None) -> TrainedSystem:
    lam = getattr(cfg, "lam", 0.0)
    optics = OpticalLayer(init_kernel(geometry, cfg.seed, cfg.init_scheme), backend)
    analyzer = build_classifier(analyzer_spec, cfg.seed)
    opt = torch.optim.Adam(list(optics.parameters()) + list(analyzer.parameters()), lr=cfg.lr)

    adversary = adv_opt = adv_gen = None
    if strategy == "gap":
        adversary = build_classifier(adversary_spec, cfg.seed + _ADVERSARY_SEED)
        adv_opt = torch.optim.Adam(adversary.parameters(), lr=cfg.lr)
        adv_gen = torch.Generator().manual_seed(cfg.seed + _ADVERSARY_BATCH_SEED)

    train = data.train
    x_all = torch.from_numpy(train.images)[:, None]
    z_all = torch.from_numpy(train.labels_of(desired))
    y_all = torch.from_numpy(train.labels_of(sensitive)) if sensitive else None
    n = len(train)
    bs = min(cfg.batch_size, n)
    gen = torch.Generator().manual_seed(cfg.seed)

    system = TrainedSystem(strategy, optics.snapshot(), analyzer, adversary,
                           config={"strategy": strategy, **asdict(cfg)})

    def snapshot() -> TrainedSystem:
        system.kernel = optics.snapshot()
        return system

    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=gen)
        sums = {}
        batches = 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start : start + bs]
            x, z = x_all[idx], z_all[idx]
            analyzer.train()
            feats = readout(optics, x)
            ce_d = cross_entropy(analyzer(feats), z)
            rec = {"ce_desired": ce_d}
            if strategy == "gap":
                adversary.eval()
                adversary.requires_grad_(False)
                ce_s = cross_entropy(adversary(feats), y_all[idx])
                adversary.requires_grad_(True)
                loss = gap_analyzer_loss(ce_d, ce_s, lam)
                rec["ce_sensitive"] = ce_s
            elif strategy == "is":
                term = is_contrastive_term(feats, y_all[idx], cfg.distance_cap)
                loss = ce_d - lam * term
                rec["contrastive"] = term
            else:
                loss = ce_d
            rec["loss"] = loss
            _guard(loss, "analyzer", epoch=epoch, batch=batches)

            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            optics.project_()
            step += 1
            if step_hook is not None:
                step_hook(optics, step)

            if strategy == "gap":
                adv_losses = []
                for _ in range(cfg.n_adv_steps):
                    aidx = torch.randint(0, n, (bs,), generator=adv_gen)
                    with torch.no_grad():
                        afeats = readout(optics, x_all[aidx])
                    adv_losses.append(adversary_step(afeats, y_all[aidx], adversary, adv_opt))
                rec["adversary"] = float(np.mean(adv_losses))

            rec = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in rec.items()}
            system.batch_log.append({"epoch": epoch, "batch": batches, **rec})
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1

        row = {"epoch": epoch, **{k: v / max(batches, 1) for k, v in sums.items()}}
        row["val_desired_acc"] = _acc(optics, analyzer, data.val, desired) if len(data.val) else math.nan
        if adversary is not None and len(data.val):
            row["val_adversary_acc"] = _acc(optics, adversary, data.val, sensitive)
        row["wall_time"] = time.perf_counter() - t0
        system.history.append(row)
        log.info("%s epoch %d %s", strategy, epoch,
                 " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))
        if on_epoch is not None:
            on_epoch(row, snapshot)

    system.kernel = optics.snapshot()
    analyzer.eval()
    if adversary is not None:
        adversary.eval()
    return system


def train_baseline(data: DatasetSplit, desired: str, analyzer_spec: ClassifierSpec,
                   geometry: SensorGeometry, cfg: TrainConfig = TrainConfig(), **kw) -> TrainedSystem:
    """Mask + analyzer trained for the desired attribute only."""
    return _run("baseline", data, desired, None, analyzer_spec, None, geometry, cfg, **kw)


def train_gap(data: DatasetSplit, pair: AttributePair, analyzer_spec: ClassifierSpec,
              adversary_spec: ClassifierSpec, geometry: SensorGeometry,
              cfg: GapConfig = GapConfig(), **kw) -> TrainedSystem:
    pair.check(data)
    return _run("gap", data, pair.desired, pair.sensitive, analyzer_spec, adversary_spec,
                geometry, cfg, **kw)


def train_is(data: DatasetSplit, pair: AttributePair, analyzer_spec: ClassifierSpec,
             geometry: SensorGeometry, cfg: IsConfig = IsConfig(), **kw) -> TrainedSystem:
    pair.check(data)
    return _run("is", data, pair.desired, pair.sensitive, analyzer_spec, None, geometry, cfg, **kw)


def grid_points(strategy: str, base, lambdas: Sequence[float] = GAP_LAMBDA_GRID,
                steps: Sequence[int] = GAP_STEPS_GRID) -> list:
    """Configs for the validation-tuning sweep, in grid order."""
    from dataclasses import replace

    if strategy == "gap":
        return [replace(base, lam=l, n_adv_steps=s) for l, s in itertools.product(lambdas, steps)]
    if strategy == "is":
        return [replace(base, lam=l) for l in lambdas]
    raise ConfigError(f"no tuning grid for strategy {strategy!r}")
