"""Validation-driven sweep over the privacy weight (and adversary steps).

Each grid point trains a full system, then a fresh post-training attacker on
its frozen mask. The selected point is the one with the weakest validation
attacker among those whose validation analyzer stays within ``tolerance`` of
the baseline; test numbers are carried along for reporting only.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

from .attacks import train_post_adversary
from .data import AttributePair, DatasetSplit
from .evaluation import accuracy
from .models import ClassifierSpec
from .optics import SensorGeometry
from .training import (GAP_LAMBDA_GRID, GAP_STEPS_GRID, GapConfig, IsConfig, TrainConfig,
                       TrainedSystem, grid_points, train_gap, train_is)

log = logging.getLogger(__name__)


@dataclass
class GridResult:
    config: dict
    val_analyzer_acc: float
    val_attacker_acc: float
    test_analyzer_acc: float
    test_attacker_acc: float
    seconds: float
    kernel_fingerprint: str
    system: Optional[TrainedSystem] = field(default=None, repr=False, compare=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("system")
        return d


def evaluate_point(system: TrainedSystem, data: DatasetSplit, pair: AttributePair,
                   attacker_spec: ClassifierSpec, attacker_cfg: TrainConfig,
                   backend: str = "auto") -> dict:
    report = train_post_adversary(system.kernel, data, pair.sensitive, attacker_spec, attacker_cfg, backend)
    return {
        "val_analyzer_acc": accuracy(system.analyzer, system.kernel, data.val, pair.desired, backend),
        "test_analyzer_acc": accuracy(system.analyzer, system.kernel, data.test, pair.desired, backend),
        "val_attacker_acc": report.val_accuracy,
        "test_attacker_acc": report.attacker_accuracy,
    }


def select(results: Sequence[GridResult], baseline_val_acc: float, tolerance: float = 0.05) -> GridResult:
    """Weakest validation attacker among points that keep the analyzer within tolerance."""
    if not results:
        raise ValueError("no grid results to select from")
    ok = [r for r in results if r.val_analyzer_acc >= baseline_val_acc - tolerance - 1e-12]
    pool = ok or list(results)
    # stable: earlier grid points (smaller lambda) win ties
    return min(pool, key=lambda r: (r.val_attacker_acc, -r.val_analyzer_acc))


def sweep(strategy: str, data: DatasetSplit, pair: AttributePair, analyzer_spec: ClassifierSpec,
          geometry: SensorGeometry, base: Union[GapConfig, IsConfig], *,
          adversary_spec: Optional[ClassifierSpec] = None,
          attacker_spec: Optional[ClassifierSpec] = None,
          lambdas: Sequence[float] = GAP_LAMBDA_GRID, steps: Sequence[int] = GAP_STEPS_GRID,
          stop_when: Optional[Callable[[GridResult], bool]] = None,
          keep_systems: bool = True, backend: str = "auto") -> list[GridResult]:
    """Train every grid point in order; ``stop_when`` may end the sweep early."""
    attacker_spec = attacker_spec or analyzer_spec
    attacker_cfg = TrainConfig(epochs=base.epochs, lr=base.lr, batch_size=64, seed=base.seed)
    results = []
    for cfg in grid_points(strategy, base, lambdas, steps):
        t0 = time.perf_counter()
        if strategy == "gap":
            system = train_gap(data, pair, analyzer_spec, adversary_spec or analyzer_spec, geometry, cfg,
                               backend=backend)
        else:
            system = train_is(data, pair, analyzer_spec, geometry, cfg, backend=backend)
        scores = evaluate_point(system, data, pair, attacker_spec, attacker_cfg, backend)
        res = GridResult(config=asdict(cfg), seconds=time.perf_counter() - t0,
                         kernel_fingerprint=system.kernel.fingerprint(),
                         system=system if keep_systems else None, **scores)
        log.info("%s grid %s -> %s", strategy, res.config, {k: round(v, 4) for k, v in scores.items()})
        results.append(res)
        if stop_when is not None and stop_when(res):
            break
    return results
