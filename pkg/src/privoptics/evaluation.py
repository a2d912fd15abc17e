"""Headline metrics: accuracies between the trivial floor and the baseline ceiling.

Relative content change is the affine normalisation

    100 * (baseline - privacy) / (baseline - trivial)

which is 0 when a privacy strategy changes nothing and 100 when it drives a
classifier down to the majority-class floor. It is a derived metric and every
report says so.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch

from .data import SampleSet
from .optics import OpticalKernel, OpticalLayer
from .training import predict

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FORMATS = ("json", "csv", "markdown")
METRIC_NOTE = "derived metric: 100*(baseline-privacy)/(baseline-trivial)"

NUMERIC_COLUMNS = (
    "analyzer_acc", "attacker_acc", "baseline_analyzer_acc", "baseline_attacker_acc",
    "trivial_desired", "trivial_sensitive", "desired_content_loss_pct",
    "sensitive_content_reduction_pct",
)
CSV_COLUMNS = ("label", "strategy", "desired", "sensitive") + NUMERIC_COLUMNS + ("seed", "fingerprints", "note")

# Published full-scale accuracies (VGG11 hybrid, smiling vs. gender) and the
# relative figures quoted alongside them. Used by the replay self-test.
REFERENCE_ACCURACIES = {
    "trivial_desired": 0.500,
    "trivial_sensitive": 0.613,
    "baseline_analyzer_acc": 0.895,
    "baseline_attacker_acc": 0.943,
    "gap": {"analyzer_acc": 0.895 - 0.018, "attacker_acc": 0.943 - 0.194},
    "is": {"analyzer_acc": 0.895 - 0.029, "attacker_acc": 0.943 - 0.215},
}
REFERENCE_FIGURES = {
    "gap": {"sensitive_content_reduction_pct": 58.8, "desired_content_loss_pct": 4.5},
    "is": {"sensitive_content_reduction_pct": 65.1, "desired_content_loss_pct": 7.3},
}


class EvaluationError(ValueError):
    pass


def round_half_up(value: float, places: int = 1) -> float:
    """Decimal rounding with ties away from zero (2.25 -> 2.3), not banker's."""
    if not math.isfinite(value):
        return value
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def content_reduction(acc_privacy: float, acc_baseline: float, acc_trivial: float) -> float:
    """Percentage of the above-floor accuracy that a privacy strategy removed.

    May be negative or exceed 100; it is returned as computed.
    """
    if not acc_baseline > acc_trivial:
        raise EvaluationError(
            f"content reduction undefined: baseline accuracy {acc_baseline} is not above the "
            f"trivial bound {acc_trivial}"
        )
    return 100.0 * (acc_baseline - acc_privacy) / (acc_baseline - acc_trivial)


def accuracy(model: torch.nn.Module, kernel: OpticalKernel, split: SampleSet, attribute: str,
             backend: str = "auto") -> float:
    """Fraction of correct argmax predictions of ``model`` behind ``kernel``."""
    if len(split) == 0:
        raise EvaluationError("accuracy of an empty split is undefined")
    optics = OpticalLayer(kernel, backend).requires_grad_(False)
    labels = split.labels_of(attribute)
    return float(np.mean(predict(optics, model, split) == labels))


def _relative(acc: float, baseline: float, trivial: float, what: str) -> Optional[float]:
    try:
        return content_reduction(acc, baseline, trivial)
    except EvaluationError as exc:
        log.warning("%s column omitted: %s", what, exc)
        return None


def _fraction(name: str, v: Optional[float]):
    if v is not None and not (0.0 <= v <= 1.0):
        raise EvaluationError(f"{name} must be a fraction in [0, 1], got {v}")


@dataclass
class EvalReport:
    analyzer_acc: float
    attacker_acc: float
    baseline_analyzer_acc: Optional[float]
    baseline_attacker_acc: Optional[float]
    trivial_desired: float
    trivial_sensitive: float
    desired_content_loss_pct: Optional[float] = None
    sensitive_content_reduction_pct: Optional[float] = None
    label: str = ""
    strategy: str = ""
    desired: str = ""
    sensitive: str = ""
    seed: Optional[int] = None
    fingerprints: dict = field(default_factory=dict)
    note: str = METRIC_NOTE
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in NUMERIC_COLUMNS[:6]:
            _fraction(name, getattr(self, name))

    @classmethod
    def build(cls, analyzer_acc: float, attacker_acc: float, trivial_desired: float,
              trivial_sensitive: float, baseline_analyzer_acc: Optional[float] = None,
              baseline_attacker_acc: Optional[float] = None, **meta) -> "EvalReport":
        """Fill the relative columns from the bounds; omitted without a baseline."""
        loss = red = None
        if baseline_analyzer_acc is None or baseline_attacker_acc is None:
            log.warning("no baseline given; relative content columns omitted")
        else:
            loss = _relative(analyzer_acc, baseline_analyzer_acc, trivial_desired, "desired")
            red = _relative(attacker_acc, baseline_attacker_acc, trivial_sensitive, "sensitive")
        return cls(analyzer_acc=analyzer_acc, attacker_acc=attacker_acc,
                   baseline_analyzer_acc=baseline_analyzer_acc,
                   baseline_attacker_acc=baseline_attacker_acc,
                   trivial_desired=trivial_desired, trivial_sensitive=trivial_sensitive,
                   desired_content_loss_pct=loss, sensitive_content_reduction_pct=red, **meta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise EvaluationError(f"unknown report fields {sorted(unknown)}")
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise EvaluationError(f"unsupported report schema {d['schema_version']}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return str(v)


def _pct(v) -> str:
    return "n/a" if v is None else f"{round_half_up(v):.1f}"


def _markdown(reports: Sequence[EvalReport]) -> str:
    head = ["label"] + list(NUMERIC_COLUMNS)
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in reports:
        row = [r.label or r.strategy or "-"]
        for c in NUMERIC_COLUMNS:
            v = getattr(r, c)
            if c.endswith("_pct"):
                row.append(_pct(v))
            else:
                row.append("n/a" if v is None else f"{100 * v:.1f}")
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append(f"Accuracies in percent. Relative columns are a {METRIC_NOTE}.")
    return "\n".join(lines) + "\n"


def _plot(reports: Sequence[EvalReport], path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    names = [r.label or r.strategy or str(i) for i, r in enumerate(reports)]
    for ax, (title, acc, base, triv) in zip(axes, [
        ("desired (analyzer)", "analyzer_acc", "baseline_analyzer_acc", "trivial_desired"),
        ("sensitive (attacker)", "attacker_acc", "baseline_attacker_acc", "trivial_sensitive"),
    ]):
        vals = [100 * getattr(r, acc) for r in reports]
        ax.bar(names, vals, color="tab:blue")
        bases = [getattr(r, base) for r in reports if getattr(r, base) is not None]
        if bases:
            ax.axhline(100 * bases[0], color="tab:green", ls="--", lw=1, label="baseline")
        floor = 100 * getattr(reports[0], triv)
        ax.axhline(floor, color="tab:red", lw=1, label="trivial")
        ax.set_ylim(floor - 2, 100)
        ax.set_title(title)
        ax.set_ylabel("accuracy (%)")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(reports: Union[EvalReport, Iterable[EvalReport]], out_dir: Union[str, Path],
                fmt: str = "json", plot: bool = False, stem: str = "eval") -> list[Path]:
    """Write reports as ``<stem>.json|csv|md`` (plus ``<stem>.png`` when ``plot``)."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    reports = list(reports)
    if not reports:
        raise EvaluationError("emit_report needs at least one report")
    if fmt not in FORMATS:
        raise EvaluationError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        path = out / f"{stem}.json"
        payload = {"schema_version": SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        path = out / f"{stem}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in reports:
                w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])
    else:
        path = out / f"{stem}.md"
        path.write_text(_markdown(reports))
    written.append(path)
    if plot:
        png = out / f"{stem}.png"
        _plot(reports, png)
        written.append(png)
    return written


def load_reports(path: Union[str, Path]) -> list[EvalReport]:
    payload = json.loads(Path(path).read_text())
    return [EvalReport.from_dict(d) for d in payload["reports"]]


def replay_reference() -> list[EvalReport]:
    """Run the published full-scale accuracies through the metric."""
    ref = REFERENCE_ACCURACIES
    out = []
    for strategy in ("gap", "is"):
        out.append(EvalReport.build(
            analyzer_acc=ref[strategy]["analyzer_acc"],
            attacker_acc=ref[strategy]["attacker_acc"],
            trivial_desired=ref["trivial_desired"],
            trivial_sensitive=ref["trivial_sensitive"],
            baseline_analyzer_acc=ref["baseline_analyzer_acc"],
            baseline_attacker_acc=ref["baseline_attacker_acc"],
            label=f"vgg11 {strategy}", strategy=strategy, desired="Smiling", sensitive="Male",
        ))
    return out
