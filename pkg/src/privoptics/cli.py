"""Command-line runner.

    privoptics prepare-data --config exp.yaml
    privoptics train --config exp.yaml [--seed 3]
    privoptics attack --config exp.yaml
    privoptics reconstruct --config exp.yaml
    privoptics evaluate --config exp.yaml --format markdown --plot
    privoptics export-mask --config exp.yaml --format png16
    privoptics reproduce-metrics

Every run lives in ``<out>/<strategy>-<fingerprint[:12]>``; prepared corpora in
``<out>/data-<fingerprint[:12]>``. Exit codes: 0 success, 2 configuration
error, 3 runtime failure (including training divergence), 4 artifact
integrity failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from . import checkpoint as ckpt
from .attacks import AttackReport, KernelMutated, reconstruct, save_grid, sensor_features, \
    train_post_adversary, train_reconstructor
from .config import ConfigInvalid, ExperimentConfig, load_config
from .data import CorpusError, DatasetSplit, load_attribute_corpus, load_corpus, save_corpus, \
    synthesize_toy, trivial_accuracy
from .evaluation import FORMATS, REFERENCE_FIGURES, EvalReport, EvaluationError, accuracy, \
    emit_report, replay_reference, round_half_up
from .optics import MASK_FORMATS, ShapeError, export_mask
from .training import ConfigError, TrainingDivergence, train_baseline, train_gap, train_is

log = logging.getLogger("privoptics")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INTEGRITY = 0, 2, 3, 4

SYSTEM_FILE = "system.safetensors"
ATTACK_FILE = "attack.json"
LOG_FILE = "train_log.jsonl"
REPLAY_TOLERANCE = 0.2


class RunLocked(RuntimeError):
    pass


@contextlib.contextmanager
def _locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise RunLocked(f"{directory} is in use by another process") from None
    try:
        yield
    finally:
        lock.release()


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _source_stamp(cfg: ExperimentConfig) -> dict:
    """What the prepared corpus depends on besides the config itself."""
    ds = cfg.dataset
    if ds.source == "toy":
        return {}
    stamp = {"attribute_table": _sha256_file(Path(ds.attribute_table))}
    if ds.partition:
        stamp["partition"] = _sha256_file(Path(ds.partition))
    return stamp


def _build_corpus(cfg: ExperimentConfig) -> DatasetSplit:
    ds = cfg.dataset
    if ds.source == "toy":
        return synthesize_toy(ds.toy.n, ds.toy.seed, size=cfg.geometry.input_size[0])
    partition = ds.partition if ds.partition else ((0.8, 0.1, 0.1), cfg.seed)
    attributes = ds.attributes or [cfg.pair.desired, cfg.pair.sensitive]
    return load_attribute_corpus(ds.image_dir, ds.attribute_table, partition, attributes, ds.workers)


def cmd_prepare_data(cfg: ExperimentConfig) -> tuple[Path, bool]:
    """Build and cache the corpus; returns (manifest path, whether anything was written)."""
    directory = cfg.data_dir()
    manifest = directory / "manifest.json"
    stamp = _source_stamp(cfg)
    if manifest.is_file():
        meta = json.loads(manifest.read_text())
        if meta.get("data_fingerprint") == cfg.data_fingerprint() and meta.get("sources") == stamp:
            try:
                load_corpus(directory, verify=True)
            except CorpusError as exc:
                raise ckpt.IntegrityError(str(exc)) from None
            print(f"up-to-date: {manifest}")
            return manifest, False
    with _locked(directory):
        data = _build_corpus(cfg)
        save_corpus(data, directory, {
            "data_fingerprint": cfg.data_fingerprint(),
            "dataset": cfg.dataset.model_dump(mode="json"),
            "sources": stamp,
            "schema_version": cfg.schema_version,
        })
    print(f"prepared {manifest} sizes={dict(zip(('train', 'val', 'test'), data.sizes()))}")
    return manifest, True


def _data(cfg: ExperimentConfig) -> DatasetSplit:
    directory = cfg.data_dir()
    if not (directory / "manifest.json").is_file():
        cmd_prepare_data(cfg)
    try:
        return load_corpus(directory, verify=True)
    except CorpusError as exc:
        raise ckpt.IntegrityError(str(exc)) from None


def _stamp(row: dict, fingerprint: str) -> dict:
    return {**row, "config_fingerprint": fingerprint}


def cmd_train(cfg: ExperimentConfig) -> Path:
    data = _data(cfg)
    run = cfg.run_dir()
    fp = cfg.fingerprint()
    geometry = cfg.sensor_geometry()
    aspec = cfg.analyzer_spec()
    advspec = cfg.adversary_spec() if cfg.strategy == "gap" else None
    scfg = cfg.strategy_config()
    every = cfg.train.checkpoint_every

    with _locked(run):
        (run / "config.yaml").write_text(cfg.to_yaml())
        log_path = run / LOG_FILE
        log_path.write_text("")

        def on_epoch(row, snapshot):
            with open(log_path, "a") as fh:
                fh.write(json.dumps(_stamp(row, fp), sort_keys=True) + "\n")
            if every and (row["epoch"] + 1) % every == 0:
                ckpt.save_system(run / f"epoch-{row['epoch'] + 1:04d}.safetensors", snapshot(),
                                 aspec, advspec, fp)

        kw = dict(backend=cfg.backend, on_epoch=on_epoch)
        if cfg.strategy == "gap":
            system = train_gap(data, cfg.attribute_pair(), aspec, advspec, geometry, scfg, **kw)
        elif cfg.strategy == "is":
            system = train_is(data, cfg.attribute_pair(), aspec, geometry, scfg, **kw)
        else:
            system = train_baseline(data, cfg.pair.desired, aspec, geometry, scfg, **kw)
        path = ckpt.save_system(run / SYSTEM_FILE, system, aspec, advspec, fp)
    acc = accuracy(system.analyzer, system.kernel, data.test, cfg.pair.desired, cfg.backend)
    print(f"{cfg.strategy}: test {cfg.pair.desired} accuracy {acc:.4f} -> {path}")
    return path


def _checkpoint_path(cfg: ExperimentConfig, given: Optional[str]) -> Path:
    return Path(given) if given else cfg.run_dir() / SYSTEM_FILE


def _check_fingerprint(meta: dict, cfg: ExperimentConfig, path: Path):
    if meta.get("config_fingerprint") != cfg.fingerprint():
        raise ckpt.IntegrityError(
            f"{path} was produced by config {str(meta.get('config_fingerprint'))[:12]!r}, "
            f"not by the given config {cfg.fingerprint()[:12]!r}"
        )


def cmd_attack(cfg: ExperimentConfig, checkpoint: Optional[str] = None) -> AttackReport:
    path = _checkpoint_path(cfg, checkpoint)
    kernel, meta = ckpt.load_kernel(path)
    _check_fingerprint(meta, cfg, path)
    data = _data(cfg)
    report = train_post_adversary(kernel, data, cfg.pair.sensitive, cfg.attacker_spec(),
                                  cfg.train_config(), cfg.backend)
    report.config_fingerprint = cfg.fingerprint()
    out = path.parent / ATTACK_FILE
    with _locked(path.parent):
        out.write_text(report.to_json() + "\n")
    print(f"attacker {cfg.pair.sensitive} accuracy {report.attacker_accuracy:.4f} "
          f"(trivial {report.trivial_accuracy:.4f}) -> {out}")
    return report


def cmd_reconstruct(cfg: ExperimentConfig, checkpoint: Optional[str] = None) -> dict:
    path = _checkpoint_path(cfg, checkpoint)
    kernel, meta = ckpt.load_kernel(path)
    _check_fingerprint(meta, cfg, path)
    data = _data(cfg)
    spec = cfg.reconstructor_spec()
    decoder, info = train_reconstructor(kernel, data, spec, cfg.decoder_config(), cfg.backend)
    run = path.parent
    k = min(cfg.reconstructor.grid_samples, len(data.val))
    with _locked(run):
        info["config_fingerprint"] = cfg.fingerprint()
        ckpt.save_decoder(run / "decoder.safetensors", decoder, spec,
                          {"config_fingerprint": cfg.fingerprint(),
                           "kernel_fingerprint": kernel.fingerprint()})
        if k:
            originals = data.val.images[:k]
            recons = reconstruct(decoder, sensor_features(kernel, data.val.subset(range(k)), cfg.backend))
            info["grid"] = str(save_grid(originals, recons, run / "reconstructions.png"))
        (run / "reconstruct.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"decoder val MSE {info['val_mse']:.6f} (pixel variance {info['val_pixel_variance']:.6f})")
    return info


def _load_attack(run: Path, system_fp: str) -> AttackReport:
    path = run / ATTACK_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path} missing; run `privoptics attack` first")
    report = AttackReport.from_json(path.read_text())
    if report.kernel_fingerprint != system_fp:
        raise ckpt.IntegrityError(f"{path} was computed on a different kernel than {run / SYSTEM_FILE}")
    return report


def _analyzer_and_attack(cfg: ExperimentConfig, run: Path, data: DatasetSplit) -> tuple[float, AttackReport]:
    system, meta = ckpt.load_system(run / SYSTEM_FILE)
    _check_fingerprint(meta, cfg, run / SYSTEM_FILE)
    attack = _load_attack(run, system.kernel.fingerprint())
    acc = accuracy(system.analyzer, system.kernel, data.test, cfg.pair.desired, cfg.backend)
    return acc, attack


def cmd_evaluate(cfg: ExperimentConfig, fmt: str = "json", plot: bool = False,
                 baseline_config: Optional[ExperimentConfig] = None) -> EvalReport:
    data = _data(cfg)
    run = cfg.run_dir()
    acc, attack = _analyzer_and_attack(cfg, run, data)
    base_cfg = baseline_config or cfg.model_copy(update={"strategy": "baseline"})
    base_acc = base_att = None
    base_fp = None
    if (base_cfg.run_dir() / SYSTEM_FILE).is_file() and (base_cfg.run_dir() / ATTACK_FILE).is_file():
        base_acc, base_attack = _analyzer_and_attack(base_cfg, base_cfg.run_dir(), data)
        base_att = base_attack.attacker_accuracy
        base_fp = base_cfg.fingerprint()
    else:
        log.warning("no baseline run with attack report at %s; reduction columns omitted",
                    base_cfg.run_dir())
    report = EvalReport.build(
        analyzer_acc=acc, attacker_acc=attack.attacker_accuracy,
        trivial_desired=trivial_accuracy(data.test.labels_of(cfg.pair.desired)),
        trivial_sensitive=trivial_accuracy(data.test.labels_of(cfg.pair.sensitive)),
        baseline_analyzer_acc=base_acc, baseline_attacker_acc=base_att,
        label=f"{cfg.analyzer.backbone} {cfg.strategy}", strategy=cfg.strategy,
        desired=cfg.pair.desired, sensitive=cfg.pair.sensitive, seed=cfg.seed,
        fingerprints={"config": cfg.fingerprint(), "baseline": base_fp,
                      "kernel": attack.kernel_fingerprint},
    )
    with _locked(run):
        paths = emit_report(report, run, fmt, plot)
    print(f"analyzer {acc:.4f} attacker {attack.attacker_accuracy:.4f} -> {', '.join(map(str, paths))}")
    return report


def cmd_export_mask(cfg: ExperimentConfig, fmt: str, checkpoint: Optional[str] = None,
                    dest: Optional[str] = None) -> Path:
    path = _checkpoint_path(cfg, checkpoint)
    kernel, _ = ckpt.load_kernel(path)
    ext = "csv" if fmt == "csv" else "png"
    target = Path(dest) if dest else path.parent / f"mask-{fmt}.{ext}"
    target.parent.mkdir(parents=True, exist_ok=True)
    out = export_mask(kernel, fmt, target)
    print(f"mask ({fmt}) -> {out}")
    return out


def cmd_reproduce_metrics(fmt: str = "markdown", out: Optional[str] = None) -> bool:
    reports = replay_reference()
    ok = True
    for r in reports:
        want = REFERENCE_FIGURES[r.strategy]
        for col, ref in want.items():
            got = getattr(r, col)
            hit = abs(got - ref) <= REPLAY_TOLERANCE
            ok &= hit
            print(f"{'PASS' if hit else 'FAIL'} {r.strategy} {col}: {round_half_up(got):.1f} "
                  f"(reference {ref:.1f}, tolerance {REPLAY_TOLERANCE})")
    if out:
        for p in emit_report(reports, out, fmt, stem="reproduce_metrics"):
            print(f"-> {p}")
    return ok



def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output root directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="privoptics", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare-data", parents=[common], help="build and cache the corpus")
    sub.add_parser("train", parents=[common], help="train mask + analyzer")
    for name, text in (("attack", "post-training attacker on a frozen mask"),
                       ("reconstruct", "train a decoder that inverts readouts")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--checkpoint", help="system or kernel checkpoint (default: the run's)")
    ev = sub.add_parser("evaluate", parents=[common], help="accuracies and relative content change")
    ev.add_argument("--format", choices=FORMATS, default="json")
    ev.add_argument("--plot", action="store_true", help="also write a bar chart")
    ev.add_argument("--baseline-config", help="config of the baseline run (default: same config, strategy baseline)")
    ex = sub.add_parser("export-mask", parents=[common], help="write the mask as PNG or CSV")
    ex.add_argument("--format", choices=MASK_FORMATS, default="png16")
    ex.add_argument("--checkpoint")
    ex.add_argument("--dest", help="output file (default: next to the checkpoint)")
    rp = sub.add_parser("reproduce-metrics", parents=[common],
                        help="replay published accuracies through the content metric")
    rp.add_argument("--format", choices=FORMATS, default="markdown")
    return p


def _config(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed, out=args.out)


def run(args) -> int:
    if args.command == "reproduce-metrics":
        return EXIT_OK if cmd_reproduce_metrics(args.format, args.out) else EXIT_RUNTIME
    cfg = _config(args)
    if args.command == "prepare-data":
        cmd_prepare_data(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "attack":
        cmd_attack(cfg, args.checkpoint)
    elif args.command == "reconstruct":
        cmd_reconstruct(cfg, args.checkpoint)
    elif args.command == "evaluate":
        base = load_config(args.baseline_config, seed=args.seed, out=args.out) if args.baseline_config else None
        cmd_evaluate(cfg, args.format, args.plot, base)
    elif args.command == "export-mask":
        cmd_export_mask(cfg, args.format, args.checkpoint, args.dest)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = run(args)
    except (ConfigInvalid, ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ckpt.IntegrityError, CorpusError, KernelMutated, FileNotFoundError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (TrainingDivergence, RunLocked, EvaluationError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
