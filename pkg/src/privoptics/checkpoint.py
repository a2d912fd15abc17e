"""On-disk checkpoints for trained systems and decoders.

Tensors go into a safetensors file. The string metadata carries a JSON
document (geometry, specs, config, history) and a sha256 over both the tensor
payload and that document, so any flipped byte is caught on load.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from .models import ClassifierSpec, Reconstructor, ReconstructorSpec, build_classifier, build_reconstructor
from .optics import OpticalKernel, SensorGeometry
from .training import TrainedSystem

FORMAT = "privoptics-checkpoint"
FORMAT_VERSION = 1


class IntegrityError(RuntimeError):
    """A checkpoint or artifact failed its checksum or could not be parsed."""


def _digest(tensors: dict[str, torch.Tensor], meta_json: str) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    h.update(meta_json.encode())
    return h.hexdigest()


def save_tensors(path: Union[str, Path], tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    """Write tensors plus checksummed metadata; atomic via rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    meta_json = json.dumps({"format": FORMAT, "version": FORMAT_VERSION, **meta}, sort_keys=True)
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata={"meta": meta_json, "sha256": _digest(tensors, meta_json)})
    os.replace(tmp, path)
    return path


def load_tensors(path: Union[str, Path]) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        tensors = load_file(str(path))
        with safe_open(str(path), framework="pt") as fh:
            header = fh.metadata() or {}
    except (SafetensorError, ValueError, OSError, RuntimeError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from exc
    meta_json, digest = header.get("meta"), header.get("sha256")
    if meta_json is None or digest is None:
        raise IntegrityError(f"{path}: checkpoint metadata missing")
    if _digest(tensors, meta_json) != digest:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupted")
    try:
        meta = json.loads(meta_json)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: metadata is not valid JSON") from exc
    if meta.get("format") != FORMAT:
        raise IntegrityError(f"{path}: not a {FORMAT} file")
    return tensors, meta


def _prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _unprefixed(prefix: str, tensors: dict) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def save_system(path: Union[str, Path], system: TrainedSystem, analyzer_spec: ClassifierSpec,
                adversary_spec: Optional[ClassifierSpec] = None, fingerprint: str = "",
                extra: Optional[dict] = None) -> Path:
    tensors = {"kernel": torch.from_numpy(system.kernel.weights.copy())}
    tensors.update(_prefixed("analyzer", system.analyzer.state_dict()))
    if system.adversary is not None:
        tensors.update(_prefixed("adversary", system.adversary.state_dict()))
    meta = {
        "kind": "system",
        "strategy": system.strategy,
        "geometry": system.kernel.geometry.to_dict(),
        "kernel_fingerprint": system.kernel.fingerprint(),
        "analyzer_spec": analyzer_spec.to_dict(),
        "adversary_spec": adversary_spec.to_dict() if adversary_spec is not None else None,
        "config": system.config,
        "config_fingerprint": fingerprint,
        "history": system.history,
        **(extra or {}),
    }
    return save_tensors(path, tensors, meta)


def load_system(path: Union[str, Path]) -> tuple[TrainedSystem, dict]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "system":
        raise IntegrityError(f"{path}: expected a trained-system checkpoint, got {meta.get('kind')!r}")
    geometry = SensorGeometry.from_dict(meta["geometry"])
    kernel = OpticalKernel(tensors["kernel"].numpy(), geometry)
    if kernel.fingerprint() != meta["kernel_fingerprint"]:
        raise IntegrityError(f"{path}: kernel fingerprint mismatch")
    aspec = ClassifierSpec(**meta["analyzer_spec"])
    analyzer = build_classifier(aspec, 0)
    analyzer.load_state_dict(_unprefixed("analyzer", tensors))
    analyzer.eval()
    adversary = None
    if meta.get("adversary_spec"):
        adversary = build_classifier(ClassifierSpec(**meta["adversary_spec"]), 0)
        adversary.load_state_dict(_unprefixed("adversary", tensors))
        adversary.eval()
    system = TrainedSystem(meta["strategy"], kernel, analyzer, adversary,
                           history=meta.get("history", []), config=meta.get("config", {}))
    return system, meta


def save_kernel(path: Union[str, Path], kernel: OpticalKernel, fingerprint: str = "",
                extra: Optional[dict] = None) -> Path:
    """A bare mask checkpoint (no digital networks)."""
    meta = {"kind": "kernel", "geometry": kernel.geometry.to_dict(),
            "kernel_fingerprint": kernel.fingerprint(), "config_fingerprint": fingerprint,
            **(extra or {})}
    return save_tensors(path, {"kernel": torch.from_numpy(kernel.weights.copy())}, meta)


def load_kernel(path: Union[str, Path]) -> tuple[OpticalKernel, dict]:
    """Mask from either a bare-kernel or a full-system checkpoint."""
    tensors, meta = load_tensors(path)
    if "kernel" not in tensors:
        raise IntegrityError(f"{path}: checkpoint has no kernel")
    kernel = OpticalKernel(tensors["kernel"].numpy().astype(np.float32),
                           SensorGeometry.from_dict(meta["geometry"]))
    if kernel.fingerprint() != meta.get("kernel_fingerprint"):
        raise IntegrityError(f"{path}: kernel fingerprint mismatch")
    return kernel, meta


def save_decoder(path: Union[str, Path], decoder: Reconstructor, spec: ReconstructorSpec,
                 meta: dict) -> Path:
    full = {"kind": "decoder", "geometry": decoder.geometry.to_dict(), "decoder_spec": spec.to_dict(), **meta}
    return save_tensors(path, decoder.state_dict(), full)


def load_decoder(path: Union[str, Path]) -> tuple[Reconstructor, dict]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "decoder":
        raise IntegrityError(f"{path}: expected a decoder checkpoint")
    spec = ReconstructorSpec(**meta["decoder_spec"])
    decoder = build_reconstructor(spec, SensorGeometry.from_dict(meta["geometry"]), 0)
    decoder.load_state_dict(tensors)
    decoder.eval()
    return decoder, meta
