"""Amplitude-mask optical front-end.

An incoherent scene passing through a transmissive mask and relay optics lands
on the sensor as the correlation of the scene with the mask. On the discrete
grid this is a zero-padded, strided cross-correlation whose stride is the
sensor pixel pitch. The flip of a true convolution is absorbed by the learned
mask, and the magnification scalars are absorbed by the grid.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image
from torch import nn

from . import _conv

ArrayLike = Union[np.ndarray, torch.Tensor]

MASK_FORMATS = ("png8", "png16", "csv")
INIT_SCHEMES = ("uniform", "midpoint-noise")


class ShapeError(ValueError):
    """Image or kernel dimensions disagree with the sensor geometry."""


@dataclass(frozen=True)
class SensorGeometry:
    """Mask resolution, scene sampling, zero padding and sensor pitch.

    ``radial_profile`` optionally samples the radial attenuation T(r) as
    ``(radii, values)`` with r in mask pixels from the mask centre; it defaults
    to a constant 1. ``scale_alpha``/``scale_gamma`` are the physical
    magnifications and are carried for bookkeeping only.
    """

    kernel_size: tuple[int, int] = (100, 100)
    input_size: tuple[int, int] = (64, 64)
    pad: int = 49
    stride: int = 2
    radial_profile: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None
    scale_alpha: float = 1.0
    scale_gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kernel_size", tuple(int(v) for v in self.kernel_size))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.radial_profile is not None:
            radii, values = self.radial_profile
            radii = tuple(float(r) for r in radii)
            values = tuple(float(v) for v in values)
            if len(radii) != len(values) or len(radii) < 1:
                raise ValueError("radial_profile needs matching, non-empty radii and values")
            if any(b <= a for a, b in zip(radii, radii[1:])):
                raise ValueError("radial_profile radii must be strictly increasing")
            if any(v < 0 or v > 1 for v in values):
                raise ValueError("radial_profile values must lie in [0, 1]")
            object.__setattr__(self, "radial_profile", (radii, values))
        if len(self.kernel_size) != 2 or len(self.input_size) != 2:
            raise ValueError("kernel_size and input_size must be (height, width)")
        if min(self.kernel_size) < 1 or min(self.input_size) < 1:
            raise ValueError(f"sizes must be positive: {self.kernel_size}, {self.input_size}")
        if self.pad < 0 or self.stride < 1:
            raise ValueError(f"need pad >= 0 and stride >= 1, got pad={self.pad} stride={self.stride}")
        oh, ow = self._raw_output()
        if oh < 1 or ow < 1:
            raise ValueError(
                f"geometry yields empty sensor output {oh}x{ow} "
                f"(input {self.input_size}, kernel {self.kernel_size}, pad {self.pad})"
            )

    def _raw_output(self) -> tuple[int, int]:
        return tuple(
            _conv.output_size(n, k, self.pad, self.stride)
            for n, k in zip(self.input_size, self.kernel_size)
        )

    @property
    def output_size(self) -> tuple[int, int]:
        return self._raw_output()

    @property
    def readout_scale(self) -> float:
        """Sensor gain turning summed intensity into mean transmitted intensity."""
        return 1.0 / (self.kernel_size[0] * self.kernel_size[1])

    def transmission(self) -> Optional[np.ndarray]:
        """T(r) sampled on the mask grid, or ``None`` for the constant-1 default."""
        if self.radial_profile is None:
            return None
        kh, kw = self.kernel_size
        rr, cc = np.meshgrid(np.arange(kh) - (kh - 1) / 2, np.arange(kw) - (kw - 1) / 2,
                             indexing="ij")
        radii, values = self.radial_profile
        return np.interp(np.hypot(rr, cc), radii, values).astype(np.float32)

    def to_dict(self) -> dict:
        return {
            "kernel_size": list(self.kernel_size),
            "input_size": list(self.input_size),
            "pad": self.pad,
            "stride": self.stride,
            "radial_profile": None if self.radial_profile is None
            else [list(self.radial_profile[0]), list(self.radial_profile[1])],
            "scale_alpha": self.scale_alpha,
            "scale_gamma": self.scale_gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorGeometry":
        d = dict(d)
        if d.get("radial_profile") is not None:
            d["radial_profile"] = tuple(tuple(v) for v in d["radial_profile"])
        return cls(**d)


@dataclass(frozen=True)
class OpticalKernel:
    """Immutable snapshot of a mask: transmissions in [0, 1] plus geometry."""

    weights: np.ndarray
    geometry: SensorGeometry = field(default_factory=SensorGeometry)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float32, copy=True)
        if w.shape != self.geometry.kernel_size:
            raise ShapeError(f"weights {w.shape} != geometry kernel_size {self.geometry.kernel_size}")
        if not np.all(np.isfinite(w)) or w.min(initial=0.0) < 0.0 or w.max(initial=0.0) > 1.0:
            raise ValueError("mask transmissions must be finite and within [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.weights.shape).encode())
        h.update(np.ascontiguousarray(self.weights, dtype="<f4").tobytes())
        return h.hexdigest()

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.weights.copy())

    def with_weights(self, weights: np.ndarray) -> "OpticalKernel":
        return replace(self, weights=weights)


def project_physical(weights: ArrayLike) -> ArrayLike:
    """Clamp transmissions into the physically realisable box [0, 1]."""
    if isinstance(weights, torch.Tensor):
        return weights.clamp(0.0, 1.0)
    return np.clip(np.asarray(weights, dtype=float), 0.0, 1.0)


def _apply(x: torch.Tensor, weights: torch.Tensor, geometry: SensorGeometry,
           backend: str) -> torch.Tensor:
    t = geometry.transmission()
    if t is not None:
        weights = weights * torch.from_numpy(t).to(weights.dtype)
    return _conv.correlate(x, weights[None, None], geometry.pad, geometry.stride, backend)


def _check_image(shape: Sequence[int], geometry: SensorGeometry):
    if tuple(shape[-2:]) != geometry.input_size:
        raise ShapeError(f"image size {tuple(shape[-2:])} != geometry input_size {geometry.input_size}")


def optical_forward(image: ArrayLike, kernel: OpticalKernel, backend: str = "auto") -> ArrayLike:
    """Sensor intensity for one image (H, W) or a batch (B, H, W) / (B, 1, H, W).

    Returns the same container type it was given. Tensors keep their autograd
    graph, so gradients reach the image; use :class:`OpticalLayer` to train
    the mask itself.
    """
    as_numpy = not isinstance(image, torch.Tensor)
    x = torch.as_tensor(np.asarray(image, dtype=np.float32)) if as_numpy else image
    _check_image(x.shape, kernel.geometry)
    ndim = x.ndim
    if ndim == 2:
        x = x[None, None]
    elif ndim == 3:
        x = x[:, None]
    elif ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (H, W), (B, H, W) or (B, 1, H, W); got {tuple(x.shape)}")
    out = _apply(x, kernel.tensor().to(x.dtype), kernel.geometry, backend)
    if ndim == 2:
        out = out[0, 0]
    elif ndim == 3:
        out = out[:, 0]
    return out.detach().numpy() if as_numpy else out


def optical_forward_reference(image: np.ndarray, kernel: OpticalKernel) -> np.ndarray:
    """Brute-force loop version of :func:`optical_forward` for a single image.

    Float64 accumulation, no vectorisation, nothing shared with the fast path.
    Only meant for small instances.
    """
    img = np.asarray(image, dtype=np.float64)
    g = kernel.geometry
    if img.ndim != 2 or img.shape != g.input_size:
        raise ShapeError(f"image shape {img.shape} != geometry input_size {g.input_size}")
    kh, kw = g.kernel_size
    H, W = img.shape
    w = np.asarray(kernel.weights, dtype=np.float64)
    if g.radial_profile is not None:
        radii, values = g.radial_profile
        w = w.copy()
        for i in range(kh):
            for j in range(kw):
                r = ((i - (kh - 1) / 2) ** 2 + (j - (kw - 1) / 2) ** 2) ** 0.5
                w[i, j] *= np.interp(r, radii, values)
    oh = (H + 2 * g.pad - kh) // g.stride + 1
    ow = (W + 2 * g.pad - kw) // g.stride + 1
    out = np.zeros((oh, ow), dtype=np.float64)
    for r in range(oh):
        for c in range(ow):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    y = r * g.stride + i - g.pad
                    x = c * g.stride + j - g.pad
                    if 0 <= y < H and 0 <= x < W:
                        acc += img[y, x] * w[i, j]
            out[r, c] = acc
    return out


def init_kernel(geometry: SensorGeometry, seed: int, scheme: str = "midpoint-noise") -> OpticalKernel:
    """Seeded starting mask.

    ``midpoint-noise`` draws 0.5 + U(-0.1, 0.1) so projected gradients start
    away from the clamp boundaries; ``uniform`` draws U(0, 1).
    """
    if not isinstance(geometry, SensorGeometry):
        raise TypeError("geometry must be a SensorGeometry")
    rng = np.random.default_rng(seed)
    if scheme == "midpoint-noise":
        w = 0.5 + rng.uniform(-0.1, 0.1, size=geometry.kernel_size)
    elif scheme == "uniform":
        w = rng.uniform(0.0, 1.0, size=geometry.kernel_size)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}, expected one of {INIT_SCHEMES}")
    return OpticalKernel(w.astype(np.float32), geometry)


class OpticalLayer(nn.Module):
    """Trainable mask. Call :meth:`project_` after every optimizer step."""

    def __init__(self, kernel: OpticalKernel, backend: str = "auto"):
        super().__init__()
        self.geometry = kernel.geometry
        self.backend = backend
        self.weight = nn.Parameter(kernel.tensor())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x[:, None]
        _check_image(x.shape, self.geometry)
        return _apply(x, self.weight, self.geometry, self.backend)

    @torch.no_grad()
    def project_(self):
        self.weight.clamp_(0.0, 1.0)

    def snapshot(self) -> OpticalKernel:
        return OpticalKernel(self.weight.detach().cpu().numpy(), self.geometry)


def _quantize(weights: np.ndarray, bits: int) -> np.ndarray:
    top = (1 << bits) - 1
    # round half up
    return np.floor(np.asarray(weights, dtype=np.float64) * top + 0.5).astype(np.int64)


def export_mask(kernel: OpticalKernel, fmt: str, path: Union[str, Path]) -> Path:
    """Write the mask for an SLM or photomask vendor.

    ``csv`` is lossless (row-major, ``\\n`` rows). ``png8``/``png16`` store
    ``round(w * (2**bits - 1))`` as grayscale.
    """
    if fmt not in MASK_FORMATS:
        raise ValueError(f"unknown mask format {fmt!r}, expected one of {MASK_FORMATS}")
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in kernel.weights:
                # 9 significant digits round-trip any float32
                writer.writerow([f"{float(v):.9g}" for v in row])
    elif fmt == "png8":
        Image.fromarray(_quantize(kernel.weights, 8).astype(np.uint8)).save(path, format="PNG")
    else:
        Image.fromarray(_quantize(kernel.weights, 16).astype(np.uint16)).save(path, format="PNG")
    return path


def load_mask(path: Union[str, Path], geometry: Optional[SensorGeometry] = None) -> OpticalKernel:
    """Read a mask written by :func:`export_mask`, dequantizing PNGs."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            w = np.array([[float(v) for v in row] for row in csv.reader(fh) if row], dtype=np.float32)
    else:
        with Image.open(path) as im:
            bits = 8 if im.mode == "L" else 16
            arr = np.array(im)
        w = (arr.astype(np.float64) / ((1 << bits) - 1)).astype(np.float32)
    if geometry is None:
        geometry = SensorGeometry(kernel_size=w.shape, input_size=w.shape, pad=0, stride=1)
    return OpticalKernel(w, geometry)
