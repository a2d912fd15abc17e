"""Digital networks that sit behind the optical front-end.

Classifiers (analyzer, adversary, post-training attacker) map a 1-channel
sensor readout to two logits. The reconstructor inverts a readout back to the
scene with three size-preserving convolutions and one transposed convolution
that mirrors the optical geometry.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
from torchvision.models import mobilenet_v2

from . import _conv
from .optics import SensorGeometry, ShapeError

BACKBONES = ("small-cnn", "vgg11-like", "mobilenetv2-like")
INPUT_NORMS = ("frame", "none")

_VGG11 = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")


@dataclass(frozen=True)
class ClassifierSpec:
    backbone: str = "small-cnn"
    in_channels: int = 1
    num_classes: int = 2
    input_size: tuple[int, int] = (32, 32)
    input_norm: str = "frame"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.input_norm not in INPUT_NORMS:
            raise ValueError(f"unknown input_norm {self.input_norm!r}, expected one of {INPUT_NORMS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


@dataclass(frozen=True)
class ReconstructorSpec:
    conv_stages: int = 3
    channels: int = 64
    conv_kernel: int = 3
    backend: str = "auto"

    def to_dict(self) -> dict:
        return asdict(self)


class FrameNorm(nn.Module):
    """Per-frame zero mean, unit variance: a parameter-free auto-exposure.

    Mask readouts are a small modulation on a large, mask-dependent DC level;
    without this the classifiers stall at chance.
    """

    def __init__(self, eps: float = 1e-12):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        dims = tuple(range(1, x.ndim))
        x = x - x.mean(dim=dims, keepdim=True)
        return x / torch.sqrt(x.pow(2).mean(dim=dims, keepdim=True) + self.eps)


class SmallCNN(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, input_size: tuple[int, int]):
        super().__init__()
        h, w = input_size[0] // 4, input_size[1] // 4
        if h < 1 or w < 1:
            raise ValueError(f"small-cnn needs inputs of at least 4x4, got {input_size}")
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(32 * h * w, 64), nn.ReLU(),
                                  nn.Linear(64, num_classes))

    def forward(self, x):
        return self.head(self.features(x))


class VGG11Like(nn.Module):
    """VGG11 with batch norm, a 1-channel stem and a 2-layer head.

    Pooling stages that would shrink the map below 1x1 are dropped.
    """

    def __init__(self, in_channels: int, num_classes: int, input_size: tuple[int, int]):
        super().__init__()
        layers, c = [], in_channels
        h, w = input_size
        for v in _VGG11:
            if v == "M":
                if h // 2 < 1 or w // 2 < 1:
                    continue
                layers.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
            else:
                layers += [nn.Conv2d(c, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                c = v
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c * h * w, 512), nn.ReLU(inplace=True),
                                  nn.Linear(512, num_classes))

    def forward(self, x):
        return self.head(self.features(x))


def _mobilenet(in_channels: int, num_classes: int) -> nn.Module:
    net = mobilenet_v2(weights=None, num_classes=num_classes)
    stem = net.features[0][0]
    net.features[0][0] = nn.Conv2d(in_channels, stem.out_channels, stem.kernel_size,
                                   stride=stem.stride, padding=stem.padding, bias=False)
    nn.init.kaiming_normal_(net.features[0][0].weight, mode="fan_out")
    return net


def build_classifier(spec: ClassifierSpec, seed: int) -> nn.Module:
    """Freshly initialised classifier; identical seeds give identical weights."""
    if spec.backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {spec.backbone!r}, expected one of {BACKBONES}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.backbone == "small-cnn":
            net = SmallCNN(spec.in_channels, spec.num_classes, spec.input_size)
        elif spec.backbone == "vgg11-like":
            net = VGG11Like(spec.in_channels, spec.num_classes, spec.input_size)
        else:
            net = _mobilenet(spec.in_channels, spec.num_classes)
    if spec.input_norm == "frame":
        return nn.Sequential(FrameNorm(), net)
    return net


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def upconv_output_padding(geometry: SensorGeometry) -> tuple[int, int]:
    """Extra rows/cols the mirrored transposed conv needs to land on the input size.

    The transposed conv reuses the mask's kernel size, stride and padding, so it
    falls short of the scene size by ``(input + 2*pad - kernel) % stride``. A
    shortfall below the stride is made up with output padding; anything else has
    no integer setting and is rejected.
    """
    out = []
    for n, o, k in zip(geometry.input_size, geometry.output_size, geometry.kernel_size):
        raw = _conv.transposed_size(o, k, geometry.pad, geometry.stride)
        extra = n - raw
        if not 0 <= extra < geometry.stride:
            raise ShapeError(
                f"transposed conv (kernel {k}, stride {geometry.stride}, pad {geometry.pad}) maps "
                f"{o} -> {raw}, which cannot reach {n} with output padding < stride"
            )
        out.append(extra)
    return tuple(out)


class Reconstructor(nn.Module):
    def __init__(self, spec: ReconstructorSpec, geometry: SensorGeometry):
        super().__init__()
        if spec.conv_stages < 1 or spec.channels < 1 or spec.conv_kernel % 2 == 0:
            raise ValueError(f"invalid reconstructor spec {spec}")
        self.geometry = geometry
        self.feature_size = geometry.output_size
        self.output_padding = upconv_output_padding(geometry)
        self.backend = spec.backend
        layers, c = [], 1
        for _ in range(spec.conv_stages):
            layers += [nn.Conv2d(c, spec.channels, spec.conv_kernel, padding=spec.conv_kernel // 2),
                       nn.ReLU()]
            c = spec.channels
        self.convs = nn.Sequential(*layers)
        # affine input standardisation, fitted once the encoder is frozen
        self.register_buffer("in_shift", torch.zeros(()))
        self.register_buffer("in_scale", torch.ones(()))
        kh, kw = geometry.kernel_size
        # same layout as nn.ConvTranspose2d: (in, out, kh, kw)
        self.up_weight = nn.Parameter(torch.empty(c, 1, kh, kw))
        self.up_bias = nn.Parameter(torch.zeros(1))
        bound = 1.0 / (c * kh * kw) ** 0.5
        nn.init.uniform_(self.up_weight, -bound, bound)

    @torch.no_grad()
    def fit_input(self, feats: torch.Tensor):
        """Standardise inputs with the mean and std of a frozen encoder's readouts."""
        std = float(feats.std()) if feats.numel() > 1 else 0.0
        self.in_shift.fill_(float(feats.mean()))
        self.in_scale.fill_(1.0 / std if std > 0 else 1.0)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if tuple(feats.shape[-2:]) != self.feature_size:
            raise ShapeError(f"decoder expects {self.feature_size} features, got {tuple(feats.shape[-2:])}")
        h = self.convs((feats - self.in_shift) * self.in_scale)
        g = self.geometry
        out = _conv.correlate_transpose(h, self.up_weight, g.pad, g.stride, self.backend,
                                        output_padding=self.output_padding)
        return out + self.up_bias.view(1, -1, 1, 1)


def build_reconstructor(spec: ReconstructorSpec, geometry: SensorGeometry, seed: int) -> Reconstructor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Reconstructor(spec, geometry)
