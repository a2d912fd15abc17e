"""Strided 2-D correlation engines.

Two interchangeable backends compute the same zero-padded, strided
cross-correlation (and its transposed counterpart):

``direct``
    ``torch.nn.functional.conv2d`` / ``conv_transpose2d``. Fastest for small
    kernels.
``fft``
    Zero-padded real FFTs with autograd flowing through ``torch.fft``. The cost
    no longer scales with the number of kernel taps, which is what makes a
    100x100 mask trainable on a CPU.

``backend="auto"`` picks ``fft`` once the kernel has more than
``FFT_MIN_TAPS`` taps.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

FFT_MIN_TAPS = 121

BACKENDS = ("auto", "direct", "fft")


def _fast_len(n: int) -> int:
    # powers of two keep pocketfft on its fastest path
    return 1 << (max(n, 1) - 1).bit_length()


def output_size(size: int, kernel: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _pick(backend: str, kh: int, kw: int) -> str:
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}, expected one of {BACKENDS}")
    if backend == "auto":
        return "fft" if kh * kw > FFT_MIN_TAPS else "direct"
    return backend


def correlate(x: torch.Tensor, w: torch.Tensor, pad: int, stride: int,
              backend: str = "auto") -> torch.Tensor:
    """Cross-correlate ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw).

    ``out[b, o, r, c] = sum_{ch,i,j} xpad[b, ch, stride*r + i, stride*c + j] * w[o, ch, i, j]``
    where ``xpad`` is ``x`` zero-padded by ``pad`` on every side.
    """
    kh, kw = w.shape[-2:]
    if _pick(backend, kh, kw) == "direct":
        return F.conv2d(x, w, stride=stride, padding=pad)

    H, W = x.shape[-2:]
    oh = output_size(H, kh, pad, stride)
    ow = output_size(W, kw, pad, stride)
    if oh < 1 or ow < 1:
        raise ValueError(f"empty correlation output ({oh}x{ow})")
    # circular lags -pad .. H+pad-kh must neither alias onto the support of the
    # full correlation nor onto each other
    nh = _fast_len(max(H + pad, kh, H + 2 * pad - kh + 1))
    nw = _fast_len(max(W + pad, kw, W + 2 * pad - kw + 1))
    X = torch.fft.rfft2(x, s=(nh, nw))
    Wf = torch.fft.rfft2(w, s=(nh, nw))
    prod = torch.einsum("bchw,ochw->bohw", X, Wf.conj())
    full = torch.fft.irfft2(prod, s=(nh, nw))
    full = torch.roll(full, shifts=(pad, pad), dims=(-2, -1))
    return full[..., : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]


def transposed_size(size: int, kernel: int, pad: int, stride: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def correlate_transpose(x: torch.Tensor, w: torch.Tensor, pad: int, stride: int,
                        backend: str = "auto", output_padding=(0, 0)) -> torch.Tensor:
    """Transposed correlation, ``x`` (B, Cin, h, w) and ``w`` (Cin, Cout, kh, kw).

    Same semantics as ``conv_transpose2d(x, w, stride=stride, padding=pad,
    output_padding=output_padding)``.
    """
    kh, kw = w.shape[-2:]
    ph, pw = output_padding
    if _pick(backend, kh, kw) == "direct":
        return F.conv_transpose2d(x, w, stride=stride, padding=pad, output_padding=(ph, pw))

    h, wd = x.shape[-2:]
    oh = transposed_size(h, kh, pad, stride) + ph
    ow = transposed_size(wd, kw, pad, stride) + pw
    if oh < 1 or ow < 1:
        raise ValueError(f"empty transposed output ({oh}x{ow})")
    uh, uw = (h - 1) * stride + 1, (wd - 1) * stride + 1
    if stride > 1:
        z = x.new_zeros(x.shape[:-2] + (uh, uw))
        z[..., ::stride, ::stride] = x
    else:
        z = x
    lh, lw = uh + kh - 1, uw + kw - 1
    nh = _fast_len(max(lh - pad, kh, uh, pad + oh))
    nw = _fast_len(max(lw - pad, kw, uw, pad + ow))
    Z = torch.fft.rfft2(z, s=(nh, nw))
    Wf = torch.fft.rfft2(w, s=(nh, nw))
    full = torch.fft.irfft2(torch.einsum("bchw,cohw->bohw", Z, Wf), s=(nh, nw))
    return full[..., pad : pad + oh, pad : pad + ow]
