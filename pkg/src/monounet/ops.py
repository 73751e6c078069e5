"""Differentiable tensor operations used by MonoUNet.

Tensors are ``torch.Tensor`` and the reverse-mode tape is torch autograd,
recorded dynamically on every forward pass. This module fixes the small
operation set the network is allowed to use and adds the argument checks
and conventions the rest of the package relies on:

* images are ``(N, C, H, W)``;
* complex tensors use torch's native interleaved layout (``complex64`` /
  ``complex128``: real and imaginary parts adjacent in memory);
* the forward FFT is unnormalized and the inverse carries the ``1/(H*W)``
  factor.
"""
from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor

INSTANCE_NORM_EPS = 1e-5


class BackwardError(RuntimeError):
    pass


def _check_4d(x: Tensor, name: str) -> None:
    if x.dim() != 4:
        raise ValueError(f"{name} must be 4-D (N, C, H, W), got shape {tuple(x.shape)}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    Output size is ``floor((H + 2*padding - kh) / stride) + 1`` per axis.
    """
    _check_4d(x, "input")
    if weight.dim() != 4:
        raise ValueError(f"weight must be 4-D (Cout, Cin, kh, kw), got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {weight.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match Cout={weight.shape[0]}")
    if weight.shape[2:] != (1, 1):
        # NHWC is several times faster for the tiny channel counts used here
        x = x.contiguous(memory_format=torch.channels_last)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """2x upsampling by a 2x2, stride-2 transposed convolution.

    ``weight`` is laid out ``(Cin, Cout, 2, 2)``. Every output pixel receives
    exactly one kernel tap, so the output is exactly twice the input extent.
    """
    _check_4d(x, "input")
    if stride != 2 or weight.dim() != 4 or tuple(weight.shape[2:]) != (2, 2):
        raise ValueError(
            f"conv_transpose2d supports only a 2x2 kernel with stride 2, "
            f"got kernel {tuple(weight.shape[2:])} stride {stride}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {weight.shape[0]}")
    x = x.contiguous(memory_format=torch.channels_last)
    return F.conv_transpose2d(x, weight, bias, stride=2)


def fft2(x: Tensor) -> Tensor:
    """Unnormalized 2-D DFT over the last two axes. Real input is promoted."""
    if x.dim() < 2:
        raise ValueError("fft2 needs at least two dimensions")
    return torch.fft.fft2(x, norm="backward")


def ifft2(x: Tensor) -> Tensor:
    """Inverse of :func:`fft2`, including the ``1/(H*W)`` normalization."""
    if x.dim() < 2:
        raise ValueError("ifft2 needs at least two dimensions")
    if not x.is_complex():
        raise TypeError("ifft2 expects a complex tensor")
    return torch.fft.ifft2(x, norm="backward")


def rfft2(x: Tensor) -> Tensor:
    """Half spectrum of a real signal (last axis keeps ``W//2 + 1`` bins)."""
    if x.is_complex():
        raise TypeError("rfft2 expects a real tensor")
    return torch.fft.rfft2(x, norm="backward")


def irfft2(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Real inverse of a Hermitian half spectrum back to ``size``."""
    return torch.fft.irfft2(x, s=size, norm="backward")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return F.leaky_relu(x, slope)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per (sample, channel) normalization over the spatial axes, biased variance.

    Two-pass (centre, then variance of the centred values). Values are first
    shifted by their top-left pixel, which leaves the result unchanged but
    maps a constant channel to exact zeros.
    """
    _check_4d(x, "input")
    shifted = x - x[:, :, :1, :1]
    centred = shifted - shifted.mean(dim=(2, 3), keepdim=True)
    y = centred * torch.rsqrt(centred.square().mean(dim=(2, 3), keepdim=True) + eps)
    if gamma is not None:
        y = y * gamma.view(1, -1, 1, 1)
    if beta is not None:
        y = y + beta.view(1, -1, 1, 1)
    return y


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    _check_4d(x, "input")
    if k == 1 and (stride is None or stride == 1):
        return x
    return F.avg_pool2d(x, k, stride if stride is not None else k)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ValueError("concat of an empty sequence")
    return torch.cat(list(xs), dim=axis)


add = torch.add
mul = torch.mul
div = torch.div
sqrt = torch.sqrt
log = torch.log
exp = torch.exp
arctan = torch.atan
arctan2 = torch.atan2


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every parameter reachable from a scalar ``loss``.

    A given loss may be differentiated once; a second call is rejected even
    when torch would still have the saved buffers around.
    """
    if loss.numel() != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_monounet_backward_done", False):
        raise BackwardError("backward already called on this loss; run a new forward pass")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any trainable parameter")
    loss.backward()
    loss._monounet_backward_done = True


# -- constrained parameters ---------------------------------------------------

def _softplus_inv(y: Tensor) -> Tensor:
    if not (y > 0).all():
        raise ValueError("softplus inverse needs y > 0")
    # log(exp(y) - 1), stable for large y
    return y + torch.log(-torch.expm1(-y))


class Constrained(nn.Module):
    """Scalar or vector parameter kept inside a constraint by a smooth map.

    ``kind`` is one of ``none``, ``positive`` (softplus), ``greater_than_one``
    (1 + softplus) or ``interval`` (``low + (high - low) * sigmoid``). The raw
    unconstrained value is what the optimizer sees.
    """

    KINDS = ("none", "positive", "greater_than_one", "interval")

    def __init__(self, value, kind: str = "none", low: float = 0.0, high: float = 1.0):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown constraint {kind!r}")
        self.kind, self.low, self.high = kind, float(low), float(high)
        value = torch.as_tensor(value)
        if not value.is_floating_point():
            value = value.to(torch.get_default_dtype())
        self.raw = nn.Parameter(self._inverse(value))

    def _inverse(self, v: Tensor) -> Tensor:
        if not torch.isfinite(v).all():
            raise ValueError("constrained parameter must be finite")
        if self.kind == "none":
            return v.clone()
        if self.kind == "positive":
            return _softplus_inv(v)
        if self.kind == "greater_than_one":
            return _softplus_inv(v - 1.0)
        t = (v - self.low) / (self.high - self.low)
        if not ((t > 0) & (t < 1)).all():
            raise ValueError(f"value {v.tolist()} outside ({self.low}, {self.high})")
        return torch.logit(t)

    def forward(self) -> Tensor:
        raw = self.raw
        if self.kind == "none":
            return raw
        if self.kind == "positive":
            return F.softplus(raw)
        if self.kind == "greater_than_one":
            return 1.0 + F.softplus(raw)
        return self.low + (self.high - self.low) * torch.sigmoid(raw)

    @property
    def value(self) -> Tensor:
        return self()

    def extra_repr(self) -> str:
        return f"kind={self.kind}"


# -- finite differences -------------------------------------------------------

def finite_difference(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``param``.

    ``param`` is perturbed in place, one entry at a time, and restored.
    Uses only forward evaluations, so it checks the taped gradients
    independently of the autograd machinery.
    """
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = fn().item()
            flat[i] = old - h
            fm = fn().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = analytic.detach().double(), numeric.detach().double()
    denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
    return float(((a - n).abs() / denom).max())
