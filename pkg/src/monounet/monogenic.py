"""Trainable multi-scale local phase (the Mono block).

Each of ``k`` log-Gabor filters has a learnable centre frequency, bandwidth
ratio and scale factor and is evaluated at ``m`` octave-like scales
``omega0 * r**-s``. For every filter/scale the band-passed image ``I_e`` and
its two Riesz components ``I_o1``, ``I_o2`` give the local phase
``arctan(I_e / |I_o|)``. A 1x1 convolution mixes the ``k*m`` phase maps
into ``k`` output channels.

Frequencies are in radians/pixel, laid out in FFT bin order over
``[-pi, pi)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import ops
from .ops import Constrained, Tensor

PHASE_EPS = 1e-8

OMEGA0_INIT = math.pi / 4
SIGMA_R_INIT = 0.55
SCALE_FACTOR_INIT = 2.0
SIGMA_R_RANGE = (0.1, 0.9)


@dataclass(frozen=True)
class FrequencyGrid:
    omega_x: Tensor
    omega_y: Tensor
    omega_mag: Tensor


@dataclass
class MonogenicResponse:
    """Per (filter, scale) maps, each shaped ``(N, k*m, H, W)``."""
    even: Tensor
    odd1: Tensor
    odd2: Tensor
    phase: Tensor


def frequency_grid(h: int, w: int, dtype=torch.float64, half: bool = False) -> FrequencyGrid:
    """Angular frequency grid matching ``fft2`` (or ``rfft2`` if ``half``) bins.

    Row index gives ``omega_y``, column index ``omega_x``. For the half grid
    the columns are the first ``w//2 + 1`` columns of the full grid, so the
    Nyquist column keeps ``omega_x = -pi``.
    """
    wy = 2 * math.pi * torch.fft.fftfreq(h, dtype=torch.float64)
    wx = 2 * math.pi * torch.fft.fftfreq(w, dtype=torch.float64)
    if half:
        wx = wx[: w // 2 + 1]
    oy, ox = torch.meshgrid(wy, wx, indexing="ij")
    mag = torch.sqrt(ox**2 + oy**2)
    return FrequencyGrid(ox.to(dtype), oy.to(dtype), mag.to(dtype))


def build_lgf(grid: FrequencyGrid, omega0: Tensor, sigma_r: Tensor, r: Tensor,
              m: int) -> Tensor:
    """Log-Gabor transfer function at scale ``m``; zero at the DC bin.

    ``omega0``, ``sigma_r`` and ``r`` may be 0-d or 1-d (one entry per
    filter); the result has shape ``omega0.shape + grid.shape``.
    """
    omega0, sigma_r, r = (torch.as_tensor(v, dtype=grid.omega_mag.dtype)
                          for v in (omega0, sigma_r, r))
    for name, v in (("omega0", omega0), ("sigma_r", sigma_r), ("r", r)):
        if not torch.isfinite(v).all():
            raise ValueError(f"log-Gabor parameter {name} is not finite")
    mag = grid.omega_mag
    dc = mag == 0
    safe = torch.where(dc, torch.ones_like(mag), mag)
    centre = (omega0 * r ** (-m))[..., None, None]
    spread = 2 * torch.log(sigma_r)[..., None, None] ** 2
    lgf = torch.exp(-torch.log(safe / centre) ** 2 / spread)
    return torch.where(dc, torch.zeros_like(lgf), lgf)


def riesz(grid: FrequencyGrid) -> tuple[Tensor, Tensor]:
    """Riesz transfer functions ``i*wx/|w|`` and ``i*wy/|w|``, zero at DC."""
    mag = grid.omega_mag
    safe = torch.where(mag == 0, torch.ones_like(mag), mag)
    r1 = torch.complex(torch.zeros_like(mag), grid.omega_x / safe)
    r2 = torch.complex(torch.zeros_like(mag), grid.omega_y / safe)
    return r1, r2


def _hermitian_riesz_gains(grid: FrequencyGrid, h: int, w: int) -> tuple[Tensor, Tensor]:
    """Imaginary gains of the Riesz filters with the Nyquist lines removed.

    Taking the real part after a full complex inverse FFT is the same as
    filtering with the Hermitian part of the filter. For ``i*wx/|w|`` that
    part is the filter itself except on the ``wx = -pi`` column (even ``w``),
    which is its own mirror and therefore cancels; likewise the ``wy = -pi``
    row for the second filter. With those lines zeroed the products stay
    Hermitian and the real-FFT path reproduces the full complex result.
    """
    mag = grid.omega_mag
    safe = torch.where(mag == 0, torch.ones_like(mag), mag)
    g1 = grid.omega_x / safe
    g2 = grid.omega_y / safe
    if w % 2 == 0:
        g1 = torch.where(grid.omega_x == -math.pi, torch.zeros_like(g1), g1)
    if h % 2 == 0:
        g2 = torch.where(grid.omega_y == -math.pi, torch.zeros_like(g2), g2)
    return g1, g2


class MonoBlock(nn.Module):
    """``k`` trainable log-Gabor filters at ``m`` scales plus a 1x1 combiner."""

    def __init__(self, k: int = 3, m: int = 3, omega0: float = OMEGA0_INIT,
                 sigma_r: float = SIGMA_R_INIT, r: float = SCALE_FACTOR_INIT):
        super().__init__()
        if k < 1 or m < 1:
            raise ValueError("need at least one filter and one scale")
        self.k, self.m = k, m
        self.omega0 = Constrained(torch.full((k,), omega0), "positive")
        self.sigma_r = Constrained(torch.full((k,), sigma_r), "interval", *SIGMA_R_RANGE)
        self.r = Constrained(torch.full((k,), r), "greater_than_one")
        self.combine_weight = nn.Parameter(torch.zeros(k, k * m, 1, 1))
        self.combine_bias = nn.Parameter(torch.zeros(k))
        self._grids: dict = {}

    @property
    def n_features(self) -> int:
        return self.k * self.m

    @staticmethod
    def param_count(k: int, m: int) -> int:
        return 3 * k + k * (k * m) + k

    def _grid(self, h: int, w: int, dtype) -> tuple[FrequencyGrid, Tensor, Tensor]:
        key = (h, w, dtype)
        if key not in self._grids:
            grid = frequency_grid(h, w, dtype=dtype, half=True)
            self._grids[key] = (grid, *_hermitian_riesz_gains(grid, h, w))
        return self._grids[key]

    def filters(self, h: int, w: int, dtype=None, half: bool = True) -> Tensor:
        """Stack of log-Gabor responses, shape ``(k*m, H, W')``, filter-major."""
        dtype = dtype or self.omega0.raw.dtype
        grid = self._grid(h, w, dtype)[0] if half else frequency_grid(h, w, dtype)
        omega0, sigma_r, r = self.omega0(), self.sigma_r(), self.r()
        per_scale = [build_lgf(grid, omega0, sigma_r, r, s) for s in range(self.m)]
        return torch.stack(per_scale, dim=1).reshape(self.k * self.m, *grid.omega_mag.shape)

    def _check_input(self, image: Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != 1:
            raise ValueError(
                f"Mono block expects a single-channel (N, 1, H, W) image, got {tuple(image.shape)}")

    def response(self, image: Tensor) -> MonogenicResponse:
        """Even/odd components and phase for every filter and scale."""
        self._check_input(image)
        n, _, h, w = image.shape
        _, g1, g2 = self._grid(h, w, image.dtype)
        lgf = self.filters(h, w, image.dtype)
        # fft(I_e) equals lgf * fft(I) exactly: the log-Gabor response is real
        # and radially even, so I_e is real and needs no second forward
        # transform. The odd branches are i*g*lgf*fft(I).
        zeros = torch.zeros_like(lgf)
        bank = torch.complex(torch.cat([lgf, zeros, zeros]),
                             torch.cat([zeros, g1 * lgf, g2 * lgf]))
        maps = ops.irfft2(ops.rfft2(image) * bank, (h, w))
        maps = maps.view(n, 3, self.n_features, h, w)
        even, odd1, odd2 = maps.unbind(1)
        return MonogenicResponse(even, odd1, odd2, local_phase_from(even, odd1, odd2))

    def local_phase(self, image: Tensor) -> Tensor:
        """``(N, k*m, H, W)`` phase maps in ``(-pi/2, pi/2]``."""
        return self.response(image).phase

    def forward(self, image: Tensor) -> Tensor:
        phase = self.local_phase(image)
        return ops.conv2d(phase, self.combine_weight, self.combine_bias)


def local_phase_from(even: Tensor, odd1: Tensor, odd2: Tensor, eps: float = PHASE_EPS) -> Tensor:
    """Signed ``arctan(I_e / sqrt(I_o1^2 + I_o2^2))``; 0 where both vanish."""
    odd_mag = ops.sqrt(odd1 * odd1 + odd2 * odd2 + eps * eps)
    return ops.arctan(ops.div(even, odd_mag))
