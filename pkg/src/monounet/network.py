"""MonoUNet topology, ablation variants and size/cost accounting.

Backbone: nnU-Net style encoder with two ``conv3x3 -> InstanceNorm ->
LeakyReLU`` blocks per stage (the first one strided from stage 2 on), a
decoder with a single block per stage after a 2x2 transposed-conv
upsampling and skip concatenation, and a final 1x1 conv + sigmoid. Every
stage has the same width ``C``.

Variants differ only in how phase features are injected after the second
block of the listed encoder stages::

    base         no Mono block
    e1           1 filter, 1 scale, stage 1, additive
    e123         3 filters, 1 scale, stages 1-3, additive
    e123v2       3 filters, 3 scales, stages 1-3, additive
    e123v2gated  3 filters, 3 scales, stages 1-3, enc + alpha * proj(phase)

``full`` is an alias of ``e123v2gated``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import ops
from .monogenic import MonoBlock
from .ops import Tensor

LEAKY_SLOPE = 0.01
NORM_FLOPS_PER_ELEMENT = 7  # mean, centre, square, variance sum, scale, affine (2)


@dataclass(frozen=True)
class VariantDef:
    k: int
    m: int
    gate_stages: tuple[int, ...]
    gated: bool


VARIANTS: dict[str, VariantDef | None] = {
    "base": None,
    "e1": VariantDef(1, 1, (1,), False),
    "e123": VariantDef(3, 1, (1, 2, 3), False),
    "e123v2": VariantDef(3, 3, (1, 2, 3), False),
    "e123v2gated": VariantDef(3, 3, (1, 2, 3), True),
}
ALIASES = {"full": "e123v2gated", "monounet": "e123v2gated", "monounetbase": "base"}


def canonical_variant(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    key = ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)} or 'full'")
    return key


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "full"
    stages: int = 7
    channels: int = 2
    input_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.stages < 2 or self.channels < 1:
            raise ValueError("need at least 2 stages and 1 channel")
        if self.input_size % 2 ** (self.stages - 1):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{self.stages - 1}")
        vd = self.mono
        if vd is not None and max(vd.gate_stages) > self.stages:
            raise ValueError("gate stage beyond the encoder depth")

    @property
    def mono(self) -> VariantDef | None:
        return VARIANTS[self.variant]

    def describe(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_description(cls, d: dict[str, str]) -> "ModelSpec":
        return cls(variant=d["variant"], stages=int(d["stages"]),
                   channels=int(d["channels"]), input_size=int(d["input_size"]))


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.zeros(cout, cin, 3, 3))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.gamma = nn.Parameter(torch.ones(cout))
        self.beta = nn.Parameter(torch.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        x = ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)
        return ops.leaky_relu(ops.instance_norm(x, self.gamma, self.beta), LEAKY_SLOPE)


class Up(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(channels, channels, 2, 2))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias)


class MonoGate(nn.Module):
    """Projects phase channels to ``C`` and adds them to the encoder output.

    Gated: ``enc + alpha * proj(phase)`` with per-channel ``alpha`` (starts at
    0). Ungated: plain ``enc + proj(phase)``.
    """

    def __init__(self, phase_channels: int, channels: int, gated: bool):
        super().__init__()
        self.proj_weight = nn.Parameter(torch.zeros(channels, phase_channels, 1, 1))
        self.proj_bias = nn.Parameter(torch.zeros(channels))
        self.alpha = nn.Parameter(torch.zeros(channels)) if gated else None

    def forward(self, enc: Tensor, phase: Tensor) -> Tensor:
        p = ops.conv2d(phase, self.proj_weight, self.proj_bias)
        if self.alpha is None:
            return enc + p
        return enc + self.alpha.view(1, -1, 1, 1) * p


class MonoUNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        c, s = spec.channels, spec.stages
        self.encoder = nn.ModuleList(
            nn.Sequential(ConvBlock(1 if i == 0 else c, c, 1 if i == 0 else 2), ConvBlock(c, c))
            for i in range(s))
        self.up = nn.ModuleList(Up(c) for _ in range(s - 1))
        self.decoder = nn.ModuleList(ConvBlock(2 * c, c) for _ in range(s - 1))
        self.head_weight = nn.Parameter(torch.zeros(1, c, 1, 1))
        self.head_bias = nn.Parameter(torch.zeros(1))
        vd = spec.mono
        self.mono = MonoBlock(vd.k, vd.m) if vd else None
        self.gate_stages = vd.gate_stages if vd else ()
        self.gates = nn.ModuleList(MonoGate(vd.k, c, vd.gated) for _ in self.gate_stages) \
            if vd else nn.ModuleList()

    # -- parameters -----------------------------------------------------------

    def backbone_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters()
                if not n.startswith(("mono.", "gates."))]

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def flop_count(self) -> int:
        return count_flops(self.spec)["total"]

    # -- forward --------------------------------------------------------------

    def check_input(self, x: Tensor) -> None:
        n = self.spec.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, n, n):
            raise ValueError(f"expected input of shape (N, 1, {n}, {n}), got {tuple(x.shape)}")

    def forward(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.logits(x))

    def logits(self, x: Tensor) -> Tensor:
        self.check_input(x)
        phase = self.mono(x) if self.mono is not None else None
        skips = []
        for i, stage in enumerate(self.encoder, start=1):
            x = stage(x)
            if i in self.gate_stages:
                gate = self.gates[self.gate_stages.index(i)]
                x = gate(x, ops.avg_pool2d(phase, 2 ** (i - 1)))
            skips.append(x)
        for j in reversed(range(len(self.decoder))):
            x = self.decoder[j](ops.concat([self.up[j](x), skips[j]]))
        return ops.conv2d(x, self.head_weight, self.head_bias)


def _he_(p: Tensor, fan_in: int, gen: torch.Generator) -> None:
    with torch.no_grad():
        p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                * math.sqrt(2.0 / fan_in))


def build(spec: ModelSpec, seed: int = 0) -> MonoUNet:
    """Deterministically initialized model.

    Conv weights are He-normal on their fan-in, biases 0, norm affine (1, 0),
    gate ``alpha`` 0. Backbone and Mono/gate weights come from separate
    streams, so every variant built with the same seed shares the exact same
    backbone.
    """
    model = MonoUNet(spec)
    seeds = np.random.SeedSequence(seed).spawn(2)
    backbone_gen = torch.Generator().manual_seed(int(seeds[0].generate_state(1)[0]))
    mono_gen = torch.Generator().manual_seed(int(seeds[1].generate_state(1)[0]))
    for name, p in model.backbone_parameters():
        if name.endswith("weight") and p.dim() == 4:
            # transposed conv: one tap per input channel reaches each output pixel
            fan_in = p.shape[0] if name.startswith("up.") else p[0].numel()
            _he_(p, fan_in, backbone_gen)
    if model.mono is not None:
        _he_(model.mono.combine_weight, model.mono.n_features, mono_gen)
        for gate in model.gates:
            _he_(gate.proj_weight, gate.proj_weight.shape[1], mono_gen)
    return model


# -- accounting ---------------------------------------------------------------

def param_formula(spec: ModelSpec) -> dict[str, int]:
    """Closed-form parameter count by component."""
    c, s = spec.channels, spec.stages

    def block(cin, cout):
        return cin * cout * 9 + cout + 2 * cout

    parts = {
        "encoder": block(1, c) + block(c, c) + (s - 1) * 2 * block(c, c),
        "decoder": (s - 1) * (c * c * 4 + c + block(2 * c, c)),
        "head": c + 1,
        "mono": 0,
        "gates": 0,
    }
    vd = spec.mono
    if vd is not None:
        parts["mono"] = MonoBlock.param_count(vd.k, vd.m)
        parts["gates"] = len(vd.gate_stages) * (vd.k * c + c + (c if vd.gated else 0))
    parts["total"] = sum(parts.values())
    return parts


def fft_flops(h: int, w: int) -> int:
    n = h * w
    return round(5 * n * math.log2(n))


def count_flops(spec: ModelSpec, size: tuple[int, int] | None = None) -> dict[str, int]:
    """Analytic FLOPs of one forward pass (a multiply-accumulate counts 2).

    Counts convolutions (incl. bias adds), instance norms at
    ``NORM_FLOPS_PER_ELEMENT`` per element and FFTs at ``5 N log2 N`` per
    transform. Activations, pooling and elementwise filter construction are
    not counted.
    """
    h, w = size or (spec.input_size, spec.input_size)
    c, s = spec.channels, spec.stages
    conv = norm = 0

    def conv_cost(cin, cout, k, hw):
        return (2 * cin * cout * k * k + cout) * hw

    for i in range(s):
        hw = (h >> i) * (w >> i)
        cin = 1 if i == 0 else c
        conv += conv_cost(cin, c, 3, hw) + conv_cost(c, c, 3, hw)
        norm += 2 * NORM_FLOPS_PER_ELEMENT * c * hw
    for i in range(s - 1):
        hw = (h >> i) * (w >> i)
        conv += (2 * c * c + c) * hw  # 2x2 stride-2 transposed conv: one tap per pixel
        conv += conv_cost(2 * c, c, 3, hw)
        norm += NORM_FLOPS_PER_ELEMENT * c * hw
    conv += conv_cost(c, 1, 1, h * w)

    fft = 0
    vd = spec.mono
    if vd is not None:
        nf = vd.k * vd.m
        # one forward transform, then even + two odd inverse transforms per map
        fft = (1 + 3 * nf) * fft_flops(h, w)
        conv += conv_cost(nf, vd.k, 1, h * w)
        for st in vd.gate_stages:
            conv += conv_cost(vd.k, c, 1, (h >> (st - 1)) * (w >> (st - 1)))
    return {"conv": conv, "norm": norm, "fft": fft, "total": conv + norm + fft}
