import numpy as np
import pytest
import torch
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils.flop_counter import FlopCounterMode

from monounet import checkpoint, ops
from monounet.monogenic import MonoBlock
from monounet.training import bce_dice_loss
from monounet.network import (NORM_FLOPS_PER_ELEMENT, VARIANTS, ConvBlock, ModelSpec, build,
                              count_flops, fft_flops, param_formula)


FD_FLOOR = 1e-6  # FD roundoff at h=1e-5 on an O(1) loss is ~1e-11


class _ConvOutputs(TorchDispatchMode):
    """Records the output element count of every convolution dispatched."""

    def __init__(self):
        super().__init__()
        self.numel = 0

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if func is torch.ops.aten.convolution.default:
            self.numel += out.numel()
        return out


def _norm_elements(model, x):
    seen = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: seen.append(out.numel()))
             for m in model.modules() if isinstance(m, ConvBlock)]
    with torch.no_grad():
        model(x)
    for h in hooks:
        h.remove()
    return sum(seen)


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_param_count_matches_closed_form(variant):
    spec = ModelSpec(variant)
    model = build(spec, 0)
    assert model.param_count == param_formula(spec)["total"]


def test_param_budget():
    base = param_formula(ModelSpec("base"))["total"]
    full = param_formula(ModelSpec("full"))["total"]
    assert 1100 <= base <= 1180
    assert full <= 1500
    # Mono block (3 log-Gabor params per filter, 9->3 combiner) + 3 gates (proj 3->C, bias, alpha)
    assert full - base == MonoBlock.param_count(3, 3) + 3 * (3 * 2 + 2 + 2) == 69
    c4 = param_formula(ModelSpec("base", channels=4))["total"]
    assert abs(c4 - 4300) <= 430


@pytest.mark.parametrize("variant", ["base", "e1", "full"])
def test_flops_against_dispatch_oracle(variant):
    spec = ModelSpec(variant, stages=5, input_size=64)
    model = build(spec, 0)
    x = torch.zeros(1, 1, 64, 64)
    rec = _ConvOutputs()
    with FlopCounterMode(display=False) as fc, rec:
        with torch.no_grad():
            model(x)
    counted = count_flops(spec)
    assert counted["conv"] == fc.get_total_flops() + rec.numel  # MACs + bias adds
    assert counted["norm"] == NORM_FLOPS_PER_ELEMENT * _norm_elements(model, x)
    vd = spec.mono
    n_transforms = 0 if vd is None else 1 + 3 * vd.k * vd.m
    assert counted["fft"] == n_transforms * fft_flops(64, 64)


def test_flops_full_range_and_deterministic():
    a, b = count_flops(ModelSpec("full")), count_flops(ModelSpec("full"))
    assert a == b
    assert 0.04e9 <= a["total"] <= 0.20e9


def test_conv_flops_double_with_area():
    spec = ModelSpec("base")
    assert count_flops(spec, (256, 512))["conv"] == 2 * count_flops(spec)["conv"]


def test_build_deterministic():
    a, b = build(ModelSpec("full"), 7), build(ModelSpec("full"), 7)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = build(ModelSpec("full"), 8)
    assert not torch.equal(a.encoder[0][0].weight, c.encoder[0][0].weight)


def test_init_statistics():
    model = build(ModelSpec("full"), 0)
    assert all(not g.alpha.any() for g in model.gates)
    for name, p in model.named_parameters():
        if name.endswith("bias") and "mono" not in name:
            assert not p.any(), name
    w = torch.cat([b.weight.flatten() for stage in model.encoder[1:] for b in stage])
    assert w.std().item() == pytest.approx((2 / 18) ** 0.5, rel=0.3)


def test_gate_off_equivalence(rng):
    x = torch.tensor(rng.normal(size=(2, 1, 256, 256)), dtype=torch.float32)
    base, full = build(ModelSpec("base"), 3), build(ModelSpec("full"), 3)
    with torch.no_grad():
        assert torch.equal(base(x), full(x))


def test_shapes_and_output_range(rng):
    model = build(ModelSpec("full"), 0)
    shapes = []
    hooks = [stage.register_forward_hook(lambda m, i, o: shapes.append(o.shape[-1]))
             for stage in model.encoder]
    with torch.no_grad():
        out = model(torch.tensor(rng.normal(size=(1, 1, 256, 256)), dtype=torch.float32))
        zero = model(torch.zeros(1, 1, 256, 256))
    for h in hooks:
        h.remove()
    assert shapes[:7] == [256 >> i for i in range(7)]
    assert out.shape == (1, 1, 256, 256)
    assert ((out > 0) & (out < 1)).all()
    assert torch.isfinite(zero).all() and ((zero > 0) & (zero < 1)).all()


def test_wrong_input_rejected():
    model = build(ModelSpec("base"), 0)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 1, 128, 128))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 2, 256, 256))


def test_unknown_variant():
    with pytest.raises(ValueError):
        ModelSpec("e4")


@pytest.mark.parametrize("variant", ["e1", "e123", "full"])
def test_reduced_model_finite_differences(variant):
    spec = ModelSpec(variant, stages=3, input_size=16)
    model = build(spec, 1).double()
    g = np.random.default_rng(1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.tensor(g.normal(scale=0.3, size=p.shape)))
    x = torch.tensor(g.normal(size=(2, 1, 16, 16)))
    y = torch.tensor(g.uniform(size=(2, 1, 16, 16)) > 0.5)
    fn = lambda: bce_dice_loss(model(x), y)
    ops.backward(fn())
    for name, p in model.named_parameters():
        # conv biases ahead of instance norm have an exactly zero gradient
        err = ops.relative_error(p.grad, ops.finite_difference(fn, p), floor=FD_FLOOR)
        assert err < 1e-4, name


def test_checkpoint_round_trip(tmp_path, rng):
    model = build(ModelSpec("full"), 5)
    with torch.no_grad():
        for gte in model.gates:
            gte.alpha.normal_()
    path = tmp_path / "m.ckpt"
    checkpoint.save(model, path)
    loaded = checkpoint.load(path)
    x = torch.tensor(rng.normal(size=(1, 1, 256, 256)), dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))
    assert checkpoint.dumps(loaded) == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    blob = checkpoint.dumps(build(ModelSpec("base"), 0))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXXXXXX" + blob[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob + b"\0")
