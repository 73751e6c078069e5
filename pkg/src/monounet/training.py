"""Data pipeline, loss, optimizer, learning-rate schedule and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from . import ops
from .errors import DataError, UsageError
from .network import ModelSpec, MonoUNet, build

Tensor = torch.Tensor

DICE_SMOOTH = 1e-5
PROB_CLAMP = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 8
    lr0: float = 0.01
    weight_decay: float = 0.01
    poly_power: float = 0.9
    aug_prob: float = 0.8
    rot_range: float = 15.0  # degrees, symmetric
    scale_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise UsageError("val_fraction must lie in (0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise UsageError("scale_range must be positive and ordered")
        if not 0 <= self.aug_prob <= 1:
            raise UsageError("aug_prob must lie in [0, 1]")
        if self.lr0 < 0 or self.weight_decay < 0:
            raise UsageError("lr0 and weight_decay must be non-negative")


@dataclass
class Sample:
    image: np.ndarray  # float32, z-scored
    mask: np.ndarray  # bool
    pixel_spacing: float
    image_id: str = ""


# -- preprocessing ------------------------------------------------------------

def zscore(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    sd = img.std()
    return ((img - img.mean()) / (sd if sd > 0 else 1.0)).astype(np.float32)


def resize(image, mask, spacing: float, size: int = 256):
    """Bilinear image / nearest mask resize to ``size x size``.

    Spacing follows the row (depth) axis, which carries the fixed imaging
    depth; non-square inputs therefore stay metrically correct along depth.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == (size, size):
        return image, (None if mask is None else np.asarray(mask, bool)), spacing
    zoom = (size / h, size / w)
    img = ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True)
    msk = None
    if mask is not None:
        msk = ndimage.zoom(np.asarray(mask, np.float64), zoom, order=0, mode="nearest",
                           grid_mode=True) >= 0.5
    return img, msk, spacing * h / size


def prepare(image, mask, spacing: float, image_id: str = "", size: int = 256) -> Sample:
    img, msk, sp = resize(image, mask, spacing, size)
    return Sample(zscore(img), msk, sp, image_id)


def affine(sample: Sample, angle_deg: float, scale: float) -> Sample:
    """Rotate by ``angle_deg`` and zoom by ``scale`` about the image centre."""
    h, w = sample.image.shape
    t = math.radians(angle_deg)
    # output -> input coordinates: x_in = R(-t) x_out / scale
    inv = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - inv @ centre
    img = ndimage.affine_transform(sample.image.astype(np.float64), inv, offset, order=1,
                                   mode="constant", cval=0.0)
    msk = ndimage.affine_transform(sample.mask.astype(np.float64), inv, offset, order=0,
                                   mode="constant", cval=0.0) >= 0.5
    return Sample(img.astype(np.float32), msk, sample.pixel_spacing / scale, sample.image_id)


def augment(sample: Sample, rng: np.random.Generator, cfg: TrainConfig = TrainConfig()) -> Sample:
    if rng.random() >= cfg.aug_prob:
        return sample
    angle = rng.uniform(-cfg.rot_range, cfg.rot_range)
    scale = rng.uniform(*cfg.scale_range)
    return affine(sample, angle, scale)


# -- loss, schedule, optimizer ------------------------------------------------

def _soft_dice(prob: Tensor, target: Tensor) -> Tensor:
    dims = tuple(range(1, prob.dim()))
    inter = (prob * target).sum(dims)
    denom = prob.sum(dims) + target.sum(dims)
    return ((2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()


def bce_dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean BCE plus ``1 - soft Dice`` on probabilities (clamped to ``[1e-7, 1 - 1e-7]``).

    Soft Dice is computed per sample and averaged over the batch.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if not torch.isfinite(pred).all():
        raise ValueError("non-finite predictions")
    target = target.to(pred.dtype)
    p = pred.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    bce = -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()
    return bce + 1 - _soft_dice(pred, target)


def bce_dice_loss_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Same loss from logits; BCE via log-sigmoid so saturated pixels keep a gradient."""
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    target = target.to(logits.dtype)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, target)
    return bce + 1 - _soft_dice(torch.sigmoid(logits), target)


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * (1 - epoch / cfg.epochs) ** cfg.poly_power


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    A step whose gradients contain a non-finite value is skipped entirely
    (no decay, no moment update) and counted in ``skipped``.
    """

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.01,
                 betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = [p for p in params if p.requires_grad]
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> bool:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        if not all(torch.isfinite(g).all() for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.mul_(1 - lr * self.weight_decay)
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(self.eps), value=-lr)
        return True


# -- training loop ------------------------------------------------------------

def split_indices(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded shuffle, then the first ``round(n * val_fraction)`` go to validation."""
    if n < 2:
        raise DataError(f"need at least 2 samples to split, got {n}")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = min(max(1, round(n * val_fraction)), n - 1)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float
    skipped_steps: int = 0


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dice: float = -math.inf

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "val_dice", "skipped_steps"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.lr:.9g}", f"{r.train_loss:.9g}", f"{r.val_dice:.9g}",
                            r.skipped_steps])


def _batch(samples: Sequence[Sample]) -> tuple[Tensor, Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in samples])[:, None]).float()
    y = torch.from_numpy(np.stack([s.mask for s in samples])[:, None].astype(np.float32))
    return x, y


def hard_dice(pred: np.ndarray, target: np.ndarray) -> float:
    tp = np.count_nonzero(pred & target)
    total = np.count_nonzero(pred) + np.count_nonzero(target)
    return 1.0 if total == 0 else 2 * tp / total


@torch.no_grad()
def predict(model: MonoUNet, images: Sequence[np.ndarray], batch_size: int = 8) -> list[np.ndarray]:
    """Binary masks (probability >= 0.5) for z-scored images."""
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack(images[i:i + batch_size])[:, None]).float()
        out.extend((model.logits(x) >= 0).squeeze(1).numpy())
    return out


def validate(model: MonoUNet, samples: Sequence[Sample]) -> float:
    preds = predict(model, [s.image for s in samples])
    return float(np.mean([hard_dice(p, s.mask) for p, s in zip(preds, samples)]))


def check_dataset(samples: Sequence[Sample]) -> None:
    if not samples:
        raise DataError("empty dataset")
    fg = sum(int(s.mask.sum()) for s in samples)
    total = sum(s.mask.size for s in samples)
    if fg == 0 or fg == total:
        raise DataError("dataset masks contain a single class")


def train(samples: Sequence[Sample], cfg: TrainConfig, spec: ModelSpec,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          max_epochs: int | None = None) -> tuple[MonoUNet, RunLog]:
    """Train from a seeded initialization and return the best-validation-Dice model.

    ``max_epochs`` stops early without changing the schedule, which is always
    laid out over ``cfg.epochs``.
    """
    check_dataset(samples)
    train_idx, val_idx = split_indices(len(samples), cfg.val_fraction, cfg.seed)
    val = [samples[i] for i in val_idx]
    model = build(spec, cfg.seed)
    opt = AdamW(list(model.parameters()), cfg.weight_decay)
    log = RunLog()
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    for epoch in range(stop):
        lr = poly_lr(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch, 0xBA7C]).permutation(train_idx)
        model.train()
        losses, skipped0 = [], opt.skipped
        for b in range(0, len(order), cfg.batch_size):
            chunk = order[b:b + cfg.batch_size]
            batch = [augment(samples[i], np.random.default_rng([cfg.seed, epoch, int(i)]), cfg)
                     for i in chunk]
            x, y = _batch(batch)
            opt.zero_grad()
            loss = bce_dice_loss_logits(model.logits(x), y)
            ops.backward(loss)
            opt.step(lr)
            losses.append(loss.item() * len(chunk))
        rec = EpochRecord(epoch, lr, sum(losses) / len(order), validate(model, val),
                          opt.skipped - skipped0)
        log.records.append(rec)
        if rec.val_dice > log.best_val_dice:
            log.best_val_dice, log.best_epoch = rec.val_dice, epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
        if on_epoch is not None:
            on_epoch(rec)
    model.load_state_dict(best_state)
    model.eval()
    return model, log
