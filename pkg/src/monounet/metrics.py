"""Segmentation metrics: Dice, mean average surface distance, largest component.

Masks are 2-D boolean arrays with an isotropic ``spacing`` in mm/pixel.
Boundaries are mask pixels with at least one 4-neighbour outside the mask
(pixels outside the frame count as outside); connected components use
8-connectivity.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = ndimage.generate_binary_structure(2, 2)


def _as_mask(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {a.shape}")
    return a.astype(bool, copy=False)


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected component.

    Ties go to the component whose first pixel in row-major order comes
    first; ``ndimage.label`` numbers components in exactly that order.
    """
    mask = _as_mask(mask)
    labels, n = ndimage.label(mask, structure=_SQUARE)
    if n <= 1:
        return mask.copy()
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def dice(a, b) -> float:
    """``2 TP / (2 TP + FP + FN)``; two empty masks score 1."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(~a & b))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def boundary(mask) -> np.ndarray:
    mask = _as_mask(mask)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def masd(a, b, spacing: float = 1.0) -> float | None:
    """Symmetric mean of the two directed mean boundary distances, in mm.

    Returns ``None`` when either mask is empty (the value is undefined and
    the pair is excluded from aggregation).
    """
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if not a.any() or not b.any():
        return None
    ba, bb = boundary(a), boundary(b)
    # distance from every pixel to the nearest boundary pixel of the other mask
    to_b = ndimage.distance_transform_edt(~bb)
    to_a = ndimage.distance_transform_edt(~ba)
    return 0.5 * (to_b[ba].mean() + to_a[bb].mean()) * spacing


@dataclass
class ImageScore:
    image_id: str
    dice: float
    masd_mm: float | None

    @property
    def excluded(self) -> bool:
        return self.masd_mm is None


@dataclass
class Summary:
    scores: list[ImageScore]
    dice_mean: float
    dice_sd: float
    masd_mean: float
    masd_sd: float
    n_excluded: int = 0
    extras: dict = field(default_factory=dict)

    def format(self) -> str:
        return (f"Dice {100 * self.dice_mean:.2f}±{100 * self.dice_sd:.2f}  "
                f"MASD {self.masd_mean:.3f}±{self.masd_sd:.3f} mm  "
                f"(n={len(self.scores)}, MASD excluded={self.n_excluded})")


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def evaluate_dataset(preds, gts, spacings, image_ids=None) -> Summary:
    """Per-image Dice/MASD after keeping the largest predicted component.

    Empty predictions score Dice 0 (1 if the ground truth is empty too) and
    are left out of the MASD mean; the count of such exclusions is reported.
    Standard deviations are population SDs.
    """
    preds, gts, spacings = list(preds), list(gts), list(spacings)
    if not (len(preds) == len(gts) == len(spacings)):
        raise ValueError(
            f"length mismatch: {len(preds)} predictions, {len(gts)} references, "
            f"{len(spacings)} spacings")
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(len(preds))]
    scores = []
    for iid, p, g, sp in zip(ids, preds, gts, spacings):
        p = largest_component(p)
        scores.append(ImageScore(iid, dice(p, g), masd(p, g, sp)))
    d_mean, d_sd = _mean_sd([s.dice for s in scores])
    kept = [s.masd_mm for s in scores if not s.excluded]
    m_mean, m_sd = _mean_sd(kept)
    return Summary(scores, d_mean, d_sd, m_mean, m_sd, len(scores) - len(kept))


def write_metrics_csv(path: str | Path, summary: Summary) -> None:
    """``image_id,dice,masd_mm,excluded_flag`` rows and a final ``mean±sd`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "dice", "masd_mm", "excluded_flag"])
        for s in summary.scores:
            w.writerow([s.image_id, f"{s.dice:.6f}",
                        "" if s.excluded else f"{s.masd_mm:.6f}", int(s.excluded)])
        w.writerow(["mean±sd", f"{summary.dice_mean:.6f}±{summary.dice_sd:.6f}",
                    f"{summary.masd_mean:.6f}±{summary.masd_sd:.6f}", summary.n_excluded])
