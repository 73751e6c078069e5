"""Cartilage outcomes and agreement statistics between manual and automated masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


class UndefinedOutcome(ValueError):
    """Outcome requested on an empty mask."""


def thickness(mask, spacing: float) -> float:
    """Mean vertical extent (mm) over the columns that contain mask pixels.

    A stand-in for a dedicated thickness algorithm: each occupied column
    contributes its pixel count times ``spacing``.
    """
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=0)
    occupied = counts[counts > 0]
    if occupied.size == 0:
        raise UndefinedOutcome("thickness of an empty mask")
    return float(occupied.mean()) * spacing


def echo_intensity(image, mask) -> float:
    """Mean raw grey value (0-255, arbitrary units) under the mask."""
    image, mask = np.asarray(image), np.asarray(mask, dtype=bool)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    if not mask.any():
        raise UndefinedOutcome("echo intensity of an empty mask")
    return float(image[mask].astype(np.float64).mean())


@dataclass
class BlandAltman:
    n: int
    n_excluded: int
    bias_pct: float
    sd_pct: float
    loa_low_pct: float
    loa_high_pct: float
    bias_abs: float
    slope: float
    intercept: float
    r2: float
    p_value: float


def bland_altman(manual, auto) -> BlandAltman:
    """Percentage Bland-Altman analysis with a proportional-bias regression.

    Differences are ``100 * (auto - manual) / mean(auto, manual)``. Limits of
    agreement are ``bias +- 1.96 SD`` (sample SD). Proportional bias is the
    least-squares slope of the percentage difference on the pairwise mean,
    with its R^2 and two-sided t-test p-value. Pairs whose mean is 0 are
    dropped and counted.
    """
    manual = np.asarray(manual, dtype=np.float64)
    auto = np.asarray(auto, dtype=np.float64)
    if manual.shape != auto.shape or manual.ndim != 1:
        raise ValueError("manual and auto must be 1-D arrays of equal length")
    if not (np.isfinite(manual).all() and np.isfinite(auto).all()):
        raise ValueError("outcomes must be finite")
    avg = 0.5 * (manual + auto)
    keep = avg != 0
    manual, auto, avg = manual[keep], auto[keep], avg[keep]
    n = int(avg.size)
    if n < 3:
        raise ValueError(f"Bland-Altman needs at least 3 usable pairs, got {n}")
    diff = 100.0 * (auto - manual) / avg
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if np.ptp(diff) == 0:
        slope, intercept, r2, p = 0.0, bias, 0.0, 1.0
    elif np.ptp(avg) == 0:
        raise ValueError("pairwise means are all equal; proportional bias is undefined")
    else:
        fit = stats.linregress(avg, diff)
        slope, intercept, r2, p = fit.slope, fit.intercept, fit.rvalue**2, fit.pvalue
    return BlandAltman(n, int((~keep).sum()), bias, sd, bias - 1.96 * sd, bias + 1.96 * sd,
                       float((auto - manual).mean()), float(slope), float(intercept),
                       float(r2), float(p))


@dataclass
class ICC:
    value: float
    ci_low: float
    ci_high: float
    ms_rows: float
    ms_cols: float
    ms_error: float


def _mean_squares(table: np.ndarray) -> tuple[float, float, float]:
    n, k = table.shape
    grand = table.mean()
    ss_rows = k * ((table.mean(axis=1) - grand) ** 2).sum()
    ss_cols = n * ((table.mean(axis=0) - grand) ** 2).sum()
    ss_err = ((table - grand) ** 2).sum() - ss_rows - ss_cols
    return ss_rows / (n - 1), ss_cols / (k - 1), ss_err / ((n - 1) * (k - 1))


def icc2k(table, confidence: float = 0.95) -> ICC:
    """Two-way random effects, absolute agreement, average of ``k`` raters.

    ``table`` is ``n subjects x k raters``. The interval follows the F-based
    construction of McGraw & Wong (1996), case 2A, translated from the
    single-rater bounds with the Spearman-Brown step-up.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("ICC table must be 2-D (subjects x raters)")
    n, k = table.shape
    if n < 3 or k < 2:
        raise ValueError(f"ICC(2,k) needs >= 3 subjects and >= 2 raters, got {n}x{k}")
    if not np.isfinite(table).all():
        raise ValueError("ICC table must be complete and finite")
    if np.all(table == table.flat[0]):
        return ICC(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
    msr, msc, mse = _mean_squares(table)
    value = (msr - mse) / (msr + (msc - mse) / n)
    if mse == 0:
        return ICC(float(value), float(value), float(value), msr, msc, mse)

    alpha = 1.0 - confidence
    single = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
    fj = msc / mse
    spread = n * (1 + (k - 1) * single) - k * single
    v = ((k - 1) * (n - 1) * (k * single * fj + spread) ** 2
         / ((n - 1) * k**2 * single**2 * fj**2 + spread**2))
    f_up = stats.f.ppf(1 - alpha / 2, n - 1, v)
    f_lo = stats.f.ppf(1 - alpha / 2, v, n - 1)
    lo1 = n * (msr - f_up * mse) / (f_up * (k * msc + (k * n - k - n) * mse) + n * msr)
    hi1 = n * (f_lo * msr - mse) / (k * msc + (k * n - k - n) * mse + n * f_lo * msr)
    lo = lo1 * k / (1 + lo1 * (k - 1))
    hi = hi1 * k / (1 + hi1 * (k - 1))
    return ICC(float(value), float(lo), float(hi), float(msr), float(msc), float(mse))


def interpret_icc(value: float) -> str:
    """Reliability label: poor < 0.5 <= moderate < 0.75 <= good <= 0.9 < excellent."""
    if value < 0.5:
        return "poor"
    if value < 0.75:
        return "moderate"
    if value <= 0.9:
        return "good"
    return "excellent"


def format_report(name: str, unit: str, icc: ICC, ba: BlandAltman) -> str:
    return (f"{name}: ICC(2,k) = {icc.value:.2f} [{icc.ci_low:.2f}, {icc.ci_high:.2f}] "
            f"({interpret_icc(icc.value)}), bias = {ba.bias_pct:.2f}% ({ba.bias_abs:.3f} {unit}), "
            f"95% LoA {ba.loa_low_pct:.2f}% to {ba.loa_high_pct:.2f}%, "
            f"proportional bias R^2 = {ba.r2:.3f}, p = {ba.p_value:.3f}"
            + (f", excluded pairs = {ba.n_excluded}" if ba.n_excluded else ""))
