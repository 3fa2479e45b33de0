"""Quality and rate-distortion metrics: PSNR, WS-PSNR and BD-rate."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator


class IncomparableCurvesError(ValueError):
    pass


def erp_row_weights(height: int) -> np.ndarray:
    """Per-row area weights of an ERP image."""
    v = np.arange(height)
    return np.cos(((v + 0.5) / height - 0.5) * np.pi)


def _mse_to_db(mse: float, peak: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have identical shapes")
    return _mse_to_db(float(np.mean((a - b) ** 2)), peak)


def ws_psnr(a, b, peak: float = 1.0, weights=None) -> float:
    """Weighted-to-spherically-uniform PSNR of two ERP images ``(H, W[, C])``.

    Returns ``math.inf`` for identical images.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have identical shapes")
    if not peak > 0:
        raise ValueError("peak must be positive")
    w = erp_row_weights(a.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    err = (a - b) ** 2
    if err.ndim == 3:
        err = err.mean(axis=2)
    wmse = float(np.sum(w[:, None] * err) / (np.sum(w) * err.shape[1]))
    return _mse_to_db(wmse, peak)


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


@dataclass(frozen=True, order=True)
class RDPoint:
    rate: float
    quality: float


class RDCurve:
    """Rate-quality points sorted by rate (bpp, dB)."""

    def __init__(self, points):
        pts = sorted(RDPoint(float(r), float(q)) for r, q in points)
        if any(p.rate <= 0 for p in pts):
            raise ValueError("rates must be positive")
        if any(b.rate <= a.rate for a, b in zip(pts, pts[1:])):
            raise ValueError("rates must be strictly increasing")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])

    @classmethod
    def from_csv(cls, path) -> RDCurve:
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh)]
        return cls((r["rate_bpp"], r["quality_db"]) for r in rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            self.write(fh)

    def write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate_bpp", "quality_db"])
        for p in self.points:
            w.writerow([repr(p.rate), format_db(p.quality)])


def _integral(q, log_r, lo, hi, method):
    if method == "cubic":
        poly = np.polyint(np.polyfit(q, log_r, 3))
        return np.polyval(poly, hi) - np.polyval(poly, lo)
    if method == "pchip":
        order = np.argsort(q)
        f = PchipInterpolator(q[order], log_r[order]).antiderivative()
        return float(f(hi) - f(lo))
    raise ValueError(f"unknown BD-rate method {method!r}")


def bd_rate(reference: RDCurve, test: RDCurve, method: str = "cubic") -> float:
    """Average rate difference of ``test`` vs ``reference`` at equal quality, in percent.

    Log-rate is fitted as a function of quality (cubic polynomial by
    default, ``method="pchip"`` for piecewise cubic Hermite) and averaged
    over the overlapping quality interval.  Negative values are savings.
    """
    if not isinstance(reference, RDCurve):
        reference = RDCurve(reference)
    if not isinstance(test, RDCurve):
        test = RDCurve(test)
    if len(reference) < 4 or len(test) < 4:
        raise ValueError("BD-rate needs at least 4 points per curve")
    q1, q2 = reference.qualities, test.qualities
    lo, hi = max(q1.min(), q2.min()), min(q1.max(), q2.max())
    if not hi > lo:
        raise IncomparableCurvesError("curves have no overlapping quality range")
    i1 = _integral(q1, np.log(reference.rates), lo, hi, method)
    i2 = _integral(q2, np.log(test.rates), lo, hi, method)
    return float((np.exp((i2 - i1) / (hi - lo)) - 1.0) * 100.0)


def load_curve(path) -> RDCurve:
    return RDCurve.from_csv(Path(path))
