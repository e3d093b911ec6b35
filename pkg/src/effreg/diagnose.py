"""Residual diagnostics: normality testing, Cullen-Frey coordinates, Q-Q data."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .errors import ErrorModel, NormalError
from .exceptions import PreconditionError

__all__ = [
    "ResidualDiagnostics",
    "shapiro_wilk",
    "shapiro_wilk_coefficients",
    "skew_kurtosis",
    "qq_export",
    "histogram",
    "diagnose",
]

# Royston (1995), algorithm AS R94
_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(c, x):
    # ascending coefficients
    return sum(ci * x**i for i, ci in enumerate(c))


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights ``a`` (length ``n``, unit norm) for the W statistic."""
    if n < 3:
        raise PreconditionError("Shapiro-Wilk needs n >= 3")
    half = n // 2
    a = np.zeros(half)
    if n == 3:
        a[0] = math.sqrt(0.5)
    else:
        m = -special.ndtri((np.arange(1, half + 1) - 0.375) / (n + 0.25))
        summ2 = 2.0 * np.sum(m**2)
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) + m[0] / ssumm2
        if n > 5:
            a2 = _poly(_C2, rsn) + m[1] / ssumm2
            fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1**2 - 2 * a2**2))
            a = m / fac
            a[0], a[1] = a1, a2
        else:
            fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1**2))
            a = m / fac
            a[0] = a1
    full = np.zeros(n)
    full[:half] = -a
    full[n - half:] = a[::-1]
    return full


def shapiro_wilk(residuals) -> tuple:
    """Shapiro-Wilk W and its p-value (Royston's approximation, 3 <= n <= 5000)."""
    x = np.sort(np.asarray(residuals, dtype=float).ravel())
    n = x.size
    if n < 3 or n > 5000:
        raise PreconditionError(f"Shapiro-Wilk supports 3 <= n <= 5000, got n={n}; subsample first")
    rng = x[-1] - x[0]
    if not rng > 0:
        raise PreconditionError("Shapiro-Wilk is undefined for a constant sample")
    a = shapiro_wilk_coefficients(n)
    xs = (x - x.mean()) / rng
    w = float((a @ xs) ** 2 / (xs @ xs))
    w = min(w, 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))
    y = math.log1p(-w) if w < 1 else -math.inf
    if y == -math.inf:
        return w, 1.0
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mean, sd = _poly(_C3, n), math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mean, sd = _poly(_C5, ln), math.exp(_poly(_C6, ln))
    p = float(special.ndtr(-(y - mean) / sd))
    return w, p


def skew_kurtosis(residuals) -> tuple:
    """Moment skewness ``m3 / m2^1.5`` and excess kurtosis ``m4 / m2^2 - 3``."""
    x = np.asarray(residuals, dtype=float).ravel()
    if x.size < 4:
        raise PreconditionError("skewness/kurtosis need n >= 4")
    d = x - x.mean()
    m2 = np.mean(d**2)
    if not m2 > 0:
        raise PreconditionError("zero-variance sample")
    return float(np.mean(d**3) / m2**1.5), float(np.mean(d**4) / m2**2 - 3.0)


def qq_export(residuals, reference: Optional[ErrorModel] = None) -> np.ndarray:
    """Q-Q pairs ``(F^-1((i - 0.5)/n), sorted residual_i)`` as an (n, 2) array.

    ``reference`` defaults to a normal law with the residuals' mean-square
    variance.
    """
    x = np.sort(np.asarray(residuals, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise PreconditionError("no residuals")
    if reference is None:
        reference = NormalError(float(np.mean(x**2)))
    theo = np.asarray(reference.ppf((np.arange(1, n + 1) - 0.5) / n), dtype=float)
    return np.column_stack([theo, x])


def histogram(residuals, bins="fd"):
    """Counts and edges; Freedman-Diaconis bin width unless ``bins`` overrides."""
    x = np.asarray(residuals, dtype=float).ravel()
    counts, edges = np.histogram(x, bins=bins)
    return counts, edges


@dataclass
class ResidualDiagnostics:
    n: int
    mean: float
    sd: float
    skewness: float
    excess_kurtosis: float
    shapiro_w: Optional[float]
    shapiro_p: Optional[float]
    qq_points: np.ndarray = field(repr=False)
    hist_counts: np.ndarray = field(repr=False)
    hist_edges: np.ndarray = field(repr=False)
    reference: str = "normal"
    moment_estimator: str = "biased (moment) estimators"
    notes: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["qq_points"] = self.qq_points.tolist()
        d["histogram"] = {"edges": self.hist_edges.tolist(), "counts": self.hist_counts.tolist()}
        del d["hist_counts"], d["hist_edges"]
        d["cullen_frey"] = {"skewness_squared": self.skewness**2,
                            "kurtosis": self.excess_kurtosis + 3.0}
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def qq_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theoretical", "sample"])
        w.writerows([[repr(float(a)), repr(float(b))] for a, b in self.qq_points])
        return buf.getvalue()

    def hist_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["left", "right", "count"])
        for i, c in enumerate(self.hist_counts):
            w.writerow([repr(float(self.hist_edges[i])), repr(float(self.hist_edges[i + 1])), int(c)])
        return buf.getvalue()


def diagnose(residuals, reference: Optional[ErrorModel] = None, bins="fd") -> ResidualDiagnostics:
    """Collect all residual diagnostics; Shapiro-Wilk is skipped outside its range."""
    x = np.asarray(residuals, dtype=float).ravel()
    if x.size < 4:
        raise PreconditionError(f"need at least 4 residuals, got {x.size}")
    skew, kurt = skew_kurtosis(x)
    notes = ""
    try:
        w, p = shapiro_wilk(x)
    except PreconditionError as exc:
        w = p = None
        notes = f"shapiro_wilk skipped: {exc}"
    counts, edges = histogram(x, bins)
    return ResidualDiagnostics(
        n=int(x.size), mean=float(x.mean()), sd=float(x.std()), skewness=skew,
        excess_kurtosis=kurt, shapiro_w=w, shapiro_p=p, qq_points=qq_export(x, reference),
        hist_counts=counts, hist_edges=edges,
        reference=reference.kind if reference is not None else "normal", notes=notes,
    )
