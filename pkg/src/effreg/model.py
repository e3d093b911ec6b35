"""Mean functions, parameter vectors and datasets for ``Y = m(X; beta) + eps``.

The error is assumed independent of the covariates with mean zero and a
constant variance ``v``; the parameter of interest is ``theta = (beta, v)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .exceptions import DimensionError, DomainError, PreconditionError, SingularityError

__all__ = [
    "Dataset",
    "MeanModel",
    "Theta",
    "linear_model",
    "exponential_model",
    "custom_model",
    "residuals",
    "ols_fit",
    "least_squares_fit",
    "initial_theta",
    "read_csv",
]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Observed covariates ``x`` (n x l) and responses ``y`` (n,).

    A one-dimensional ``x`` is read as a single covariate column.
    """

    x: np.ndarray
    y: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or y.ndim != 1:
            raise DimensionError("x must be (n, l) and y must be (n,)")
        if x.shape[0] != y.shape[0]:
            raise DimensionError(
                f"x has {x.shape[0]} rows but y has {y.shape[0]} entries",
                expected=y.shape[0], actual=x.shape[0],
            )
        if y.shape[0] < 2:
            raise PreconditionError("a dataset needs at least two observations")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError("dataset contains NaN or infinite entries")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def l(self) -> int:  # noqa: E743
        return self.x.shape[1]


@dataclass(frozen=True)
class Theta:
    """Regression coefficients ``beta`` plus error variance ``v > 0``."""

    beta: np.ndarray
    v: float
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(self.beta)))
        v = float(self.v)
        if not v >= 0.0 or not np.isfinite(v):
            raise DomainError(f"error variance must be non-negative, got {v}")
        object.__setattr__(self, "v", v)

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.append(self.beta, self.v)

    @classmethod
    def from_vector(cls, theta) -> "Theta":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-1], theta[-1])


@dataclass(frozen=True)
class MeanModel:
    """A mean function ``m(x; beta)`` together with its gradient in ``beta``.

    Use :func:`linear_model`, :func:`exponential_model` or
    :func:`custom_model` rather than instantiating directly.

    ``evaluate(x, beta)`` maps an (n, l) covariate matrix to (n,) means and
    ``gradient(x, beta)`` to the (n, k) matrix of partial derivatives.
    """

    kind: str
    k: int
    l: Optional[int]  # noqa: E741
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    gradient: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    intercept: bool = False
    param_names: tuple = ()

    def check(self, x, beta=None):
        """Raise :class:`DimensionError` if ``x``/``beta`` do not fit the model."""
        x = np.asarray(x)
        l_actual = 1 if x.ndim == 1 else x.shape[-1]
        if self.l is not None and l_actual != self.l:
            raise DimensionError(
                f"{self.kind} model expects l={self.l} covariate columns, got l={l_actual}",
                expected=self.l, actual=l_actual,
            )
        if beta is not None and np.size(beta) != self.k:
            raise DimensionError(
                f"{self.kind} model expects k={self.k} parameters, got k={np.size(beta)}",
                expected=self.k, actual=np.size(beta),
            )

    @property
    def intercept_only(self) -> bool:
        return self.kind == "linear" and self.intercept and self.l == 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "l": self.l, "intercept": self.intercept,
                "param_names": list(self.param_names)}


def _as_matrix(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def linear_model(l: int, intercept: bool = True) -> MeanModel:
    """``m(x; beta) = beta_0 + x' beta_rest`` (``beta_0`` only if ``intercept``)."""
    if l < 0:
        raise DomainError("number of covariates must be non-negative")
    k = l + int(intercept)
    if k == 0:
        raise DomainError("linear model without intercept needs at least one covariate")

    def design(x):
        x = _as_matrix(x)
        if intercept:
            return np.column_stack([np.ones(x.shape[0]), x])
        return x

    def evaluate(x, beta):
        return design(x) @ np.asarray(beta, dtype=float)

    def gradient(x, beta):
        return design(x)

    names = (("b0",) if intercept else ()) + tuple(f"b{j + 1}" for j in range(l))
    return MeanModel("linear", k, l, evaluate, gradient, intercept, names)


def exponential_model() -> MeanModel:
    """``m(x; beta) = beta_1 * exp(beta_2 * x)`` for a scalar covariate."""

    def evaluate(x, beta):
        x = _as_matrix(x)[:, 0]
        return beta[0] * np.exp(beta[1] * x)

    def gradient(x, beta):
        x = _as_matrix(x)[:, 0]
        e = np.exp(beta[1] * x)
        return np.column_stack([e, beta[0] * x * e])

    return MeanModel("exponential", 2, 1, evaluate, gradient, False, ("b1", "b2"))


def custom_model(evaluate, gradient, k: int, l: Optional[int] = None, param_names=()) -> MeanModel:
    """Wrap a user-supplied ``(value, gradient)`` pair of closures."""
    names = tuple(param_names) or tuple(f"b{j + 1}" for j in range(k))

    def ev(x, beta):
        return np.asarray(evaluate(_as_matrix(x), np.asarray(beta, dtype=float)), dtype=float)

    def gr(x, beta):
        g = np.asarray(gradient(_as_matrix(x), np.asarray(beta, dtype=float)), dtype=float)
        return g.reshape(-1, k)

    return MeanModel("custom", k, l, ev, gr, False, names)


def residuals(data: Dataset, model: MeanModel, beta) -> np.ndarray:
    """Return ``y_i - m(x_i; beta)`` in observation order."""
    model.check(data.x, beta)
    eps = data.y - model.evaluate(data.x, np.asarray(beta, dtype=float))
    if not np.all(np.isfinite(eps)):
        raise DomainError("non-finite residuals; check beta")
    return eps


def _first_dependent_column(design):
    rank = 0
    for j in range(design.shape[1]):
        r = np.linalg.matrix_rank(design[:, : j + 1])
        if r == rank:
            return j
        rank = r
    return None


def ols_fit(data: Dataset, intercept: bool = True) -> Theta:
    """Least squares fit of the linear model.

    The variance uses the divisor ``n`` (mean squared residual), which is
    the root of the variance estimating equation under normal errors.
    """
    model = linear_model(data.l, intercept)
    X = model.gradient(data.x, None)
    if data.n <= model.k:
        raise PreconditionError(f"need n > k, got n={data.n}, k={model.k}")
    col = _first_dependent_column(X)
    if col is not None:
        raise SingularityError(f"design matrix is rank deficient at column {col}", column=col)
    beta, *_ = np.linalg.lstsq(X, data.y, rcond=None)
    eps = data.y - X @ beta
    return Theta(beta, float(np.mean(eps**2)), info={"variance_divisor": "n"})


def _exponential_start(data):
    # profile beta_1 out for each beta_2, then minimize the 1-D residual sum of squares
    x = data.x[:, 0]
    y = data.y
    scale = 1.0 / max(np.std(x), 1e-12)

    def rss(b2):
        e = np.exp(b2 * x)
        denom = e @ e
        if not np.isfinite(denom) or denom == 0:
            return np.inf
        b1 = (e @ y) / denom
        r = y - b1 * e
        return r @ r

    grid = np.linspace(-5 * scale, 5 * scale, 201)
    vals = np.array([rss(b) for b in grid])
    i = int(np.nanargmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    b2 = optimize.minimize_scalar(rss, bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10}).x
    e = np.exp(b2 * x)
    return np.array([(e @ y) / (e @ e), b2])


def least_squares_fit(data: Dataset, model: MeanModel, beta0=None, tol: float = 1e-12,
                      max_iter: int = 200) -> Theta:
    """Nonlinear least squares by damped Gauss-Newton.

    ``beta0`` is required for custom models; the exponential model gets a
    profiled grid start.
    """
    model.check(data.x)
    if model.kind == "linear":
        return ols_fit(data, model.intercept)
    if beta0 is None:
        if model.kind != "exponential":
            raise PreconditionError("custom mean models need a starting beta0")
        beta0 = _exponential_start(data)
    beta = np.asarray(beta0, dtype=float).copy()
    r = data.y - model.evaluate(data.x, beta)
    sse = r @ r
    for _ in range(max_iter):
        J = model.gradient(data.x, beta)
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            rc = data.y - model.evaluate(data.x, cand)
            sc = rc @ rc
            if np.isfinite(sc) and sc <= sse:
                break
            t *= 0.5
        else:
            break
        done = np.max(np.abs(cand - beta)) <= tol * (1 + np.max(np.abs(beta)))
        beta, r, sse = cand, rc, sc
        if done:
            break
    return Theta(beta, float(sse / data.n), info={"variance_divisor": "n"})


def initial_theta(data: Dataset, model: MeanModel, beta0=None) -> Theta:
    """OLS for linear means, Gauss-Newton least squares otherwise."""
    if model.kind == "linear":
        if data.n <= model.k:
            raise PreconditionError(f"need n > k, got n={data.n}, k={model.k}")
        return ols_fit(data, model.intercept)
    return least_squares_fit(data, model, beta0)


def read_csv(path, response: str, columns: Optional[Sequence[str]] = None) -> Dataset:
    """Read a headed CSV; ``response`` names y, remaining columns are covariates.

    Raises :class:`PreconditionError` naming the line and column of the first
    non-numeric cell, or listing the available columns when ``response`` is
    missing.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PreconditionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if response not in header:
        raise PreconditionError(
            f"response column {response!r} not found; available columns: {', '.join(header)}"
        )
    cov = [h for h in header if h != response] if columns is None else list(columns)
    idx_y = header.index(response)
    idx_x = [header.index(c) for c in cov]
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise PreconditionError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        vals = []
        for j in [idx_y] + idx_x:
            try:
                vals.append(float(row[j]))
            except ValueError:
                raise PreconditionError(
                    f"{path}: line {lineno}, column {j + 1} ({header[j]}): non-numeric value {row[j]!r}"
                ) from None
        ys.append(vals[0])
        xs.append(vals[1:])
    if not ys:
        raise PreconditionError(f"{path}: no data rows")
    x = np.array(xs, dtype=float).reshape(len(ys), len(idx_x))
    return Dataset(x, np.array(ys), names=tuple(cov))
