"""Efficient score vectors for the homoscedastic regression model.

All functions are vectorised over observations: ``x`` may be a single
covariate vector or an (n, l) matrix, ``y`` a scalar or an (n,) vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ErrorModel, moment_t_squared
from .exceptions import DomainError
from .model import Dataset, MeanModel, Theta

__all__ = [
    "ScoreContext",
    "ScoreValue",
    "t_of_eps",
    "efficient_score",
    "efficient_score_type2",
    "efficiency_gap",
    "stacked",
]


def t_of_eps(eps, v, mu3):
    """``t(eps) = eps^2 - v - mu3 * eps / v``, orthogonal to ``eps`` and 1."""
    if not v > 0:
        raise DomainError(f"v must be positive, got {v}")
    eps = np.asarray(eps, dtype=float)
    return eps * eps - v - mu3 * eps / v


@dataclass(frozen=True)
class ScoreValue:
    s_beta: np.ndarray
    s_v: np.ndarray

    def stacked(self) -> np.ndarray:
        """Scores as an (n, k+1) array (or (k+1,) for one observation)."""
        return np.concatenate([self.s_beta, np.asarray(self.s_v)[..., None]], axis=-1)


def stacked(score: ScoreValue) -> np.ndarray:
    return score.stacked()


@dataclass(frozen=True)
class ScoreContext:
    """Everything the score needs beyond one observation.

    ``mean_gradient_avg`` is the sample mean of ``m'_beta`` over the fitted
    covariates, standing in for its expectation. ``t_second_moment`` is
    ``E[t^2]`` from the error model's moments with ``v`` taken from ``theta``.
    """

    model: MeanModel
    error: ErrorModel
    theta: Theta
    mean_gradient_avg: np.ndarray
    t_second_moment: float

    @classmethod
    def build(cls, model: MeanModel, error: ErrorModel, theta: Theta, x) -> "ScoreContext":
        model.check(x, theta.beta)
        g = model.gradient(x, theta.beta)
        return cls(model, error, theta, g.mean(axis=0), moment_t_squared(error, theta.v))

    def __post_init__(self):
        if not self.t_second_moment > 0:
            raise DomainError(f"E[t^2] must be positive, got {self.t_second_moment}")


def _pieces(x, y, ctx):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1 and np.ndim(y) == 0
    xm = x[None, :] if single else x
    beta, v = ctx.theta.beta, ctx.theta.v
    eps = np.atleast_1d(np.asarray(y, dtype=float)) - ctx.model.evaluate(xm, beta)
    grad = ctx.model.gradient(xm, beta)
    t = t_of_eps(eps, v, ctx.error.mu3)
    tsq = ctx.t_second_moment
    w = eps / v - ctx.error.mu3 * t / (v * tsq)
    return single, eps, grad, t, tsq, w


def _finish(single, s_beta, s_v):
    if single:
        return ScoreValue(s_beta[0], s_v[0])
    return ScoreValue(s_beta, s_v)


def efficient_score(x, y, ctx: ScoreContext) -> ScoreValue:
    """Efficient score for ``(beta, v)``.

    ``S_beta = -(f'/f)(eps) [m' - E m'] + (eps/v - mu3 t/(v E t^2)) E m'``
    and ``S_v = t / E t^2``.
    """
    single, eps, grad, t, tsq, w = _pieces(x, y, ctx)
    ratio = ctx.error.score_ratio(eps)
    mbar = ctx.mean_gradient_avg
    s_beta = -ratio[:, None] * (grad - mbar) + w[:, None] * mbar
    return _finish(single, s_beta, t / tsq)


def efficient_score_type2(x, y, ctx: ScoreContext) -> ScoreValue:
    """Alternative efficient score ``S_beta = m' (eps/v - mu3 t/(v E t^2))``.

    This is the form obtained without assuming independence of errors and
    covariates; the ``v`` component matches :func:`efficient_score`.
    """
    single, eps, grad, t, tsq, w = _pieces(x, y, ctx)
    return _finish(single, grad * w[:, None], t / tsq)


def efficiency_gap(model: MeanModel, error: ErrorModel, theta: Theta, sample: Dataset) -> np.ndarray:
    """Sample estimate of ``M1 - M2``.

    ``M1`` and ``M2`` are the averaged outer products of the efficient score
    and of the alternative score; the difference is non-negative definite
    in the population and vanishes in its ``v`` row and column.
    """
    ctx = ScoreContext.build(model, error, theta, sample.x)
    s1 = efficient_score(sample.x, sample.y, ctx).stacked()
    s2 = efficient_score_type2(sample.x, sample.y, ctx).stacked()
    n = sample.n
    gap = s1.T @ s1 / n - s2.T @ s2 / n
    return 0.5 * (gap + gap.T)
