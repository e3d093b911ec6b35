"""Solve the efficient-score estimating equations and report uncertainty.

The stacked mean score ``n^-1 sum_i S_eff(x_i, y_i; theta, f)`` is driven to
zero by damped Newton steps with a central finite-difference Jacobian. The
error density ``f`` is either fixed (normal mode, a user supplied model) or
re-estimated from the current residuals between Newton solves (Gumbel scale,
normal-mixture parameters, kernel density). Internally ``v`` is carried on
the log scale so every iterate keeps a positive variance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Optional

import numpy as np

from . import errors as err
from .errors import ErrorModel
from .exceptions import DomainError, PreconditionError, SingularityError
from .model import Dataset, MeanModel, Theta, initial_theta, residuals
from .score import ScoreContext, efficient_score

__all__ = [
    "FitConfig",
    "FitResult",
    "ERROR_MODES",
    "solve_efficient",
    "covariance_bound",
    "covariance_sandwich",
    "confidence_intervals",
    "normal_quantile",
]

ERROR_MODES = ("normal", "gumbel", "mixture", "kernel", "custom")


@dataclass(frozen=True)
class FitConfig:
    """Solver settings.

    ``error_mode`` picks how the error density is obtained. ``custom`` needs
    either a fixed ``error_model`` or an ``error_fitter`` mapping residuals
    to an :class:`~effreg.errors.ErrorModel`. ``covariance`` selects the
    reported covariance: ``"auto"`` uses the sandwich in every mode. The
    plug-in bound is still available as ``"bound"``; with a kernel density
    it overstates the variance whenever the bandwidth oversmooths the
    error law (e.g. well separated mixture components).
    """

    error_mode: str = "normal"
    max_outer_iters: int = 50
    max_newton_iters: int = 100
    tol_theta: float = 1e-8
    tol_score: float = 1e-8
    jacobian_step: float = 1e-6
    covariance: str = "auto"
    bandwidth: Optional[float] = None
    mixture_restarts: int = 5
    seed: int = 0
    error_model: Optional[ErrorModel] = None
    error_fitter: Optional[Callable] = None

    def __post_init__(self):
        if self.error_mode not in ERROR_MODES:
            raise DomainError(f"unknown error_mode {self.error_mode!r}; choose from {ERROR_MODES}")
        for name in ("tol_theta", "tol_score", "jacobian_step"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.max_outer_iters < 1 or self.max_newton_iters < 1:
            raise DomainError("iteration limits must be at least 1")
        if self.covariance not in ("auto", "bound", "sandwich"):
            raise DomainError("covariance must be 'auto', 'bound' or 'sandwich'")
        if self.error_mode == "custom" and self.error_model is None and self.error_fitter is None:
            raise DomainError("custom error mode needs error_model or error_fitter")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("error_mode", "max_outer_iters", "max_newton_iters",
                                           "tol_theta", "tol_score", "jacobian_step", "covariance",
                                           "bandwidth", "mixture_restarts", "seed")}
        if self.error_model is not None:
            d["error_model"] = self.error_model.to_dict()
        return d


def normal_quantile(p: float) -> float:
    """Standard normal quantile."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    return NormalDist().inv_cdf(p)


@dataclass
class FitResult:
    theta: Theta
    covariance: np.ndarray
    se: np.ndarray
    ci95: np.ndarray
    residuals: np.ndarray
    error_model: dict
    iterations: int
    converged: bool
    clamp_count: int
    mode: str = "normal"
    covariance_kind: str = "bound"
    score_norm: float = float("nan")
    score_history: list = field(default_factory=list)
    param_names: tuple = ()
    message: str = ""
    model: Optional[MeanModel] = field(default=None, repr=False)
    error: Optional[ErrorModel] = field(default=None, repr=False)
    covariances: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        q = self.theta.as_vector().size
        return {
            "parameters": list(self.param_names),
            "theta": self.theta.as_vector().tolist(),
            "se": self.se.tolist(),
            "ci95": self.ci95.tolist(),
            "covariance": self.covariance.reshape(q * q).tolist(),
            "covariance_kind": self.covariance_kind,
            "error_mode": self.mode,
            "error_model": self.error_model,
            "iterations": self.iterations,
            "converged": bool(self.converged),
            "score_norm": self.score_norm,
            "clamp_count": self.clamp_count,
            "n": int(self.residuals.size),
            "message": self.message,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def summary(self) -> str:
        parts = [f"{name}={est:.6g} ± {se:.3g}"
                 for name, est, se in zip(self.param_names, self.theta.as_vector(), self.se)]
        status = "converged" if self.converged else "NOT converged"
        return f"[{self.mode}] " + ", ".join(parts) + f" ({status}, {self.iterations} iterations)"


class _CachedRatio(ErrorModel):
    """Memoises ``score_ratio_counted`` on the last few residual vectors.

    Perturbing only ``v`` leaves the residuals unchanged, so the Jacobian
    column for ``v`` reuses the (possibly expensive) density evaluation.
    """

    def __init__(self, base: ErrorModel, size: int = 4):
        self.base = base
        self.kind = base.kind
        self.variance = base.variance
        self.mu3 = base.mu3
        self.mu4 = base.mu4
        self._cache = {}
        self._size = size
        self.clamps = 0

    def score_ratio_counted(self, eps):
        eps = np.ascontiguousarray(eps, dtype=float)
        key = eps.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = self.base.score_ratio_counted(eps)
            if len(self._cache) >= self._size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = hit
        self.clamps += hit[1]
        return hit

    def score_ratio(self, eps):
        return self.score_ratio_counted(eps)[0]


class _Nuisance:
    """Error-density handling for one ``error_mode``."""

    def __init__(self, cfg: FitConfig):
        self.cfg = cfg
        self.mode = cfg.error_mode

    def refresh(self, eps, theta, prev):
        mode = self.mode
        if mode == "normal":
            return None
        if mode == "gumbel":
            return _CachedRatio(err.fit_gumbel(eps))
        if mode == "mixture":
            init = prev.base if prev is not None else None
            m = err.fit_mixture(eps, restarts=self.cfg.mixture_restarts, rng=self.cfg.seed, init=init)
            return _CachedRatio(m)
        if mode == "kernel":
            h = self.cfg.bandwidth if self.cfg.bandwidth is not None else err.silverman_bandwidth(eps)
            return _CachedRatio(err.kde_error(eps, h))
        if self.cfg.error_model is not None:
            return _CachedRatio(self.cfg.error_model)
        return _CachedRatio(self.cfg.error_fitter(eps))

    @staticmethod
    def error(state, theta):
        if state is None:
            return err.normal_error(theta.v)
        return state

    @staticmethod
    def distance(a, b) -> float:
        if a is None or b is None:
            return 0.0 if a is b else math.inf
        a, b = a.base, b.base
        if a is b:
            return 0.0
        if isinstance(a, err.KernelDensityError):
            return float(max(np.max(np.abs(a.centers - b.centers)), abs(a.h - b.h)))
        if isinstance(a, err.GumbelError):
            return abs(a.lam - b.lam)
        if isinstance(a, err.NormalMixtureError):
            return float(np.max(np.abs(np.subtract(a.mu, b.mu))))
        va, vb = _numeric_leaves(a.to_dict()), _numeric_leaves(b.to_dict())
        if len(va) != len(vb):
            return math.inf
        return float(np.max(np.abs(np.subtract(va, vb)))) if va else 0.0


def _numeric_leaves(d):
    out = []
    for v in d.values():
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            out.append(float(v))
        elif isinstance(v, (list, tuple)):
            out.extend(float(u) for u in v if isinstance(u, (int, float)))
    return out


def _theta(phi) -> Theta:
    return Theta(phi[:-1], math.exp(phi[-1]))


def _mean_score_fn(data: Dataset, model: MeanModel, nuis: _Nuisance, state):
    def F(phi):
        theta = _theta(phi)
        ctx = ScoreContext.build(model, nuis.error(state, theta), theta, data.x)
        return efficient_score(data.x, data.y, ctx).stacked().mean(axis=0)
    return F


def _fd_jacobian(F, phi, rel_step):
    q = phi.size
    J = np.empty((q, q))
    for j in range(q):
        h = rel_step * max(abs(phi[j]), 1.0)
        up, dn = phi.copy(), phi.copy()
        up[j] += h
        dn[j] -= h
        J[:, j] = (F(up) - F(dn)) / (2 * h)
    return J


def _norm(f):
    return float(np.max(np.abs(f)))


def _newton(F, phi, cfg: FitConfig):
    """Damped Newton with step halving; spectral step if J is ill conditioned.

    Returns ``(phi, f, iterations)``.
    """
    f = F(phi)
    sigma = 1.0
    it = 0
    target = 0.01 * cfg.tol_score
    for it in range(1, cfg.max_newton_iters + 1):
        if _norm(f) <= target:
            return phi, f, it - 1
        J = _fd_jacobian(F, phi, cfg.jacobian_step)
        cond = np.linalg.cond(J) if np.all(np.isfinite(J)) else math.inf
        if cond <= 1e12:
            directions = [-np.linalg.solve(J, f)]
        else:
            directions = [-sigma * f, sigma * f]
        accepted = False
        for step in directions:
            t = 1.0
            for _ in range(21):
                cand = phi + t * step
                with np.errstate(over="ignore", invalid="ignore"):
                    fc = F(cand)
                if np.all(np.isfinite(fc)) and np.linalg.norm(fc) < np.linalg.norm(f):
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            if cond > 1e12:
                raise SingularityError(f"score Jacobian is singular (condition number {cond:.3g})",
                                       condition=cond)
            return phi, f, it
        s, yv = cand - phi, fc - f
        if abs(s @ yv) > 0:
            sigma = float(abs((s @ s) / (s @ yv)))
        small = np.max(np.abs(s)) <= cfg.tol_theta * (1.0 + np.max(np.abs(phi)))
        phi, f = cand, fc
        if small:
            return phi, f, it
    return phi, f, it


def _admissible(data: Dataset, model: MeanModel):
    if model.intercept_only:
        raise PreconditionError(
            "intercept-only mean model: the intercept has no derivative information "
            "for the efficient score"
        )
    if data.n <= model.k + 1:
        raise PreconditionError(f"need n > k + 1, got n={data.n}, k={model.k}")
    model.check(data.x)


def solve_efficient(data: Dataset, model: MeanModel, cfg: FitConfig = FitConfig(),
                    beta0=None) -> FitResult:
    """Estimate ``theta = (beta, v)`` by solving the efficient-score equations.

    Starts from least squares. Each outer iteration re-estimates the error
    density from the residuals and runs Newton on the mean score with that
    density held fixed; iteration stops once the step in ``theta``, the change
    in the density parameters and the mean score are all below tolerance.
    A non-converged fit is returned with ``converged=False``.
    """
    _admissible(data, model)
    start = initial_theta(data, model, beta0)
    if not start.v > 0:
        raise PreconditionError("least squares start has zero residual variance")
    nuis = _Nuisance(cfg)
    phi = np.append(start.beta, math.log(start.v))
    state = nuis.refresh(residuals(data, model, start.beta), start, None)
    history, iterations, converged = [], 0, False
    clamps = 0
    f = None
    for outer in range(1, cfg.max_outer_iters + 1):
        F = _mean_score_fn(data, model, nuis, state)
        phi_new, _, n_it = _newton(F, phi, cfg)
        iterations += n_it
        theta = _theta(phi_new)
        new_state = nuis.refresh(residuals(data, model, theta.beta), theta, state)
        if state is not None:
            clamps += state.clamps
        d_state = nuis.distance(state, new_state)
        phi, state = phi_new, new_state
        f = _mean_score_fn(data, model, nuis, state)(phi)
        history.append(_norm(f))
        # a density that no longer moves means the last Newton solve already holds
        if history[-1] <= cfg.tol_score and d_state <= cfg.tol_theta:
            converged = True
            break
    theta = _theta(phi)
    error = nuis.error(state, theta)
    base_error = error.base if isinstance(error, _CachedRatio) else error
    if state is not None:
        clamps += state.clamps
    fit = FitResult(
        theta=Theta(theta.beta, theta.v, info={"initial": start.as_vector().tolist()}),
        covariance=np.full((phi.size, phi.size), np.nan),
        se=np.full(phi.size, np.nan),
        ci95=np.full((phi.size, 2), np.nan),
        residuals=residuals(data, model, theta.beta),
        error_model=base_error.to_dict(),
        iterations=iterations,
        converged=converged,
        clamp_count=int(clamps),
        mode=cfg.error_mode,
        score_norm=history[-1] if history else float("nan"),
        score_history=history,
        param_names=tuple(model.param_names) + ("v",),
        message="" if converged else "estimating equations did not converge",
        model=model,
        error=base_error,
    )
    kind = cfg.covariance
    if kind == "auto":
        kind = "sandwich"
    try:
        cov = covariance_bound(data, fit) if kind == "bound" else covariance_sandwich(data, fit, cfg)
    except SingularityError as exc:
        fit.message = (fit.message + "; " if fit.message else "") + str(exc)
        return fit
    fit.covariance_kind = kind
    _attach_covariance(fit, cov)
    return fit


def _attach_covariance(fit: FitResult, cov):
    fit.covariance = cov
    fit.covariances[fit.covariance_kind] = cov
    fit.se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    fit.ci95 = confidence_intervals(fit, 0.95)


def _variance_error(fit: FitResult):
    # error law used by the covariance estimators
    if fit.mode == "normal":
        return err.normal_error(fit.theta.v)
    if isinstance(fit.error, err.KernelDensityError) and fit.error.n == fit.residuals.size:
        return fit.error.leave_one_out()
    return fit.error


def _scores_at(data: Dataset, fit: FitResult):
    theta = fit.theta
    error = _variance_error(fit)
    ctx = ScoreContext.build(fit.model, error, theta, data.x)
    return efficient_score(data.x, data.y, ctx).stacked()


def _check_psd(M, what):
    w = np.linalg.eigvalsh(M)
    if not np.all(np.isfinite(w)) or w.min() <= 1e-12 * max(abs(w).max(), 1e-300):
        raise SingularityError(f"{what} is singular or indefinite; eigenvalues {w}", eigenvalues=w)
    return w


def covariance_bound(data: Dataset, fit: FitResult) -> np.ndarray:
    """``n^-1 [mean of S S^T]^-1`` at the fitted parameters.

    For a kernel error estimate the scores use the leave-one-out density.
    """
    S = _scores_at(data, fit)
    n = S.shape[0]
    B = S.T @ S / n
    _check_psd(B, "average score outer product")
    cov = np.linalg.inv(B) / n
    return 0.5 * (cov + cov.T)


def covariance_sandwich(data: Dataset, fit: FitResult, cfg: Optional[FitConfig] = None) -> np.ndarray:
    """``n^-1 A^-1 B A^-T`` with ``A`` the finite-difference score Jacobian.

    The error density is held at its fitted value while differentiating;
    a kernel estimate is used in its leave-one-out form.
    """
    step = cfg.jacobian_step if cfg is not None else 1e-6
    S = _scores_at(data, fit)
    n = S.shape[0]
    B = S.T @ S / n
    state = None if fit.mode == "normal" else _CachedRatio(_variance_error(fit))
    F = _mean_score_fn(data, fit.model, _Nuisance, state)
    phi = np.append(fit.theta.beta, math.log(fit.theta.v))
    A = _fd_jacobian(F, phi, step)
    A[:, -1] /= fit.theta.v  # d/dv = d/dlog v / v
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularityError(f"score Jacobian A is singular (condition number {cond:.3g})",
                               condition=cond)
    Ainv = np.linalg.inv(A)
    cov = Ainv @ B @ Ainv.T / n
    return 0.5 * (cov + cov.T)


def confidence_intervals(fit: FitResult, level: float = 0.95) -> np.ndarray:
    """Wald intervals ``theta_j -/+ z * se_j`` as a (q, 2) array."""
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must lie in (0, 1), got {level}")
    z = normal_quantile(0.5 * (1.0 + level))
    est = fit.theta.as_vector()
    return np.column_stack([est - z * fit.se, est + z * fit.se])
