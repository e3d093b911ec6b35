"""Error-distribution models consumed by the efficient score.

Every model exposes the log-density derivative ratio ``f'(eps)/f(eps)``
together with the third and fourth moments of the (mean zero) error.
Parametric models also know their variance; the kernel estimate does not,
because the variance is a parameter of interest solved for by the score.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, optimize, special

from .exceptions import ConvergenceError, DimensionError, DomainError, PreconditionError

__all__ = [
    "ErrorModel",
    "NormalError",
    "GumbelError",
    "NormalMixtureError",
    "KernelDensityError",
    "normal_error",
    "gumbel_error",
    "mixture_error",
    "kde_error",
    "fit_gumbel",
    "fit_mixture",
    "em_two_normals",
    "silverman_bandwidth",
    "moment_t_squared",
    "error_model_from_dict",
    "DENSITY_FLOOR",
]

EULER_GAMMA = float(np.euler_gamma)
ZETA3 = float(special.zeta(3.0))
DENSITY_FLOOR = 1e-12
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_KDE_CENTERS_INLINE = 10_000


def _phi(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


def _bisect_ppf(cdf, u, lo, hi, tol=1e-10, max_iter=200):
    """Vectorised bisection for ``cdf(x) = u`` on the bracket ``[lo, hi]``."""
    u = np.asarray(u, dtype=float)
    lo = np.full(u.shape, float(lo))
    hi = np.full(u.shape, float(hi))
    if np.any(cdf(lo) > u) or np.any(cdf(hi) < u):
        raise ConvergenceError("quantile lies outside the search bracket", bracket=(lo.min(), hi.max()))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) <= tol:
            break
    return 0.5 * (lo + hi)


class ErrorModel:
    """Interface shared by all error-density models.

    Subclasses implement ``pdf``, ``dpdf``, ``cdf`` and the moment
    attributes. ``variance`` is ``None`` when the model does not define one.
    """

    kind = "abstract"
    variance = None
    mu3 = 0.0
    mu4 = None
    has_closed_form_moments = True

    def pdf(self, eps):
        raise NotImplementedError

    def dpdf(self, eps):
        raise NotImplementedError

    def cdf(self, eps):
        raise NotImplementedError

    def score_ratio_counted(self, eps):
        """Return ``(f'/f, n_clamped)``; densities are floored at ``DENSITY_FLOOR``."""
        eps = np.asarray(eps, dtype=float)
        f = self.pdf(eps)
        low = f < DENSITY_FLOOR
        return self.dpdf(eps) / np.maximum(f, DENSITY_FLOOR), int(np.count_nonzero(low))

    def score_ratio(self, eps):
        return self.score_ratio_counted(eps)[0]

    def support(self):
        """Interval holding essentially all of the probability mass."""
        s = math.sqrt(self.variance)
        return -12.0 * s, 12.0 * s

    def ppf(self, u):
        lo, hi = self.support()
        return _bisect_ppf(self.cdf, u, lo, hi)

    def to_dict(self) -> dict:
        raise NotImplementedError


class NormalError(ErrorModel):
    """``N(0, v)`` errors."""

    kind = "normal"

    def __init__(self, v):
        v = float(v)
        if not v > 0 or not math.isfinite(v):
            raise DomainError(f"normal variance must be positive, got {v}")
        self.variance = v
        self.mu3 = 0.0
        self.mu4 = 3.0 * v * v
        self._sd = math.sqrt(v)

    def pdf(self, eps):
        return _phi(np.asarray(eps, dtype=float) / self._sd) / self._sd

    def dpdf(self, eps):
        eps = np.asarray(eps, dtype=float)
        return -eps / self.variance * self.pdf(eps)

    def score_ratio_counted(self, eps):
        return -np.asarray(eps, dtype=float) / self.variance, 0

    def cdf(self, eps):
        return special.ndtr(np.asarray(eps, dtype=float) / self._sd)

    def ppf(self, u):
        return self._sd * special.ndtri(np.asarray(u, dtype=float))

    def to_dict(self):
        return {"kind": self.kind, "v": self.variance}

    def __repr__(self):
        return f"NormalError(v={self.variance!r})"


class GumbelError(ErrorModel):
    """Minimum extreme value errors, centred to mean zero.

    ``f(eps) = exp(z - exp(z)) / lam`` with ``z = eps/lam - gamma``. The law
    is left skewed. The fourth moment is ``3 lam^4 pi^4 / 20`` (checked by
    :meth:`quad_moment`); the frequently quoted ``lam^4 pi^4 / 15`` is kept
    in ``moment_notes`` for comparison.
    """

    kind = "gumbel"
    has_closed_form_moments = True

    def __init__(self, lam):
        lam = float(lam)
        if not lam > 0 or not math.isfinite(lam):
            raise DomainError(f"Gumbel scale must be positive, got {lam}")
        self.lam = lam
        self.variance = math.pi**2 * lam**2 / 6.0
        self.mu3 = -2.0 * lam**3 * ZETA3
        # excess kurtosis 12/5, i.e. mu4 = 27/5 v^2
        self.mu4 = 3.0 * lam**4 * math.pi**4 / 20.0
        self.moment_notes = {
            "mu4_lam4_pi4_over_15": lam**4 * math.pi**4 / 15.0,
            "mu4_from_excess_kurtosis_12_5": 3.0 * lam**4 * math.pi**4 / 20.0,
        }

    def _z(self, eps):
        return np.asarray(eps, dtype=float) / self.lam - EULER_GAMMA

    def pdf(self, eps):
        z = self._z(eps)
        return np.exp(z - np.exp(z)) / self.lam

    def dpdf(self, eps):
        return self.pdf(eps) * self.score_ratio(eps)

    def score_ratio_counted(self, eps):
        return (1.0 - np.exp(self._z(eps))) / self.lam, 0

    def cdf(self, eps):
        return -np.expm1(-np.exp(self._z(eps)))

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return self.lam * EULER_GAMMA + self.lam * np.log(-np.log1p(-u))

    def support(self):
        # cdf(lo) ~ e^-40 and 1 - cdf(hi) = e^-40; the left tail is long
        return self.lam * (EULER_GAMMA - 40.0), self.lam * (EULER_GAMMA + math.log(40.0))

    def quad_moment(self, p):
        """``E[eps^p]`` by quadrature."""
        # eps = lam (log w + gamma) with w ~ Exp(1)
        val, _ = integrate.quad(lambda w: (self.lam * (math.log(w) + EULER_GAMMA)) ** p * math.exp(-w),
                                0.0, np.inf, epsabs=0.0, epsrel=1e-11, limit=400)
        return val

    def to_dict(self):
        return {"kind": self.kind, "lambda": self.lam}

    def __repr__(self):
        return f"GumbelError(lam={self.lam!r})"


class NormalMixtureError(ErrorModel):
    """Two-component normal mixture shifted by ``m0 = p1 m1 + p2 m2``.

    Parameters follow the ordering ``(p1, p2, m0, m1, m2, s1, s2)``.
    """

    kind = "mixture"

    def __init__(self, p1, p2, m0, m1, m2, s1, s2):
        p1, p2, m0, m1, m2, s1, s2 = map(float, (p1, p2, m0, m1, m2, s1, s2))
        if not (0 < p1 < 1 and 0 < p2 < 1) or abs(p1 + p2 - 1) > 1e-10:
            raise DomainError(f"mixture weights must lie in (0,1) and sum to 1, got {p1}, {p2}")
        if not (s1 > 0 and s2 > 0):
            raise DomainError(f"component standard deviations must be positive, got {s1}, {s2}")
        if abs(m0 - (p1 * m1 + p2 * m2)) > 1e-8 * (1 + abs(m1) + abs(m2)):
            raise DomainError("centering constant m0 must equal p1*m1 + p2*m2")
        self.p = np.array([p1, p2])
        self.m0 = m0
        self.m = np.array([m1, m2])
        self.s = np.array([s1, s2])
        d = self.m - m0
        self.variance = float(np.sum(self.p * (d**2 + self.s**2)))
        self.mu3 = float(np.sum(self.p * (d**3 + 3 * d * self.s**2)))
        self.mu4 = float(np.sum(self.p * (d**4 + 6 * d**2 * self.s**2 + 3 * self.s**4)))

    @property
    def mu(self):
        return (self.p[0], self.p[1], self.m0, self.m[0], self.m[1], self.s[0], self.s[1])

    def _components(self, eps):
        eps = np.asarray(eps, dtype=float)[..., None]
        z = (eps - self.m + self.m0) / self.s
        return z, _phi(z) / self.s

    def pdf(self, eps):
        _, fi = self._components(eps)
        return fi @ self.p

    def dpdf(self, eps):
        z, fi = self._components(eps)
        return (-(z / self.s) * fi) @ self.p

    def cdf(self, eps):
        eps = np.asarray(eps, dtype=float)[..., None]
        return special.ndtr((eps - self.m + self.m0) / self.s) @ self.p

    def support(self):
        c = self.m - self.m0
        w = 12.0 * self.s.max()
        return c.min() - w, c.max() + w

    def to_dict(self):
        return {"kind": self.kind, "mu": list(self.mu)}

    def __repr__(self):
        return "NormalMixtureError(p1={}, p2={}, m0={}, m1={}, m2={}, s1={}, s2={})".format(*self.mu)


class KernelDensityError(ErrorModel):
    """Gaussian-kernel density estimate built on residual ``centers``.

    ``mu3``/``mu4`` are the raw sample moments of the centers. ``variance``
    is ``None``: the score takes ``v`` from the current parameter iterate.
    """

    kind = "kernel"
    has_closed_form_moments = False
    _chunk = 2_000_000

    def __init__(self, centers, h):
        h = float(h)
        if not h > 0 or not math.isfinite(h):
            raise DomainError(f"bandwidth must be positive, got {h}")
        c = np.array(centers, dtype=float).ravel()
        if c.size < 2:
            raise PreconditionError("kernel density needs at least two centers")
        c.setflags(write=False)
        self.centers = c
        self.h = h
        self.n = c.size
        self.variance = None
        self.mu3 = float(np.mean(c**3))
        self.mu4 = float(np.mean(c**4))

    def _kernel_sums(self, eps):
        eps = np.asarray(eps, dtype=float)
        flat = eps.ravel()
        f = np.empty_like(flat)
        df = np.empty_like(flat)
        step = max(1, self._chunk // self.n)
        for i in range(0, flat.size, step):
            u = (flat[i:i + step, None] - self.centers[None, :]) / self.h
            k = _phi(u)
            f[i:i + step] = k.sum(axis=1)
            df[i:i + step] = (u * k).sum(axis=1)
        f *= 1.0 / (self.n * self.h)
        df *= -1.0 / (self.n * self.h * self.h)
        return f.reshape(eps.shape), df.reshape(eps.shape)

    def pdf(self, eps):
        return self._kernel_sums(eps)[0]

    def dpdf(self, eps):
        return self._kernel_sums(eps)[1]

    def score_ratio_counted(self, eps):
        f, df = self._kernel_sums(eps)
        low = f < DENSITY_FLOOR
        return df / np.maximum(f, DENSITY_FLOOR), int(np.count_nonzero(low))

    def cdf(self, eps):
        eps = np.asarray(eps, dtype=float)
        u = (eps[..., None] - self.centers) / self.h
        return special.ndtr(u).mean(axis=-1)

    def support(self):
        return self.centers.min() - 12 * self.h, self.centers.max() + 12 * self.h

    def to_dict(self):
        d = {"kind": self.kind, "h": self.h, "n_centers": self.n,
             "mu3": self.mu3, "mu4": self.mu4}
        if self.n <= _KDE_CENTERS_INLINE:
            d["centers"] = self.centers.tolist()
        return d

    def __repr__(self):
        return f"KernelDensityError(n={self.n}, h={self.h!r})"

    def leave_one_out(self) -> "LeaveOneOutKernel":
        """Version whose value at observation ``i`` omits center ``i``."""
        return LeaveOneOutKernel(self)


class LeaveOneOutKernel(ErrorModel):
    """Leave-one-out kernel estimate aligned with the residual vector.

    Evaluating at ``eps`` of length ``n`` drops the kernel of center ``i``
    from the value at ``eps[i]``. The in-sample self term inflates
    ``|f'/f|`` near each residual; dropping it keeps variance estimates
    honest in small samples.
    """

    kind = "kernel"
    has_closed_form_moments = False

    def __init__(self, base: KernelDensityError):
        if base.n < 3:
            raise PreconditionError("leave-one-out kernel needs at least three centers")
        self.base = base
        self.variance = None
        self.mu3, self.mu4 = base.mu3, base.mu4

    def _sums(self, eps):
        eps = np.asarray(eps, dtype=float)
        c, h, n = self.base.centers, self.base.h, self.base.n
        if eps.shape != c.shape:
            raise DimensionError(f"leave-one-out evaluation needs {n} residuals, got {eps.size}",
                                 expected=n, actual=eps.size)
        f = np.empty(n)
        df = np.empty(n)
        step = max(1, self.base._chunk // n)
        for i in range(0, n, step):
            u = (eps[i:i + step, None] - c[None, :]) / h
            k = _phi(u)
            rows = np.arange(k.shape[0])
            k[rows, i + rows] = 0.0
            f[i:i + step] = k.sum(axis=1)
            df[i:i + step] = (u * k).sum(axis=1)
        f *= 1.0 / ((n - 1) * h)
        df *= -1.0 / ((n - 1) * h * h)
        return f, df

    def pdf(self, eps):
        return self._sums(eps)[0]

    def dpdf(self, eps):
        return self._sums(eps)[1]

    def score_ratio_counted(self, eps):
        f, df = self._sums(eps)
        low = f < DENSITY_FLOOR
        return df / np.maximum(f, DENSITY_FLOOR), int(np.count_nonzero(low))

    def to_dict(self):
        return self.base.to_dict()


def normal_error(v) -> NormalError:
    """Normal errors: ``f'/f = -eps/v``, ``E eps^3 = 0``, ``E eps^4 = 3 v^2``."""
    return NormalError(v)


def gumbel_error(lam) -> GumbelError:
    return GumbelError(lam)


def mixture_error(mu) -> NormalMixtureError:
    """Build the mixture from ``mu = (p1, p2, m0, m1, m2, s1, s2)``."""
    mu = np.asarray(mu, dtype=float).ravel()
    if mu.size != 7:
        raise DomainError(f"mixture parameter vector needs 7 entries, got {mu.size}")
    return NormalMixtureError(*mu)


def kde_error(residuals, h) -> KernelDensityError:
    return KernelDensityError(residuals, h)


def silverman_bandwidth(residuals) -> float:
    """``h = (4 s^5 / (3 n))^(1/5)`` with ``s`` the sample standard deviation."""
    r = np.asarray(residuals, dtype=float).ravel()
    n = r.size
    if n < 2:
        raise PreconditionError("bandwidth needs at least two residuals")
    sd = float(np.std(r, ddof=1))
    if not sd > 0:
        raise PreconditionError("zero-spread sample has no bandwidth")
    return (4.0 * sd**5 / (3.0 * n)) ** 0.2


def moment_t_squared(model: ErrorModel, v=None) -> float:
    """``E[t(eps)^2] = mu4 - v^2 - mu3^2 / v``.

    ``v`` defaults to the model's own variance and is mandatory for models
    without one (kernel estimates).
    """
    if v is None:
        v = model.variance
    if v is None:
        raise PreconditionError(f"{model.kind} error model has no variance; pass v explicitly")
    v = float(v)
    if not v > 0:
        raise DomainError(f"variance must be positive, got {v}")
    val = model.mu4 - v * v - model.mu3**2 / v
    if not val > 0:
        raise DomainError(f"inconsistent moments: E[t^2] = {val} <= 0")
    return float(val)


def _gumbel_profile_score(lam, eps):
    # d loglik / d lam, multiplied by lam^2 / n
    z = eps / lam - EULER_GAMMA
    return -lam - eps.mean() + np.mean(eps * np.exp(z))


def fit_gumbel(residuals, max_iter: int = 200) -> GumbelError:
    """Maximum likelihood scale of the centred minimum-Gumbel law."""
    eps = np.asarray(residuals, dtype=float).ravel()
    if eps.size < 10:
        raise PreconditionError(f"fit_gumbel needs n >= 10, got {eps.size}")
    sd = float(np.std(eps))
    if not sd > 0:
        raise PreconditionError("residuals have zero spread")
    lam0 = math.sqrt(6.0) * sd / math.pi
    lo, hi = lam0, lam0
    # profile score is positive for small lam and negative for large lam
    with np.errstate(over="ignore"):
        for _ in range(max_iter):
            g = _gumbel_profile_score(lo, eps)
            if np.isfinite(g) and g > 0:
                break
            lo *= 0.7
        else:
            raise ConvergenceError("could not bracket the Gumbel scale", bracket=(lo, hi))
        for _ in range(max_iter):
            g = _gumbel_profile_score(hi, eps)
            if np.isfinite(g) and g < 0:
                break
            hi *= 1.5
        else:
            raise ConvergenceError("could not bracket the Gumbel scale", bracket=(lo, hi))
        try:
            lam = optimize.brentq(_gumbel_profile_score, lo, hi, args=(eps,),
                                  xtol=1e-14, rtol=1e-13, maxiter=max_iter)
        except RuntimeError as exc:
            raise ConvergenceError(str(exc), bracket=(lo, hi)) from None
    return GumbelError(lam)


def _mixture_loglik(x, p, m, s):
    z = (x[:, None] - m) / s
    lw = np.log(p) - np.log(s) - 0.5 * z * z - 0.5 * math.log(2 * math.pi)
    top = lw.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(lw - top).sum(axis=1))
    return lse.sum(), np.exp(lw - lse[:, None])


def em_two_normals(x, p, m, s, tol: float = 1e-8, max_iter: int = 5000, floor: float = 0.0):
    """EM iterations for a two-component normal mixture.

    Returns ``(p, m, s, history)`` with ``history`` the log-likelihood of
    each iterate. Raises :class:`ConvergenceError` if a component standard
    deviation drops below ``floor``.
    """
    x = np.asarray(x, dtype=float)
    p, m, s = (np.array(a, dtype=float) for a in (p, m, s))
    ll, r = _mixture_loglik(x, p, m, s)
    history = [ll]
    for _ in range(max_iter):
        nk = r.sum(axis=0)
        if np.any(nk <= 0):
            raise ConvergenceError("a mixture component lost all responsibility", last=(p, m, s))
        p = nk / x.size
        m = (r * x[:, None]).sum(axis=0) / nk
        s = np.sqrt((r * (x[:, None] - m) ** 2).sum(axis=0) / nk)
        bad = np.flatnonzero(s < floor)
        if bad.size:
            raise ConvergenceError(f"mixture component {bad[0] + 1} collapsed (sd={s[bad[0]]:.3g})",
                                   last=(p, m, s))
        ll, r = _mixture_loglik(x, p, m, s)
        history.append(ll)
        if ll - history[-2] < tol:
            break
    return p, m, s, history


def _kmeans_init(x, c):
    c = np.array(c, dtype=float)
    for _ in range(20):
        lab = np.abs(x[:, None] - c).argmin(axis=1)
        if np.any(np.bincount(lab, minlength=2) < 2):
            return None
        new = np.array([x[lab == j].mean() for j in range(2)])
        if np.allclose(new, c):
            break
        c = new
    p = np.bincount(lab, minlength=2) / x.size
    s = np.array([x[lab == j].std() for j in range(2)])
    return p, c, s


def fit_mixture(residuals, restarts: int = 5, rng=None, init=None, tol: float = 1e-8,
                max_iter: int = 5000) -> NormalMixtureError:
    """Fit a two-component normal mixture by EM with k-means starts.

    The best of ``restarts`` runs (by log-likelihood) is returned, with
    components ordered so that ``m1 <= m2`` and centred to mean zero. An
    ``init`` model warm-starts a single run instead. The log-likelihood trace
    of the selected run is attached as ``loglik_history``.
    """
    x = np.asarray(residuals, dtype=float).ravel()
    if x.size < 20:
        raise PreconditionError(f"fit_mixture needs n >= 20, got {x.size}")
    sd = float(np.std(x))
    if not sd > 0:
        raise PreconditionError("residuals have zero spread")
    floor = 1e-3 * sd
    starts = []
    if init is not None:
        starts.append((init.p.copy(), init.m - init.m0 + x.mean(), init.s.copy()))
    else:
        rng = np.random.default_rng(rng)
        q = np.quantile(x, [0.25, 0.75])
        for j in range(max(1, restarts)):
            c = q if j == 0 else rng.choice(x, size=2, replace=False)
            st = _kmeans_init(x, np.sort(c))
            if st is not None and np.all(st[2] > floor):
                starts.append(st)
        if not starts:
            starts.append((np.array([0.5, 0.5]), q, np.array([sd, sd])))
    best, errors = None, []
    for p0, m0, s0 in starts:
        try:
            p, m, s, hist = em_two_normals(x, p0, m0, s0, tol=tol, max_iter=max_iter, floor=floor)
        except ConvergenceError as exc:
            errors.append(exc)
            continue
        if best is None or hist[-1] > best[3][-1]:
            best = (p, m, s, hist)
    if best is None:
        raise errors[-1]
    p, m, s, hist = best
    order = np.argsort(m)
    p, m, s = p[order], m[order], s[order]
    p = p / p.sum()
    model = NormalMixtureError(p[0], 1.0 - p[0], p[0] * m[0] + (1.0 - p[0]) * m[1], m[0], m[1], s[0], s[1])
    model.loglik_history = hist
    return model


def error_model_from_dict(d: dict) -> ErrorModel:
    """Inverse of ``ErrorModel.to_dict``."""
    kind = d.get("kind")
    if kind == "normal":
        return NormalError(d["v"])
    if kind == "gumbel":
        return GumbelError(d["lambda"])
    if kind == "mixture":
        return mixture_error(d["mu"])
    if kind == "kernel":
        if "centers" not in d:
            raise PreconditionError("kernel model was serialized without its centers")
        return KernelDensityError(d["centers"], d["h"])
    raise DomainError(f"unknown error model kind {kind!r}")

