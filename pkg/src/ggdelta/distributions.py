"""Observation-error families: generalized gamma (mean-CV form), lognormal,
gamma, Tweedie (compound Poisson-gamma) and Bernoulli-logit.

The generalized gamma uses the Prentice (1974) log-location/scale/shape form
with density

    log f(y) = -log(sigma*y) + log|q| + k*log(k) - lgamma(k) + k*(q*w - exp(q*w))

where ``w = (log(y) - mu)/sigma`` and ``k = q**-2``.  A GLM linear predictor
``eta = log(mean)`` is mapped onto ``mu`` by :func:`gg_location_from_eta`, so
models built on it predict the distribution mean directly.

Functions taking ``sigma`` and ``q`` expect scalars; ``y``, ``mu`` and
``eta`` may be arrays.
"""
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from ._special import expm1mx, log_gamma_ratio, stirlerr
from .errors import DomainError, NumericalError

#: shape values with ``|q|`` below this use the exact lognormal limit
LOGNORMAL_SWITCH = 1e-4

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _check_scale(sigma, name="sigma"):
    if not (np.ndim(sigma) == 0 and np.isfinite(sigma) and sigma > 0):
        raise DomainError(f"{name} must be a positive finite scalar, got {sigma!r}")


def _check_q(q):
    if not (np.ndim(q) == 0 and np.isfinite(q)):
        raise DomainError(f"q must be a finite scalar, got {q!r}")


def _positive(y, what="y"):
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise DomainError(f"{what} must be strictly positive")
    return y


def _is_lognormal(q):
    return abs(q) < LOGNORMAL_SWITCH


# --------------------------------------------------------------------------
# generalized gamma
# --------------------------------------------------------------------------

def gg_location_from_eta(eta, sigma, q):
    """Convert ``eta = log(mean)`` into the log-scale location ``mu``.

    ``mu = eta - lgamma(k + 1/beta) + lgamma(k) + log(k)/beta`` with
    ``k = q**-2`` and ``beta = q/sigma``.  The mean only exists when
    ``1 + sigma*q > 0``.
    """
    _check_scale(sigma)
    _check_q(q)
    eta = np.asarray(eta, dtype=float)
    if _is_lognormal(q):
        return eta - 0.5 * sigma * sigma
    if 1.0 + sigma * q <= 0.0:
        raise DomainError(f"mean is infinite for sigma={sigma}, q={q} (requires 1 + sigma*q > 0)")
    k = 1.0 / (q * q)
    shift = log_gamma_ratio(k, sigma / q)
    if not np.isfinite(shift):
        raise DomainError(f"log-gamma ratio overflow for sigma={sigma}, q={q}")
    return eta - shift


def gg_logpdf(y, mu, sigma, q):
    """Log-density of the generalized gamma at ``y > 0``."""
    _check_scale(sigma)
    _check_q(q)
    y = _positive(y)
    mu = np.asarray(mu, dtype=float)
    logy = np.log(y)
    w = (logy - mu) / sigma
    if _is_lognormal(q):
        return -np.log(sigma) - logy - _HALF_LOG_2PI - 0.5 * w * w
    k = 1.0 / (q * q)
    if k >= 15.0:
        # log|q| + k log k - lgamma(k) - k == -log(2 pi)/2 - stirlerr(k)
        const = -_HALF_LOG_2PI - stirlerr(k)
    else:
        const = np.log(abs(q)) + k * np.log(k) - special.gammaln(k) - k
    with np.errstate(over="ignore"):
        return -np.log(sigma) - logy + const - k * expm1mx(q * w)


def gg_cdf(y, mu, sigma, q):
    """Distribution function of the generalized gamma."""
    _check_scale(sigma)
    _check_q(q)
    y = _positive(y)
    w = (np.log(y) - np.asarray(mu, dtype=float)) / sigma
    if _is_lognormal(q):
        return special.ndtr(w)
    k = 1.0 / (q * q)
    with np.errstate(over="ignore"):
        s = k * np.exp(q * w)
    if q > 0:
        return special.gammainc(k, s)
    return special.gammaincc(k, s)


def gg_quantile(p, mu, sigma, q):
    """Quantile function of the generalized gamma for ``0 < p < 1``."""
    _check_scale(sigma)
    _check_q(q)
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError("p must lie in the open interval (0, 1)")
    mu = np.asarray(mu, dtype=float)
    if _is_lognormal(q):
        return np.exp(mu + sigma * special.ndtri(p))
    k = 1.0 / (q * q)
    s = special.gammaincinv(k, p) if q > 0 else special.gammainccinv(k, p)
    w = _log_ratio(s, k) / q
    return np.exp(mu + sigma * w)


def gg_sample(rng, mu, sigma, q, n):
    """Draw ``n`` generalized gamma variates via ``G ~ Gamma(k)``."""
    _check_scale(sigma)
    _check_q(q)
    if n < 1:
        raise DomainError("n must be at least 1")
    mu = np.asarray(mu, dtype=float)
    if _is_lognormal(q):
        return np.exp(mu + sigma * rng.standard_normal(n))
    k = 1.0 / (q * q)
    g = rng.standard_gamma(k, size=n)
    return np.exp(mu + sigma * _log_ratio(g, k) / q)


def _log_ratio(s, k):
    """``log(s / k)``, via log1p near 1 and plain logs elsewhere (s may be ~1e-300)."""
    s = np.asarray(s, dtype=float)
    r = (s - k) / k
    with np.errstate(divide="ignore"):
        return np.where(np.abs(r) < 0.5, np.log1p(r), np.log(s) - np.log(k))


def gg_moments(mu, sigma, q):
    """Return ``(mean, variance, cv)``; the CV does not depend on ``mu``.

    Raises :class:`DomainError` when the requested moment is infinite
    (``1 + sigma*q <= 0`` for the mean, ``1 + 2*sigma*q <= 0`` for the variance).
    """
    _check_scale(sigma)
    _check_q(q)
    mu = np.asarray(mu, dtype=float)
    if _is_lognormal(q):
        lr2 = np.asarray(sigma * sigma)
        mean = np.exp(mu + 0.5 * sigma * sigma)
    else:
        if 1.0 + 2.0 * sigma * q <= 0.0:
            raise DomainError(f"variance is infinite for sigma={sigma}, q={q}")
        k = 1.0 / (q * q)
        a = sigma / q
        r1 = log_gamma_ratio(k, a)
        lr2 = log_gamma_ratio(k, 2.0 * a) - 2.0 * r1
        mean = np.exp(mu + r1)
    with np.errstate(over="ignore"):
        rel_var = np.expm1(lr2)
    if not (np.all(np.isfinite(mean)) and np.isfinite(rel_var)):
        raise DomainError(f"moment overflow for sigma={sigma}, q={q}")
    cv = float(np.sqrt(rel_var))
    return mean, mean * mean * rel_var, cv


def gg_cv(sigma, q):
    """Coefficient of variation of the generalized gamma."""
    return gg_moments(0.0, sigma, q)[2]


def solve_sigma_for_cv(q, cv_target):
    """Find the scale ``sigma`` giving coefficient of variation ``cv_target`` at shape ``q``."""
    _check_q(q)
    if not cv_target > 0:
        raise DomainError("cv_target must be positive")
    if _is_lognormal(q):
        return float(np.sqrt(np.log1p(cv_target ** 2)))
    lo, hi = 1e-6, 20.0
    if q < 0:
        # variance exists only for sigma < 1/(2|q|)
        hi = min(hi, 0.5 / abs(q) * (1.0 - 1e-12))

    def f(s):
        try:
            return gg_cv(s, q) - cv_target
        except DomainError:
            return np.inf

    flo, fhi = f(lo), f(hi)
    if not (flo < 0 < fhi):
        raise DomainError(f"cannot bracket sigma for q={q}, cv={cv_target} within [{lo}, {hi}]")
    return float(optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


# --------------------------------------------------------------------------
# lognormal and gamma
# --------------------------------------------------------------------------

def lognormal_logpdf(y, meanlog, sdlog):
    _check_scale(sdlog, "sdlog")
    y = _positive(y)
    z = (np.log(y) - meanlog) / sdlog
    return -np.log(sdlog * y) - _HALF_LOG_2PI - 0.5 * z * z


def lognormal_cdf(y, meanlog, sdlog):
    _check_scale(sdlog, "sdlog")
    y = _positive(y)
    return special.ndtr((np.log(y) - meanlog) / sdlog)


def gamma_logpdf(y, shape, scale):
    _check_scale(shape, "shape")
    y = _positive(y)
    scale = np.asarray(scale, dtype=float)
    return ((shape - 1.0) * np.log(y) - y / scale - shape * np.log(scale)
            - special.gammaln(shape))


def gamma_cdf(y, shape, scale):
    _check_scale(shape, "shape")
    y = _positive(y)
    return special.gammainc(shape, y / np.asarray(scale, dtype=float))


# --------------------------------------------------------------------------
# Tweedie
# --------------------------------------------------------------------------

_TWEEDIE_MAX_TERMS = 100_000
_LOG_REL_TOL = np.log(1e-12)


def _check_tweedie(p, phi):
    if not (np.ndim(p) == 0 and 1.0 < p < 2.0):
        raise DomainError(f"Tweedie power must lie in (1, 2), got {p!r}")
    _check_scale(phi, "phi")


def tweedie_lambda(mu, p, phi):
    """Poisson rate of the compound Poisson-gamma representation."""
    return np.asarray(mu, dtype=float) ** (2.0 - p) / (phi * (2.0 - p))


def tweedie_log_series(y, p, phi):
    """``log W(y)`` of the Dunn-Smyth series for ``y > 0``.

    Terms are summed outward from the largest one until the edge terms fall
    below ``1e-12`` of the maximum, with at most 1e5 terms per observation.
    """
    _check_tweedie(p, phi)
    y = _positive(np.atleast_1d(y))
    alpha = (2.0 - p) / (1.0 - p)
    c = (-alpha * np.log(y) + alpha * np.log(p - 1.0) - (1.0 - alpha) * np.log(phi)
         - np.log(2.0 - p))
    jmax = np.maximum(1.0, np.round(y ** (2.0 - p) / (phi * (2.0 - p))))
    half = np.ceil(8.0 * np.sqrt(jmax / (1.0 - alpha))) + 10.0
    out = np.empty_like(y)
    todo = np.arange(len(y))
    while todo.size:
        width = int(half[todo].max())
        if 2 * width + 1 > _TWEEDIE_MAX_TERMS:
            raise NumericalError("Tweedie series did not converge", y=y[todo].tolist(), p=p, phi=phi)
        offs = np.arange(-width, width + 1, dtype=float)
        j = jmax[todo, None] + offs[None, :]
        valid = j >= 1.0
        jj = np.where(valid, j, 1.0)
        logw = jj * c[todo, None] - special.gammaln(jj + 1.0) - special.gammaln(-alpha * jj)
        logw = np.where(valid, logw, -np.inf)
        top = logw.max(axis=1)
        lower_ok = (j[:, 0] < 1.0) | (logw[:, 0] - top < _LOG_REL_TOL)
        upper_ok = logw[:, -1] - top < _LOG_REL_TOL
        ok = lower_ok & upper_ok
        out[todo[ok]] = special.logsumexp(logw[ok], axis=1)
        half[todo[~ok]] = 2 * width
        todo = todo[~ok]
    return out


def tweedie_logpdf(y, mu, p, phi):
    """Log-probability at ``y == 0`` and log-density for ``y > 0``."""
    _check_tweedie(p, phi)
    y = np.asarray(y, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape)
    if np.any(y < 0) or np.any(~np.isfinite(y)):
        raise DomainError("Tweedie observations must be non-negative and finite")
    if np.any(~(mu > 0)):
        raise DomainError("Tweedie mean must be positive")
    out = np.empty(y.shape)
    zero = y == 0
    out[zero] = -tweedie_lambda(mu[zero], p, phi)
    yp, mp = y[~zero], mu[~zero]
    if yp.size:
        out[~zero] = (-np.log(yp) + tweedie_log_series(yp, p, phi)
                      + (yp * mp ** (1.0 - p) / (1.0 - p) - mp ** (2.0 - p) / (2.0 - p)) / phi)
    return out


def tweedie_cdf(y, mu, p, phi):
    """Distribution function as a Poisson mixture of gamma distribution functions."""
    _check_tweedie(p, phi)
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise DomainError("Tweedie observations must be non-negative")
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape).ravel()
    yf = y.ravel()
    lam = tweedie_lambda(mu, p, phi)
    shape = (2.0 - p) / (p - 1.0)
    scale = phi * (p - 1.0) * mu ** (p - 1.0)
    nmax = int(np.ceil(lam.max() + 12.0 * np.sqrt(lam.max()) + 30.0))
    n = np.arange(1, nmax + 1, dtype=float)
    logpois = -lam[:, None] + n[None, :] * np.log(lam)[:, None] - special.gammaln(n + 1.0)[None, :]
    gam = special.gammainc(n[None, :] * shape, (yf / scale)[:, None])
    out = np.exp(-lam) + np.sum(np.exp(logpois) * gam, axis=1)
    return np.minimum(out, 1.0).reshape(y.shape)


def tweedie_sample(rng, mu, p, phi, n):
    """Compound Poisson-gamma draws."""
    _check_tweedie(p, phi)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n,))
    lam = tweedie_lambda(mu, p, phi)
    counts = rng.poisson(lam)
    shape = (2.0 - p) / (p - 1.0)
    scale = phi * (p - 1.0) * mu ** (p - 1.0)
    out = np.zeros(n)
    hit = counts > 0
    out[hit] = rng.gamma(counts[hit] * shape, scale[hit])
    return out


# --------------------------------------------------------------------------
# parameter containers and family dispatch
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GengammaParams:
    """Generalized gamma in mean/scale/shape form."""
    mean: float
    sigma: float
    q: float

    def __post_init__(self):
        if not self.mean > 0:
            raise DomainError("mean must be positive")
        _check_scale(self.sigma)
        _check_q(self.q)

    @property
    def mu(self):
        return float(gg_location_from_eta(np.log(self.mean), self.sigma, self.q))


@dataclass(frozen=True)
class LognormalParams:
    meanlog: float
    sdlog: float

    def __post_init__(self):
        _check_scale(self.sdlog, "sdlog")

    @classmethod
    def from_mean_cv(cls, mean, cv):
        sdlog = float(np.sqrt(np.log1p(cv * cv)))
        return cls(float(np.log(mean)) - 0.5 * sdlog * sdlog, sdlog)


@dataclass(frozen=True)
class GammaParams:
    shape: float
    scale: float

    def __post_init__(self):
        _check_scale(self.shape, "shape")
        _check_scale(self.scale, "scale")

    @classmethod
    def from_mean_cv(cls, mean, cv):
        shape = 1.0 / (cv * cv)
        return cls(shape, mean / shape)


@dataclass(frozen=True)
class TweedieParams:
    mu: float
    power: float
    phi: float

    def __post_init__(self):
        if not self.mu > 0:
            raise DomainError("mu must be positive")
        _check_tweedie(self.power, self.phi)


@dataclass(frozen=True)
class BernoulliLogitParams:
    prob: float

    def __post_init__(self):
        if not 0.0 < self.prob < 1.0:
            raise DomainError("prob must lie in (0, 1)")


FamilyParams = GengammaParams | LognormalParams | GammaParams | TweedieParams | BernoulliLogitParams


def family_logpdf(params, y):
    """Log-density (or log-mass) of ``y`` under any of the parameter containers."""
    if isinstance(params, GengammaParams):
        return gg_logpdf(y, params.mu, params.sigma, params.q)
    if isinstance(params, LognormalParams):
        return lognormal_logpdf(y, params.meanlog, params.sdlog)
    if isinstance(params, GammaParams):
        return gamma_logpdf(y, params.shape, params.scale)
    if isinstance(params, TweedieParams):
        return tweedie_logpdf(y, params.mu, params.power, params.phi)
    if isinstance(params, BernoulliLogitParams):
        y = np.asarray(y, dtype=float)
        if np.any((y != 0) & (y != 1)):
            raise DomainError("Bernoulli observations must be 0 or 1")
        return np.where(y == 1, np.log(params.prob), np.log1p(-params.prob))
    raise TypeError(f"unknown family parameters {type(params).__name__}")


def family_cdf(params, y):
    if isinstance(params, GengammaParams):
        return gg_cdf(y, params.mu, params.sigma, params.q)
    if isinstance(params, LognormalParams):
        return lognormal_cdf(y, params.meanlog, params.sdlog)
    if isinstance(params, GammaParams):
        return gamma_cdf(y, params.shape, params.scale)
    if isinstance(params, TweedieParams):
        return tweedie_cdf(y, params.mu, params.power, params.phi)
    raise TypeError(f"no distribution function for {type(params).__name__}")


def family_sample(rng, params, n):
    if isinstance(params, GengammaParams):
        return gg_sample(rng, params.mu, params.sigma, params.q, n)
    if isinstance(params, LognormalParams):
        return np.exp(params.meanlog + params.sdlog * rng.standard_normal(n))
    if isinstance(params, GammaParams):
        return rng.gamma(params.shape, params.scale, size=n)
    if isinstance(params, TweedieParams):
        return tweedie_sample(rng, params.mu, params.power, params.phi, n)
    if isinstance(params, BernoulliLogitParams):
        return (rng.random(n) < params.prob).astype(float)
    raise TypeError(f"unknown family parameters {type(params).__name__}")
