"""Per-observation negative log-likelihoods on the linear-predictor scale.

Each family maps a linear predictor ``eta`` (log-mean, or logit for the
encounter model) plus a short vector of unconstrained observation
parameters to the negative log-likelihood of every observation and its
first three derivatives in ``eta``.  The Laplace engine needs the second
derivative for the inner Hessian and the third for the gradient of its
log-determinant.
"""
import numpy as np
from scipy import special

from . import distributions as dist

LOG_LINK = ("lognormal", "gamma", "gengamma", "tweedie")
POSITIVE = ("lognormal", "gamma", "gengamma")
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def obs_param_names(family):
    return {
        "bernoulli": [],
        "lognormal": ["log_sigma"],
        "gamma": ["log_sigma"],
        "gengamma": ["log_sigma", "q"],
        "tweedie": ["logit_power", "log_phi"],
    }[family]


def natural_params(family, theta):
    """Unconstrained observation parameters to their natural scale."""
    theta = np.asarray(theta, dtype=float)
    if family == "bernoulli":
        return {}
    if family in ("lognormal", "gamma"):
        return {"sigma": float(np.exp(theta[0]))}
    if family == "gengamma":
        return {"sigma": float(np.exp(theta[0])), "q": float(theta[1])}
    if family == "tweedie":
        return {"power": float(1.0 + special.expit(theta[0])), "phi": float(np.exp(theta[1]))}
    raise ValueError(f"unknown family {family!r}")


def nll_terms(family, y, eta, theta, derivs=3):
    """Return ``(nll, d1, d2, d3)`` per observation (derivatives in ``eta``).

    Non-finite values are allowed to propagate; callers treat them as an
    infeasible trial point.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    d3 = None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if family == "bernoulli":
            p = special.expit(eta)
            nll = np.logaddexp(0.0, eta) - y * eta
            d1 = p - y
            d2 = p * (1.0 - p)
            if derivs >= 3:
                d3 = d2 * (1.0 - 2.0 * p)
        elif family == "lognormal":
            sigma = np.exp(theta[0])
            logy = np.log(y)
            r = logy - eta + 0.5 * sigma * sigma
            s2 = sigma * sigma
            nll = logy + theta[0] + _HALF_LOG_2PI + 0.5 * r * r / s2
            d1 = -r / s2
            d2 = np.full_like(eta, 1.0 / s2)
            if derivs >= 3:
                d3 = np.zeros_like(eta)
        elif family == "gamma":
            a = np.exp(-2.0 * theta[0])
            logy = np.log(y)
            t = a * y * np.exp(-eta)
            nll = special.gammaln(a) - a * np.log(a) + a * eta - (a - 1.0) * logy + t
            d1 = a - t
            d2 = t
            if derivs >= 3:
                d3 = -t
        elif family == "gengamma":
            sigma, q = np.exp(theta[0]), theta[1]
            mu = dist.gg_location_from_eta(eta, sigma, q) if np.isfinite(q) else eta * np.nan
            nll = -dist.gg_logpdf(y, mu, sigma, q)
            w = (np.log(y) - mu) / sigma
            if abs(q) < dist.LOGNORMAL_SWITCH:
                d1 = -w / sigma
                d2 = np.full_like(eta, 1.0 / (sigma * sigma))
                if derivs >= 3:
                    d3 = np.zeros_like(eta)
            else:
                ez = np.exp(q * w)
                d1 = -np.expm1(q * w) / (q * sigma)
                d2 = ez / (sigma * sigma)
                if derivs >= 3:
                    d3 = -q * ez / sigma ** 3
        elif family == "tweedie":
            p = 1.0 + special.expit(theta[0])
            phi = np.exp(theta[1])
            m1 = np.exp((1.0 - p) * eta)
            m2 = np.exp((2.0 - p) * eta)
            pos = y > 0
            nll = m2 / ((2.0 - p) * phi)
            nll[pos] += (np.log(y[pos]) - _tweedie_series(y[pos], p, phi)
                         - y[pos] * m1[pos] / ((1.0 - p) * phi))
            d1 = -(y * m1 - m2) / phi
            d2 = -((1.0 - p) * y * m1 - (2.0 - p) * m2) / phi
            if derivs >= 3:
                d3 = -((1.0 - p) ** 2 * y * m1 - (2.0 - p) ** 2 * m2) / phi
        else:
            raise ValueError(f"unknown family {family!r}")
    return nll, d1, d2, d3


_series_cache = {}


def _tweedie_series(y, p, phi):
    """``log W(y; p, phi)`` memoized on its arguments.

    The series does not involve the mean, so it is constant across the inner
    Newton iterations of a Laplace evaluation.
    """
    key = (float(p), float(phi), y.tobytes())
    hit = _series_cache.get(key)
    if hit is None:
        if len(_series_cache) > 64:
            _series_cache.clear()
        hit = _series_cache[key] = dist.tweedie_log_series(y, p, phi)
    return hit


def init_obs_params(family, y, offset=None):
    """Starting values for the unconstrained observation parameters."""
    y = np.asarray(y, dtype=float)
    if family == "bernoulli":
        return np.zeros(0)
    if family == "tweedie":
        mean = max(y.mean(), 1e-8)
        phi = max(y.var() / mean ** 1.5, 1e-3)
        return np.array([0.0, np.log(phi)])
    cv = y.std() / y.mean() if len(y) > 1 and y.mean() > 0 else 1.0
    cv = float(np.clip(cv, 0.05, 10.0))
    if family == "gamma":
        return np.array([np.log(cv)])
    sdlog = np.sqrt(np.log1p(cv * cv))
    if family == "lognormal":
        return np.array([np.log(sdlog)])
    return np.array([np.log(sdlog), 0.2])


def link(family, mean):
    mean = np.asarray(mean, dtype=float)
    if family == "bernoulli":
        return special.logit(np.clip(mean, 1e-6, 1 - 1e-6))
    return np.log(np.maximum(mean, 1e-12))


def inverse_link(family, eta):
    if family == "bernoulli":
        return special.expit(eta)
    return np.exp(eta)


def cdf(family, y, eta, theta):
    """Distribution function of each observation given its linear predictor."""
    nat = natural_params(family, theta)
    if family == "lognormal":
        s = nat["sigma"]
        return dist.lognormal_cdf(y, eta - 0.5 * s * s, s)
    if family == "gamma":
        a = 1.0 / nat["sigma"] ** 2
        return dist.gamma_cdf(y, a, np.exp(eta) / a)
    if family == "gengamma":
        mu = dist.gg_location_from_eta(eta, nat["sigma"], nat["q"])
        return dist.gg_cdf(y, mu, nat["sigma"], nat["q"])
    if family == "tweedie":
        return dist.tweedie_cdf(y, np.exp(eta), nat["power"], nat["phi"])
    raise ValueError(f"no distribution function for {family!r}")


def sample(rng, family, eta, theta):
    """Draw one observation per linear predictor value."""
    nat = natural_params(family, theta)
    eta = np.asarray(eta, dtype=float)
    n = eta.size
    if family == "bernoulli":
        return (rng.random(n) < special.expit(eta)).astype(float)
    if family == "lognormal":
        s = nat["sigma"]
        return np.exp(eta - 0.5 * s * s + s * rng.standard_normal(n))
    if family == "gamma":
        a = 1.0 / nat["sigma"] ** 2
        return rng.gamma(a, np.exp(eta) / a)
    if family == "gengamma":
        mu = dist.gg_location_from_eta(eta, nat["sigma"], nat["q"])
        return dist.gg_sample(rng, mu, nat["sigma"], nat["q"], n)
    if family == "tweedie":
        return dist.tweedie_sample(rng, np.exp(eta), nat["power"], nat["phi"], n)
    raise ValueError(f"unknown family {family!r}")
