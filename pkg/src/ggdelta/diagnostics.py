"""Randomized quantile residuals with random effects drawn from their posterior.

Residuals use one draw of the random effects from their Laplace (Gaussian)
approximation rather than the mode, which would make residuals too tight
where the field is well estimated.  Delta models are checked on the positive
observations with the positive-family distribution function; Tweedie models
on every observation, randomizing over the point mass at zero.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from . import families as fam
from .errors import DomainError, NumericalError
from .gmrf import cholesky_jittered

_CLIP = 1e-15


@dataclass(frozen=True)
class ResidualSet:
    residuals: np.ndarray
    predictor: str               # "full" or "positive"
    observation_index: np.ndarray
    seed: object = None

    def __len__(self):
        return len(self.residuals)


def sample_random_effects(rng, fit):
    """One draw ``u* ~ N(u_hat, P)`` per spatial component."""
    draws = {}
    for name, cf in fit.components.items():
        if not cf.spatial:
            continue
        try:
            chol, _ = cholesky_jittered(cf.posterior.cov)
        except NumericalError as exc:
            raise NumericalError(f"posterior covariance of the {name} field is not positive definite",
                                 **exc.diagnostics) from exc
        draws[name] = cf.posterior.u_hat + chol @ rng.standard_normal(len(chol))
    return draws


def _linear_predictor(cf, draw):
    comp = cf.component
    beta_free = comp.split(cf.theta)[0]
    eta = comp.base_offset + comp.X_free @ beta_free
    if comp.spatial:
        eta = eta + draw[comp.node]
    return eta


def rqr(rng, fit, seed=None):
    """Randomized quantile residuals of the positive (delta) or full (Tweedie) predictor."""
    draws = sample_random_effects(rng, fit)
    name = "positive" if fit.spec.is_delta else "tweedie"
    cf = fit.components[name]
    comp = cf.component
    eta = _linear_predictor(cf, draws.get(name))
    with np.errstate(all="ignore"):
        u = np.asarray(fam.cdf(cf.family, comp.y, eta, cf.theta_obs), dtype=float)
    if cf.family == "tweedie":
        zero = comp.y == 0
        u = u.copy()
        u[zero] = rng.uniform(0.0, u[zero])
    bad = np.flatnonzero(~np.isfinite(u))
    if bad.size:
        raise NumericalError("distribution function not finite", observation=int(bad[0]))
    res = special.ndtri(np.clip(u, _CLIP, 1.0 - _CLIP))
    if fit.spec.is_delta:
        index = np.flatnonzero(fit.data.y > 0)
    else:
        index = np.arange(len(fit.data))
    return ResidualSet(res, "positive" if fit.spec.is_delta else "full", index, seed)


def qq_data(residuals):
    """Theoretical normal quantiles at ``(i - 0.5)/n`` against sorted residuals."""
    r = residuals.residuals if isinstance(residuals, ResidualSet) else np.asarray(residuals, float)
    n = len(r)
    if n < 2:
        raise DomainError("need at least two residuals")
    theoretical = special.ndtri((np.arange(1, n + 1) - 0.5) / n)
    return theoretical, np.sort(r)


def ks_normal(residuals):
    """Kolmogorov-Smirnov test of the residuals against N(0, 1)."""
    r = residuals.residuals if isinstance(residuals, ResidualSet) else np.asarray(residuals, float)
    res = stats.kstest(r, "norm")
    return float(res.statistic), float(res.pvalue)


def upper_tail(residuals, fraction=0.1):
    """Mean of the top ``fraction`` of residuals and its normal expectation."""
    theoretical, empirical = qq_data(residuals)
    k = max(1, int(round(fraction * len(empirical))))
    return float(empirical[-k:].mean()), float(theoretical[-k:].mean())
