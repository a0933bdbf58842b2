"""Area-weighted abundance indices from fitted models.

The index is ``sum_s area * E[y_s]`` over a prediction grid, where the
expected density is ``p_s * mu_s`` for delta models and ``mu_s`` for Tweedie.
Random-field values at the grid come from the conditional (kriging) mean
given the field at the observation nodes.

Plugging the random-effect mode into the exponential understates the mean
of the index.  The bias correction here takes, for every grid cell, the
first two epsilon-method cumulants of the log-linear predictor: its mean
(the mode plus the skewness shift implied by the Laplace approximation) and
its variance (posterior plus kriging variance).  Exponentiating
``mean + var/2`` is exact for Gaussian posteriors.  The literal first-order
estimator, which differentiates the Laplace marginal of the objective
augmented by ``epsilon * index``, is available as
:func:`epsilon_index_first_order` for comparison; it truncates
``E[exp(w)]`` after the variance term.
"""
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special
from scipy.spatial.distance import cdist

from . import families as fam
from .errors import DomainError, NumericalError
from .estimation import Laplace, field_covariance
from .gmrf import PointSet, corr_and_dlogrange

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(32)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()
_SE_STEP = 1e-4


@dataclass(frozen=True)
class IndexEstimate:
    naive_value: float
    bias_corrected_value: float
    standard_error: float
    cv: float
    corrected: bool = True

    def __post_init__(self):
        if not (self.naive_value > 0 and self.bias_corrected_value > 0):
            raise DomainError("index values must be positive")


@dataclass(frozen=True)
class TrueIndex:
    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise DomainError("true index must be positive")


def _coords(points):
    return points.coords if isinstance(points, PointSet) else np.atleast_2d(np.asarray(points, float))


def _design_row(comp, year):
    cols = comp.colnames
    if cols == ["(Intercept)"]:
        return np.ones(1)
    if year is None:
        raise DomainError("model has year effects; pass the year to predict")
    row = np.array([c == f"year={year}" for c in cols], dtype=float)
    if not row.any():
        raise DomainError(f"year {year!r} was not in the fitted data")
    return row


@dataclass
class _Predictor:
    """Linear predictor of one component at the prediction points."""
    plug: np.ndarray           # fixed part + kriged mode
    mean: np.ndarray = None    # fixed part + kriged skew-corrected mean
    var: np.ndarray = None     # posterior + kriging variance
    cross: np.ndarray = None   # cross covariance to the nodes


def _cross_corr(comp, log_range, coords):
    return corr_and_dlogrange(cdist(coords, comp.nodes), np.exp(log_range))[0]


def _cross_cov(comp, theta_field, coords):
    return np.exp(2.0 * theta_field[0]) * _cross_corr(comp, theta_field[1], coords)


def _predictor(cf, coords, year, theta=None, v=None, moments=True, corr=None):
    comp = cf.component
    theta = cf.theta if theta is None else theta
    beta_free, _, fld = comp.split(theta)
    fixed = float(_design_row(comp, year) @ comp.full_beta(beta_free))
    if not comp.spatial:
        eta = np.full(len(coords), fixed)
        return _Predictor(eta, eta, np.zeros(len(coords)))
    post = cf.posterior
    if corr is None:
        cross = _cross_cov(comp, fld, coords)
    else:
        cross = np.exp(2.0 * fld[0]) * corr
    plug = fixed + cross @ (post.v_hat if v is None else v)
    if not moments:
        return _Predictor(plug, cross=cross)
    mean = fixed + cross @ post.v_mean
    t = linalg.solve_triangular(post.chol_b, post.sqrt_d[:, None] * cross.T, lower=True)
    var = np.maximum(np.exp(2.0 * fld[0]) - np.sum(t * t, axis=0), 0.0)
    return _Predictor(plug, mean, var, cross)


def _factor(family, eta):
    return fam.inverse_link(family, eta)


def _expected_factor(family, mean, var):
    if family == "bernoulli":
        if not np.any(var > 0):
            return special.expit(mean)
        x = mean[:, None] + np.sqrt(var)[:, None] * _GH_NODES[None, :]
        return special.expit(x) @ _GH_WEIGHTS
    return np.exp(mean + 0.5 * var)


def predict_density(fit, points, year=None):
    """Plug-in expected density at each point (random fields at their kriged mode)."""
    coords = _coords(points)
    dens = np.ones(len(coords))
    for cf in fit.components.values():
        dens = dens * _factor(cf.family, _predictor(cf, coords, year, moments=False).plug)
    return dens / fit.spec.response_scale


def index_naive(densities, cell_area):
    densities = np.asarray(densities, dtype=float)
    if densities.size == 0:
        raise DomainError("no densities to sum")
    return float(np.sum(densities * cell_area))


def _plugin_factors(cf, coords, year, theta, lap, corr=None):
    """Plug-in factor at the points with the random effects re-solved at ``theta``."""
    comp = cf.component
    if not comp.spatial:
        return _factor(cf.family, _predictor(cf, coords, year, theta).plug)
    beta_free, obs, fld = comp.split(theta)
    sigma, _ = field_covariance(comp, *fld)
    st = lap.solve_inner(beta_free, obs, sigma, v0=cf.posterior.v_hat)
    return _factor(cf.family, _predictor(cf, coords, year, theta, v=st.v, moments=False,
                                         corr=corr).plug)


def index_bias_corrected(fit, points, cell_area, year=None, standard_error=True):
    """Naive and bias-corrected index with a delta-method standard error.

    The standard error combines the outer parameter covariance (gradient of
    the plug-in index with the random effects re-optimized at perturbed
    parameters) with the posterior covariance of the random effects.
    """
    coords = _coords(points)
    preds = {k: _predictor(cf, coords, year) for k, cf in fit.components.items()}
    plug = {k: _factor(fit.components[k].family, p.plug) for k, p in preds.items()}
    corr = {k: _expected_factor(fit.components[k].family, p.mean, p.var) for k, p in preds.items()}
    naive = index_naive(np.prod(list(plug.values()), axis=0), cell_area)
    has_re = fit.has_random_effects
    corrected = index_naive(np.prod(list(corr.values()), axis=0), cell_area) if has_re else naive
    se = np.nan
    if standard_error:
        se = _delta_method_se(fit, coords, cell_area, year, preds, plug)
    # back to the units of the data when the response was rescaled for fitting
    c = fit.spec.response_scale
    return IndexEstimate(naive / c, corrected / c, se / c, se / corrected, corrected=has_re)


def _delta_method_se(fit, coords, cell_area, year, preds, plug):
    var = 0.0
    names = list(fit.components)
    for k in names:
        cf = fit.components[k]
        others = np.prod([plug[o] for o in names if o != k], axis=0) if len(names) > 1 else 1.0
        if cf.n_params:
            if not np.all(np.isfinite(cf.cov_theta)):
                return np.nan
            lap = Laplace(cf.component)
            if cf.spatial:
                base_corr = preds[k].cross / cf.field_sd ** 2
            grad = np.empty(cf.n_params)
            base = cell_area * np.sum(others * plug[k])
            for j in range(cf.n_params):
                h = _SE_STEP * max(1.0, abs(cf.theta[j]))
                up = cf.theta.copy()
                up[j] += h
                moves_range = cf.spatial and j == cf.n_params - 1
                corr = None if moves_range or not cf.spatial else base_corr
                f_up = _plugin_factors(cf, coords, year, up, lap, corr)
                grad[j] = (cell_area * np.sum(others * f_up) - base) / h
            var += grad @ cf.cov_theta @ grad
        if cf.spatial:
            # d index / d eta_s, pushed back to the nodes through the kriging weights
            deta = plug[k] * (1.0 - plug[k]) if cf.family == "bernoulli" else plug[k]
            r = preds[k].cross.T @ (cell_area * others * deta)
            sigma, _ = field_covariance(cf.component, *cf.component.split(cf.theta)[2])
            try:
                g = linalg.cho_solve(linalg.cho_factor(sigma, lower=True), r)
            except linalg.LinAlgError:
                return np.nan
            var += max(float(g @ cf.posterior.cov @ g), 0.0)
    return float(np.sqrt(var))


def epsilon_index_first_order(fit, points, cell_area, year=None, rel_step=1e-5):
    """Literal first-order epsilon estimator of the expected index.

    Differentiates the Laplace marginal log-likelihood of the objective
    augmented by ``epsilon * index(u)`` at ``epsilon = 0`` by central
    differences, re-solving the random effects at each ``epsilon``.  The
    step is ``rel_step / |naive index|`` so that ``epsilon * index`` stays
    small.  The random field of at most one component is integrated; other
    components enter as plug-in factors.
    """
    coords = _coords(points)
    spatial = [k for k, cf in fit.components.items() if cf.spatial]
    if len(spatial) > 1:
        raise DomainError("first-order epsilon estimator supports a single random field")
    plug = {k: _factor(cf.family, _predictor(cf, coords, year, moments=False).plug)
            for k, cf in fit.components.items()}
    naive = index_naive(np.prod(list(plug.values()), axis=0), cell_area)
    if not spatial:
        return naive / fit.spec.response_scale
    key = spatial[0]
    cf = fit.components[key]
    if cf.family == "bernoulli":
        raise DomainError("first-order epsilon estimator needs a log-link field")
    comp = cf.component
    beta_free, obs, fld = comp.split(cf.theta)
    sigma, _ = field_covariance(comp, *fld)
    s_chol = linalg.cho_factor(sigma, lower=True)
    sigma_inv = linalg.cho_solve(s_chol, np.eye(comp.n_nodes))
    fixed = float(_design_row(comp, year) @ cf.beta)
    others = np.prod([plug[o] for o in plug if o != key], axis=0) if len(plug) > 1 else 1.0
    weights = cell_area * others
    kw = _cross_cov(comp, fld, coords) @ sigma_inv      # kriging weights
    base_eta = comp.base_offset + comp.X_free @ beta_free

    def h_terms(u):
        e = weights * np.exp(fixed + kw @ u)
        return e.sum(), kw.T @ e, kw.T @ (e[:, None] * kw)

    def laplace(eps):
        u = cf.posterior.u_hat.copy()
        for _ in range(100):
            nll, d1, d2, _ = fam.nll_terms(comp.family, comp.y, base_eta + u[comp.node], obs)
            hv, hg, hh = h_terms(u)
            grad = np.bincount(comp.node, d1, comp.n_nodes) + sigma_inv @ u - eps * hg
            hess = np.diag(np.bincount(comp.node, d2, comp.n_nodes)) + sigma_inv - eps * hh
            step = linalg.solve(hess, grad, assume_a="pos")
            u = u - step
            if np.max(np.abs(step)) < 1e-12:
                break
        else:
            raise NumericalError("augmented inner problem did not converge", epsilon=eps)
        nll, _, d2, _ = fam.nll_terms(comp.family, comp.y, base_eta + u[comp.node], obs)
        hv, _, hh = h_terms(u)
        hess = np.diag(np.bincount(comp.node, d2, comp.n_nodes)) + sigma_inv - eps * hh
        sign, logdet = np.linalg.slogdet(hess)
        value = np.sum(nll) + 0.5 * u @ sigma_inv @ u - eps * hv + 0.5 * logdet
        if sign <= 0 or not np.isfinite(value):
            raise NumericalError("augmented objective not finite", epsilon=eps)
        return value

    eps = rel_step / abs(naive)
    return float(-(laplace(eps) - laplace(-eps)) / (2.0 * eps)) / fit.spec.response_scale


def relative_error(estimate, truth):
    if not truth > 0:
        raise DomainError("truth must be positive")
    return (estimate - truth) / truth
