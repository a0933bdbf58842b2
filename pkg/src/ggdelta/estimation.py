"""Maximum-likelihood fitting of Tweedie and delta (hurdle) models.

A delta model has two independent linear predictors, one for encounter
probability (Bernoulli, logit link) and one for the mean of positive catches
(log link).  Either may carry a spatial Matérn random field whose values at
the observation locations are integrated out by the Laplace approximation.
Because the two predictors share no parameters, each is fitted as its own
*component* and the log-likelihoods add.

For a component with a field the random effects ``u`` live at the unique
observation locations ("nodes"), ``u ~ N(0, Sigma)``, and the inner problem

    J(u) = sum_i nll_i(eta_i) + u' Sigma^-1 u / 2,    eta_i = x_i'beta + offset_i + u[node_i]

is solved by Newton's method.  Writing ``D = diag(d2 nll / d eta2)``
aggregated to nodes and ``B = I + D^1/2 Sigma D^1/2``, the Laplace negative
log marginal likelihood is ``J(u_hat) + log|B|/2``; this form never inverts
``Sigma``.  Gradients with respect to the outer parameters are analytic
(implicit-function theorem) except for the observation parameters, whose
per-observation derivatives are taken by central differences.
"""
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack

from . import families as fam
from .errors import DomainError, NumericalError
from scipy.spatial.distance import pdist, squareform

from .gmrf import corr_and_dlogrange, perturb_duplicates

log = logging.getLogger(__name__)

FAMILIES = ("tweedie", "delta-lognormal", "delta-gamma", "delta-gengamma")
GRADIENT_THRESHOLD = 0.005
FIELD_SD_THRESHOLD = 0.01
INDEX_CV_THRESHOLD = 1.0
DEGENERATE_LOGIT = 20.0
_FIELD_JITTER = 1e-10
_FD_STEP = 1e-5
_INNER_TOL = 1e-9
_INNER_MAXIT = 100


@dataclass
class Dataset:
    """Observations: response ``y >= 0``, optional coordinates, offsets and years."""
    y: np.ndarray
    coords: np.ndarray = None
    offset: np.ndarray = None
    year: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        n = len(self.y)
        if n == 0:
            raise DomainError("dataset is empty")
        if np.any(self.y < 0) or not np.all(np.isfinite(self.y)):
            raise DomainError("responses must be finite and non-negative")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float).reshape(n, 2)
        self.offset = np.zeros(n) if self.offset is None else np.asarray(self.offset, float)
        if self.year is not None:
            self.year = np.asarray(self.year)

    def __len__(self):
        return len(self.y)

    def subset(self, mask):
        return Dataset(self.y[mask],
                       None if self.coords is None else self.coords[mask],
                       self.offset[mask],
                       None if self.year is None else self.year[mask])


@dataclass(frozen=True)
class ModelSpec:
    family: str
    year_effects: bool = False
    use_offset: bool = True
    spatial_encounter: bool = False
    spatial_positive: bool = True
    year_prior_sd: float = None
    response_scale: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DomainError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.year_prior_sd is not None and not self.year_prior_sd > 0:
            raise DomainError("year_prior_sd must be positive")
        if not self.response_scale > 0:
            raise DomainError("response_scale must be positive")

    @property
    def is_delta(self):
        return self.family.startswith("delta-")

    @property
    def positive_family(self):
        return self.family.split("-", 1)[1] if self.is_delta else "tweedie"


# --------------------------------------------------------------------------
# components
# --------------------------------------------------------------------------

@dataclass
class Component:
    """One linear predictor with its data, design and optional field."""
    name: str
    family: str
    y: np.ndarray
    X: np.ndarray
    colnames: list
    offset: np.ndarray
    spatial: bool = False
    node: np.ndarray = None
    nodes: np.ndarray = None
    prior_sd: float = None
    fixed: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.free = [j for j in range(self.X.shape[1]) if j not in self.fixed]
        self.X_free = self.X[:, self.free]
        fixed_cols = sorted(self.fixed)
        self.base_offset = self.offset + (self.X[:, fixed_cols] @ np.array([self.fixed[j] for j in fixed_cols])
                                          if fixed_cols else 0.0)
        self.n_obs_params = len(fam.obs_param_names(self.family))
        if self.spatial:
            self.dist = pdist(self.nodes)

    @property
    def n_nodes(self):
        return 0 if not self.spatial else len(self.nodes)

    @property
    def param_names(self):
        names = [f"beta[{self.colnames[j]}]" for j in self.free]
        names += fam.obs_param_names(self.family)
        if self.spatial:
            names += ["log_field_sd", "log_field_range"]
        return names

    def without_field(self):
        return replace(self, spatial=False, node=None, nodes=None, flags=list(self.flags))

    def with_prior(self, prior_sd):
        return replace(self, prior_sd=prior_sd, flags=list(self.flags))

    def split(self, theta):
        nf, no = len(self.free), self.n_obs_params
        return theta[:nf], theta[nf:nf + no], theta[nf + no:]

    def full_beta(self, beta_free):
        beta = np.empty(self.X.shape[1])
        for j, v in self.fixed.items():
            beta[j] = v
        beta[self.free] = beta_free
        return beta


def _design(data, rows, year_effects):
    if year_effects:
        if data.year is None:
            raise DomainError("year effects requested but the dataset has no year labels")
        levels = np.unique(data.year)
        X = (data.year[rows][:, None] == levels[None, :]).astype(float)
        return X, [f"year={v}" for v in levels]
    return np.ones((len(rows), 1)), ["(Intercept)"]


def _nodes(coords):
    nodes, inverse = np.unique(coords, axis=0, return_inverse=True)
    return perturb_duplicates(nodes), inverse.ravel()


def build_components(spec, data):
    """Split a dataset into the linear-predictor components of ``spec``."""
    offset = data.offset if spec.use_offset else np.zeros(len(data))
    comps = []
    prior = spec.year_prior_sd if spec.year_effects else None

    def make(name, family, rows, y, spatial):
        X, cols = _design(data, rows, spec.year_effects)
        node = nodes = None
        if spatial:
            if data.coords is None:
                raise DomainError(f"{name} field requested but the dataset has no coordinates")
            nodes, node = _nodes(data.coords[rows])
        fixed, flags = {}, []
        for j, col in enumerate(cols):
            members = X[:, j] != 0
            if not members.any():
                fixed[j] = 0.0
                flags.append(f"{col}: no observations in {name} component")
            elif family == "bernoulli" and np.all(y[members] == y[members][0]):
                fixed[j] = DEGENERATE_LOGIT if y[members][0] == 1 else -DEGENERATE_LOGIT
                flags.append(f"{col}: all encounters {'one' if y[members][0] == 1 else 'zero'}")
                warnings.warn(f"{name} {col}: exact-fit encounters, logit fixed at {fixed[j]:+.0f}")
        return Component(name, family, y, X, cols, offset[rows], spatial, node, nodes,
                         prior, fixed, flags)

    all_rows = np.arange(len(data))
    if spec.is_delta:
        pos = data.y > 0
        if not pos.any():
            raise DomainError("delta models need at least one positive observation")
        comps.append(make("encounter", "bernoulli", all_rows, pos.astype(float), spec.spatial_encounter))
        prow = np.flatnonzero(pos)
        comps.append(make("positive", spec.positive_family, prow,
                          data.y[prow] * spec.response_scale, spec.spatial_positive))
    else:
        comps.append(make("tweedie", "tweedie", all_rows, data.y * spec.response_scale,
                          spec.spatial_positive))
    return comps


# --------------------------------------------------------------------------
# Laplace engine
# --------------------------------------------------------------------------

def field_covariance(comp, log_sd, log_range):
    """Field covariance at the nodes and its derivative in log(range)."""
    tau2 = np.exp(2.0 * log_sd)
    corr, dcorr = corr_and_dlogrange(comp.dist, np.exp(log_range))
    sigma = squareform(tau2 * corr, checks=False)
    sigma[np.diag_indices_from(sigma)] = tau2 * (1.0 + _FIELD_JITTER)
    return sigma, squareform(tau2 * dcorr, checks=False)


@dataclass
class InnerState:
    u: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    chol_b: np.ndarray
    sqrt_d: np.ndarray
    logdet_b: float
    d: tuple
    iterations: int


class Laplace:
    """Negative log marginal likelihood of a component and its gradient."""

    def __init__(self, comp):
        self.comp = comp
        self.v_start = np.zeros(comp.n_nodes)
        self.last = None

    # -- data term ---------------------------------------------------------
    def _eta(self, beta_free, u=None):
        eta = self.comp.base_offset + self.comp.X_free @ beta_free
        if u is not None:
            eta = eta + u[self.comp.node]
        return eta

    def _prior(self, beta_free):
        sd = self.comp.prior_sd
        if sd is None:
            return 0.0, np.zeros_like(beta_free)
        return 0.5 * np.sum(beta_free ** 2) / sd ** 2, beta_free / sd ** 2

    def _fd_obs(self, eta, theta_obs):
        """Central differences of (nll, d1, d2) in each observation parameter."""
        out = []
        for j in range(len(theta_obs)):
            up, dn = theta_obs.copy(), theta_obs.copy()
            up[j] += _FD_STEP
            dn[j] -= _FD_STEP
            fu = fam.nll_terms(self.comp.family, self.comp.y, eta, up, derivs=2)
            fd = fam.nll_terms(self.comp.family, self.comp.y, eta, dn, derivs=2)
            out.append([(a - b) / (2 * _FD_STEP) for a, b in zip(fu[:3], fd[:3])])
        return out

    def _nodes_sum(self, x):
        return np.bincount(self.comp.node, weights=x, minlength=self.comp.n_nodes)

    # -- inner problem -----------------------------------------------------
    def solve_inner(self, beta_free, theta_obs, sigma, v0=None):
        """Newton iterations for the mode of the random effects.

        Iterates on ``v = Sigma^-1 u`` so that ``Sigma`` is only ever
        multiplied, never factorized.  A failure from a warm start is retried
        from ``u = 0``.
        """
        start = self.v_start if v0 is None else v0
        try:
            return self._newton(beta_free, theta_obs, sigma, start)
        except NumericalError:
            if not np.any(start):
                raise
            return self._newton(beta_free, theta_obs, sigma, np.zeros_like(start))

    def _newton(self, beta_free, theta_obs, sigma, v):
        comp = self.comp
        fam_name = comp.family
        v = v.copy()

        def objective(v):
            u = sigma @ v
            eta = self._eta(beta_free, u)
            nll, d1, d2, d3 = fam.nll_terms(fam_name, comp.y, eta, theta_obs)
            val = np.sum(nll) + 0.5 * u @ v
            if not (np.all(np.isfinite(d1)) and np.all(np.isfinite(d2)) and np.all(np.isfinite(u))):
                val = np.inf
            return val, u, (nll, d1, d2, d3)

        val, u, d = objective(v)
        if not np.isfinite(val):
            v = np.zeros_like(v)
            val, u, d = objective(v)
        if not np.isfinite(val):
            raise NumericalError("inner objective is not finite at u = 0")
        eye = np.eye(len(v))
        for it in range(_INNER_MAXIT + 1):
            g1 = self._nodes_sum(d[1])
            g2 = np.maximum(self._nodes_sum(d[2]), 0.0)
            grad = g1 + v
            gnorm = np.linalg.norm(grad)
            s = np.sqrt(g2)
            if gnorm < _INNER_TOL:
                break
            if it == _INNER_MAXIT:
                raise NumericalError("inner Newton did not converge", gradient_norm=gnorm)
            chol = _chol_damped(sigma * np.outer(s, s) + eye)
            sg = sigma @ grad
            w = s * linalg.cho_solve((chol, True), s * sg)
            du = -(sg - sigma @ w)
            dv = -(grad - w)
            slope = grad @ du
            step = 1.0
            for _ in range(40):
                v_new = v + step * dv
                val_new, u_new, d_new = objective(v_new)
                # the slack absorbs rounding once the decrease is ~ machine precision
                if np.isfinite(val_new) and val_new <= val + 1e-4 * step * slope + 1e-12 * abs(val):
                    break
                step *= 0.5
            else:
                if gnorm < 1e-5:
                    break
                raise NumericalError("inner line search failed", gradient_norm=gnorm)
            progress = val - val_new
            v, val, u, d = v_new, val_new, u_new, d_new
            if progress <= 0 and gnorm < 1e-6:
                break
        chol = _chol_damped(sigma * np.outer(s, s) + eye)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return InnerState(u, v, sigma, chol, s, logdet, d, it)

    # -- outer objective ---------------------------------------------------
    def value_and_grad(self, theta, want_grad=True):
        comp = self.comp
        theta = np.asarray(theta, dtype=float)
        beta_free, theta_obs, theta_field = comp.split(theta)
        prior, prior_grad = self._prior(beta_free)
        if not comp.spatial:
            eta = self._eta(beta_free)
            nll, d1, _, _ = fam.nll_terms(comp.family, comp.y, eta, theta_obs, derivs=2)
            value = float(np.sum(nll)) + prior
            if not want_grad:
                return value, None
            g_beta = comp.X_free.T @ d1 + prior_grad
            g_obs = [np.sum(fd[0]) for fd in self._fd_obs(eta, theta_obs)]
            self.last = None
            return value, np.concatenate([g_beta, g_obs])

        sigma, dsigma = field_covariance(comp, *theta_field)
        st = self.solve_inner(beta_free, theta_obs, sigma)
        self.v_start = st.v
        self.last = (theta.copy(), st)
        nll, d1, d2, d3 = st.d
        value = float(np.sum(nll) + 0.5 * st.u @ st.v + 0.5 * st.logdet_b) + prior
        if not want_grad:
            return value, None

        K = comp.n_nodes
        pp = _PosteriorAlgebra(st, sigma)
        diag_p = pp.diag_p
        g2 = self._nodes_sum(d2)
        g3 = self._nodes_sum(d3)
        a = diag_p * g3
        z = pp.apply(a)
        p_obs, z_obs = diag_p[comp.node], z[comp.node]

        g_beta = comp.X_free.T @ (d1 + 0.5 * p_obs * d3 - 0.5 * z_obs * d2) + prior_grad
        eta = self._eta(beta_free, st.u)
        g_obs = [np.sum(dn) + 0.5 * np.sum(p_obs * dd2) - 0.5 * np.sum(z_obs * dd1)
                 for dn, dd1, dd2 in self._fd_obs(eta, theta_obs)]
        az = a - g2 * z
        g_sd = K - pp.trace_b_inv - st.u @ st.v + az @ st.u
        ds_v = dsigma @ st.v
        g_range = -0.5 * st.v @ ds_v + 0.5 * pp.trace_b_inv_with(dsigma) + 0.5 * az @ ds_v
        grad = np.concatenate([g_beta, g_obs, [g_sd, g_range]])
        return value, grad

    def posterior(self, theta):
        """Gaussian approximation to the random effects at ``theta``.

        Besides the mode and covariance this returns the skewness-corrected
        mean ``u_hat - P (diag(P) * g3) / 2`` (the first-order shift of the
        posterior mean induced by the third derivative of the data term) and
        the matching vectors premultiplied by ``Sigma^-1``, which make kriging
        to new locations a plain cross-covariance product.
        """
        comp = self.comp
        beta_free, theta_obs, theta_field = comp.split(np.asarray(theta, float))
        sigma, _ = field_covariance(comp, *theta_field)
        st = self.solve_inner(beta_free, theta_obs, sigma)
        self.v_start = st.v
        s = st.sqrt_d
        cov = _PosteriorAlgebra(st, sigma, exact=True).covariance()
        a = np.diag(cov) * self._nodes_sum(st.d[3])
        shift = cov @ a
        # Sigma^-1 P a = a - D^1/2 B^-1 D^1/2 Sigma a
        shift_v = a - s * linalg.cho_solve((st.chol_b, True), s * (sigma @ a))
        return Posterior(u_hat=st.u, v_hat=st.v, cov=cov,
                         u_mean=st.u - 0.5 * shift, v_mean=st.v - 0.5 * shift_v,
                         chol_b=st.chol_b, sqrt_d=s)


@dataclass
class Posterior:
    u_hat: np.ndarray
    v_hat: np.ndarray
    cov: np.ndarray
    u_mean: np.ndarray
    v_mean: np.ndarray
    chol_b: np.ndarray
    sqrt_d: np.ndarray


class _PosteriorAlgebra:
    """Products with ``P = (Sigma^-1 + D)^-1`` from the factor of ``B``.

    Every node carries at least one observation, so ``D > 0`` and
    ``P = D^-1/2 (I - B^-1) D^-1/2``; one triangular inversion then yields all
    traces and diagonals.  At nodes where ``D`` is tiny this form loses
    relative accuracy in ``P`` itself, but the gradient only uses ``P``
    multiplied by derivatives that vanish with ``D``, so the loss does not
    reach it.  ``exact=True`` takes the cancellation-free route through
    ``L^-1 D^1/2 Sigma`` for when ``P`` itself is wanted.
    """

    def __init__(self, st, sigma, exact=False):
        self.s = st.sqrt_d
        self.sigma = sigma
        d = self.s * self.s
        self.direct = bool(np.min(d) > 0) and not exact
        if self.direct:
            c, info = lapack.dpotri(st.chol_b, lower=1)
            if info != 0:
                raise NumericalError("inverse of the inner Hessian factor failed", info=int(info))
            self.b_inv = np.tril(c) + np.tril(c, -1).T
            self.diag_p = (1.0 - np.diag(self.b_inv)) / d
            self.trace_b_inv = float(np.trace(self.b_inv))
        else:
            linv = linalg.solve_triangular(st.chol_b, np.eye(len(sigma)), lower=True)
            self.m1 = linv * self.s[None, :]
            self.smat = self.m1 @ sigma
            self.diag_p = np.diag(sigma) - np.sum(self.smat * self.smat, axis=0)
            self.trace_b_inv = float(np.sum(linv * linv))

    def apply(self, x):
        if self.direct:
            y = x / self.s
            return (y - self.b_inv @ y) / self.s
        return self.sigma @ x - self.smat.T @ (self.smat @ x)

    def trace_b_inv_with(self, m):
        """``tr(B^-1 D^1/2 M D^1/2)`` for symmetric ``M``."""
        if self.direct:
            return float(self.s @ (self.b_inv * m) @ self.s)
        return float(np.sum((self.m1 @ m) * self.m1))

    def covariance(self):
        if self.direct:
            cov = (np.eye(len(self.s)) - self.b_inv) / np.outer(self.s, self.s)
        else:
            cov = self.sigma - self.smat.T @ self.smat
        return 0.5 * (cov + cov.T)


def _chol_damped(mat, retries=5):
    jitter = 0.0
    for _ in range(retries + 1):
        try:
            out = np.linalg.cholesky(mat + jitter * np.eye(len(mat)) if jitter else mat)
            if np.all(np.isfinite(out)):
                return out
        except np.linalg.LinAlgError:
            pass
        jitter = 1e-10 if jitter == 0.0 else jitter * 100.0
    raise NumericalError("inner Hessian is not positive definite after damped retries")


# --------------------------------------------------------------------------
# model-level objectives
# --------------------------------------------------------------------------

def parameter_names(spec, data):
    """Names of the model-level parameter vector, components concatenated."""
    return [f"{c.name}.{n}" for c in build_components(spec, data) for n in c.param_names]


def _split_model_theta(comps, theta, with_fields=True):
    theta = np.asarray(theta, dtype=float)
    out, i = [], 0
    for c in comps:
        n = len(c.free) + c.n_obs_params + (2 if (with_fields and c.spatial) else 0)
        out.append(theta[i:i + n])
        i += n
    if i != len(theta):
        raise DomainError(f"parameter vector has length {len(theta)}, expected {i}")
    return out


def negloglik_fixed(spec, data, theta):
    """Negative log-likelihood with every random field set to zero.

    ``theta`` concatenates, per component, the free coefficients and the
    observation parameters (no field parameters).  For delta models this is
    the Bernoulli term over all observations plus the positive-family term
    over the positive observations.
    """
    comps = build_components(spec, data)
    total = 0.0
    for c, th in zip(comps, _split_model_theta(comps, theta, with_fields=False)):
        beta, obs = th[:len(c.free)], th[len(c.free):]
        nll = fam.nll_terms(c.family, c.y, c.base_offset + c.X_free @ beta, obs, derivs=2)[0]
        bad = np.flatnonzero(~np.isfinite(nll))
        if bad.size:
            raise NumericalError(f"non-finite {c.name} likelihood", observation=int(bad[0]))
        total += float(np.sum(nll))
    return total


def joint_negloglik(spec, data, theta, u):
    """Data term plus the Gaussian prior ``-log N(u; 0, Sigma)`` of every field.

    ``u`` concatenates the node values of the spatial components in order.
    """
    comps = build_components(spec, data)
    u = np.asarray(u, dtype=float)
    total, j = 0.0, 0
    for c, th in zip(comps, _split_model_theta(comps, theta)):
        beta, obs, fld = c.split(th)
        eta = c.base_offset + c.X_free @ beta
        if c.spatial:
            uc = u[j:j + c.n_nodes]
            j += c.n_nodes
            eta = eta + uc[c.node]
            sigma, _ = field_covariance(c, *fld)
            cf = linalg.cho_factor(sigma, lower=True)
            total += (0.5 * uc @ linalg.cho_solve(cf, uc) + np.sum(np.log(np.diag(cf[0])))
                      + 0.5 * c.n_nodes * np.log(2.0 * np.pi))
        nll = fam.nll_terms(c.family, c.y, eta, obs, derivs=2)[0]
        bad = np.flatnonzero(~np.isfinite(nll))
        if bad.size:
            raise NumericalError(f"non-finite {c.name} likelihood", observation=int(bad[0]))
        total += float(np.sum(nll))
    if j != len(u):
        raise DomainError(f"random-effect vector has length {len(u)}, expected {j}")
    return total


def laplace_marginal_negloglik(spec, data, theta, u_start=None):
    """Laplace negative log marginal likelihood.

    Returns ``(value, u_hat, factors)`` where ``factors`` holds, per spatial
    component, the lower Cholesky factor of ``B = I + D^1/2 Sigma D^1/2``
    (the inner Hessian is ``Sigma^-1/2``-free: ``H = D^1/2 B D^1/2`` up to
    the prior).  ``u_start`` optionally seeds the inner Newton iterations.
    """
    comps = build_components(spec, data)
    total, modes, factors, j = 0.0, [], {}, 0
    for c, th in zip(comps, _split_model_theta(comps, theta)):
        lap = Laplace(c)
        beta, obs, fld = c.split(th)
        if c.spatial:
            sigma, _ = field_covariance(c, *fld)
            v0 = None
            if u_start is not None:
                v0 = linalg.solve(sigma, np.asarray(u_start[j:j + c.n_nodes], float), assume_a="pos")
                j += c.n_nodes
            st = lap.solve_inner(beta, obs, sigma, v0=v0)
            total += float(np.sum(st.d[0]) + 0.5 * st.u @ st.v + 0.5 * st.logdet_b)
            modes.append(st.u)
            factors[c.name] = st.chol_b
        else:
            total += lap.value_and_grad(th, want_grad=False)[0] - lap._prior(beta)[0]
    u_hat = np.concatenate(modes) if modes else np.zeros(0)
    return total, u_hat, factors


# --------------------------------------------------------------------------
# outer optimisation
# --------------------------------------------------------------------------

@dataclass
class ComponentFit:
    component: Component
    theta: np.ndarray
    param_names: list
    nll: float
    loglik: float
    n_params: int
    gradient: np.ndarray
    hessian: np.ndarray
    hessian_pd: bool
    cov_theta: np.ndarray
    posterior: Posterior = None
    optimizer_message: str = ""
    n_evals: int = 0

    @property
    def family(self):
        return self.component.family

    @property
    def spatial(self):
        return self.component.spatial

    @property
    def max_gradient(self):
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0

    @property
    def beta(self):
        return self.component.full_beta(self.component.split(self.theta)[0])

    @property
    def theta_obs(self):
        return self.component.split(self.theta)[1]

    @property
    def obs_params(self):
        return fam.natural_params(self.family, self.theta_obs)

    @property
    def field_sd(self):
        return float(np.exp(self.theta[-2])) if self.spatial else None

    @property
    def field_range(self):
        return float(np.exp(self.theta[-1])) if self.spatial else None

    @property
    def u_hat(self):
        return None if self.posterior is None else self.posterior.u_hat

    @property
    def u_cov(self):
        return None if self.posterior is None else self.posterior.cov


def initial_theta(comp, field_sd=0.5):
    y, X = comp.y, comp.X
    beta = []
    for j in comp.free:
        rows = X[:, j] != 0
        target = fam.link(comp.family, np.mean(y[rows])) - np.mean(comp.offset[rows])
        if comp.spatial and comp.family in fam.LOG_LINK:
            target -= 0.5 * field_sd ** 2
        beta.append(target)
    theta = list(beta) + list(fam.init_obs_params(comp.family, y[y > 0] if comp.family in fam.POSITIVE else y))
    if comp.spatial:
        extent = np.ptp(comp.nodes, axis=0).max() if comp.n_nodes > 1 else 1.0
        theta += [np.log(field_sd), np.log(0.3 * max(extent, 1e-6))]
    return np.array(theta, dtype=float)


def outer_hessian(lap, theta, rel_step=1e-4, grad=None):
    """Forward-difference Hessian of the analytic gradient, symmetrized."""
    n = len(theta)
    g0 = lap.value_and_grad(theta)[1] if grad is None else grad
    hess = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(theta[j]))
        up = theta.copy()
        up[j] += h
        hess[:, j] = (lap.value_and_grad(up)[1] - g0) / h
    return 0.5 * (hess + hess.T)


def fit_component(comp, theta0=None, gtol=1e-6, maxiter=1000):
    """Minimise the (Laplace) negative log-likelihood of one component."""
    lap = Laplace(comp)
    theta0 = initial_theta(comp) if theta0 is None else np.asarray(theta0, float)
    n_evals = [0]

    def fg(theta):
        n_evals[0] += 1
        try:
            val, grad = lap.value_and_grad(theta)
        except (DomainError, NumericalError, FloatingPointError, ValueError, linalg.LinAlgError):
            return np.inf, np.zeros_like(theta)
        if not (np.isfinite(val) and np.all(np.isfinite(grad))):
            return np.inf, np.zeros_like(theta)
        return val, grad

    val0, _ = fg(theta0)
    if not np.isfinite(val0):
        raise NumericalError(f"{comp.name}: objective not finite at the initial values",
                             theta0=theta0.tolist())
    if len(theta0) == 0:
        theta, message = theta0, "no free parameters"
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(fg, theta0, jac=True, method="BFGS",
                                    options={"gtol": gtol, "maxiter": maxiter})
        theta, message = res.x, res.message
    value, grad = fg(theta)
    if not np.isfinite(value):
        raise NumericalError(f"{comp.name}: objective not finite at the optimum")

    hess = outer_hessian(lap, theta, grad=grad) if len(theta) else np.zeros((0, 0))
    # Newton steps on the finite-difference Hessian rescue BFGS runs that
    # stopped short of the tolerance (typically on precision loss)
    for _ in range(3):
        if len(theta) == 0 or np.max(np.abs(grad)) < gtol or not _is_pd(hess):
            break
        step = -linalg.solve(hess, grad, assume_a="pos")
        cand_val, cand_grad = fg(theta + step)
        if not (np.isfinite(cand_val) and np.max(np.abs(cand_grad)) < np.max(np.abs(grad))
                and cand_val <= value + 1e-8):
            break
        theta, value, grad = theta + step, cand_val, cand_grad
        hess = outer_hessian(lap, theta, grad=grad)
    pd = _is_pd(hess) if len(theta) else True
    cov = linalg.inv(hess) if pd and len(theta) else np.full_like(hess, np.nan)

    prior = lap._prior(comp.split(theta)[0])[0]
    nll = value - prior
    loglik = -nll
    out = ComponentFit(comp, theta, comp.param_names, nll, loglik, len(theta), grad, hess, pd, cov,
                       optimizer_message=str(message), n_evals=n_evals[0])
    if comp.spatial:
        out.posterior = lap.posterior(theta)
    return out


def _is_pd(mat):
    if mat.size == 0:
        return True
    if not np.all(np.isfinite(mat)):
        return False
    return bool(np.min(linalg.eigvalsh(mat)) > 0)


# --------------------------------------------------------------------------
# model level
# --------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    gradient_ok: bool
    hessian_ok: bool
    fields_ok: bool
    index_cv_ok: bool
    verdict: bool
    max_gradient: float
    field_sds: dict
    index_cv: float = None
    refit_recommended: bool = False
    refit_actions: list = field(default_factory=list)

    def reasons(self):
        out = []
        if not self.gradient_ok:
            out.append(f"max gradient {self.max_gradient:.3g} >= {GRADIENT_THRESHOLD}")
        if not self.hessian_ok:
            out.append("Hessian not positive definite")
        if not self.fields_ok:
            out.append("field SD on boundary")
        if not self.index_cv_ok:
            out.append(f"index CV {self.index_cv} >= {INDEX_CV_THRESHOLD}")
        return out


@dataclass
class FitResult:
    spec: ModelSpec
    data: Dataset
    components: dict
    loglik: float
    n_params: int
    aic: float
    refit_actions: list = field(default_factory=list)
    convergence: ConvergenceReport = None

    @property
    def family(self):
        return self.spec.family

    @property
    def max_gradient(self):
        return max(c.max_gradient for c in self.components.values())

    @property
    def hessian_pd(self):
        return all(c.hessian_pd for c in self.components.values())

    @property
    def field_sds(self):
        return {k: c.field_sd for k, c in self.components.items() if c.spatial}

    @property
    def main(self):
        """The positive-catch component (or the single Tweedie predictor)."""
        return self.components["positive" if self.spec.is_delta else "tweedie"]

    @property
    def q_hat(self):
        return self.main.obs_params.get("q")

    @property
    def sigma_hat(self):
        return self.main.obs_params.get("sigma")

    @property
    def has_random_effects(self):
        return any(c.spatial for c in self.components.values())

    @property
    def converged(self):
        return self.convergence is not None and self.convergence.verdict


def fit(spec, data, init=None, reuse_encounter=None):
    """Fit ``spec`` to ``data`` and evaluate the convergence criteria.

    ``init`` may map component names to starting parameter vectors.
    ``reuse_encounter`` short-circuits the encounter component with an
    existing fit of an identical encounter model (it does not depend on the
    positive family).  A field whose SD estimate falls below 0.01 is dropped
    and the component refitted.
    """
    comps = build_components(spec, data)
    fitted, actions = {}, []
    for comp in comps:
        if comp.name == "encounter" and reuse_encounter is not None:
            fitted[comp.name] = reuse_encounter
            continue
        theta0 = None if init is None else init.get(comp.name)
        cf = fit_component(comp, theta0)
        if cf.spatial and cf.field_sd < FIELD_SD_THRESHOLD:
            actions.append(f"dropped {comp.name} field (sd={cf.field_sd:.3g})")
            log.info("%s: %s", spec.family, actions[-1])
            reduced = comp.without_field()
            cf = fit_component(reduced, cf.theta[:-2])
        fitted[comp.name] = cf
    return _assemble(spec, data, fitted, actions)


def _assemble(spec, data, fitted, actions):
    loglik = 0.0
    for name, cf in fitted.items():
        loglik += cf.loglik
        if name != "encounter":
            # density of y is scale * density of scale*y for every positive observation
            loglik += np.count_nonzero(cf.component.y > 0) * np.log(spec.response_scale)
    k = sum(cf.n_params for cf in fitted.values())
    result = FitResult(spec, data, fitted, float(loglik), k, float(-2.0 * loglik + 2.0 * k), actions)
    result.convergence = check_convergence(result)
    return result


def evaluate_fit(spec, data, theta, hessian=False):
    """A :class:`FitResult` at fixed parameters ``theta`` (no optimisation).

    ``theta`` is the model-level vector of :func:`parameter_names`.  The
    outer Hessian is computed only when requested; otherwise the parameter
    covariance is left undefined (NaN).
    """
    comps = build_components(spec, data)
    fitted = {}
    for c, th in zip(comps, _split_model_theta(comps, theta)):
        lap = Laplace(c)
        value, grad = lap.value_and_grad(th)
        hess = outer_hessian(lap, th) if hessian and len(th) else np.full((len(th), len(th)), np.nan)
        pd = _is_pd(hess)
        cov = linalg.inv(hess) if pd and len(th) else np.full_like(hess, np.nan)
        nll = value - lap._prior(c.split(th)[0])[0]
        cf = ComponentFit(c, np.array(th, float), c.param_names, nll, -nll, len(th), grad,
                          hess, pd, cov, optimizer_message="evaluated at fixed parameters")
        if c.spatial:
            cf.posterior = lap.posterior(th)
        fitted[c.name] = cf
    return _assemble(spec, data, fitted, [])


def aic_weights(fits):
    """Akaike weights ``exp(-delta/2) / sum(exp(-delta/2))``.

    Accepts fit results or raw AIC values.
    """
    aics = np.array([f if np.isscalar(f) else f.aic for f in fits], dtype=float)
    if aics.size == 0:
        raise DomainError("aic_weights needs at least one model")
    delta = aics - aics.min()
    w = np.exp(-0.5 * delta)
    return w / w.sum()


def check_convergence(fit_result, index_cv=None):
    """Gradient, Hessian, field-boundary and (optional) index-CV criteria."""
    max_grad = fit_result.max_gradient
    sds = fit_result.field_sds
    grad_ok = bool(max_grad < GRADIENT_THRESHOLD)
    hess_ok = bool(fit_result.hessian_pd)
    fields_ok = all(sd >= FIELD_SD_THRESHOLD for sd in sds.values())
    cv_ok = True if index_cv is None else bool(np.isfinite(index_cv) and index_cv < INDEX_CV_THRESHOLD)
    return ConvergenceReport(grad_ok, hess_ok, fields_ok, cv_ok,
                             grad_ok and hess_ok and fields_ok and cv_ok,
                             max_grad, dict(sds), index_cv,
                             refit_recommended=not fields_ok,
                             refit_actions=list(fit_result.refit_actions))
