"""Spatial Gaussian random fields with Matérn(nu=1) correlation.

Fields are simulated exactly from the dense covariance at a finite point set.
The range is the distance at which the correlation drops to about 0.13,
i.e. ``kappa = sqrt(8)/range`` and ``corr(h) = kappa*h*K1(kappa*h)``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist, squareform

from ._special import matern1_unit
from .errors import DomainError, NumericalError

DENSE_LIMIT = 4000
JITTER_START, JITTER_MAX = 1e-10, 1e-6


@dataclass(frozen=True)
class MaternParams:
    range: float
    marginal_sd: float

    def __post_init__(self):
        if not self.range > 0:
            raise DomainError("range must be positive")
        if not self.marginal_sd > 0:
            raise DomainError("marginal_sd must be positive")

    @property
    def kappa(self):
        return np.sqrt(8.0) / self.range


@dataclass
class PointSet:
    """2-D coordinates, optionally tagged ``"observation"`` or ``"prediction"``."""
    coords: np.ndarray
    roles: np.ndarray = field(default=None)

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if self.coords.shape[1] != 2:
            raise DomainError("coordinates must be an (n, 2) array")
        if not np.all(np.isfinite(self.coords)):
            raise DomainError("coordinates must be finite")
        if self.roles is None:
            self.roles = np.full(len(self.coords), "observation")

    def __len__(self):
        return len(self.coords)

    def subset(self, role):
        keep = self.roles == role
        return PointSet(self.coords[keep], self.roles[keep])


def perturb_duplicates(coords, rng=None, tol=1e-12, scale=1e-9):
    """Jitter coordinates that coincide within ``tol`` (Matérn is singular there)."""
    coords = np.array(coords, dtype=float)
    if len(coords) < 2:
        return coords
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(10):
        d = squareform(pdist(coords))
        np.fill_diagonal(d, np.inf)
        dup = np.any(d < tol, axis=1)
        if not dup.any():
            break
        # keep the first member of each cluster fixed
        first = np.argmax(d < tol, axis=1)
        move = dup & (first < np.arange(len(coords)))
        coords[move] += rng.uniform(-scale, scale, size=(move.sum(), 2))
    return coords


def matern_corr(distance, range):
    """Matérn(nu=1) correlation at the given distances."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance < 0):
        raise DomainError("distance must be non-negative")
    if not range > 0:
        raise DomainError("range must be positive")
    c, _ = matern1_unit(np.sqrt(8.0) / range * distance, exact=True)
    return c


def corr_and_dlogrange(dist, range):
    """Fast tabulated correlation matrix and its derivative in log(range)."""
    return matern1_unit(np.sqrt(8.0) / range * dist)


def _as_coords(points):
    return points.coords if isinstance(points, PointSet) else np.atleast_2d(np.asarray(points, float))


def build_covariance(points, params, dense_limit=DENSE_LIMIT):
    """Dense covariance matrix ``sd**2 * corr(|s_i - s_j|)``."""
    coords = _as_coords(points)
    if len(coords) > dense_limit:
        raise DomainError(f"{len(coords)} points exceed the dense limit of {dense_limit}")
    d = squareform(pdist(coords)) if len(coords) > 1 else np.zeros((1, 1))
    return params.marginal_sd ** 2 * matern_corr(d, params.range)


def cross_covariance(points_a, points_b, params):
    d = cdist(_as_coords(points_a), _as_coords(points_b))
    return params.marginal_sd ** 2 * matern_corr(d, params.range)


def cholesky_jittered(cov, scale=None):
    """Lower Cholesky factor, escalating a diagonal jitter from 1e-10 to 1e-6 (relative)."""
    scale = float(np.max(np.diag(cov))) if scale is None else scale
    jitter = JITTER_START
    eye = np.eye(len(cov))
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return linalg.cholesky(cov + jitter * scale * eye, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("covariance factorization failed after maximum jitter", size=len(cov))


def sample_field(rng, points, params, method="cholesky", dense_limit=DENSE_LIMIT):
    """One draw of the zero-mean field at ``points``.

    ``method="eigh"`` uses the symmetric square root, which makes the draw
    equivariant under reordering of the points (given permuted normals).
    """
    cov = build_covariance(points, params, dense_limit)
    z = rng.standard_normal(len(cov))
    return field_from_normals(cov, z, method)


def field_from_normals(cov, z, method="cholesky"):
    if method == "cholesky":
        chol, _ = cholesky_jittered(cov)
        return chol @ z
    if method == "eigh":
        vals, vecs = linalg.eigh(cov)
        return vecs @ (np.sqrt(np.clip(vals, 0.0, None)) * (vecs.T @ z))
    raise ValueError(f"unknown method {method!r}")
