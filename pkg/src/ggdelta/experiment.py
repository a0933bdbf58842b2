"""Simulation experiment: simulate, fit four families, score indices.

Each replicate draws a new Matérn field on the prediction grid, new sampling
locations and new observation error, fits every candidate family to the
same data, and records the bias-corrected index relative error and AIC
weights.  Replicate seeds derive from ``(master seed, cell id, replicate)``
through a counter-based generator, so results do not depend on ordering or
on how replicates are spread over workers.
"""
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np
from scipy import special

from . import distributions as dist
from . import families as fam
from .errors import DomainError, NumericalError, ValidationError
from .estimation import FAMILIES, Dataset, ModelSpec, aic_weights, check_convergence, fit
from .gmrf import MaternParams, build_covariance, cholesky_jittered
from .diagnostics import ks_normal, rqr, upper_tail
from .index import TrueIndex, index_bias_corrected, relative_error

log = logging.getLogger(__name__)

SIM_FAMILIES = ("lognormal", "gamma", "gengamma", "tweedie")
PAPER_Q_VALUES = (-2.0, -1.0, -0.5, -0.001, 0.001, 0.5, 0.95, 1.0, 2.0)
LOCATION_SCHEMES = ("grid", "stations", "uniform")
FIT_ERRORS = (NumericalError, DomainError, FloatingPointError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class SimConfig:
    sim_family: str = "gengamma"
    q: float = 0.5
    grid_size: int = 40
    n_observations: int = 250
    n_replicates: int = 200
    cv: float = 0.95
    encounter_prob: float = 0.5
    mean_catch: float = 1.0
    tweedie_power: float = 1.5
    field_range: float = 0.5
    field_sd: float = 1.0
    seed: int = 1
    locations: str = "grid"
    share_field: bool = False
    encounter_field: bool = True
    fit_families: tuple = FAMILIES

    def __post_init__(self):
        object.__setattr__(self, "fit_families", tuple(self.fit_families))
        if self.sim_family not in SIM_FAMILIES:
            raise ValidationError(f"sim_family must be one of {SIM_FAMILIES}")
        for name in ("grid_size", "n_observations", "n_replicates"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if not self.cv > 0:
            raise ValidationError("cv must be positive")
        if not 0 < self.encounter_prob < 1:
            raise ValidationError("encounter_prob must lie in (0, 1)")
        if not 1 < self.tweedie_power < 2:
            raise ValidationError("tweedie_power must lie in (1, 2)")
        if not (self.field_range > 0 and self.field_sd > 0 and self.mean_catch > 0):
            raise ValidationError("field_range, field_sd and mean_catch must be positive")
        if self.locations not in LOCATION_SCHEMES:
            raise ValidationError(f"locations must be one of {LOCATION_SCHEMES}")
        if self.locations == "grid" and self.n_observations > self.grid_size ** 2:
            raise ValidationError("grid sampling is without replacement; too many observations")
        unknown = set(self.fit_families) - set(FAMILIES)
        if unknown:
            raise ValidationError(f"unknown fit families {sorted(unknown)}")

    @property
    def label(self):
        if self.sim_family == "gengamma":
            return f"gengamma(q={self.q:g})"
        return self.sim_family

    @property
    def is_delta(self):
        return self.sim_family != "tweedie"

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown SimConfig keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        out = asdict(self)
        out["fit_families"] = list(self.fit_families)
        return out


def paper_scale(**overrides):
    """The full-size design: 100x100 grid, 500 observations, 1000 replicates."""
    return SimConfig(**{"grid_size": 100, "n_observations": 500, "n_replicates": 1000, **overrides})


def desk_cells(seed=1, **overrides):
    """Default desk-scale factorial: the three two-parameter families and three GGD shapes."""
    base = dict(seed=seed, **overrides)
    return [SimConfig(sim_family="lognormal", q=0.0, **base),
            SimConfig(sim_family="gamma", q=0.0, **base),
            SimConfig(sim_family="tweedie", q=0.0, **base)] + [
        SimConfig(sim_family="gengamma", q=q, **base) for q in (-1.0, 0.5, 2.0)]


def replicate_rng(config, replicate, stream=0):
    """Generator for one replicate; ``stream > 0`` gives independent auxiliary streams."""
    cell = zlib.crc32(config.label.encode())
    key = [config.seed, cell, replicate] + ([stream] if stream else [])
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def grid_centres(n):
    h = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(h, h, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


@lru_cache(maxsize=4)
def _grid_factor(grid_size, field_range, field_sd):
    cov = build_covariance(grid_centres(grid_size), MaternParams(field_range, field_sd))
    return cholesky_jittered(cov)[0]


def observation_theta(config):
    """Unconstrained observation parameters with the configured CV at the mean."""
    cv = config.cv
    fam_name = config.sim_family
    if fam_name == "lognormal":
        return np.array([np.log(np.sqrt(np.log1p(cv * cv)))])
    if fam_name == "gamma":
        return np.array([np.log(cv)])
    if fam_name == "gengamma":
        return np.array([np.log(dist.solve_sigma_for_cv(config.q, cv)), config.q])
    phi = cv * cv * config.mean_catch ** (2.0 - config.tweedie_power)
    return np.array([special.logit(config.tweedie_power - 1.0), np.log(phi)])


def simulate_dataset(rng, config):
    """One simulated survey and the true index over the prediction grid."""
    grid = grid_centres(config.grid_size)
    n_grid = len(grid)
    alpha = np.log(config.mean_catch) - 0.5 * config.field_sd ** 2
    if config.locations in ("grid", "stations"):
        # stations: repeat visits to grid cells, sampled with replacement
        omega_grid = _grid_factor(config.grid_size, config.field_range, config.field_sd) @ \
            rng.standard_normal(n_grid)
        cells = np.sort(rng.choice(n_grid, size=config.n_observations,
                                   replace=config.locations == "stations"))
        coords, omega_obs = grid[cells], omega_grid[cells]
    else:
        coords = rng.random((config.n_observations, 2))
        pts = np.vstack([grid, coords])
        chol, _ = cholesky_jittered(build_covariance(pts, MaternParams(config.field_range,
                                                                      config.field_sd)))
        omega = chol @ rng.standard_normal(len(pts))
        omega_grid, omega_obs = omega[:n_grid], omega[n_grid:]
    mu_grid = np.exp(alpha + omega_grid)
    theta = observation_theta(config)
    area = 1.0 / n_grid
    if not config.is_delta:
        y = fam.sample(rng, "tweedie", alpha + omega_obs, theta)
        return Dataset(y, coords), TrueIndex(float(np.sum(mu_grid) * area))
    logit_p = special.logit(config.encounter_prob)
    if config.share_field:
        p_obs = special.expit(logit_p + omega_obs)
        p_grid = special.expit(logit_p + omega_grid)
    else:
        p_obs = np.full(len(coords), config.encounter_prob)
        p_grid = np.full(n_grid, config.encounter_prob)
    encountered = rng.random(len(coords)) < p_obs
    y = np.zeros(len(coords))
    pos = np.flatnonzero(encountered)
    y[pos] = fam.sample(rng, config.sim_family, alpha + omega_obs[pos], theta)
    return Dataset(y, coords), TrueIndex(float(np.sum(p_grid * mu_grid) * area))


@dataclass
class ReplicateResult:
    cell: str
    replicate: int
    sim_family: str
    sim_q: float
    fit_family: str
    status: str
    converged: bool
    relative_error: float = np.nan
    relative_error_naive: float = np.nan
    index_cv: float = np.nan
    aic: float = np.nan
    aic_weight: float = np.nan
    aic_weight_vs_lognormal: float = np.nan
    q_hat: float = np.nan
    sigma_hat: float = np.nan
    max_gradient: float = np.nan
    refit_actions: str = ""
    wall_time: float = field(default=np.nan, compare=False)

    CSV_FIELDS = ("cell", "replicate", "sim_family", "sim_q", "fit_family", "status", "converged",
                  "relative_error", "relative_error_naive", "index_cv", "aic", "aic_weight",
                  "aic_weight_vs_lognormal", "q_hat", "sigma_hat", "max_gradient", "refit_actions")


def _fit_one(spec, data, truth, grid, area, reuse):
    fr = fit(spec, data, reuse_encounter=reuse)
    est = index_bias_corrected(fr, grid, area)
    fr.convergence = check_convergence(fr, est.cv)
    return fr, est


def run_replicate(config, replicate):
    """Simulate one dataset and fit every configured family to it."""
    rng = replicate_rng(config, replicate)
    data, truth = simulate_dataset(rng, config)
    grid = grid_centres(config.grid_size)
    area = 1.0 / len(grid)
    rows, fits, reuse = [], {}, None
    for family in config.fit_families:
        t0 = time.perf_counter()
        row = ReplicateResult(config.label, replicate, config.sim_family, config.q, family,
                              "ok", False)
        try:
            fr, est = _fit_one(ModelSpec(family, spatial_encounter=config.encounter_field),
                               data, truth, grid, area, reuse)
            if fr.spec.is_delta:
                # the encounter model and data are the same for every delta family
                reuse = fr.components["encounter"]
            conv = fr.convergence
            row.converged = conv.verdict
            row.status = "ok" if conv.verdict else "not converged: " + "; ".join(conv.reasons())
            row.relative_error = relative_error(est.bias_corrected_value, truth.value)
            row.relative_error_naive = relative_error(est.naive_value, truth.value)
            row.index_cv = est.cv
            row.aic = fr.aic
            row.q_hat = fr.q_hat if fr.q_hat is not None else np.nan
            row.sigma_hat = fr.sigma_hat if fr.sigma_hat is not None else np.nan
            row.max_gradient = fr.max_gradient
            row.refit_actions = "; ".join(fr.refit_actions)
            fits[family] = row
        except FIT_ERRORS as exc:
            row.status = f"failed: {type(exc).__name__}: {exc}"
            log.warning("%s replicate %d %s: %s", config.label, replicate, family, row.status)
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
    ok = [r for r in rows if r.converged]
    if ok:
        for r, w in zip(ok, aic_weights([r.aic for r in ok])):
            r.aic_weight = float(w)
    pair = [fits.get("delta-gengamma"), fits.get("delta-lognormal")]
    if all(r is not None and r.converged for r in pair):
        w = aic_weights([r.aic for r in pair])
        pair[0].aic_weight_vs_lognormal, pair[1].aic_weight_vs_lognormal = float(w[0]), float(w[1])
    return rows


def _run_task(task):
    from threadpoolctl import threadpool_limits
    config, replicate = task
    with threadpool_limits(1):
        try:
            return run_replicate(config, replicate)
        except Exception as exc:  # a broken replicate must not abort the run
            log.error("%s replicate %d failed: %s", config.label, replicate, exc)
            return [ReplicateResult(config.label, replicate, config.sim_family, config.q, f,
                                    f"failed: replicate: {type(exc).__name__}: {exc}", False)
                    for f in config.fit_families]


def run_factorial(configs, workers=1, progress=None):
    """All replicates of all cells, in (cell order, replicate) order."""
    configs = list(configs)
    if not configs:
        raise ValidationError("no simulation cells configured")
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ValidationError("simulation cells must be distinct")
    tasks = [(c, r) for c in configs for r in range(c.n_replicates)]
    results = []
    if workers <= 1:
        for i, t in enumerate(tasks):
            results.extend(_run_task(t))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, rows in enumerate(pool.map(_run_task, tasks, chunksize=4)):
                results.extend(rows)
                if progress:
                    progress(i + 1, len(tasks))
    return results


def _quantiles(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return {"median": None, "q05": None, "q25": None, "q75": None, "q95": None}
    q = np.quantile(x, [0.5, 0.05, 0.25, 0.75, 0.95])
    return dict(zip(("median", "q05", "q25", "q75", "q95"), (float(v) for v in q)))


def summarize(results):
    """Per (simulation cell, fitted family): convergence rate and RE / weight quantiles."""
    results = list(results)
    if not results:
        raise ValidationError("no results to summarize")
    cells = list(dict.fromkeys(r.cell for r in results))
    out = []
    for cell in cells:
        for family in dict.fromkeys(r.fit_family for r in results if r.cell == cell):
            rows = [r for r in results if r.cell == cell and r.fit_family == family]
            conv = [r for r in rows if r.converged]
            entry = {
                "cell": cell, "fit_family": family, "n_replicates": len(rows),
                "n_converged": len(conv), "convergence_rate": len(conv) / len(rows),
                "relative_error": _quantiles([r.relative_error for r in conv]),
                "relative_error_naive": _quantiles([r.relative_error_naive for r in conv]),
                "aic_weight": _quantiles([r.aic_weight for r in conv]),
                "aic_weight_vs_lognormal": _quantiles([r.aic_weight_vs_lognormal for r in conv]),
                "index_cv": _quantiles([r.index_cv for r in conv]),
            }
            if family == "delta-gengamma":
                entry["q_hat"] = _quantiles([r.q_hat for r in conv])
            out.append(entry)
    return out


def summary_lookup(summary, cell, family):
    for s in summary:
        if s["cell"] == cell and s["fit_family"] == family:
            return s
    raise KeyError((cell, family))


# --------------------------------------------------------------------------
# residual calibration
# --------------------------------------------------------------------------

def residual_config(q=2.0, seed=1, **overrides):
    """2000 visits to a 25x25 lattice of stations, fitted by the true family and the lognormal."""
    base = dict(sim_family="gengamma", q=q, grid_size=25, n_observations=2000, n_replicates=50,
                locations="stations", seed=seed, fit_families=("delta-gengamma", "delta-lognormal"))
    return SimConfig(**{**base, **overrides})


@dataclass
class ResidualCheck:
    cell: str
    replicate: int
    fit_family: str
    converged: bool
    n: int = 0
    ks_pvalue: float = np.nan
    top_decile_mean: float = np.nan
    top_decile_expected: float = np.nan
    status: str = "ok"

    @property
    def ks_pass(self):
        return bool(self.ks_pvalue >= 0.05)

    @property
    def upper_shortfall(self):
        return bool(self.top_decile_mean < self.top_decile_expected)


def run_residual_replicate(config, replicate):
    """KS p-value and top-decile residual mean for every fitted family on one dataset."""
    data, _ = simulate_dataset(replicate_rng(config, replicate), config)
    out = []
    for family in config.fit_families:
        row = ResidualCheck(config.label, replicate, family, False)
        try:
            fr = fit(ModelSpec(family, spatial_encounter=config.encounter_field), data)
            res = rqr(replicate_rng(config, replicate, stream=1), fr, seed=replicate)
            row.converged = fr.converged
            row.n = len(res)
            row.ks_pvalue = ks_normal(res)[1]
            row.top_decile_mean, row.top_decile_expected = upper_tail(res, 0.1)
        except FIT_ERRORS as exc:
            row.status = f"failed: {type(exc).__name__}: {exc}"
        out.append(row)
    return out


def _residual_task(task):
    from threadpoolctl import threadpool_limits
    with threadpool_limits(1):
        return run_residual_replicate(*task)


def run_residual_study(config, workers=1):
    tasks = [(config, r) for r in range(config.n_replicates)]
    if workers <= 1:
        return [row for t in tasks for row in _residual_task(t)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [row for rows in pool.map(_residual_task, tasks) for row in rows]


def summarize_residuals(rows):
    """Per fitted family: KS pass rate and upper-tail shortfall rate among converged fits."""
    out = {}
    for family in dict.fromkeys(r.fit_family for r in rows):
        conv = [r for r in rows if r.fit_family == family and r.converged]
        n = len(conv)
        out[family] = {"n_replicates": sum(r.fit_family == family for r in rows), "n_converged": n,
                       "ks_pass_rate": sum(r.ks_pass for r in conv) / n if n else None,
                       "upper_shortfall_rate": sum(r.upper_shortfall for r in conv) / n if n else None}
    return out


def config_echo(configs):
    return json.loads(json.dumps({"cells": [c.to_dict() for c in configs]}))
