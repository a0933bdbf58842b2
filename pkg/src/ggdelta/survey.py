"""Fitting trawl-survey style CSV data.

Expected columns (header row required, extra columns ignored):

    year      survey year label (integer or text)
    catch_kg  catch weight in kg, >= 0
    effort    area swept (any positive unit); enters as a log offset
    x, y      optional station coordinates, used when a spatial field is requested

Every family gets per-year intercepts and a log-effort offset.  A fit that
fails the convergence criteria is retried down a fixed ladder: a collapsed
field is dropped (inside :func:`estimation.fit`), then a weak N(0, 30^2)
prior goes on the year intercepts, then the catch is rescaled by 0.01.
The first rung that converges is kept and recorded.

Indices are densities per unit effort averaged over the prediction points
(the distinct stations for spatial fits), i.e. the index over a region of
unit total area.
"""
import csv
import logging
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, NumericalError, ValidationError
from .estimation import FAMILIES, Dataset, ModelSpec, aic_weights, check_convergence, fit
from .index import index_bias_corrected

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("year", "catch_kg", "effort")
COORD_COLUMNS = ("x", "y")
YEAR_PRIOR_SD = 30.0
RESCALE = 0.01
SPATIAL_CHOICES = ("none", "positive", "encounter", "both")
_FIT_ERRORS = (NumericalError, DomainError, FloatingPointError, np.linalg.LinAlgError)


@dataclass
class SurveyDataset:
    year: np.ndarray
    catch_kg: np.ndarray
    effort: np.ndarray
    coords: np.ndarray = None
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.year) == 0:
            raise ValidationError("survey has no rows")
        if np.any(self.effort <= 0):
            raise ValidationError("effort must be positive")
        if np.any(self.catch_kg < 0):
            raise ValidationError("catch_kg must be non-negative")

    @property
    def years(self):
        return np.unique(self.year).tolist()

    def to_dataset(self):
        return Dataset(self.catch_kg, self.coords, np.log(self.effort), self.year)


def _number(text, column, line):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"line {line}: {column} is not a number: {text!r}") from None
    if not np.isfinite(value):
        raise ValidationError(f"line {line}: {column} is not finite: {text!r}")
    return value


def read_survey_csv(path):
    """Parse and validate a survey CSV; errors name the offending line."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing required columns {missing}; "
                                  f"required: {list(REQUIRED_COLUMNS)}, optional: {list(COORD_COLUMNS)}")
        reader.fieldnames = header
        has_xy = all(c in header for c in COORD_COLUMNS)
        years, catch, effort, xy = [], [], [], []
        for row in reader:
            line = reader.line_num
            if None in row:
                raise ValidationError(f"line {line}: more fields than header columns")
            if any(row[c] is None for c in header):
                raise ValidationError(f"line {line}: fewer fields than header columns")
            yr = row["year"].strip()
            if not yr:
                raise ValidationError(f"line {line}: year is empty")
            c = _number(row["catch_kg"], "catch_kg", line)
            e = _number(row["effort"], "effort", line)
            if c < 0:
                raise ValidationError(f"line {line}: catch_kg must be >= 0, got {c:g}")
            if e <= 0:
                raise ValidationError(f"line {line}: effort must be > 0, got {e:g}")
            years.append(yr)
            catch.append(c)
            effort.append(e)
            if has_xy:
                xy.append((_number(row["x"], "x", line), _number(row["y"], "y", line)))
    if not years:
        raise ValidationError(f"{path}: no data rows; required columns: {list(REQUIRED_COLUMNS)}")
    try:
        year = np.array([int(v) for v in years])
    except ValueError:
        year = np.array(years)
    survey = SurveyDataset(year, np.array(catch), np.array(effort),
                           np.array(xy) if has_xy else None)
    for yr in survey.years:
        if not np.any(survey.catch_kg[survey.year == yr] > 0):
            survey.flags.append(f"year {yr}: all catches zero")
            warnings.warn(f"year {yr} has no positive catch")
    return survey


@dataclass
class FamilyFit:
    family: str
    result: object = None           # FitResult of the rung that was kept
    rung: str = "failed"
    attempts: list = field(default_factory=list)
    indices: dict = field(default_factory=dict)   # year -> IndexEstimate
    mean_index_cv: float = np.nan
    error: str = ""

    @property
    def converged(self):
        return self.result is not None and self.result.converged


@dataclass
class SurveyFit:
    survey: SurveyDataset
    fits: dict
    aic_weights: dict

    def index_table(self):
        rows = []
        for fam_name, ff in self.fits.items():
            for yr, est in ff.indices.items():
                rows.append({"family": fam_name, "year": yr, "naive": est.naive_value,
                             "bias_corrected": est.bias_corrected_value,
                             "standard_error": est.standard_error, "cv": est.cv})
        return rows


def _spec(family, spatial, coords):
    if spatial != "none" and coords is None:
        raise ValidationError("a spatial field needs x and y columns")
    if family == "tweedie":
        sp_pos = spatial != "none"
        sp_enc = False
    else:
        sp_pos = spatial in ("positive", "both")
        sp_enc = spatial in ("encounter", "both")
    return ModelSpec(family, year_effects=True, use_offset=True,
                     spatial_encounter=sp_enc, spatial_positive=sp_pos)


def _prediction_points(survey):
    if survey.coords is None:
        return np.zeros((1, 2)), 1.0
    pts = np.unique(survey.coords, axis=0)
    return pts, 1.0 / len(pts)


def _indices(fr, survey):
    pts, area = _prediction_points(survey)
    out = {yr: index_bias_corrected(fr, pts, area, year=yr) for yr in survey.years}
    cvs = np.array([e.cv for e in out.values()])
    return out, float(np.mean(cvs)) if cvs.size else np.nan


def fit_family(survey, family, spatial="none"):
    """Fit one family, walking the refit ladder until the fit converges."""
    data = survey.to_dataset()
    base = _spec(family, spatial, survey.coords)
    ladder = [("default", base),
              ("year prior", replace(base, year_prior_sd=YEAR_PRIOR_SD)),
              ("rescaled x0.01", replace(base, year_prior_sd=YEAR_PRIOR_SD, response_scale=RESCALE))]
    out = FamilyFit(family)
    for rung, spec in ladder:
        try:
            fr = fit(spec, data)
            idx, cv = _indices(fr, survey)
        except _FIT_ERRORS as exc:
            out.attempts.append(f"{rung}: failed ({type(exc).__name__}: {exc})")
            out.error = str(exc)
            continue
        fr.convergence = check_convergence(fr, cv)
        note = "converged" if fr.converged else "; ".join(fr.convergence.reasons())
        if fr.refit_actions:
            note += " [" + "; ".join(fr.refit_actions) + "]"
        out.attempts.append(f"{rung}: {note}")
        if out.result is None or fr.converged:
            out.result, out.indices, out.mean_index_cv = fr, idx, cv
            out.rung = rung if fr.converged else "not converged"
        if fr.converged:
            break
        log.info("%s %s rung did not converge: %s", family, rung, note)
    return out


def fit_survey(survey, families=FAMILIES, spatial="none"):
    """Fit every family and compute AIC weights among the converged ones."""
    if spatial not in SPATIAL_CHOICES:
        raise ValidationError(f"spatial must be one of {SPATIAL_CHOICES}")
    fits = {f: fit_family(survey, f, spatial) for f in families}
    ok = [f for f, ff in fits.items() if ff.converged]
    weights = dict(zip(ok, (float(w) for w in aic_weights([fits[f].result.aic for f in ok])))) if ok else {}
    return SurveyFit(survey, fits, weights)


def fit_survey_csv(path, families=FAMILIES, spatial="none"):
    return fit_survey(read_survey_csv(path), families, spatial)


def simulate_survey(rng, family, year_means, rows_per_year, encounter_prob=0.5, cv=0.95,
                    q=0.5, effort_range=(0.5, 2.0)):
    """Synthetic survey with known mean catch per unit effort by year.

    ``year_means`` maps year to the expected catch per unit effort; the
    positive-catch mean is ``year_mean / encounter_prob``.  Only the delta
    families with non-spatial positives are supported.
    """
    from . import distributions as dist
    from . import families as fam
    years, catch, effort = [], [], []
    pos_family = family.split("-", 1)[1]
    if pos_family == "gamma":
        theta = np.array([np.log(cv)])
    elif pos_family == "lognormal":
        theta = np.array([np.log(np.sqrt(np.log1p(cv * cv)))])
    else:
        theta = np.array([np.log(dist.solve_sigma_for_cv(q, cv)), q])
    for yr, mean in year_means.items():
        e = rng.uniform(*effort_range, rows_per_year)
        hit = rng.random(rows_per_year) < encounter_prob
        y = np.zeros(rows_per_year)
        eta = np.log(mean / encounter_prob) + np.log(e[hit])
        y[hit] = fam.sample(rng, pos_family, eta, theta)
        years += [yr] * rows_per_year
        catch.append(y)
        effort.append(e)
    return SurveyDataset(np.array(years), np.concatenate(catch), np.concatenate(effort))


def write_survey_csv(path, survey):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(REQUIRED_COLUMNS) + (list(COORD_COLUMNS) if survey.coords is not None else [])
        w.writerow(cols)
        for i in range(len(survey.year)):
            row = [survey.year[i], repr(float(survey.catch_kg[i])), repr(float(survey.effort[i]))]
            if survey.coords is not None:
                row += [repr(float(v)) for v in survey.coords[i]]
            w.writerow(row)
