"""Deterministic file output: replicate CSV, JSON summaries, SVG figures.

Floats are written with ``repr`` (shortest round-trip form) and JSON with
sorted keys, so identical results give identical bytes.  SVG output fixes
matplotlib's element-id salt and drops the creation date for the same
reason.
"""
import csv
import json
import math
import os
from dataclasses import replace

import numpy as np

from . import diagnostics
from .errors import ValidationError
from .estimation import Dataset, ModelSpec, evaluate_fit
from .experiment import ReplicateResult

SVG_SALT = "ggdelta"


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    return str(v)


def _ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def write_csv(path, rows, columns):
    _ensure_dir(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c] if isinstance(r, dict) else getattr(r, c)) for c in columns])


def write_replicates(path, results):
    write_csv(path, results, ReplicateResult.CSV_FIELDS)


def write_timings(path, results):
    write_csv(path, results, ("cell", "replicate", "fit_family", "wall_time"))


def read_replicates(path):
    """Read a replicate table written by :func:`write_replicates`."""
    types = {"replicate": int, "converged": lambda s: s == "true"}
    text = {"cell", "sim_family", "fit_family", "status", "refit_actions"}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(ReplicateResult.CSV_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: not a replicate table (missing {sorted(missing)})")
        for row in reader:
            kw = {}
            for k in ReplicateResult.CSV_FIELDS:
                v = row[k]
                if k in types:
                    kw[k] = types[k](v)
                elif k in text:
                    kw[k] = v
                else:
                    kw[k] = float(v) if v != "" else float("nan")
            out.append(ReplicateResult(**kw))
    return out


def jsonable(obj):
    """Recursively convert numpy values and non-finite floats (to null)."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_json(path, obj):
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


# --------------------------------------------------------------------------
# saved fits
# --------------------------------------------------------------------------

def fit_to_dict(fr):
    """Enough of a fit to rebuild it exactly with :func:`fit_from_dict`.

    The stored model spec carries the field flags actually used, so a field
    dropped by the refit rule stays dropped.
    """
    comps = fr.components
    spec = fr.spec
    if spec.is_delta:
        spec = replace(spec, spatial_encounter=comps["encounter"].spatial,
                       spatial_positive=comps["positive"].spatial)
    else:
        spec = replace(spec, spatial_positive=comps["tweedie"].spatial)
    d = fr.data
    return {
        "spec": {k: getattr(spec, k) for k in ("family", "year_effects", "use_offset",
                                                "spatial_encounter", "spatial_positive",
                                                "year_prior_sd", "response_scale")},
        "data": {"y": d.y, "coords": d.coords, "offset": d.offset,
                 "year": None if d.year is None else d.year.tolist()},
        "theta": np.concatenate([c.theta for c in comps.values()]),
        "components": {
            name: {"param_names": c.param_names, "theta": c.theta, "loglik": c.loglik,
                   "max_gradient": c.max_gradient, "hessian_pd": c.hessian_pd,
                   "obs_params": c.obs_params, "field_sd": c.field_sd,
                   "field_range": c.field_range, "flags": c.component.flags,
                   "optimizer": c.optimizer_message}
            for name, c in comps.items()},
        "loglik": fr.loglik, "aic": fr.aic, "n_params": fr.n_params,
        "refit_actions": fr.refit_actions,
        "convergence": None if fr.convergence is None else {
            "verdict": fr.convergence.verdict, "gradient_ok": fr.convergence.gradient_ok,
            "hessian_ok": fr.convergence.hessian_ok, "fields_ok": fr.convergence.fields_ok,
            "index_cv_ok": fr.convergence.index_cv_ok, "index_cv": fr.convergence.index_cv,
            "max_gradient": fr.convergence.max_gradient,
            "reasons": fr.convergence.reasons()},
    }


def fit_from_dict(d):
    """Rebuild a fit at its stored parameters (random effects re-solved)."""
    try:
        spec = ModelSpec(**d["spec"])
        data = d["data"]
        year = None if data["year"] is None else np.asarray(data["year"])
        ds = Dataset(np.asarray(data["y"], float),
                     None if data["coords"] is None else np.asarray(data["coords"], float),
                     np.asarray(data["offset"], float), year)
        theta = np.asarray(d["theta"], float)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"not a saved fit: {exc}") from None
    return evaluate_fit(spec, ds, theta)


def save_fit(path, fr):
    write_json(path, fit_to_dict(fr))


def load_fit(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return fit_from_dict(d)


# --------------------------------------------------------------------------
# figures
# --------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = SVG_SALT
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path):
    _ensure_dir(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def qq_svg(path, panels):
    """QQ plots, one panel per ``(title, residuals)`` pair, with the 1:1 line."""
    plt = _pyplot()
    n = len(panels)
    if n == 0:
        raise ValidationError("no residual sets to plot")
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, (title, res) in zip(axes[0], panels):
        theo, emp = diagnostics.qq_data(res)
        lim = float(max(np.abs(theo).max(), np.abs(emp).max())) * 1.05
        ax.plot([-lim, lim], [-lim, lim], color="0.5", lw=0.8)
        ax.plot(theo, emp, ".", ms=2, color="C0")
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("theoretical")
        ax.set_ylabel("sample")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def violin_svg(path, results, families=None):
    """Relative error (top) and AIC weight (bottom) by simulation cell and fitted family."""
    plt = _pyplot()
    results = [r for r in results if r.converged]
    if not results:
        raise ValidationError("no converged replicates to plot")
    cells = list(dict.fromkeys(r.cell for r in results))
    families = families or list(dict.fromkeys(r.fit_family for r in results))
    fig, axes = plt.subplots(2, len(cells), figsize=(2.6 * len(cells), 5.2), squeeze=False,
                             sharey="row")
    for j, cell in enumerate(cells):
        for i, (attr, label) in enumerate((("relative_error", "relative error"),
                                           ("aic_weight", "AIC weight"))):
            ax = axes[i, j]
            pos, data = [], []
            for k, f in enumerate(families):
                v = np.array([getattr(r, attr) for r in results if r.cell == cell and r.fit_family == f])
                v = v[np.isfinite(v)]
                if v.size > 1 and np.ptp(v) > 0:
                    pos.append(k)
                    data.append(v)
                if v.size:
                    ax.plot(k, np.median(v), "o", color="k", ms=3)
            if data:
                ax.violinplot(data, positions=pos, showextrema=False)
            if attr == "relative_error":
                ax.axhline(0.0, color="0.5", lw=0.8)
                ax.set_title(cell, fontsize=9)
            ax.set_xticks(range(len(families)))
            ax.set_xticklabels([f.replace("delta-", "") for f in families], rotation=45, fontsize=7)
            if j == 0:
                ax.set_ylabel(label)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
