"""Command-line interface.

    ggdelta simulate   --config CFG [--replicate I]      one simulated dataset as survey CSV
    ggdelta experiment --config CFG                      factorial simulation study
    ggdelta fit        DATA.csv [--families ...]         fit all families to a survey CSV
    ggdelta residuals  FIT.json [FIT.json ...]           QQ data, KS test and QQ plot
    ggdelta report     REPLICATES.csv                    summaries and violin plots

Exit status: 0 on success, 1 for invalid input, 2 for numerical failure.
"""
import argparse
import json
import logging
import os
import sys
import zlib

import numpy as np

from . import __version__, diagnostics, experiment, output, survey
from .errors import DomainError, NumericalError, ValidationError
from .estimation import FAMILIES

log = logging.getLogger("ggdelta")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

CSV_HELP = """survey CSV columns: year (label), catch_kg (catch weight, kg, >= 0),
effort (area swept, > 0, entered as a log offset), optional x and y
(station coordinates, needed for --spatial). UTF-8, header row, '.' decimal."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def load_config(path, seed=None, replicates=None):
    """Simulation cells from a JSON file.

    Accepted shapes: a single object of :class:`SimConfig` fields; an
    object with ``"cells"`` (a list of such objects) and optional
    ``"defaults"`` applied to every cell; or ``{"preset": "desk"}`` /
    ``{"preset": "paper"}`` with optional ``"defaults"``.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    defaults = dict(raw.get("defaults", {}))
    if seed is not None:
        defaults["seed"] = seed
    if replicates is not None:
        defaults["n_replicates"] = replicates
    try:
        if "preset" in raw:
            preset = raw["preset"]
            if preset == "desk":
                cells = [c.to_dict() for c in experiment.desk_cells()]
            elif preset == "paper":
                cells = [experiment.paper_scale(sim_family=f, q=0.0).to_dict()
                         for f in ("lognormal", "gamma", "tweedie")]
                cells += [experiment.paper_scale(sim_family="gengamma", q=q).to_dict()
                          for q in experiment.PAPER_Q_VALUES]
            else:
                raise ValidationError(f"unknown preset {preset!r} (desk, paper)")
        elif "cells" in raw:
            cells = raw["cells"]
        else:
            cells = [{k: v for k, v in raw.items() if k != "defaults"}]
        return [experiment.SimConfig.from_dict({**c, **defaults}) for c in cells]
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _seed_echo(configs):
    return [{"cell": c.label, "master_seed": c.seed, "cell_id": zlib.crc32(c.label.encode()),
             "derivation": "Philox(SeedSequence([master_seed, cell_id, replicate]))"}
            for c in configs]


def _blas_threads(n):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(n)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args):
    configs = load_config(args.config, args.seed)
    if len(configs) != 1:
        raise ValidationError("simulate needs a config with exactly one cell")
    config = configs[0]
    rng = experiment.replicate_rng(config, args.replicate)
    data, truth = experiment.simulate_dataset(rng, config)
    sv = survey.SurveyDataset(np.ones(len(data), dtype=int), data.y, np.ones(len(data)), data.coords)
    csv_path = os.path.join(args.out_dir, "dataset.csv")
    survey.write_survey_csv(csv_path, sv)
    output.write_json(os.path.join(args.out_dir, "truth.json"),
                      {"config": config.to_dict(), "replicate": args.replicate,
                       "seeds": _seed_echo([config]), "true_index": truth.value,
                       "n_positive": int(np.count_nonzero(data.y > 0))})
    print(csv_path)


def cmd_experiment(args):
    configs = load_config(args.config, args.seed, args.replicates)
    n_tasks = sum(c.n_replicates for c in configs)
    log.info("%d cells, %d replicates, %d worker(s)", len(configs), n_tasks, args.threads)

    def progress(done, total):
        if done == total or done % max(1, total // 20) == 0:
            log.info("replicate %d/%d", done, total)

    results = experiment.run_factorial(configs, workers=args.threads, progress=progress)
    summary = experiment.summarize(results)
    output.write_replicates(os.path.join(args.out_dir, "replicates.csv"), results)
    output.write_json(os.path.join(args.out_dir, "summary.json"),
                      {"version": __version__, "config": experiment.config_echo(configs),
                       "seeds": _seed_echo(configs), "summary": summary,
                       "n_rows": len(results)})
    if args.timings:
        output.write_timings(os.path.join(args.out_dir, "timings.csv"), results)
    _print_summary(summary)


def _print_summary(summary):
    print(f"{'cell':<20}{'fit family':<18}{'conv':>6}{'med RE':>9}{'med w':>8}")
    for s in summary:
        re, w = s["relative_error"]["median"], s["aic_weight"]["median"]
        print(f"{s['cell']:<20}{s['fit_family']:<18}{s['convergence_rate']:>6.2f}"
              f"{'' if re is None else format(re, '.3f'):>9}{'' if w is None else format(w, '.3f'):>8}")


def cmd_fit(args):
    with _blas_threads(args.threads):
        res = survey.fit_survey_csv(args.data, args.families, args.spatial)
    out = args.out_dir
    fams = {}
    for name, ff in res.fits.items():
        entry = {"rung": ff.rung, "attempts": ff.attempts, "converged": ff.converged,
                 "aic_weight": res.aic_weights.get(name), "mean_index_cv": ff.mean_index_cv}
        if ff.result is not None:
            path = os.path.join(out, "fits", f"{name}.json")
            output.save_fit(path, ff.result)
            entry.update(saved_fit=os.path.relpath(path, out), aic=ff.result.aic,
                         loglik=ff.result.loglik, q_hat=ff.result.q_hat)
        fams[name] = entry
    output.write_json(os.path.join(out, "fit_summary.json"),
                      {"version": __version__, "data": os.path.basename(args.data),
                       "spatial": args.spatial, "flags": res.survey.flags, "families": fams})
    output.write_csv(os.path.join(out, "index.csv"), res.index_table(),
                     ("family", "year", "naive", "bias_corrected", "standard_error", "cv"))
    for name, e in fams.items():
        w = e["aic_weight"]
        print(f"{name:<18} {e['rung']:<16} AIC weight {'-' if w is None else format(w, '.3f')}")
    if not any(ff.converged for ff in res.fits.values()):
        raise NumericalError("no family converged")


def cmd_residuals(args):
    panels, table, stats = [], [], {}
    rng = np.random.default_rng(args.seed)
    with _blas_threads(args.threads):
        for path in args.fits:
            fr = output.load_fit(path)
            res = diagnostics.rqr(rng, fr, seed=args.seed)
            name = os.path.splitext(os.path.basename(path))[0]
            theo, emp = diagnostics.qq_data(res)
            table += [{"fit": name, "theoretical": t, "sample": e} for t, e in zip(theo, emp)]
            d, p = diagnostics.ks_normal(res)
            top, expected = diagnostics.upper_tail(res)
            stats[name] = {"n": len(res), "predictor": res.predictor, "ks_statistic": d,
                           "ks_pvalue": p, "top_decile_mean": top, "top_decile_expected": expected}
            panels.append((fr.family, res))
            print(f"{name}: n={len(res)} KS p={p:.3f} top decile {top:.3f} (normal {expected:.3f})")
    output.write_csv(os.path.join(args.out_dir, "qq.csv"), table, ("fit", "theoretical", "sample"))
    output.write_json(os.path.join(args.out_dir, "residuals.json"),
                      {"seed": args.seed, "fits": stats})
    output.qq_svg(os.path.join(args.out_dir, "qq.svg"), panels)


def cmd_report(args):
    results = output.read_replicates(args.replicates)
    if not results:
        raise ValidationError(f"{args.replicates}: no replicate rows")
    summary = experiment.summarize(results)
    output.write_json(os.path.join(args.out_dir, "report.json"), {"summary": summary})
    output.violin_svg(os.path.join(args.out_dir, "re_aic.svg"), results)
    _print_summary(summary)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides the config; residual draws use it directly)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker processes for experiment; BLAS threads otherwise (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ggdelta", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="emit one simulated dataset")
    s.add_argument("--config", required=True, help="JSON file with one SimConfig")
    s.add_argument("--replicate", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("experiment", parents=[common], help="run the simulation factorial")
    s.add_argument("--config", required=True, help="JSON file: SimConfig, cell list or preset")
    s.add_argument("--replicates", type=int, default=None, help="override n_replicates")
    s.add_argument("--timings", action="store_true", help="also write timings.csv (not reproducible)")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("fit", parents=[common], help="fit the four families to a survey CSV",
                       epilog=CSV_HELP)
    s.add_argument("data")
    s.add_argument("--families", nargs="+", choices=FAMILIES, default=list(FAMILIES))
    s.add_argument("--spatial", choices=survey.SPATIAL_CHOICES, default="none",
                   help="which predictor(s) get a spatial field (needs x, y)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("residuals", parents=[common], help="randomized quantile residuals of saved fits")
    s.add_argument("fits", nargs="+", help="fit JSON files written by 'fit'")
    s.set_defaults(func=cmd_residuals)

    s = sub.add_parser("report", parents=[common], help="summaries and plots from a replicate table")
    s.add_argument("replicates", help="replicates.csv written by 'experiment'")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "residuals" and args.seed is None:
        args.seed = 1
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK
