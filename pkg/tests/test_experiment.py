import dataclasses
import warnings

import numpy as np
import pytest

from ggdelta import distributions as D
from ggdelta import experiment as X
from ggdelta.errors import ValidationError
from ggdelta.output import _cell

SMALL = dict(grid_size=8, n_observations=50, n_replicates=2, seed=3)


def rows_equal(a, b):
    def key(rows):
        return [[_cell(getattr(r, f)) for f in X.ReplicateResult.CSV_FIELDS] for r in rows]
    return key(a) == key(b)


def quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kw)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(sim_family="weibull"), dict(cv=0.0), dict(encounter_prob=1.0),
                                 dict(tweedie_power=2.0), dict(field_sd=0.0), dict(locations="random"),
                                 dict(grid_size=5, n_observations=30), dict(n_replicates=0),
                                 dict(fit_families=("delta-weibull",))])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        X.SimConfig(**bad)


def test_config_dict_round_trip():
    c = X.SimConfig(sim_family="gengamma", q=-1.0, fit_families=["tweedie"])
    assert X.SimConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValidationError, match="unknown"):
        X.SimConfig.from_dict({"q": 1.0, "shape": 2})


def test_labels_and_desk_cells():
    cells = X.desk_cells()
    assert [c.label for c in cells] == ["lognormal", "gamma", "tweedie", "gengamma(q=-1)",
                                        "gengamma(q=0.5)", "gengamma(q=2)"]
    assert all(c.grid_size == 40 and c.n_observations == 250 and c.n_replicates == 200 for c in cells)
    big = X.paper_scale(sim_family="gamma")
    assert (big.grid_size, big.n_observations, big.n_replicates) == (100, 500, 1000)


def test_replicate_streams():
    a, b = X.SimConfig(**SMALL), X.SimConfig(sim_family="gamma", **SMALL)
    x = X.replicate_rng(a, 0).random(4)
    assert np.array_equal(x, X.replicate_rng(a, 0).random(4))
    assert not np.array_equal(x, X.replicate_rng(a, 1).random(4))
    assert not np.array_equal(x, X.replicate_rng(b, 0).random(4))
    c = dataclasses.replace(a, seed=4)
    assert not np.array_equal(x, X.replicate_rng(c, 0).random(4))


def test_grid_centres():
    g = X.grid_centres(4)
    assert g.shape == (16, 2)
    assert g.min() == 0.125 and g.max() == 0.875
    assert len(np.unique(g, axis=0)) == 16


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------

@pytest.mark.parametrize("q", [-1.0, 0.5, 2.0])
def test_gengamma_theta_hits_cv(q):
    th = X.observation_theta(X.SimConfig(q=q))
    assert D.gg_cv(np.exp(th[0]), q) == pytest.approx(0.95, rel=1e-8)


def test_two_parameter_thetas_hit_cv():
    th = X.observation_theta(X.SimConfig(sim_family="lognormal"))
    assert np.sqrt(np.expm1(np.exp(th[0]) ** 2)) == pytest.approx(0.95)
    assert np.exp(X.observation_theta(X.SimConfig(sim_family="gamma"))[0]) == pytest.approx(0.95)
    c = X.SimConfig(sim_family="tweedie", mean_catch=2.0)
    lp, lphi = X.observation_theta(c)
    p = 1 + 1 / (1 + np.exp(-lp))
    assert p == pytest.approx(1.5)
    assert np.sqrt(np.exp(lphi) * 2.0 ** (p - 2)) == pytest.approx(0.95)


def test_positive_catches_have_configured_cv():
    # the field is shared by every observation at one grid cell
    c = X.SimConfig(sim_family="gengamma", q=2.0, grid_size=3, n_observations=3000,
                    locations="stations", field_sd=1e-4)
    data, truth = X.simulate_dataset(np.random.default_rng(0), c)
    pos = data.y[data.y > 0]
    assert np.mean(data.y == 0) == pytest.approx(0.5, abs=0.03)
    assert pos.mean() == pytest.approx(1.0, rel=0.05)
    assert pos.std() / pos.mean() == pytest.approx(0.95, rel=0.07)
    assert truth.value == pytest.approx(0.5, rel=1e-3)


def test_true_index_is_unbiased_over_fields():
    c = X.SimConfig(sim_family="gamma", grid_size=10, n_observations=20, field_range=0.2)
    vals = [X.simulate_dataset(X.replicate_rng(c, r), c)[1].value for r in range(300)]
    # E[exp(omega - sd^2/2)] = 1 in every cell
    assert np.mean(vals) == pytest.approx(0.5, abs=3 * np.std(vals) / np.sqrt(300))


def test_location_schemes():
    base = dict(sim_family="tweedie", grid_size=6, n_observations=30)
    grid, _ = X.simulate_dataset(np.random.default_rng(1), X.SimConfig(**base))
    assert len(np.unique(grid.coords, axis=0)) == 30
    assert np.isin(grid.coords, X.grid_centres(6)).all()
    st, _ = X.simulate_dataset(np.random.default_rng(1), X.SimConfig(locations="stations",
                                                                    **{**base, "n_observations": 80}))
    assert len(np.unique(st.coords, axis=0)) < 80
    un, _ = X.simulate_dataset(np.random.default_rng(1), X.SimConfig(locations="uniform", **base))
    assert len(np.unique(un.coords, axis=0)) == 30
    assert not np.isin(un.coords, X.grid_centres(6)).any()


def test_shared_field_correlates_encounters():
    def station_rate_spread(share):
        c = X.SimConfig(sim_family="gamma", grid_size=5, n_observations=2500, locations="stations",
                        share_field=share, field_sd=2.0)
        data, _ = X.simulate_dataset(np.random.default_rng(2), c)
        _, inv = np.unique(data.coords, axis=0, return_inverse=True)
        inv = inv.ravel()
        return np.std(np.bincount(inv, data.y > 0) / np.bincount(inv))
    # about 100 visits per station: binomial spread alone is near 0.05
    assert station_rate_spread(False) < 0.1
    assert station_rate_spread(True) > 0.2


def test_simulation_reproducible():
    c = X.SimConfig(**SMALL)
    a, ta = X.simulate_dataset(X.replicate_rng(c, 0), c)
    b, tb = X.simulate_dataset(X.replicate_rng(c, 0), c)
    assert a.y.tobytes() == b.y.tobytes() and ta == tb


# --------------------------------------------------------------------------
# replicates, factorial and summaries
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_rows():
    c = X.SimConfig(sim_family="gengamma", q=0.5, grid_size=8, n_observations=60, n_replicates=2, seed=5)
    return c, quiet(X.run_replicate, c, 0)


def test_replicate_rows(small_rows):
    c, rows = small_rows
    assert [r.fit_family for r in rows] == list(c.fit_families)
    assert all(r.cell == "gengamma(q=0.5)" and r.replicate == 0 for r in rows)
    ok = [r for r in rows if r.converged]
    assert ok
    assert sum(r.aic_weight for r in ok) == pytest.approx(1.0)
    assert all(np.isnan(r.aic_weight) for r in rows if not r.converged)
    for r in ok:
        assert np.isfinite(r.relative_error) and r.relative_error > -1
        assert r.status == "ok"
    gg = next(r for r in rows if r.fit_family == "delta-gengamma")
    ln = next(r for r in rows if r.fit_family == "delta-lognormal")
    if gg.converged and ln.converged:
        assert gg.aic_weight_vs_lognormal + ln.aic_weight_vs_lognormal == pytest.approx(1.0)
        assert np.isfinite(gg.q_hat)


def test_replicate_reproducible(small_rows):
    c, rows = small_rows
    assert rows_equal(rows, quiet(X.run_replicate, c, 0))


def test_parallel_matches_serial():
    cfgs = [X.SimConfig(sim_family="gamma", grid_size=6, n_observations=30, n_replicates=2, seed=7,
                        fit_families=("delta-gamma", "tweedie")),
            X.SimConfig(sim_family="tweedie", grid_size=6, n_observations=30, n_replicates=1, seed=7,
                        fit_families=("tweedie",))]
    serial = quiet(X.run_factorial, cfgs)
    parallel = quiet(X.run_factorial, cfgs, workers=2)
    assert len(serial) == 2 * 2 + 1
    assert rows_equal(serial, parallel)
    assert [(r.cell, r.replicate) for r in serial] == [("gamma", 0), ("gamma", 0), ("gamma", 1),
                                                       ("gamma", 1), ("tweedie", 0)]


def test_factorial_validation():
    with pytest.raises(ValidationError):
        X.run_factorial([])
    with pytest.raises(ValidationError, match="distinct"):
        X.run_factorial([X.SimConfig(**SMALL), X.SimConfig(**SMALL)])


def test_broken_replicate_is_recorded(monkeypatch):
    def boom(config, replicate):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(X, "run_replicate", boom)
    rows = X._run_task((X.SimConfig(**SMALL), 1))
    assert len(rows) == 4
    assert all(not r.converged and "disk on fire" in r.status for r in rows)


def make_row(cell, family, conv, re, w=np.nan):
    return X.ReplicateResult(cell, 0, "gamma", 0.0, family, "ok" if conv else "not converged", conv,
                             relative_error=re, aic_weight=w)


def test_summarize_excludes_non_converged():
    rows = [make_row("gamma", "delta-gamma", True, 0.1, 0.6),
            make_row("gamma", "delta-gamma", True, 0.3, 0.4),
            make_row("gamma", "delta-gamma", False, 50.0),
            make_row("gamma", "tweedie", False, 1.0)]
    summary = X.summarize(rows)
    s = X.summary_lookup(summary, "gamma", "delta-gamma")
    assert s["n_replicates"] == 3 and s["n_converged"] == 2
    assert s["convergence_rate"] == pytest.approx(2 / 3)
    assert s["relative_error"]["median"] == pytest.approx(0.2)
    assert s["aic_weight"]["median"] == pytest.approx(0.5)
    t = X.summary_lookup(summary, "gamma", "tweedie")
    assert t["relative_error"]["median"] is None
    with pytest.raises(KeyError):
        X.summary_lookup(summary, "lognormal", "tweedie")
    with pytest.raises(ValidationError):
        X.summarize([])


def test_config_echo_is_plain_json():
    echo = X.config_echo(X.desk_cells())
    assert len(echo["cells"]) == 6
    assert echo["cells"][0]["fit_families"] == list(X.FAMILIES)


# --------------------------------------------------------------------------
# residual calibration harness
# --------------------------------------------------------------------------

def test_residual_config_design():
    c = X.residual_config()
    assert (c.grid_size, c.n_observations, c.n_replicates, c.locations) == (25, 2000, 50, "stations")
    assert c.q == 2.0 and c.fit_families == ("delta-gengamma", "delta-lognormal")


def test_residual_study_small():
    c = X.residual_config(grid_size=6, n_observations=300, n_replicates=2)
    rows = quiet(X.run_residual_study, c)
    assert [(r.replicate, r.fit_family) for r in rows] == [(0, "delta-gengamma"), (0, "delta-lognormal"),
                                                          (1, "delta-gengamma"), (1, "delta-lognormal")]
    assert all(r.n > 100 and 0 <= r.ks_pvalue <= 1 for r in rows)
    again = quiet(X.run_residual_replicate, c, 1)
    assert [r.ks_pvalue for r in again] == [r.ks_pvalue for r in rows[2:]]
    s = X.summarize_residuals(rows)
    assert set(s) == {"delta-gengamma", "delta-lognormal"}
    conv = [r for r in rows if r.fit_family == "delta-lognormal" and r.converged]
    assert s["delta-lognormal"]["n_converged"] == len(conv)


def test_residual_check_flags():
    r = X.ResidualCheck("c", 0, "f", True, 10, 0.04, 1.2, 1.7)
    assert not r.ks_pass and r.upper_shortfall
