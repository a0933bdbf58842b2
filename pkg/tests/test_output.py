import json
import math
import warnings
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from ggdelta import diagnostics as dg
from ggdelta import estimation as E
from ggdelta import experiment as X
from ggdelta import output as out
from ggdelta.errors import ValidationError


def quiet_fit(spec, data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return E.fit(spec, data)


def rows():
    return [X.ReplicateResult("gamma", 0, "gamma", 0.0, "delta-gamma", "ok", True, relative_error=0.1,
                              aic=10.0, aic_weight=0.7, refit_actions="", wall_time=1.5),
            X.ReplicateResult("gamma", 0, "gamma", 0.0, "tweedie", "not converged: x", False,
                              relative_error=0.3, wall_time=0.5),
            X.ReplicateResult("gamma", 1, "gamma", 0.0, "delta-gamma", "ok", True, relative_error=-0.2,
                              aic=12.0, aic_weight=1.0)]


def test_cell_format():
    assert out._cell(True) == "true" and out._cell(np.bool_(False)) == "false"
    assert out._cell(np.nan) == "" and out._cell(0.1) == "0.1"
    assert out._cell(np.float64(1 / 3)) == repr(1 / 3)
    assert out._cell("a;b") == "a;b" and out._cell(3) == "3"


def test_replicates_round_trip(tmp_path):
    p = tmp_path / "r.csv"
    out.write_replicates(p, rows())
    text = p.read_text()
    assert text.splitlines()[0] == ",".join(X.ReplicateResult.CSV_FIELDS)
    assert len(text.splitlines()) == 4
    assert "wall_time" not in text
    back = out.read_replicates(p)
    assert [r.fit_family for r in back] == ["delta-gamma", "tweedie", "delta-gamma"]
    assert back[0].converged is True and back[1].converged is False
    assert back[0].relative_error == 0.1 and math.isnan(back[1].aic)
    assert back[1].status == "not converged: x"


def test_csv_bytes_are_deterministic(tmp_path):
    out.write_replicates(tmp_path / "a.csv", rows())
    out.write_replicates(tmp_path / "b.csv", rows())
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert b"\r" not in (tmp_path / "a.csv").read_bytes()


def test_timings_file(tmp_path):
    out.write_timings(tmp_path / "t.csv", rows())
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "cell,replicate,fit_family,wall_time"
    assert lines[1] == "gamma,0,delta-gamma,1.5"


def test_json_sanitizes(tmp_path):
    obj = {"b": np.float64(0.5), "a": [np.int64(2), np.nan, np.inf], "c": np.array([1.0, 2.0]),
           "d": (True, np.bool_(False))}
    out.write_json(tmp_path / "x.json", obj)
    text = (tmp_path / "x.json").read_text()
    assert text.endswith("\n")
    assert json.loads(text) == {"a": [2, None, None], "b": 0.5, "c": [1.0, 2.0], "d": [True, False]}
    assert text.index('"a"') < text.index('"b"')


@pytest.fixture(scope="module")
def spatial_fit():
    rng = np.random.default_rng(1)
    coords = rng.random((60, 2))
    y = rng.gamma(1.5, 1 / 1.5, 60) * np.exp(np.sin(4 * coords[:, 0]))
    y[rng.random(60) < 0.3] = 0
    return quiet_fit(E.ModelSpec("delta-gengamma"), E.Dataset(y, coords))


def test_fit_save_load_round_trip(tmp_path, spatial_fit):
    fr = spatial_fit
    p = tmp_path / "fits" / "f.json"
    out.save_fit(p, fr)
    back = out.load_fit(p)
    assert back.spec == fr.spec
    assert back.loglik == pytest.approx(fr.loglik, abs=1e-9)
    for k, c in fr.components.items():
        np.testing.assert_array_equal(back.components[k].theta, c.theta)
        assert back.components[k].spatial == c.spatial
        if c.spatial:
            np.testing.assert_allclose(back.components[k].u_hat, c.u_hat, atol=1e-8)
    a = dg.rqr(np.random.default_rng(3), fr)
    b = dg.rqr(np.random.default_rng(3), back)
    np.testing.assert_allclose(a.residuals, b.residuals, atol=1e-6)
    d = json.loads(p.read_text())
    assert d["aic"] == pytest.approx(fr.aic)


def test_dropped_field_survives_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    stations = rng.random((8, 2))
    coords = stations[np.repeat(np.arange(8), 40)]
    y = rng.gamma(1.5, 1 / 1.5, 320)
    y[rng.random(320) < 0.3] = 0
    fr = quiet_fit(E.ModelSpec("delta-gamma"), E.Dataset(y, coords))
    assert fr.refit_actions
    out.save_fit(tmp_path / "f.json", fr)
    back = out.load_fit(tmp_path / "f.json")
    assert not back.has_random_effects
    assert back.loglik == pytest.approx(fr.loglik, abs=1e-9)


def parse_svg(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")
    return root


def test_qq_svg(tmp_path, spatial_fit):
    res = dg.rqr(np.random.default_rng(0), spatial_fit)
    out.qq_svg(tmp_path / "a.svg", [("gengamma", res), ("again", res)])
    out.qq_svg(tmp_path / "b.svg", [("gengamma", res), ("again", res)])
    parse_svg(tmp_path / "a.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert b"gengamma" in (tmp_path / "a.svg").read_bytes()
    with pytest.raises(ValidationError):
        out.qq_svg(tmp_path / "c.svg", [])


def test_violin_svg(tmp_path):
    rng = np.random.default_rng(2)
    rs = [X.ReplicateResult(cell, r, "gamma", 0.0, f, "ok", True, relative_error=rng.normal(0, 0.1),
                            aic_weight=rng.random())
          for cell in ("gamma", "lognormal") for r in range(10) for f in ("delta-gamma", "tweedie")]
    out.violin_svg(tmp_path / "v.svg", rs)
    text = (tmp_path / "v.svg").read_text()
    parse_svg(tmp_path / "v.svg")
    assert "lognormal" in text and "relative error" in text and "AIC weight" in text
    with pytest.raises(ValidationError):
        out.violin_svg(tmp_path / "w.svg", [rows()[1]])
