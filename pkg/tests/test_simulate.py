import json

import numpy as np
import pytest

from csforest.errors import ParameterError
from csforest.simulate import (SimulationSpec, analytic_censoring_rate, censoring_rate_for, exp_rmst,
                               rate_for_rmst, simulate)


def test_control_rmst_closed_form():
    assert float(exp_rmst(1 / 100, 720)) == pytest.approx(100 * (1 - np.exp(-7.2)))
    assert float(exp_rmst(1 / 100, 720)) == pytest.approx(99.925, abs=1e-3)


def test_rate_inversion():
    targets = np.array([10.0, 99.0, 500.0])
    np.testing.assert_allclose(exp_rmst(rate_for_rmst(targets, 720), 720), targets, rtol=1e-10)
    with pytest.raises(ParameterError):
        rate_for_rmst(800.0, 720)


@pytest.mark.parametrize("effect,value,ate", [("constant", 5, 5), ("step", 10, 5), ("linear", 8, 4)])
def test_truth(effect, value, ate):
    ds, truth = simulate(SimulationSpec(n=500, effect=effect, effect_value=value, seed=1))
    assert truth.ate == ate
    x = ds.x[:, 1]
    want = {"constant": np.full(500, 5.0), "step": 10 * (x > 0.5), "linear": 8 * x}[effect]
    np.testing.assert_allclose(truth.cate, want, atol=1e-9)


def test_zero_effect_and_no_censoring():
    ds, truth = simulate(SimulationSpec(n=300, seed=2))
    assert np.all(truth.cate == 0) and ds.censoring_rate == 0 and truth.censoring_rate is None


def test_censoring_rate_matches_analytic():
    spec = SimulationSpec(n=10000, effect="step", effect_value=30, prognostic=1.0, seed=3,
                          censoring_rate=1 / 300)
    ds, truth = simulate(spec)
    p = analytic_censoring_rate(spec)
    se = np.sqrt(p * (1 - p) / spec.n)
    assert abs(ds.censoring_rate - p) < 3 * se
    assert truth.censoring_rate == p


def test_censoring_rate_solver():
    base = SimulationSpec(n=10, prognostic=1.0)
    rate = censoring_rate_for(base, 0.3)
    spec = SimulationSpec(n=10, prognostic=1.0, censoring_rate=rate)
    assert analytic_censoring_rate(spec, n_quad=100) == pytest.approx(0.3, abs=1e-9)


def test_reproducible_and_json():
    spec = SimulationSpec(n=50, effect="linear", effect_value=3, censoring_rate=0.01, seed=9)
    (a, ta), (b, tb) = simulate(spec), simulate(spec)
    np.testing.assert_array_equal(a.y, b.y)
    doc = json.loads(ta.to_json(spec))
    assert doc["ate"] == 1.5 and len(doc["rows"]["cate"]) == 50


@pytest.mark.parametrize("kw", [dict(baseline_rate=0), dict(censoring_rate=-1), dict(treat_fraction=1),
                                dict(effect="quadratic"), dict(p=1, effect_covariate=1)])
def test_invalid_specs(kw):
    with pytest.raises(ParameterError):
        SimulationSpec(n=10, **kw)
