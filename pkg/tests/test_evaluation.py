import json
import math

import numpy as np
import pytest

from odescout.benchmarks import SYSTEMS, TrajectoryDataset, generate_dataset, get_system
from odescout.evaluation import (
    NmseReport,
    TermTestConfig,
    evaluate_system,
    integral_nmse,
    nmse_success_test,
    report_json,
    residual_nmse,
    significant_keys,
    simulate,
    term_match_test,
    truth_system,
)
from odescout.fitted import read_equation_file, system_from_terms, write_equation_file
from odescout.optimizer import optimize_hybrid
from odescout.expression import build_skeleton

GLIDER = get_system(2)

# reference equation reported for the dimensionless glider (tiny spurious terms included)
REFERENCE_GLIDER = system_from_terms(
    [["sin(x1)", "x0**2", "x0*sin(x1)"], ["cos(x1)/x0", "x0*sin(x1)", "x0"]],
    [[-0.999934, -0.199969, -3.160e-5, 8.292e-6], [-0.999673, -6.162e-5, 1.000261, -6.655e-4]],
)


@pytest.fixture(scope="module")
def sir():
    return generate_dataset(1, "ID")


@pytest.fixture(scope="module")
def glider():
    return generate_dataset(2, "ID")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_truth_residual_is_exact(sir):
    s = truth_system(get_system(1))
    assert all(residual_nmse(s, sir, j) < 1e-12 for j in range(2))


def test_zero_candidate_residual_is_one(sir):
    zero = system_from_terms([[], []], [[0.0], [0.0]])
    for j in range(2):
        assert residual_nmse(zero, sir, j) == pytest.approx(1.0, rel=1e-9)


def test_reference_glider_residual_order_of_magnitude(glider):
    value = residual_nmse(REFERENCE_GLIDER, glider, 0)
    assert 4.93e-9 / 10 < value < 4.93e-9 * 10


def test_truth_integral_is_exact(sir):
    assert np.all(integral_nmse(truth_system(get_system(1)), sir) < 1e-12)


def test_wrong_sign_fails(sir):
    wrong = system_from_terms([["x0*x1"], ["x0*x1", "x1"]], [[0.4, 0.0], [0.4, -0.314, 0.0]])
    values = integral_nmse(wrong, sir)
    assert values[0] > 1e-2
    rep = evaluate_system(wrong, {"ID": sir})
    assert not nmse_success_test(rep)


def test_blow_up_gives_nan():
    # x' = x^2 from x = 1 diverges at t = 1, inside the horizon
    t = np.linspace(0, 3, 301)
    data = TrajectoryDataset(1, "ID", t, np.ones((301, 1)), np.ones((301, 1)), np.ones((301, 1)), np.array([1.0]))
    s = system_from_terms([["x0**2"]], [[1.0, 0.0]])
    assert simulate(s, data) is None
    assert math.isnan(integral_nmse(s, data, 0))
    rep = evaluate_system(s, {"ID": data})
    assert math.isnan(rep.mean("integral", "ID"))
    assert not nmse_success_test(rep)


def test_nan_propagates_to_mean():
    rep = NmseReport(residual={"ID": [1e-9, 1e-9]}, integral={"ID": [1e-9, float("nan")]})
    assert math.isnan(rep.mean("integral", "ID"))
    assert rep.mean("residual", "ID") == pytest.approx(1e-9)


@pytest.mark.parametrize("values,ok", [
    ([1e-8, 1e-8], True),
    ([1e-8, 2e-3], False),
    ([1e-3, 1e-8], False),
    ([9.99e-4], True),
    ([1e-8, float("nan")], False),
    ([], False),
])
def test_success_test_boundaries(values, ok):
    rep = NmseReport(residual={"ID": values}, integral={"ID": values})
    assert nmse_success_test(rep) is ok


def test_success_test_uses_id_regime():
    rep = NmseReport(residual={"ID": [1e-8], "ID-Ext": [1.0]}, integral={"ID": [1e-8], "ID-Ext": [1.0]})
    assert nmse_success_test(rep)
    assert not nmse_success_test(rep, regime="ID-Ext")


def test_residual_row_permutation_invariance(glider):
    perm = np.random.default_rng(0).permutation(glider.n_points)
    for j in range(2):
        assert residual_nmse(REFERENCE_GLIDER, glider.take(perm), j) == pytest.approx(
            residual_nmse(REFERENCE_GLIDER, glider, j), rel=1e-12)


@pytest.mark.parametrize("sid", sorted(SYSTEMS))
def test_truth_self_consistency(sid):
    s = truth_system(get_system(sid))
    for regime in ("ID", "ID-Ext"):
        data = generate_dataset(sid, regime)
        assert all(residual_nmse(s, data, j) < 1e-10 for j in range(data.dimension))
        assert np.all(integral_nmse(s, data) < 1e-10)


def test_regime_consistency_on_shared_points():
    s = truth_system(GLIDER)
    idd, ext = generate_dataset(2, "ID"), generate_dataset(2, "ID-Ext")
    a, b = simulate(s, idd), simulate(s, ext)
    n = int((ext.t <= idd.t[-1]).sum())
    # substeps split the coarse step in floating point, so agreement is to rounding
    np.testing.assert_allclose(b[:n], a[: 2 * n - 1: 2], rtol=1e-13, atol=0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def test_report_json_and_csv(glider):
    ext = generate_dataset(2, "ID-Ext")
    rep = evaluate_system(REFERENCE_GLIDER, {"ID": glider, "ID-Ext": ext})
    data = json.loads(report_json(rep))
    assert set(data) == {"ID", "ID-Ext"}
    assert data["ID"]["integral_mean"] == pytest.approx(np.mean(rep.integral["ID"]))
    back = NmseReport.from_dict(data)
    assert back.residual == rep.residual and back.integral == rep.integral
    lines = rep.to_csv().splitlines()
    assert lines[0] == "regime,dimension,residual_nmse,integral_nmse"
    assert len(lines) == 1 + 2 * 3
    assert lines[3].startswith("ID,mean,")


def test_report_json_nan_is_null():
    rep = NmseReport(residual={"ID": [float("nan")]}, integral={"ID": [float("nan")]})
    data = json.loads(report_json(rep))
    assert data["ID"]["integral"] == [None] and data["ID"]["integral_mean"] is None
    assert "nan" in rep.to_csv()


# ---------------------------------------------------------------------------
# term test
# ---------------------------------------------------------------------------

def test_term_test_ground_truth_passes(glider):
    assert term_match_test(truth_system(GLIDER), GLIDER, glider)


def test_term_test_reference_with_negligible_terms(glider):
    assert term_match_test(REFERENCE_GLIDER, GLIDER, glider)
    keys = significant_keys(REFERENCE_GLIDER, glider)
    assert set(keys[0]) == {"C*(sin(x1))", "C*(x0**2)"}


def test_term_test_missing_term_fails(glider):
    eq = build_skeleton(["x0**2"], 0, dimension=2)
    res = optimize_hybrid(eq, glider, 0, seed=0)
    cand = system_from_terms([["x0**2"], ["x0", "cos(x1)/x0"]], [res.theta, [1.0, -1.0, 0.0]])
    assert not term_match_test(cand, GLIDER, glider)


def test_term_test_extra_significant_term_fails(glider):
    cand = system_from_terms([["x0**2", "sin(x1)", "x1"], ["x0", "cos(x1)/x0"]],
                             [[-0.2, -1.0, 0.3, 0.0], [1.0, -1.0, 0.0]])
    assert not term_match_test(cand, GLIDER, glider)


def test_term_test_is_order_and_form_invariant(glider):
    cand = system_from_terms([["np.sin(x1)", "x0*x0"], ["1/x0*np.cos(x1)", "x0"]],
                             [[-1.0, -0.2, 0.0], [-1.0, 1.0, 0.0]])
    assert term_match_test(cand, GLIDER, glider)


def test_term_test_dimension_mismatch(glider):
    assert not term_match_test(truth_system(get_system(1)), GLIDER, glider)


def test_term_test_and_mode_is_stricter(glider):
    # the small spurious term still moves the near-perfect fit by more than delta
    assert not term_match_test(REFERENCE_GLIDER, GLIDER, glider, TermTestConfig(mode="and"))
    with pytest.raises(ValueError):
        TermTestConfig(mode="xor")


def test_term_test_ignores_constants():
    spec = get_system(3)  # CDIMA carries a constant bias in dim 0
    data = generate_dataset(3, "ID")
    assert term_match_test(truth_system(spec), spec, data)


# ---------------------------------------------------------------------------
# equation files
# ---------------------------------------------------------------------------

def test_equation_file_round_trip(tmp_path, glider):
    path = tmp_path / "eq.json"
    write_equation_file(path, REFERENCE_GLIDER)
    back = read_equation_file(path, 2)
    for j in range(2):
        assert residual_nmse(back, glider, j) == residual_nmse(REFERENCE_GLIDER, glider, j)
    raw = json.loads(path.read_text())
    assert set(raw) == {"x0_t", "x1_t"}
    assert raw["x0_t"]["terms"] == ["sin(x1)", "x0**2", "x0*sin(x1)"]
