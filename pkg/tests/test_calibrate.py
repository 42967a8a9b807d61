import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhspna.betweenness import AnalysisSpec, FlowField, run_battery
from mhspna.calibrate import (
    CalibratedModel,
    assemble_design,
    cv_select_penalty,
    evaluate,
    geh,
    observation_weights,
    penalty_grid,
    predict_direct,
    predict_incremental,
    predict_null,
    ridge_fit,
    sweep_sigma,
    weighted_r2,
)
from mhspna.errors import CalibrationError, SingularSystemError
from mhspna.metric import MetricParams
from mhspna.network import CountPoint, snap_count_points
from mhspna.synth import grid_network, planted_counts


def weighted_ridge_oracle(X, y, w, lam, scale):
    """Closed-form normal equations on ``[1, X]`` with an unpenalized intercept."""
    A = np.column_stack([np.ones(len(y)), X])
    P = np.diag(np.concatenate([[0.0], lam * scale ** 2]))
    beta = np.linalg.solve(A.T @ (w[:, None] * A) + P, A.T @ (w * y))
    return beta[0], beta[1:]


def random_problem(rng, n=200, p=5):
    X = rng.normal(0, 1, (n, p)) * rng.uniform(0.1, 50, p) + rng.uniform(-10, 10, p)
    beta = rng.normal(0, 3, p)
    y = 5 + X @ beta + rng.normal(0, 2, n)
    y = y - y.min() + 1.0
    return X, y


# --------------------------------------------------------------------------
# weights and ridge


def test_observation_weight_examples():
    y = np.array([1.0, 4.0, 100.0])
    assert np.array_equal(observation_weights(y, 1.0), np.ones(3))
    assert observation_weights(y, 0.0) == pytest.approx(1 / y, rel=1e-15)
    w = observation_weights([100.0], 0.7)[0]
    assert w == pytest.approx(0.2512, abs=5e-5)
    assert math.log(w) == pytest.approx(-0.3 * math.log(100.0), rel=1e-12)


@pytest.mark.parametrize("bad", [[1.0, 0.0], [3.0, -2.0], [np.nan, 1.0]])
def test_observation_weights_need_positive_counts(bad):
    with pytest.raises(CalibrationError, match="> 0"):
        observation_weights(bad, 0.7)


def test_observation_weights_reject_bad_exponent():
    with pytest.raises(CalibrationError):
        observation_weights([1.0], 1.5)


def test_ridge_matches_closed_form_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        X, y = random_problem(rng)
        w = observation_weights(y, rng.uniform(0, 1))
        lam = float(10 ** rng.uniform(-3, 3)) if rng.random() < 0.8 else 0.0
        fit = ridge_fit(X, y, w, lam)
        b0, b = weighted_ridge_oracle(X, y, w, lam, X.std(axis=0))
        assert np.allclose(fit.coef, b, rtol=1e-8, atol=1e-10)
        assert fit.intercept == pytest.approx(b0, rel=1e-8, abs=1e-8)


def test_exact_linear_data():
    x = np.arange(1.0, 21.0)[:, None]
    fit = ridge_fit(x, 2 * x[:, 0], np.ones(20), 0.0)
    assert fit.coef[0] == pytest.approx(2.0, abs=1e-9)
    assert fit.intercept == pytest.approx(0.0, abs=1e-9)


def test_huge_penalty_gives_weighted_mean():
    rng = np.random.default_rng(1)
    X, y = random_problem(rng)
    w = observation_weights(y, 0.5)
    fit = ridge_fit(X, y, w, 1e12)
    assert np.max(np.abs(fit.std_coef)) < 1e-6
    assert fit.intercept == pytest.approx(np.average(y, weights=w), rel=1e-5)
    assert fit.predict(X) == pytest.approx(np.full(len(y), np.average(y, weights=w)), rel=1e-6)


def test_singular_without_penalty():
    x = np.arange(10.0)
    X = np.column_stack([x, 2 * x])
    with pytest.raises(SingularSystemError, match="lambda_r > 0"):
        ridge_fit(X, x + 1, np.ones(10), 0.0)
    fit = ridge_fit(X, x + 1, np.ones(10), 1e-3)
    assert np.all(np.isfinite(fit.coef))


def test_constant_column_gets_zero_coefficient():
    rng = np.random.default_rng(2)
    X, y = random_problem(rng, 50, 3)
    X[:, 1] = 7.0
    fit = ridge_fit(X, y, np.ones(50), 0.5)
    assert fit.coef[1] == 0.0
    b0, b = weighted_ridge_oracle(np.delete(X, 1, axis=1), y, np.ones(50), 0.5, np.delete(X.std(0), 1))
    assert np.allclose(np.delete(fit.coef, 1), b, rtol=1e-9)


def test_unit_weights_equal_unweighted_fit():
    rng = np.random.default_rng(3)
    X, y = random_problem(rng)
    w = observation_weights(y, 1.0)
    assert np.array_equal(w, np.ones(len(y)))
    for lam in (0.0, 1.0, 100.0):
        b0, b = weighted_ridge_oracle(X, y, np.ones(len(y)), lam, X.std(0))
        fit = ridge_fit(X, y, w, lam)
        assert np.allclose(fit.coef, b, rtol=1e-10)


def test_no_intercept_fit():
    rng = np.random.default_rng(4)
    X = rng.uniform(1, 5, (40, 2))
    y = X @ np.array([3.0, 0.5])
    fit = ridge_fit(X, y, np.ones(40), 0.0, fit_intercept=False)
    assert fit.intercept == 0.0
    assert fit.coef == pytest.approx([3.0, 0.5], rel=1e-10)


def test_nonnegative_mode():
    rng = np.random.default_rng(5)
    X = rng.normal(0, 1, (80, 3))
    y = 10 + X @ np.array([2.0, -1.5, 0.7]) + rng.normal(0, 0.1, 80)
    fit = ridge_fit(X, y, np.ones(80), 0.1, nonnegative=True)
    assert np.all(fit.coef >= 0)
    assert fit.coef[1] == 0.0
    free = ridge_fit(X, y, np.ones(80), 0.1)
    assert free.coef[1] < 0


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_std_coef_norm_shrinks_along_grid(seed, lambda_w):
    rng = np.random.default_rng(seed)
    X, y = random_problem(rng, 60, 4)
    w = observation_weights(y, lambda_w)
    norms = [np.linalg.norm(ridge_fit(X, y, w, lam).std_coef) for lam in penalty_grid(X, w)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))


def test_penalty_grid_shape():
    rng = np.random.default_rng(6)
    X, y = random_problem(rng)
    g = penalty_grid(X, np.ones(len(y)))
    assert len(g) == 60
    ratios = g[1:] / g[:-1]
    assert np.allclose(ratios, ratios[0])
    assert g[-1] / g[0] == pytest.approx(1e11)


# --------------------------------------------------------------------------
# cross-validation


def test_cv_reproducible_for_fixed_seed():
    rng = np.random.default_rng(7)
    X, y = random_problem(rng, 70, 4)
    w = observation_weights(y, 0.7)
    a = cv_select_penalty(X, y, w, repetitions=10, seed=3)
    b = cv_select_penalty(X, y, w, repetitions=10, seed=3)
    assert a.lambda_r == b.lambda_r and a.cv_r2 == b.cv_r2
    assert np.array_equal(a.scores, b.scores)
    c = cv_select_penalty(X, y, w, repetitions=10, seed=4)
    assert not np.array_equal(a.scores, c.scores)


def test_cv_on_pure_noise_scores_near_zero():
    rng = np.random.default_rng(8)
    X = rng.normal(0, 1, (60, 6))
    y = rng.lognormal(3, 0.3, 60)
    cv = cv_select_penalty(X, y, observation_weights(y, 0.7), seed=0)
    assert abs(cv.cv_r2) <= 0.1
    assert cv.scores.shape == (50, 60)


def test_cv_on_noise_free_linear_model():
    rng = np.random.default_rng(9)
    X = rng.uniform(0, 100, (60, 4))
    y = 20 + X @ np.array([1.0, 2.0, 0.5, 3.0])
    cv = cv_select_penalty(X, y, observation_weights(y, 0.7), seed=0)
    assert cv.cv_r2 >= 0.99
    assert cv.lambda_r <= cv.grid[10]


def test_cv_manual_penalty():
    rng = np.random.default_rng(10)
    X, y = random_problem(rng, 40, 3)
    cv = cv_select_penalty(X, y, np.ones(40), repetitions=5, lambda_r=2.5)
    assert cv.manual and cv.lambda_r == 2.5 and cv.grid.tolist() == [2.5]


def test_cv_needs_enough_rows():
    with pytest.raises(CalibrationError, match="at least 7"):
        cv_select_penalty(np.ones((6, 1)), np.arange(1.0, 7.0), np.ones(6))


def test_cv_score_equals_pooled_weighted_r2():
    rng = np.random.default_rng(11)
    X, y = random_problem(rng, 35, 2)
    w = observation_weights(y, 0.7)
    cv = cv_select_penalty(X, y, w, folds=5, repetitions=1, lambda_r=0.3, seed=2)
    perm = np.random.default_rng([2, 0]).permutation(35)
    pred = np.empty(35)
    for test in np.array_split(perm, 5):
        train = np.setdiff1d(perm, test)
        pred[test] = ridge_fit(X[train], y[train], w[train], 0.3).predict(X[test])
    assert cv.cv_r2 == pytest.approx(weighted_r2(y, pred, w), abs=1e-12)


# --------------------------------------------------------------------------
# design assembly


def _field(name, ids, vals):
    key, _, r = name.partition("@")
    return FlowField(key, (0.0, float(r)), list(ids), np.asarray(vals, dtype=float))


def test_design_shape_and_errors():
    ids = [f"L{i}" for i in range(60)]
    fields = [_field(f"v{j}@100", ids, np.arange(60.0) * (j + 1)) for j in range(12)]
    pts = [CountPoint(f"P{i}", (0, 0), ids[i], {"2007": 10.0 + i}) for i in range(50)]
    d = assemble_design(fields, pts, 2007)
    assert d.shape == (50, 12)
    assert d.columns == [f.name for f in fields]
    with pytest.raises(CalibrationError, match="empty design"):
        assemble_design(fields, [], "2007")
    with pytest.raises(CalibrationError, match="no observation"):
        assemble_design(fields, pts, "2010")
    stray = [CountPoint("Q", (0, 0), "elsewhere", {"2007": 1.0})]
    with pytest.raises(CalibrationError, match="no value"):
        assemble_design(fields, stray, "2007")


def test_design_flags_constant_columns():
    ids = ["a", "b", "c"]
    fields = [_field("k@100", ids, [1, 2, 3]), _field("z@100", ids, [0, 0, 0])]
    pts = [CountPoint(i, (0, 0), i, {"t": 5.0}) for i in ids]
    with pytest.warns(UserWarning, match="constant"):
        d = assemble_design(fields, pts, "t")
    assert d.constant_columns == ["z@100"]


# --------------------------------------------------------------------------
# models


def _model(**kw):
    base = dict(columns=["e2s@400", "p2s@600"], intercept=12.5, coefficients={"e2s@400": 0.004, "p2s@600": -1.25},
                column_mean={"e2s@400": 1e4, "p2s@600": 3.0}, column_std={"e2s@400": 26000.0, "p2s@600": 0.1},
                lambda_w=0.7, lambda_r=0.0123, cv_r2=0.49, metric=MetricParams().to_dict(),
                analyses=[AnalysisSpec("e2s", "elastic", "everywhere", "retail_m2", (400,)).to_dict()])
    base.update(kw)
    return CalibratedModel(**base)


def test_model_json_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(12)
    m = _model(intercept=float(rng.normal()), coefficients={"e2s@400": float(rng.normal()) / 3,
                                                            "p2s@600": float(rng.normal()) / 7})
    m.save(tmp_path / "m.json")
    back = CalibratedModel.load(tmp_path / "m.json")
    X = rng.normal(0, 1e3, (50, 2))
    assert back.linear_predictor(X).tobytes() == m.linear_predictor(X).tobytes()
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["schema_version"] == 1


def test_model_rejects_tampered_settings(tmp_path):
    m = _model()
    doc = m.to_dict()
    doc["metric"]["a"] = 0.9
    with pytest.raises(CalibrationError, match="hash"):
        CalibratedModel.from_dict(doc)
    doc = m.to_dict()
    doc["schema_version"] = 99
    with pytest.raises(CalibrationError, match="schema"):
        CalibratedModel.from_dict(doc)


def test_std_coefficient_identity(tmp_path):
    rng = np.random.default_rng(13)
    cols = [f"c{j}@100" for j in range(6)]
    m = _model(columns=cols, coefficients={c: float(rng.normal()) for c in cols},
               column_mean={c: 0.0 for c in cols}, column_std={c: float(rng.lognormal()) for c in cols})
    for c in cols:
        assert m.std_coefficients[c] == m.coefficients[c] * m.column_std[c]
    m.write_coefficients_csv(tmp_path / "coef.csv")
    lines = (tmp_path / "coef.csv").read_text().splitlines()
    assert lines[0] == "variable,radius,coeff,std,stdcoeff"
    for line in lines[1:]:
        _, _, coeff, std, stdcoeff = line.split(",")
        assert float(stdcoeff) == float(coeff) * float(std)


def test_published_coefficient_row_within_rounding():
    m = _model()
    assert m.std_coefficients["e2s@400"] == pytest.approx(104.0, rel=1e-12)
    assert abs(m.std_coefficients["e2s@400"] - 102) / 102 <= 0.05


def test_predict_direct():
    m = _model()
    ids = ["a", "b", "c"]
    zero = [_field("e2s@400", ids, [0, 0, 0]), _field("p2s@600", ids, [0, 0, 0])]
    p = predict_direct(m, zero)
    assert p.values.tolist() == [12.5] * 3 and not p.floored.any()
    fields = [_field("e2s@400", ids, [1000, 0, 0]), _field("p2s@600", ids, [0, 4, 20])]
    with pytest.warns(UserWarning, match="floored"):
        p = predict_direct(m, fields)
    assert p.values.tolist() == pytest.approx([16.5, 7.5, 0.0])
    assert p.floored.tolist() == [False, False, True]
    with pytest.raises(CalibrationError, match="missing"):
        predict_direct(m, fields[:1])


def test_predict_direct_reproduces_fitted_values():
    rng = np.random.default_rng(14)
    ids = [f"L{i}" for i in range(30)]
    fields = [_field("a@100", ids, rng.uniform(0, 50, 30)), _field("b@100", ids, rng.uniform(0, 9, 30))]
    y = 40 + 2 * fields[0].values + 5 * fields[1].values
    pts = [CountPoint(f"P{i}", (0, 0), ids[i], {"t": float(y[i])}) for i in range(30)]
    d = assemble_design(fields, pts, "t")
    fit = ridge_fit(d.X, d.y, observation_weights(d.y, 0.7), 0.0)
    m = _model(columns=d.columns, intercept=fit.intercept, coefficients=dict(zip(d.columns, fit.coef)),
               column_mean=dict(zip(d.columns, d.means)), column_std=dict(zip(d.columns, d.stds)))
    p = predict_direct(m, fields)
    assert p.values == pytest.approx(fit.predict(d.X), abs=1e-12)
    assert p.values == pytest.approx(y, abs=1e-6)


def test_predict_incremental_and_null():
    m = _model()
    ids = ["a", "b", "c"]
    t1 = [_field("e2s@400", ids, [100, 200, 300]), _field("p2s@600", ids, [1, 2, 3])]
    pts = [CountPoint(f"P{i}", (0, 0), lid, {"2007": 50.0 + i}) for i, lid in enumerate(ids)]
    same = predict_incremental(m, t1, t1, pts, "2007")
    assert same == predict_null({p.id: p.observations["2007"] for p in pts})
    t2 = [_field("e2s@400", ids, [100, 200 + 250, 300]), _field("p2s@600", ids, [1, 2, 3])]
    moved = predict_incremental(m, t1, t2, pts, "2007")
    assert moved["P1"] == pytest.approx(51.0 + 0.004 * 250, abs=1e-12)
    assert moved["P0"] == 50.0 and moved["P2"] == 52.0
    with pytest.raises(CalibrationError, match="baseline"):
        predict_incremental(m, t1, t2, pts, "2011")


def test_predict_null():
    assert predict_null({"P1": 100.0}) == {"P1": 100.0}
    assert predict_null({}) == {}


# --------------------------------------------------------------------------
# evaluation


def test_geh_values():
    assert geh(100.0, 100.0) == 0.0
    assert float(geh(105.0, 100.0)) == pytest.approx(math.sqrt(50 / 205), abs=1e-15)
    assert float(geh(105.0, 100.0)) == pytest.approx(0.494, abs=1e-3)
    assert float(geh(0.0, 0.0)) == 0.0


def test_evaluate_perfect_and_scaled():
    obs = {f"P{i}": float(v) for i, v in enumerate([10, 25, 40, 80, 33])}
    rep = evaluate(obs, obs)
    assert rep.r2 == pytest.approx(1.0, abs=1e-15) and not rep.geh.any()
    rep = evaluate({k: 2 * v for k, v in obs.items()}, obs)
    assert rep.r2 == pytest.approx(1.0, abs=1e-12) and np.all(rep.geh > 0)
    d = rep.to_dict()
    assert d["schema_version"] == 1 and len(d["per_point"]) == 5


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_r2_invariant_under_positive_affine_maps(seed, scale, shift):
    rng = np.random.default_rng(seed)
    obs = {f"P{i}": float(v) for i, v in enumerate(rng.uniform(1, 500, 20))}
    pred = {k: v * rng.uniform(0.5, 1.5) for k, v in obs.items()}
    base = evaluate(pred, obs).r2
    moved = evaluate({k: scale * v + shift for k, v in pred.items()}, obs).r2
    assert abs(moved - base) <= 1e-12


def test_evaluate_undefined_and_too_few():
    obs = {"a": 1.0, "b": 2.0, "c": 3.0}
    rep = evaluate({"a": 5.0, "b": 5.0, "c": 5.0}, obs)
    assert rep.r2 is None and not rep.r2_defined
    with pytest.raises(CalibrationError, match="at least 3"):
        evaluate({"a": 1.0, "b": 2.0}, obs)


# --------------------------------------------------------------------------
# sigma sweep


def _sweep_setup(sigma_true=1.0, n_points=40):
    net = grid_network(8, 8, weights="table1", seed=4)
    spec = AnalysisSpec("e2s", "elastic", "everywhere", "retail_m2", (800,))
    truth = run_battery(net, [spec], MetricParams(a=0.5, sigma=sigma_true, oversample=5, seed=99))
    rows = planted_counts(net, truth, {"e2s@800": 1.0}, 10.0, n_points, seed=1)
    pts = snap_count_points(net, [(r[0], (r[1], r[2]), {r[3]: r[4]}) for r in rows], 1.0)
    return net, spec, pts


def test_sweep_sigma_rows_and_dedupe():
    net, spec, pts = _sweep_setup()
    with pytest.warns(UserWarning, match="duplicate"):
        rows = sweep_sigma(net, spec, 800, [0.0, 0.5, 0.5], [0.25, 0.5], pts, "t1", oversample=1)
    assert [(a, s) for a, s, _ in rows] == [(0.25, 0.0), (0.25, 0.5), (0.5, 0.0), (0.5, 0.5)]
    assert all(0 <= r <= 1 for *_, r in rows)
    with pytest.raises(CalibrationError, match="empty"):
        sweep_sigma(net, spec, 800, [], [0.5], pts, "t1")


def test_sweep_sigma_zero_is_deterministic_analysis():
    net, spec, pts = _sweep_setup()
    (a, s, r2), = sweep_sigma(net, spec, 800, [0.0], [0.5], pts, "t1", oversample=5)
    f = run_battery(net, [spec], MetricParams(a=0.5, sigma=0.0, oversample=1))[0]
    x = np.array([[f[p.link_id]] for p in pts])
    y = np.array([p.observations["t1"] for p in pts])
    w = observation_weights(y, 0.7)
    assert r2 == pytest.approx(weighted_r2(y, ridge_fit(x, y, w, 0.0).predict(x), w), abs=1e-12)


def test_sweep_sigma_peaks_at_planted_randomization():
    net = grid_network(10, 10, weights="table1", seed=0)
    spec = AnalysisSpec("e2s", "elastic", "everywhere", "retail_m2", (800,))
    truth = run_battery(net, [spec], MetricParams(a=0.5, sigma=1.0, oversample=25, seed=99))
    rows = planted_counts(net, truth, {"e2s@800": 1.0}, 10.0, 60, seed=1)
    pts = snap_count_points(net, [(r[0], (r[1], r[2]), {r[3]: r[4]}) for r in rows], 1.0)
    grid = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0]
    r2 = [r for *_, r in sweep_sigma(net, spec, 800, grid, [0.5], pts, "t1", oversample=25)]
    peak = grid.index(grid[int(np.argmax(r2))])
    assert abs(peak - grid.index(1.0)) <= 1
