"""Weighted ridge calibration of flow columns against pedestrian counts.

Each observation ``y`` is weighted by ``y**lambda_w / y`` (``lambda_w = 1``
minimizes absolute error, ``0`` relative error). Coefficients are fit by
ridge regression with the penalty acting on standardized predictors and an
unpenalized intercept; the penalty strength is chosen by repeated k-fold
cross-validation or set by hand.

Calibrated models predict flows three ways: *direct* (the regression applied
to freshly computed flow columns), *incremental* (baseline counts plus the
modelled change between epochs) and *null* (no change from baseline).
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import CalibrationError, SingularSystemError

__all__ = [
    "DesignMatrix",
    "RidgeResult",
    "CVResult",
    "CalibratedModel",
    "DirectPrediction",
    "EvaluationReport",
    "assemble_design",
    "observation_weights",
    "ridge_fit",
    "penalty_grid",
    "cv_select_penalty",
    "weighted_r2",
    "predict_direct",
    "predict_incremental",
    "predict_null",
    "geh",
    "evaluate",
    "sweep_sigma",
    "config_hash",
]

SCHEMA_VERSION = 1
GRID_SIZE = 60
GRID_SPAN = (-8.0, 3.0)


@dataclass
class DesignMatrix:
    X: np.ndarray
    y: np.ndarray
    columns: list
    point_ids: list
    link_ids: list
    means: np.ndarray
    stds: np.ndarray

    @property
    def constant_columns(self) -> list:
        return [c for c, s in zip(self.columns, self.stds) if s == 0]

    @property
    def shape(self):
        return self.X.shape


def assemble_design(fields, points, year) -> DesignMatrix:
    """Sample each flow column at each count point's link.

    Columns follow the order of ``fields``; rows the order of ``points``.
    """
    points = list(points)
    if not points:
        raise CalibrationError("empty design: no count points")
    fields = list(fields)
    if not fields:
        raise CalibrationError("empty design: no flow columns")
    year = str(year)
    X = np.empty((len(points), len(fields)))
    y = np.empty(len(points))
    for i, pt in enumerate(points):
        if year not in pt.observations:
            raise CalibrationError(f"count point {pt.id!r} has no observation for year {year}")
        y[i] = pt.observations[year]
        for j, f in enumerate(fields):
            try:
                X[i, j] = f[pt.link_id]
            except KeyError:
                raise CalibrationError(f"flow column {f.name} has no value for link {pt.link_id!r}") from None
    stds = X.std(axis=0)
    design = DesignMatrix(X, y, [f.name for f in fields], [p.id for p in points],
                          [p.link_id for p in points], X.mean(axis=0), stds)
    if design.constant_columns:
        warnings.warn(f"constant design columns (coefficients forced to 0): {design.constant_columns}")
    return design


def observation_weights(y, lambda_w: float) -> np.ndarray:
    """Per-observation weights ``y**(lambda_w - 1)``."""
    y = np.asarray(y, dtype=float)
    if not 0.0 <= lambda_w <= 1.0:
        raise CalibrationError(f"lambda_w must lie in [0, 1], got {lambda_w}")
    if np.any(~(y > 0)):
        bad = np.flatnonzero(~(y > 0)).tolist()
        raise CalibrationError(
            f"observation weights y**lambda_w / y need every count > 0; rows {bad} are not")
    return y ** (lambda_w - 1.0)


@dataclass
class RidgeResult:
    intercept: float
    coef: np.ndarray
    scale: np.ndarray
    lambda_r: float

    @property
    def std_coef(self) -> np.ndarray:
        return self.coef * self.scale

    def predict(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef


def _prepare(X, y, w, fit_intercept, scale):
    active = scale > 0
    if fit_intercept:
        sw_total = w.sum()
        xm = (w @ X) / sw_total
        ym = float(w @ y) / sw_total
    else:
        xm = np.zeros(X.shape[1])
        ym = 0.0
    Z = (X[:, active] - xm[active]) / scale[active]
    sw = np.sqrt(w)
    return active, xm, ym, sw[:, None] * Z, sw * (y - ym)


def _finish(b_std, active, xm, ym, scale, lambda_r):
    coef = np.zeros(len(scale))
    coef[active] = b_std / scale[active]
    intercept = ym - float(xm @ coef)
    return RidgeResult(intercept, coef, scale, lambda_r)


def ridge_fit(X, y, weights, lambda_r: float, fit_intercept: bool = True, nonnegative: bool = False,
              scale=None) -> RidgeResult:
    """Minimize ``sum w (y - b0 - X b)^2 + lambda_r * ||b * scale||^2``.

    ``scale`` defaults to the column standard deviations, so the penalty acts
    on standardized coefficients. Zero-variance columns get coefficient 0.
    With ``nonnegative`` the slopes are constrained to be >= 0.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y) or len(w) != len(y):
        raise CalibrationError("X, y and weights have inconsistent shapes")
    if len(y) < 2:
        raise CalibrationError("ridge_fit needs at least 2 observations")
    if lambda_r < 0:
        raise CalibrationError(f"lambda_r must be >= 0, got {lambda_r}")
    scale = X.std(axis=0) if scale is None else np.asarray(scale, dtype=float)
    active, xm, ym, A, b = _prepare(X, y, w, fit_intercept, scale)
    p = A.shape[1]
    if p == 0:
        return _finish(np.zeros(0), active, xm, ym, scale, lambda_r)
    if nonnegative:
        if lambda_r > 0:
            A_aug = np.vstack([A, math.sqrt(lambda_r) * np.eye(p)])
            b_aug = np.concatenate([b, np.zeros(p)])
        else:
            A_aug, b_aug = A, b
        b_std, _ = nnls(A_aug, b_aug, maxiter=50 * p)
        return _finish(b_std, active, xm, ym, scale, lambda_r)
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    if lambda_r == 0 and (len(S) < p or S[-1] <= S[0] * max(A.shape) * np.finfo(float).eps):
        raise SingularSystemError(
            "design is singular without a penalty; use lambda_r > 0 (ridge) instead of 0")
    b_std = Vt.T @ (S / (S * S + lambda_r) * (U.T @ b))
    return _finish(b_std, active, xm, ym, scale, lambda_r)


def penalty_grid(X, weights, size: int = GRID_SIZE, span=GRID_SPAN) -> np.ndarray:
    """Log-spaced penalties scaled by the largest squared singular value of the
    weighted standardized design, so the grid is unit-free."""
    X = np.asarray(X, dtype=float)
    w = np.asarray(weights, dtype=float)
    scale = X.std(axis=0)
    _, _, _, A, _ = _prepare(X, np.zeros(len(w)), w, True, scale)
    s = float(np.linalg.norm(A, 2) ** 2) if A.size else 1.0
    if s == 0:
        s = 1.0
    return s * np.logspace(span[0], span[1], size)


def weighted_r2(y, yhat, w) -> float:
    """``1 - SSE_w / SST_w`` around the weighted mean of ``y``."""
    y, yhat, w = (np.asarray(a, dtype=float) for a in (y, yhat, w))
    ym = (w @ y) / w.sum()
    sst = float(w @ (y - ym) ** 2)
    if sst == 0:
        return float("nan")
    return 1.0 - float(w @ (y - yhat) ** 2) / sst


@dataclass
class CVResult:
    lambda_r: float
    cv_r2: float
    grid: np.ndarray
    curve: np.ndarray  # mean held-out score per grid penalty
    scores: np.ndarray  # (repetitions, len(grid))
    manual: bool = False


def _fold_predictions(Xtr, ytr, wtr, Xte, grid, fit_intercept, nonnegative):
    """Held-out predictions for every penalty in ``grid``: (n_test, len(grid))."""
    scale = Xtr.std(axis=0)
    active, xm, ym, A, b = _prepare(Xtr, ytr, wtr, fit_intercept, scale)
    Zte = (Xte[:, active] - xm[active]) / scale[active]
    if A.shape[1] == 0:
        return np.full((len(Xte), len(grid)), ym)
    if nonnegative:
        out = np.empty((len(Xte), len(grid)))
        for k, lam in enumerate(grid):
            r = ridge_fit(Xtr, ytr, wtr, lam, fit_intercept, True, scale)
            out[:, k] = r.predict(Xte)
        return out
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    Utb = U.T @ b
    B = Vt.T @ ((S / (S[:, None] ** 2 + grid[None, :]).T).T * Utb[:, None])
    return ym + Zte @ B


def cv_select_penalty(X, y, weights, folds: int = 7, repetitions: int = 50, grid=None, lambda_r=None,
                      seed: int = 0, fit_intercept: bool = True, nonnegative: bool = False) -> CVResult:
    """Repeated k-fold cross-validation of the ridge penalty.

    Each repetition shuffles the rows into ``folds`` folds, fits on all but
    one and predicts the held-out fold. Every row thus gets an out-of-fold
    prediction per penalty; the repetition's score is the weighted r² of
    those predictions. The penalty with the best mean score wins (the
    smallest on ties). Passing ``lambda_r`` scores that penalty alone.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    n = len(y)
    if n < folds:
        raise CalibrationError(f"need at least {folds} observations for {folds}-fold cross-validation, got {n}")
    if folds < 2:
        raise CalibrationError("folds must be >= 2")
    manual = lambda_r is not None
    if manual:
        grid = np.array([float(lambda_r)])
    elif grid is None:
        grid = penalty_grid(X, w)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise CalibrationError("penalty grid is empty")
    scores = np.empty((repetitions, len(grid)))
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        perm = rng.permutation(n)
        pred = np.empty((n, len(grid)))
        for test in np.array_split(perm, folds):
            train = np.setdiff1d(perm, test, assume_unique=True)
            pred[test] = _fold_predictions(X[train], y[train], w[train], X[test], grid, fit_intercept, nonnegative)
        ym = (w @ y) / w.sum()
        sst = float(w @ (y - ym) ** 2)
        sse = w @ (y[:, None] - pred) ** 2
        scores[rep] = 1.0 - sse / sst if sst > 0 else np.nan
    curve = scores.mean(axis=0)
    best = int(np.nanargmax(curve)) if np.any(np.isfinite(curve)) else 0
    return CVResult(float(grid[best]), float(curve[best]), grid, curve, scores, manual)


# --------------------------------------------------------------------------
# models


def config_hash(metric: dict | None, analyses: list | None) -> str:
    payload = json.dumps({"metric": metric, "analyses": analyses}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class CalibratedModel:
    columns: list
    intercept: float
    coefficients: dict
    column_mean: dict
    column_std: dict
    lambda_w: float
    lambda_r: float
    cv_r2: float
    fit_intercept: bool = True
    nonnegative: bool = False
    cv_curve: list = field(default_factory=list)
    metric: dict | None = None
    analyses: list | None = None
    year: str | None = None
    n_points: int = 0

    @property
    def std_coefficients(self) -> dict:
        """Coefficient times column standard deviation, per column."""
        return {c: self.coefficients[c] * self.column_std[c] for c in self.columns}

    @property
    def coef_vector(self) -> np.ndarray:
        return np.array([self.coefficients[c] for c in self.columns])

    def linear_predictor(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef_vector

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "columns": list(self.columns),
            "intercept": self.intercept,
            "coefficients": dict(self.coefficients),
            "std_coefficients": self.std_coefficients,
            "column_mean": dict(self.column_mean),
            "column_std": dict(self.column_std),
            "lambda_w": self.lambda_w,
            "lambda_r": self.lambda_r,
            "cv_r2": self.cv_r2,
            "fit_intercept": self.fit_intercept,
            "nonnegative": self.nonnegative,
            "cv_curve": self.cv_curve,
            "metric": self.metric,
            "analyses": self.analyses,
            "year": self.year,
            "n_points": self.n_points,
            "config_hash": config_hash(self.metric, self.analyses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise CalibrationError(f"unsupported model schema version {d.get('schema_version')!r}")
        expected = config_hash(d.get("metric"), d.get("analyses"))
        if d.get("config_hash") not in (None, expected):
            raise CalibrationError("model config hash does not match its metric/analysis settings")
        keep = {k: d[k] for k in ("columns", "intercept", "coefficients", "column_mean", "column_std",
                                  "lambda_w", "lambda_r", "cv_r2", "fit_intercept", "nonnegative",
                                  "cv_curve", "metric", "analyses", "year", "n_points") if k in d}
        return cls(**keep)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CalibratedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def coefficient_rows(self) -> list[tuple]:
        """``(variable, radius, coeff, std, stdcoeff)`` rows in column order."""
        rows = []
        std = self.std_coefficients
        for c in self.columns:
            var, _, radius = c.partition("@")
            rows.append((var, radius, self.coefficients[c], self.column_std[c], std[c]))
        return rows

    def write_coefficients_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "radius", "coeff", "std", "stdcoeff"])
            for var, radius, coeff, std, stdcoeff in self.coefficient_rows():
                w.writerow([var, radius, repr(coeff), repr(std), repr(stdcoeff)])


def _field_matrix(model: CalibratedModel, fields, link_ids=None):
    by_name = {f.name: f for f in fields}
    missing = [c for c in model.columns if c not in by_name]
    if missing:
        raise CalibrationError(f"flow fields missing model columns: {missing}")
    if link_ids is None:
        link_ids = list(by_name[model.columns[0]].link_ids)
    X = np.empty((len(link_ids), len(model.columns)))
    for j, c in enumerate(model.columns):
        f = by_name[c]
        for i, lid in enumerate(link_ids):
            X[i, j] = f[lid]
    return link_ids, X


@dataclass
class DirectPrediction:
    link_ids: list
    values: np.ndarray
    floored: np.ndarray  # True where the linear predictor was negative

    def as_dict(self):
        return dict(zip(self.link_ids, map(float, self.values)))


def predict_direct(model: CalibratedModel, fields, link_ids=None) -> DirectPrediction:
    """Regression output per link, floored at 0."""
    link_ids, X = _field_matrix(model, fields, link_ids)
    raw = model.linear_predictor(X)
    floored = raw < 0
    if np.any(floored):
        warnings.warn(f"{int(floored.sum())} negative direct predictions floored at 0")
    return DirectPrediction(link_ids, np.where(floored, 0.0, raw), floored)


def predict_incremental(model: CalibratedModel, fields_t1, fields_t2, points_t1, baseline_year,
                        points_t2=None) -> dict:
    """Baseline counts plus the modelled change between epochs, per point.

    ``points_t2`` gives the points' links on the second network when it was
    edited; by default the first epoch's links are reused.
    """
    baseline_year = str(baseline_year)
    points_t1 = list(points_t1)
    points_t2 = points_t1 if points_t2 is None else list(points_t2)
    link2 = {p.id: p.link_id for p in points_t2}
    for p in points_t1:
        if baseline_year not in p.observations:
            raise CalibrationError(f"count point {p.id!r} has no baseline observation for {baseline_year}")
        if p.id not in link2:
            raise CalibrationError(f"count point {p.id!r} missing from the second epoch")
    _, X1 = _field_matrix(model, fields_t1, [p.link_id for p in points_t1])
    _, X2 = _field_matrix(model, fields_t2, [link2[p.id] for p in points_t1])
    delta = model.linear_predictor(X2) - model.linear_predictor(X1)
    out = {}
    for p, d in zip(points_t1, delta):
        out[p.id] = max(p.observations[baseline_year] + float(d), 0.0)
    return out


def predict_null(baseline: dict) -> dict:
    """No change: the baseline flows themselves."""
    return dict(baseline)


def geh(m, c):
    """GEH statistic ``sqrt(2 (M - C)^2 / (M + C))``; 0 where both are 0."""
    m = np.asarray(m, dtype=float)
    c = np.asarray(c, dtype=float)
    tot = m + c
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(2.0 * (m - c) ** 2 / tot)
    return np.where(tot == 0, 0.0, out)


@dataclass
class EvaluationReport:
    r2: float | None
    point_ids: list
    geh: np.ndarray
    predictions: np.ndarray
    observations: np.ndarray

    @property
    def r2_defined(self):
        return self.r2 is not None

    @property
    def geh_mean(self):
        return float(np.mean(self.geh))

    @property
    def geh_under_5_fraction(self):
        return float(np.mean(self.geh < 5.0))

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "r2": self.r2,
            "r2_defined": self.r2_defined,
            "n_points": len(self.point_ids),
            "geh_mean": self.geh_mean,
            "geh_under_5_fraction": self.geh_under_5_fraction,
            "per_point": [
                {"point_id": pid, "prediction": float(m), "observation": float(c), "geh": float(g)}
                for pid, m, c, g in zip(self.point_ids, self.predictions, self.observations, self.geh)
            ],
        }


def evaluate(predictions: dict, observations: dict) -> EvaluationReport:
    """Squared Pearson correlation and GEH over points present in both maps.

    r² is ``None`` when either vector is constant.
    """
    ids = [pid for pid in observations if pid in predictions]
    if len(ids) < 3:
        raise CalibrationError(f"evaluation needs at least 3 matched points, got {len(ids)}")
    m = np.array([predictions[i] for i in ids], dtype=float)
    c = np.array([observations[i] for i in ids], dtype=float)
    r2 = None
    if np.ptp(m) > 0 and np.ptp(c) > 0:
        mc, cc = m - m.mean(), c - c.mean()
        r = float(mc @ cc) / math.sqrt(float(mc @ mc) * float(cc @ cc))
        r2 = r * r
    return EvaluationReport(r2, ids, geh(m, c), m, c)


def sweep_sigma(net, base_spec, radius, sigma_grid, a_grid, points, year, lambda_w: float = 0.7,
                seed: int = 1, oversample: int = 5, n_jobs=None) -> list[tuple]:
    """r² of a bivariate weighted fit of one flow column against counts,
    over a grid of hybrid coefficient ``a`` and randomization ``sigma``.

    Returns ``(a, sigma, r2)`` rows, ``a`` varying slowest.
    """
    from .betweenness import AnalysisSpec, run_battery
    from .metric import MetricParams

    def dedupe(values, label):
        values = [float(v) for v in values]
        if not values:
            raise CalibrationError(f"{label} grid is empty")
        out = list(dict.fromkeys(values))
        if len(out) != len(values):
            warnings.warn(f"duplicate {label} grid entries dropped")
        return out

    sigmas = dedupe(sigma_grid, "sigma")
    a_values = dedupe(a_grid, "a")
    rmin, rmax = (0.0, float(radius)) if np.isscalar(radius) else map(float, radius)
    spec = AnalysisSpec(base_spec.key, base_spec.btype, base_spec.origin, base_spec.destination,
                        ((rmin, rmax),), base_spec.continuous)
    points = list(points)
    y = np.array([p.observations[str(year)] for p in points], dtype=float)
    w = observation_weights(y, lambda_w)
    rows = []
    for a in a_values:
        for sigma in sigmas:
            params = MetricParams(a=a, sigma=sigma, oversample=oversample, seed=seed)
            f = run_battery(net, [spec], params, n_jobs=n_jobs)[0]
            x = np.array([[f[p.link_id]] for p in points])
            if np.ptp(x) == 0:
                rows.append((a, sigma, float("nan")))
                continue
            fit = ridge_fit(x, y, w, 0.0)
            rows.append((a, sigma, weighted_r2(y, fit.predict(x), w)))
    return rows
