"""scikit-learn style wrappers around the flow battery and the ridge calibration.

``FlowBattery`` is a transformer whose input is a :class:`SpatialNetwork`
rather than an array: ``transform(net)`` returns the per-link flow matrix
with one column per (analysis, radius). ``FlowRegressor`` is an ordinary
array-in regressor implementing the weighted, cross-validated ridge fit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .betweenness import AnalysisSpec, FlowField, run_battery, table1_battery
from .calibrate import CalibratedModel, cv_select_penalty, observation_weights, ridge_fit
from .errors import ConfigError
from .metric import MetricParams
from .network import SpatialNetwork

__all__ = ["FlowBattery", "FlowRegressor"]


class FlowBattery(TransformerMixin, BaseEstimator):
    """Run a battery of betweenness analyses on a network.

    Parameters
    ----------
    analyses : list of AnalysisSpec, optional
        Defaults to the standard 13-column battery.
    a, sigma, oversample, seed, clamp_lo, clamp_hi
        Routing metric settings, see :class:`MetricParams`.
    n_jobs : int, optional
        Worker threads; results do not depend on it.
    """

    def __init__(self, analyses=None, a=0.5, sigma=1.0, oversample=50, seed=1,
                 clamp_lo=0.1, clamp_hi=10.0, n_jobs=None):
        self.analyses = analyses
        self.a = a
        self.sigma = sigma
        self.oversample = oversample
        self.seed = seed
        self.clamp_lo = clamp_lo
        self.clamp_hi = clamp_hi
        self.n_jobs = n_jobs

    def _specs(self):
        specs = table1_battery() if self.analyses is None else list(self.analyses)
        if not specs:
            raise ConfigError("no analyses configured")
        return [s if isinstance(s, AnalysisSpec) else AnalysisSpec.from_dict(s) for s in specs]

    @property
    def metric_params(self) -> MetricParams:
        return MetricParams(a=self.a, sigma=self.sigma, clamp_lo=self.clamp_lo, clamp_hi=self.clamp_hi,
                            oversample=self.oversample, seed=self.seed)

    def fit(self, X: SpatialNetwork, y=None):
        if not isinstance(X, SpatialNetwork):
            raise TypeError("FlowBattery.fit expects a SpatialNetwork")
        self.specs_ = self._specs()
        self.params_ = self.metric_params
        self.feature_names_out_ = np.array([c for s in self.specs_ for c in s.columns], dtype=object)
        self.n_features_in_ = len(self.feature_names_out_)
        return self

    def transform_fields(self, X: SpatialNetwork) -> list[FlowField]:
        check_is_fitted(self, "specs_")
        self.fields_ = run_battery(X, self.specs_, self.params_, n_jobs=self.n_jobs)
        return self.fields_

    def transform(self, X: SpatialNetwork) -> np.ndarray:
        """Flow matrix of shape ``(n_links, n_columns)``, rows in link-id order."""
        return np.column_stack([f.values for f in self.transform_fields(X)])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "feature_names_out_")
        return self.feature_names_out_.copy()


class FlowRegressor(RegressorMixin, BaseEstimator):
    """Weighted ridge regression with a cross-validated penalty.

    Observations are weighted by ``y**(lambda_w - 1)``. The penalty acts on
    standardized coefficients and never on the intercept. When ``lambda_r``
    is None it is chosen by ``repetitions`` rounds of ``folds``-fold
    cross-validation over ``penalty_grid`` (a default grid if None).

    Attributes
    ----------
    coef_, intercept_ : raw-scale coefficients and intercept
    std_coef_ : ``coef_ * scale_``
    lambda_r_, cv_r2_ : chosen penalty and its mean held-out weighted r²
    cv_curve_ : ``(grid, mean score)`` pairs
    """

    def __init__(self, lambda_w=0.7, lambda_r=None, folds=7, repetitions=50, penalty_grid=None,
                 fit_intercept=True, nonnegative=False, seed=0):
        self.lambda_w = lambda_w
        self.lambda_r = lambda_r
        self.folds = folds
        self.repetitions = repetitions
        self.penalty_grid = penalty_grid
        self.fit_intercept = fit_intercept
        self.nonnegative = nonnegative
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        w = observation_weights(y, self.lambda_w)
        cv = cv_select_penalty(X, y, w, folds=self.folds, repetitions=self.repetitions,
                               grid=self.penalty_grid, lambda_r=self.lambda_r, seed=self.seed,
                               fit_intercept=self.fit_intercept, nonnegative=self.nonnegative)
        fit = ridge_fit(X, y, w, cv.lambda_r, self.fit_intercept, self.nonnegative)
        self.coef_ = fit.coef
        self.intercept_ = fit.intercept
        self.scale_ = fit.scale
        self.mean_ = X.mean(axis=0)
        self.std_coef_ = fit.std_coef
        self.lambda_r_ = cv.lambda_r
        self.cv_r2_ = cv.cv_r2
        self.cv_curve_ = list(zip(cv.grid.tolist(), cv.curve.tolist()))
        self.n_features_in_ = X.shape[1]
        self.n_samples_ = X.shape[0]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fit with {self.n_features_in_}")
        return self.intercept_ + X @ self.coef_

    def to_model(self, columns, metric=None, analyses=None, year=None) -> CalibratedModel:
        """Freeze the fit into a serializable :class:`CalibratedModel`."""
        check_is_fitted(self, "coef_")
        columns = list(columns)
        if len(columns) != self.n_features_in_:
            raise ValueError("column names do not match the number of features")
        return CalibratedModel(
            columns=columns,
            intercept=float(self.intercept_),
            coefficients={c: float(v) for c, v in zip(columns, self.coef_)},
            column_mean={c: float(v) for c, v in zip(columns, self.mean_)},
            column_std={c: float(v) for c, v in zip(columns, self.scale_)},
            lambda_w=float(self.lambda_w),
            lambda_r=float(self.lambda_r_),
            cv_r2=float(self.cv_r2_),
            fit_intercept=bool(self.fit_intercept),
            nonnegative=bool(self.nonnegative),
            cv_curve=[list(p) for p in self.cv_curve_],
            metric=metric,
            analyses=analyses,
            year=None if year is None else str(year),
            n_points=int(self.n_samples_),
        )
