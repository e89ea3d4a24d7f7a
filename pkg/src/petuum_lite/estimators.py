"""scikit-learn estimators backed by the scheduled runtime."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .apps.dml import L_TABLE, DmlProblem, dml_app
from .apps.lasso import BETA, LassoProblem, lasso_app
from .data import standardize_lasso
from .exceptions import UsageError
from .runtime import RunConfig, run


class ScheduledLasso(BaseEstimator, RegressorMixin):
    """Lasso fitted by parallel coordinate descent under a dependency-aware schedule.

    ``alpha`` is the L1 strength on the internal scale, where features have unit
    norm and the target is standardized; ``coef_`` is reported on the input scale.
    """

    def __init__(self, alpha=0.1, schedule="priority", n_workers=4, staleness=0, max_iter=1000,
                 tol=None, theta=0.5, Q=None, eta=1e-6, fit_intercept=True, random_state=0,
                 mode="inproc"):
        self.alpha = alpha
        self.schedule = schedule
        self.n_workers = n_workers
        self.staleness = staleness
        self.max_iter = max_iter
        self.tol = tol
        self.theta = theta
        self.Q = Q
        self.eta = eta
        self.fit_intercept = fit_intercept
        self.random_state = random_state
        self.mode = mode

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.alpha <= 0:
            raise UsageError("alpha must be positive")
        x_mean = X.mean(axis=0) if self.fit_intercept else np.zeros(X.shape[1])
        Xn, yn, scaling = standardize_lasso(X - x_mean, y)
        if not self.fit_intercept:
            yn = yn + scaling.y_mean / scaling.y_sd
            scaling = type(scaling)(scaling.col_norms, 0.0, scaling.y_sd)
        problem = LassoProblem(Xn, yn, float(self.alpha))
        app = lasso_app(problem, self.schedule, max_clocks=self.max_iter, tol=self.tol)
        cfg = RunConfig(P=self.n_workers, s=self.staleness, seed=int(self.random_state or 0),
                        Q=self.Q, theta=self.theta, eta=self.eta, mode=self.mode, keep_history=False)
        series = run(app, cfg)
        beta = problem.beta_from_table(series.final_tables[BETA])
        self.coef_ = beta / scaling.col_norms * scaling.y_sd
        self.intercept_ = float(scaling.y_mean - x_mean @ self.coef_)
        self.objective_path_ = np.array(series.objectives)
        self.n_iter_ = len(series)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_ + self.intercept_


class DistanceMetricLearner(BaseEstimator, TransformerMixin):
    """Learns a linear map ``L`` from labelled points with data-parallel SGD under SSP.

    Similar pairs share a label, dissimilar pairs do not; ``transform`` returns ``X L^T``.
    """

    def __init__(self, n_components=16, lam=1.0, eta0=0.1, batch_size=10, n_pairs=2000,
                 n_workers=4, staleness=0, max_iter=200, tol=None, random_state=0):
        self.n_components = n_components
        self.lam = lam
        self.eta0 = eta0
        self.batch_size = batch_size
        self.n_pairs = n_pairs
        self.n_workers = n_workers
        self.staleness = staleness
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _pairs(self, X, y, rng):
        classes, inverse = np.unique(y, return_inverse=True)
        if classes.size < 2:
            raise UsageError("need at least two classes to form dissimilar pairs")
        half = self.n_pairs // 2
        members = [np.flatnonzero(inverse == k) for k in range(classes.size)]
        usable = [k for k, m in enumerate(members) if m.size >= 2]
        if not usable:
            raise UsageError("need a class with at least two samples to form similar pairs")
        k = rng.choice(usable, half)
        sim = np.array([rng.choice(members[c], 2, replace=False) for c in k])
        a = rng.integers(0, len(y), self.n_pairs - half)
        b = rng.integers(0, len(y), self.n_pairs - half)
        keep = inverse[a] != inverse[b]
        dis = np.stack([a[keep], b[keep]], axis=1)
        return X[sim], X[dis]

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        similar, dissimilar = self._pairs(X, y, rng)
        problem = DmlProblem(similar, dissimilar, int(self.n_components), float(self.lam),
                             float(self.eta0), int(self.batch_size))
        cfg = RunConfig(P=self.n_workers, s=self.staleness, seed=int(self.random_state or 0),
                        keep_history=False)
        series = run(dml_app(problem, max_clocks=self.max_iter, tol=self.tol), cfg)
        self.components_ = series.final_tables[L_TABLE].copy()
        self.objective_path_ = np.array(series.objectives)
        self.n_iter_ = len(series)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.components_.T
