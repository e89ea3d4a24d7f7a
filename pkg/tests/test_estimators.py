import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_blobs, make_regression
from sklearn.linear_model import Lasso

from petuum_lite.data import standardize_lasso
from petuum_lite.estimators import DistanceMetricLearner, ScheduledLasso
from petuum_lite.exceptions import UsageError


def test_params_round_trip_through_clone():
    est = ScheduledLasso(alpha=0.3, schedule="srrp", n_workers=2)
    assert clone(est).get_params() == est.get_params()
    assert DistanceMetricLearner(n_components=3).get_params()["n_components"] == 3


def test_scheduled_lasso_matches_sklearn_on_internal_scale():
    X, y = make_regression(n_samples=120, n_features=15, n_informative=4, noise=1.0, random_state=0)
    est = ScheduledLasso(alpha=2.0, n_workers=3, max_iter=800).fit(X, y)
    Xn, yn, scaling = standardize_lasso(X - X.mean(axis=0), y)
    ref = Lasso(alpha=2.0 / len(y), fit_intercept=False, tol=1e-12, max_iter=100_000).fit(Xn, yn)
    np.testing.assert_allclose(est.coef_ * scaling.col_norms / scaling.y_sd, ref.coef_, atol=1e-6)
    expected = (Xn @ ref.coef_) * scaling.y_sd + scaling.y_mean
    np.testing.assert_allclose(est.predict(X), expected, atol=1e-5 * np.abs(y).max())
    assert est.n_iter_ == 800
    assert est.objective_path_[-1] <= est.objective_path_[0]


def test_scheduled_lasso_errors():
    X, y = make_regression(n_samples=20, n_features=4, random_state=1)
    with pytest.raises(UsageError):
        ScheduledLasso(alpha=0.0).fit(X, y)
    est = ScheduledLasso(max_iter=5, n_workers=2).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :3])


def test_metric_learner_pulls_classes_apart():
    X, y = make_blobs(n_samples=200, n_features=5, centers=3, random_state=2)
    est = DistanceMetricLearner(n_components=2, n_pairs=400, n_workers=2, max_iter=60).fit(X, y)
    Z = est.transform(X)
    assert Z.shape == (200, 2)
    assert est.objective_path_[-1] < est.objective_path_[0]
    with pytest.raises(UsageError):
        DistanceMetricLearner().fit(X, np.zeros(200))
