import numpy as np
import pytest

from petuum_lite.apps.lasso import solve_lasso
from petuum_lite.data import (
    SyntheticDmlSpec, SyntheticLassoSpec, gen_dml, gen_lasso, ingest_dense_csv, ingest_pairs,
    load_lasso_csv, standardize_lasso, write_pairs,
)
from petuum_lite.exceptions import DataFormatError, UsageError
from petuum_lite.scheduler import CorrelationIndex


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_identity_csv(tmp_path):
    X = ingest_dense_csv(write(tmp_path, "a.csv", "1,0\n0,1\n"))
    np.testing.assert_array_equal(X, np.eye(2))
    Xn, _, scaling = standardize_lasso(X, [1.0, 0.0])
    np.testing.assert_array_equal(Xn, np.eye(2))
    np.testing.assert_array_equal(scaling.col_norms, [1.0, 1.0])


def test_column_is_normalized():
    Xn, yn, scaling = standardize_lasso([[3.0], [4.0]], [2.0, 4.0])
    np.testing.assert_allclose(Xn[:, 0], [0.6, 0.8])
    assert scaling.col_norms[0] == 5.0
    assert (scaling.y_mean, scaling.y_sd) == (3.0, 1.0)
    np.testing.assert_array_equal(yn, [-1.0, 1.0])


def test_header_and_blank_lines(tmp_path):
    X = ingest_dense_csv(write(tmp_path, "h.csv", "a,b\n1,2\n\n3,4\n"), header=True)
    np.testing.assert_array_equal(X, [[1, 2], [3, 4]])


@pytest.mark.parametrize("text, line, fragment", [
    ("1,2\n3\n", 2, "expected 2 fields"),
    ("1,2\n3,x\n", 2, "non-numeric field 'x'"),
    ("", 1, "no data rows"),
])
def test_csv_errors_carry_line_numbers(tmp_path, text, line, fragment):
    with pytest.raises(DataFormatError) as info:
        ingest_dense_csv(write(tmp_path, "bad.csv", text))
    assert info.value.line == line
    assert fragment in str(info.value)


def test_zero_column_is_rejected():
    with pytest.raises(UsageError, match="column 1"):
        standardize_lasso([[1.0, 0.0], [2.0, 0.0]], [1.0, 2.0])


def test_load_lasso_csv_uses_last_column_as_target(tmp_path):
    problem, scaling = load_lasso_csv(write(tmp_path, "l.csv", "3,1,1\n4,0,3\n"), lam=0.1)
    np.testing.assert_allclose(problem.X[:, 0], [0.6, 0.8])
    np.testing.assert_allclose(problem.y, [-1.0, 1.0])
    assert scaling.y_mean == 2.0
    with pytest.raises(UsageError):
        load_lasso_csv(write(tmp_path, "one.csv", "1\n2\n"), lam=0.1)


def test_pairs_parsing(tmp_path):
    sim, dis = ingest_pairs(write(tmp_path, "p.txt", "# comment\nS 1 0 0 0\nd 0 1 1 0\n"))
    np.testing.assert_array_equal(sim, [[[1, 0], [0, 0]]])
    np.testing.assert_array_equal(dis, [[[0, 1], [1, 0]]])
    sim, dis = ingest_pairs(write(tmp_path, "q.txt", "S 1 0 0 0\n"), dim=2)
    assert sim.shape == (1, 2, 2) and dis.shape == (0, 2, 2)


@pytest.mark.parametrize("text, line, fragment", [
    ("S 1 0 0 0\nX 1 0 0 0\n", 2, "label must be S or D"),
    ("S 1 0 0 0\nD 1 0 0\n", 2, "expected 4 coordinates"),
    ("S 1 0 0\n", 1, "even"),
    ("\nD 1 0 z 0\n", 2, "non-numeric field 'z'"),
])
def test_pairs_errors_carry_line_numbers(tmp_path, text, line, fragment):
    with pytest.raises(DataFormatError) as info:
        ingest_pairs(write(tmp_path, "bad.txt", text))
    assert info.value.line == line
    assert fragment in str(info.value)


def test_pairs_round_trip(tmp_path):
    p = gen_dml(SyntheticDmlSpec(dim=5, rank=2, n_pairs=20, informative=3, seed=1))
    path = tmp_path / "pairs.txt"
    write_pairs(path, p.similar, p.dissimilar)
    sim, dis = ingest_pairs(path)
    np.testing.assert_array_equal(sim, p.similar)
    np.testing.assert_array_equal(dis, p.dissimilar)


def test_gen_lasso_is_reproducible_and_normalized():
    spec = SyntheticLassoSpec(n=100, d=30, sparsity=5, block_size=5, seed=3)
    a, b = gen_lasso(spec), gen_lasso(spec)
    np.testing.assert_array_equal(a.problem.X, b.problem.X)
    np.testing.assert_array_equal(a.beta_true, b.beta_true)
    np.testing.assert_allclose(np.linalg.norm(a.problem.X, axis=0), 1.0)
    assert np.count_nonzero(a.beta_true) == 5
    assert a.rho == b.rho


def test_block_size_one_is_nearly_orthogonal():
    # sampling noise puts the top eigenvalue near (1 + sqrt(d/n))**2, so d/n must be tiny
    g = gen_lasso(SyntheticLassoSpec(n=50_000, d=10, sparsity=2, block_size=1, seed=0))
    assert 1.0 <= g.rho < 1.05


def test_full_block_correlation_gives_duplicate_columns():
    g = gen_lasso(SyntheticLassoSpec(n=50, d=6, sparsity=2, block_size=3, block_corr=1.0, seed=0))
    index = CorrelationIndex(g.problem.X)
    assert index.corr(0, 1) == pytest.approx(1.0)
    assert index.corr(3, 5) == pytest.approx(1.0)
    assert abs(index.corr(0, 3)) < 1.0


def test_noise_free_instance_recovers_support():
    g = gen_lasso(SyntheticLassoSpec(n=200, d=20, sparsity=4, block_size=1, noise_sd=0.0, lam=1e-4, seed=5))
    beta = solve_lasso(g.problem)
    support = np.flatnonzero(np.abs(beta) > 1e-3)
    np.testing.assert_array_equal(support, np.flatnonzero(g.beta_true))
    np.testing.assert_allclose(beta, g.beta_true, atol=1e-3)


def test_spec_validation():
    for bad in [dict(n=0), dict(sparsity=31, d=30), dict(block_size=0), dict(block_corr=1.5), dict(noise_sd=-1)]:
        with pytest.raises(UsageError):
            SyntheticLassoSpec(**bad)
    for bad in [dict(n_pairs=1), dict(informative=0), dict(n_classes=1)]:
        with pytest.raises(UsageError):
            SyntheticDmlSpec(**bad)


def test_gen_dml_scaling():
    p = gen_dml(SyntheticDmlSpec(dim=10, rank=4, n_pairs=300, seed=2))
    diff = p.dissimilar[:, 0] - p.dissimilar[:, 1]
    assert np.mean(np.sum(diff**2, axis=1)) == pytest.approx(2.0)
    assert len(p.similar) == 150 and len(p.dissimilar) == 150
    assert (p.rank, p.dim) == (4, 10)
