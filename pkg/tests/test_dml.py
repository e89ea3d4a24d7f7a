import numpy as np
import pytest

from petuum_lite.apps.dml import (
    L_TABLE, DmlProblem, DmlShard, dml_app, dml_batch_objective, dml_gradient, dml_objective,
    dml_update, initial_L, sample_batch, sequential_sgd,
)
from petuum_lite.data import SyntheticDmlSpec, gen_dml
from petuum_lite.exceptions import UsageError
from petuum_lite.runtime import RunConfig, run
from petuum_lite.scheduler import stream


def pairs(*points):
    return np.array([[p, q] for p, q in points], dtype=float)


def toy_problem(**kw):
    sim = pairs(([1.0, 0.0], [0.0, 0.0]), ([0.0, 1.0], [0.2, 0.9]))
    dis = pairs(([0.5, 0.0], [0.0, 0.0]), ([0.0, 0.3], [0.0, 0.0]))
    return DmlProblem(sim, dis, rank=2, **kw)


def test_gradient_similar_pair():
    g = dml_gradient(np.eye(2), pairs(([1.0, 0.0], [0.0, 0.0])), np.zeros((0, 2, 2)), 1.0)
    np.testing.assert_array_equal(g, [[2.0, 0.0], [0.0, 0.0]])


def test_gradient_dissimilar_margin_satisfied():
    g = dml_gradient(np.eye(2), np.zeros((0, 2, 2)), pairs(([2.0, 0.0], [0.0, 0.0])), 1.0)
    np.testing.assert_array_equal(g, np.zeros((2, 2)))


def test_gradient_dissimilar_inside_margin():
    g = dml_gradient(np.eye(2), np.zeros((0, 2, 2)), pairs(([0.5, 0.0], [0.0, 0.0])), 1.0)
    np.testing.assert_array_equal(g, [[-0.5, 0.0], [0.0, 0.0]])


def test_gradient_excludes_pairs_on_the_kink():
    g = dml_gradient(np.eye(2), np.zeros((0, 2, 2)), pairs(([1.0, 0.0], [0.0, 0.0])), 1.0)
    np.testing.assert_array_equal(g, np.zeros((2, 2)))


def test_gradient_errors():
    with pytest.raises(UsageError):
        dml_gradient(np.eye(2), pairs(([1.0, 0.0, 0.0], [0.0, 0.0, 0.0])), np.zeros((0, 2, 3)), 1.0)
    with pytest.raises(UsageError):
        dml_gradient(np.eye(2), np.zeros((0, 2, 2)), np.zeros((0, 2, 2)), 1.0)


def _away_from_kink(rng, rank, dim, n=6):
    while True:
        L = rng.normal(size=(rank, dim)) * 0.5
        sim = rng.normal(size=(n, 2, dim))
        dis = rng.normal(size=(n, 2, dim)) * 0.4
        v = (dis[:, 0] - dis[:, 1]) @ L.T
        if np.all(np.abs(1 - np.einsum("ij,ij->i", v, v)) > 1e-3):
            return L, sim, dis


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        L, sim, dis = _away_from_kink(rng, 3, 4)
        g = dml_gradient(L, sim, dis, 1.3)
        num = np.zeros_like(L)
        h = 1e-6
        for idx in np.ndindex(L.shape):
            E = np.zeros_like(L)
            E[idx] = h
            num[idx] = (dml_batch_objective(L + E, sim, dis, 1.3)
                        - dml_batch_objective(L - E, sim, dis, 1.3)) / (2 * h)
        assert np.linalg.norm(g - num) <= 1e-5 * np.linalg.norm(num)


def _brute_objective(L, problem):
    total = 0.0
    for x, y in problem.similar:
        total += sum(v * v for v in L @ (x - y))
    for a, b in problem.dissimilar:
        total += problem.lam * max(0.0, 1.0 - sum(v * v for v in L @ (a - b)))
    return total


def test_objective_examples():
    p = toy_problem(lam=0.7)
    assert dml_objective(np.zeros((2, 2)), p) == pytest.approx(0.7 * 2)
    L = np.random.default_rng(1).normal(size=(2, 2))
    assert dml_objective(L, p) == pytest.approx(_brute_objective(L, p), rel=1e-12)
    sim_only = dml_batch_objective(L, p.similar, np.zeros((0, 2, 2)), 1.0)
    assert dml_batch_objective(2 * L, p.similar, np.zeros((0, 2, 2)), 1.0) == pytest.approx(4 * sim_only)


def test_zero_L_gradient():
    p = toy_problem()
    g = dml_gradient(np.zeros((2, 2)), p.similar, p.dissimilar, 1.0)
    np.testing.assert_array_equal(g, np.zeros((2, 2)))


def test_problem_validation():
    with pytest.raises(UsageError):
        DmlProblem(np.zeros((0, 2, 2)), pairs(([1.0, 0.0], [0.0, 0.0])), 2)
    with pytest.raises(UsageError):
        toy_problem(lam=0.0)
    with pytest.raises(UsageError):
        DmlProblem(pairs(([1.0, 0.0], [0.0, 0.0])), pairs(([1.0, 0.0, 1.0], [0.0, 0.0, 0.0])), 2)
    with pytest.raises(UsageError):
        toy_problem().shard(3)


def test_initial_L_is_truncated_identity():
    np.testing.assert_array_equal(initial_L(2, 3), [[1, 0, 0], [0, 1, 0]])
    assert toy_problem().step(3) == pytest.approx(0.1 / 2)


def test_sampling_is_with_replacement_and_reproducible():
    shard = DmlShard(toy_problem().similar, toy_problem().dissimilar)
    a = sample_batch(shard, 50, np.random.default_rng(3))
    b = sample_batch(shard, 50, np.random.default_rng(3))
    np.testing.assert_array_equal(a[0], b[0])
    assert a[0].shape == (50, 2, 2)
    with pytest.raises(UsageError):
        sample_batch(DmlShard(np.zeros((0, 2, 2)), shard.dissimilar), 1, np.random.default_rng())


def test_toy_objective_decreases():
    p = DmlProblem(pairs(([1.0, 0.0], [0.0, 0.0])), pairs(([0.0, 0.5], [0.0, 0.0])), rank=2, eta0=0.05, C=1)
    objs = sequential_sgd(p, 10, np.random.default_rng(0))
    assert all(b < a for a, b in zip([dml_objective(initial_L(2, 2), p)] + objs, objs))
    series = run(dml_app(p, max_clocks=10), RunConfig(P=1, seed=0))
    assert series.objectives == objs == sequential_sgd(p, 10, stream(0, 0))


def test_single_worker_matches_sequential_sgd_bitwise():
    p = gen_dml(SyntheticDmlSpec(dim=8, rank=4, n_pairs=400, seed=2))
    series = run(dml_app(p, max_clocks=40), RunConfig(P=1, seed=11))
    assert series.objectives == sequential_sgd(p, 40, stream(11, 0))


def test_workers_sum_to_large_batch_update():
    """Identical shards, s=0: the per-clock change is the sum of the worker updates."""
    p = gen_dml(SyntheticDmlSpec(dim=6, rank=3, n_pairs=200, informative=4, seed=4))
    shard = DmlShard(p.similar, p.dissimilar)
    P, clocks, seed = 3, 5, 9
    series = run(dml_app(p, max_clocks=clocks), RunConfig(P=P, s=0, seed=seed), [shard] * P)
    rngs = [stream(seed, w) for w in range(P)]
    L = initial_L(p.rank, p.dim)
    for t in range(clocks):
        batches = [sample_batch(shard, p.C, rng) for rng in rngs]
        replay = L.copy()
        for sim, dis in batches:
            replay = replay + dml_update(L, sim, dis, p, t)
        big_sim = np.concatenate([b[0] for b in batches])
        big_dis = np.concatenate([b[1] for b in batches])
        big = L - p.step(t) * dml_gradient(L, big_sim, big_dis, p.lam) / p.C
        np.testing.assert_allclose(replay, big, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(series.history[t][L_TABLE], replay)
        L = replay


def test_staleness_runs_stay_close():
    p = gen_dml(SyntheticDmlSpec(dim=8, rank=4, n_pairs=800, seed=1))
    finals = [run(dml_app(p, max_clocks=60), RunConfig(P=3, s=s, seed=5, delays={0: 0.001})).final_objective
              for s in (0, 2)]
    assert abs(finals[1] - finals[0]) <= 0.02 * abs(finals[0])
