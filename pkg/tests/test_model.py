import numpy as np
import pytest

import oracles
from instances import (flatten, make_params, max_relative_error, oracle_objective,
                       random_config, unflatten)
from fiemf.dataset import QosMatrix
from fiemf.model import (CheckpointError, FiemfHyperparams, FiemfParams, Mix, SgdSettings,
                         TrainingError, _sgd_epoch, full_gradient, gradients, load_checkpoint,
                         mix_gradient, mix_objective, neighbor_arrays, objective, predict,
                         regularizer_shares, sgd_fit, train)
from fiemf.region import BiasVectors, build_region_model
from fiemf.similarity import NeighborSet, NeighborTable, compute_neighbors


# ---------------------------------------------------------------------------
# prediction

def test_predict_alpha_one_is_inner_product():
    prm = make_params([[1.0, 2.0]], [[3.0, -1.0]], [5.0], [7.0])
    assert predict(0, 0, prm, 11.0, 1.0) == 1.0


def test_predict_alpha_zero_is_bias_model():
    prm = make_params([[1.0, 2.0]], [[3.0, -1.0]], [0.5], [-0.2])
    assert predict(0, 0, prm, 3.0, 0.0) == pytest.approx(3.3, abs=1e-15)


def test_predict_convex_combination():
    prm = make_params([[2.0]], [[1.0]], [1.0], [0.0])
    assert predict(0, 0, prm, 3.0, 0.5) == 3.0


@pytest.mark.parametrize("i, j", [(1, 0), (0, 2), (-1, 0)])
def test_predict_out_of_range(i, j):
    prm = make_params([[1.0]], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        predict(i, j, prm, 0.0, 0.5)


# ---------------------------------------------------------------------------
# objective

def test_objective_single_entry_zero_params():
    q = QosMatrix(1, 1, [0], [0], [2.5])
    h = FiemfHyperparams(alpha=0.3, lam=0.0, gamma=0.0, dim=2)
    assert objective(q, make_params(np.zeros((1, 2)), np.zeros((1, 2))), None, h, mu=[0.0]) == 0.5 * 2.5 ** 2


def test_objective_exact_fit_is_zero():
    q = QosMatrix(2, 2, [0, 0, 1], [0, 1, 1], [2.0, 3.0, 6.0])
    prm = make_params([[1.0], [2.0]], [[2.0], [3.0]])
    h = FiemfHyperparams(alpha=1.0, lam=0.0, gamma=0.0, dim=1)
    assert objective(q, prm, None, h, mu=[0.0, 0.0]) == 0.0


def test_objective_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        q, prm, mu, table, hyper = random_config(rng)
        expected = oracle_objective(q, prm, mu, table, hyper)
        assert objective(q, prm, table, hyper, mu) == pytest.approx(expected, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# gradients

def _assert_close(analytic, numeric, rel=1e-4):
    err = max_relative_error(analytic, numeric)
    assert err < rel, err


@pytest.mark.parametrize("cross", [False, True])
def test_batch_gradient_matches_finite_differences(cross):
    rng = np.random.default_rng(3 + cross)
    for _ in range(100):
        q, prm, mu, table, hyper = random_config(rng)
        hyper = FiemfHyperparams(**{**hyper.__dict__, "cross_terms": cross})
        anchor = None if cross else prm.U.copy()
        fn = lambda x: oracle_objective(q, unflatten(x, prm), mu, table, hyper, anchor)
        numeric = oracles.central_difference(fn, flatten(prm).tolist(), h=1e-5)
        _assert_close(flatten(full_gradient(q, prm, table, hyper, mu)), numeric)


def test_entry_gradient_zero_residual_no_regularizers():
    prm = make_params([[1.0, 2.0]], [[3.0, 4.0]], [1.0], [2.0])
    h = FiemfHyperparams(lam=0.0, gamma=0.0, dim=2)
    g = gradients(0, 0, 0.0, prm, None, h)
    assert all(np.all(np.asarray(g[k]) == 0) for k in ("U", "S", "b", "p"))


def test_entry_gradient_plain_mf_reduction():
    prm = make_params([[1.0, 2.0]], [[3.0, 4.0]])
    g = gradients(0, 0, 0.5, prm, None, FiemfHyperparams(alpha=1.0, lam=0.0, gamma=0.0, dim=2))
    assert np.array_equal(g["U"], -0.5 * prm.S[0])
    assert np.array_equal(g["S"], -0.5 * prm.U[0])
    assert g["b"] == 0.0 and g["p"] == 0.0


def test_entry_gradients_match_finite_differences():
    """Per-entry terms against the entry objective with the neighbor average frozen."""
    rng = np.random.default_rng(21)
    for _ in range(100):
        q, prm, mu, table, hyper = random_config(rng)
        t = rng.integers(len(q))
        i, j, v = int(q.users[t]), int(q.services[t]), float(q.values[t])
        one = QosMatrix(q.num_users, q.num_services, [i], [j], [v])
        own = NeighborTable(tuple(ns if ns.user_id == i else NeighborSet(ns.user_id, ())
                                  for ns in table.sets), table.k)
        anchor = prm.U.copy()
        fn = lambda x: oracle_objective(one, unflatten(x, prm), mu, own, hyper, anchor)
        numeric = unflatten(oracles.central_difference(fn, flatten(prm).tolist()), prm)
        e = v - predict(i, j, prm, mu[i], hyper.alpha)
        g = gradients(i, j, e, prm, table, hyper)
        _assert_close(g["U"], numeric.U[i])
        _assert_close(g["S"], numeric.S[j])
        _assert_close([g["b"], g["p"]], [numeric.b[i], numeric.p[j]])


def test_entry_gradients_sum_to_batch_gradient():
    rng = np.random.default_rng(8)
    for _ in range(20):
        q, prm, mu, table, hyper = random_config(rng)
        su, ss = regularizer_shares(q, "objective")
        total = FiemfParams(np.zeros_like(prm.U), np.zeros_like(prm.S),
                            BiasVectors(np.zeros_like(prm.b), np.zeros_like(prm.p)))
        for i, j, v in zip(q.users, q.services, q.values):
            e = v - predict(i, j, prm, mu[i], hyper.alpha)
            g = gradients(i, j, e, prm, table, hyper, su[i], ss[j])
            total.U[i] += g["U"]
            total.S[j] += g["S"]
            total.b[i] += g["b"]
            total.p[j] += g["p"]
        batch = full_gradient(q, prm, table, hyper, mu)
        # users or services without entries have no per-entry terms
        rated_u, rated_s = q.user_counts() > 0, q.service_counts() > 0
        assert np.allclose(total.U[rated_u], batch.U[rated_u], atol=1e-12)
        assert np.allclose(total.S[rated_s], batch.S[rated_s], atol=1e-12)
        assert np.allclose(total.b[rated_u], batch.b[rated_u], atol=1e-12)
        assert np.allclose(total.p[rated_s], batch.p[rated_s], atol=1e-12)


@pytest.mark.parametrize("cross", [False, True])
def test_kernel_step_equals_gradient_step(cross):
    rng = np.random.default_rng(4)
    q, prm, mu, table, hyper = random_config(rng)
    hyper = FiemfHyperparams(**{**hyper.__dict__, "cross_terms": cross})
    # pick an entry whose user has neighbors so the gamma path is exercised
    t = next(t for t in range(len(q)) if table[int(q.users[t])].neighbors)
    i, j, v = int(q.users[t]), int(q.services[t]), float(q.values[t])
    eta = 0.05
    e = v - predict(i, j, prm, mu[i], hyper.alpha)
    g = gradients(i, j, e, prm, table, hyper)
    expected = prm.copy()
    expected.U[i] -= eta * g["U"]
    expected.S[j] -= eta * g["S"]
    expected.b[i] -= eta * g["b"]
    expected.p[j] -= eta * g["p"]
    for a, ga in g.get("U_neighbors", {}).items():
        expected.U[a] -= eta * ga
    idx, w = neighbor_arrays(table, q.num_users)
    mix = Mix.fiemf(hyper.alpha)
    got = prm.copy()
    ones_u, ones_s = np.ones(q.num_users), np.ones(q.num_services)
    _sgd_epoch(q.users, q.services, q.values, np.array([t]), got.U, got.S, got.b, got.p, mu,
               mix.w_int, mix.w_bias, True, hyper.lam * ones_u, hyper.lam * ones_s,
               hyper.gamma * ones_u, idx, w, eta, cross)
    for name in ("U", "S", "b", "p"):
        assert np.allclose(getattr(got, name), getattr(expected, name), rtol=0, atol=1e-14)


@pytest.mark.parametrize("mix", [Mix(1.0, 0.0, False), Mix(1.0, 1.0, True)])
def test_baseline_mix_gradients(mix):
    rng = np.random.default_rng(17)
    for _ in range(30):
        q, prm, mu, table, hyper = random_config(rng)
        idx, w = neighbor_arrays(None, q.num_users)
        fn = lambda x: mix_objective(q, unflatten(x, prm), mu, idx, w, hyper.lam, 0.0, mix)
        numeric = oracles.central_difference(fn, flatten(prm).tolist())
        analytic = mix_gradient(q, prm, mu, idx, w, hyper.lam, 0.0, mix, False)
        m, n, d = q.num_users, q.num_services, prm.U.shape[1]
        cut = (m + n) * d if not mix.use_bias else None
        _assert_close(flatten(analytic)[:cut], np.asarray(numeric)[:cut])


# ---------------------------------------------------------------------------
# training

def test_scalar_regression_converges():
    q = QosMatrix(1, 1, [0], [0], [2.0])
    h = FiemfHyperparams(alpha=1.0, lam=0.0, gamma=0.0, dim=1, eta=0.1, eta_decay=1.0,
                         max_iters=300, tol=1e-12, init_scale=0.5)
    model = train(q, None, None, h)
    assert abs(float(model.params.U[0] @ model.params.S[0]) - 2.0) < 1e-3


def test_bias_only_converges_to_residual():
    q = QosMatrix(1, 1, [0], [0], [2.0])
    h = FiemfHyperparams(alpha=0.0, lam=0.0, gamma=0.0, dim=1, eta=0.1, eta_decay=1.0,
                         max_iters=300, tol=1e-12)
    region = build_region_model(q, ["A"])
    model = train(q, None, region, h)
    assert model.params.b[0] + model.params.p[0] == pytest.approx(2.0 - region.mu[0], abs=1e-3)


def test_loss_decreases_on_toy_matrix():
    rng = np.random.default_rng(0)
    dense = rng.uniform(0.5, 3.0, (5, 5))
    dense[rng.random((5, 5)) < 0.2] = -1
    q = QosMatrix.from_dense(dense)
    region = build_region_model(q, ["A", "A", "B", "B", "C"])
    nbrs = compute_neighbors(q, 2)
    model = train(q, nbrs, region, FiemfHyperparams(lam=0.1, gamma=0.1, dim=3, k=2, eta=0.05))
    trace = model.trace
    assert trace.losses[-1] < trace.initial_loss
    assert trace.losses[-1] < trace.losses[0]
    init = FiemfHyperparams(lam=0.1, gamma=0.1, dim=3, k=2, eta=0.05, max_iters=1)
    first = train(q, nbrs, region, init)
    rmse = lambda mdl: np.sqrt(np.mean((mdl.predict_raw(q.users, q.services) - q.values) ** 2))
    assert rmse(model) < rmse(first)


def test_training_is_deterministic(small_data):
    q, regions = small_data
    nbrs = compute_neighbors(q, 5)
    region = build_region_model(q, regions)
    h = FiemfHyperparams(max_iters=15, k=5, init_seed=9)
    a, b = train(q, nbrs, region, h), train(q, nbrs, region, h)
    for name in ("U", "S", "b", "p"):
        assert getattr(a.params, name).tobytes() == getattr(b.params, name).tobytes()
    c = train(q, nbrs, region, FiemfHyperparams(max_iters=15, k=5, init_seed=10))
    assert c.params.U.tobytes() != a.params.U.tobytes()


def test_alpha_one_ignores_bias_side(small_data):
    q, regions = small_data
    model = train(q, None, build_region_model(q, regions), FiemfHyperparams(alpha=1.0, max_iters=5))
    shifted = model.params.copy()
    shifted.b[:] += 3.0
    shifted.p[:] -= 1.0
    assert predict(2, 3, shifted, 100.0, 1.0) == predict(2, 3, model.params, model.mu[2], 1.0)


def test_predictions_clamped_to_training_range(small_data):
    q, regions = small_data
    model = train(q, None, build_region_model(q, regions), FiemfHyperparams(max_iters=5))
    users = np.arange(q.num_users).repeat(q.num_services)
    services = np.tile(np.arange(q.num_services), q.num_users)
    pred = model.predict(users, services)
    lo, hi = q.value_range
    assert pred.min() >= lo and pred.max() <= hi


def test_divergence_raises_training_error():
    q = QosMatrix.from_dense(np.array([[5.0, 9.0], [7.0, 3.0]]))
    h = FiemfHyperparams(alpha=1.0, lam=0.0, gamma=0.0, dim=2, eta=50.0, reg_mode="entry",
                         init_scale=1.0)
    with pytest.raises(TrainingError) as exc:
        train(q, None, None, h)
    assert exc.value.epoch >= 1
    assert np.isfinite(exc.value.last_finite_loss)


def test_reg_mode_entry_applies_full_lambda_per_entry():
    q = QosMatrix(1, 2, [0, 0], [0, 1], [1.0, 2.0])
    su, ss = regularizer_shares(q, "objective")
    assert su.tolist() == [0.5] and ss.tolist() == [1.0, 1.0]
    su, ss = regularizer_shares(q, "entry")
    assert su.tolist() == [1.0]


def test_sgd_fit_empty_matrix():
    q = QosMatrix(1, 1, [], [], [])
    settings = SgdSettings(1, 0.0, 0.0, 0.01, 1.0, 1, 1e-6, 0, 0.1, "objective", False)
    with pytest.raises(ValueError):
        sgd_fit(q, settings, Mix(1.0, 0.0, False))


def test_checkpoint_round_trip(tmp_path, small_data):
    q, regions = small_data
    model = train(q, compute_neighbors(q, 3), build_region_model(q, regions),
                  FiemfHyperparams(max_iters=3, k=3))
    path = tmp_path / "model.npz"
    model.save(path)
    back = load_checkpoint(path, q)
    assert back.fingerprint == q.fingerprint()
    assert back.hyper == model.hyper
    assert np.array_equal(back.predict(q.users, q.services), model.predict(q.users, q.services))


def test_checkpoint_refuses_dimension_mismatch(tmp_path, small_data):
    q, regions = small_data
    model = train(q, None, build_region_model(q, regions), FiemfHyperparams(max_iters=2))
    path = tmp_path / "model.npz"
    model.save(path)
    other = QosMatrix(q.num_users + 1, q.num_services, [0], [0], [1.0])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)


def test_hyperparameter_validation():
    for bad in ({"alpha": 1.5}, {"lam": -1}, {"dim": 0}, {"eta": 0}, {"reg_mode": "x"}):
        with pytest.raises(ValueError):
            FiemfHyperparams(**bad)
