import numpy as np
import pytest

from effcode.sparsecode import (
    CodingConfig, DictionaryLearner, auto_lambda, dict_update, fista_encode, learn_dictionary,
    lipschitz_estimate, objective, penalty, shrink, shrink_group, shrink_l1,
)
from oracles import cd_lasso, greedy_cosine_match, kkt_residual, lasso_objective


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


# proximal operators


def test_shrink_l1_table():
    np.testing.assert_array_equal(shrink_l1(np.array([2.5, 0.5, -3.0]), 1.0), [1.5, 0.0, -2.0])


def test_shrink_group_table():
    np.testing.assert_allclose(shrink_group(np.array([3.0, 4.0]), 2, 1.0), [2.4, 3.2], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(shrink_group(np.array([0.3, -0.4, 3.0, 4.0]), 2, 0.5)[:2], 0.0)
    u = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(shrink_group(u, 2, 0.0), u)
    np.testing.assert_array_equal(shrink_group(np.zeros(4), 2, 1.0), 0.0)


def test_group_size_one_equals_l1():
    u = np.random.default_rng(0).standard_normal((20, 12))
    np.testing.assert_allclose(shrink_group(u, 1, 0.3), shrink_l1(u, 0.3), atol=1e-8)
    np.testing.assert_allclose(shrink(u, 0.3, group_size=1), shrink(u, 0.3), atol=1e-8)


def test_group_size_must_divide():
    with pytest.raises(ValueError):
        shrink_group(np.ones(5), 2, 0.1)


def test_penalty():
    u = np.array([[3.0, 4.0, -1.0, 0.0]])
    assert penalty(u)[0] == 8.0
    assert penalty(u, 2)[0] == 6.0


# Lipschitz constant


def test_lipschitz_identity_and_single_atom():
    assert lipschitz_estimate(np.eye(5)) == pytest.approx(1.01, abs=1e-6)
    assert lipschitz_estimate(np.array([[0.3, 0.4]])) == pytest.approx(0.2525, abs=1e-6)


def test_lipschitz_matches_dense_eigensolver():
    d = np.random.default_rng(0).standard_normal((20, 50))
    ref = 1.01 * np.linalg.eigvalsh(d @ d.T)[-1]
    assert lipschitz_estimate(d) == pytest.approx(ref, rel=1e-5)


# FISTA


def test_fista_orthonormal_is_shrinkage():
    x = np.random.default_rng(0).standard_normal((10, 6))
    # objective-change stopping resolves codes to about sqrt(tol)
    codes = fista_encode(np.eye(6), x, CodingConfig(lam=0.4, tol=1e-14, max_iter=1000))
    np.testing.assert_allclose(codes, shrink_l1(x, 0.4), atol=1e-8)


def test_fista_large_lambda_all_zero():
    rng = np.random.default_rng(1)
    d = _unit_rows(rng.standard_normal((8, 5)))
    x = rng.standard_normal((20, 5))
    lam = np.abs(x @ d.T).max()
    assert not fista_encode(d, x, CodingConfig(lam=lam)).any()


def test_fista_matches_coordinate_descent():
    rng = np.random.default_rng(2)
    for _ in range(5):
        d = rng.standard_normal((30, 20)) / np.sqrt(20)
        x = rng.standard_normal((1, 20))
        codes = fista_encode(d, x, CodingConfig(lam=0.1, tol=1e-14, max_iter=20000))
        ref = cd_lasso(d, x[0], 0.1)
        f_ref = lasso_objective(d, x[0], ref, 0.1)
        assert lasso_objective(d, x[0], codes[0], 0.1) <= f_ref * (1 + 1e-6)
        assert kkt_residual(d, x[0], codes[0], 0.1) <= 1e-4


def test_fista_objective_matches_helper_and_group():
    rng = np.random.default_rng(3)
    d = rng.standard_normal((12, 8)) / 3
    x = rng.standard_normal((4, 8))
    cfg = CodingConfig(lam=0.2, group_size=4, tol=1e-12, max_iter=5000)
    codes = fista_encode(d, x, cfg)
    f = objective(d, x, codes, 0.2, 4)
    # group optimality: perturbing any group does not lower the objective
    for i in range(3):
        trial = codes.copy()
        trial[:, 4 * i:4 * i + 4] *= 1.01
        assert np.all(objective(d, x, trial, 0.2, 4) >= f - 1e-12)


def test_group_one_codes_equal_l1_codes():
    rng = np.random.default_rng(4)
    d = rng.standard_normal((10, 6)) / 2
    x = rng.standard_normal((5, 6))
    a = fista_encode(d, x, CodingConfig(lam=0.1, tol=1e-14, max_iter=20000))
    b = fista_encode(d, x, CodingConfig(lam=0.1, group_size=1, tol=1e-14, max_iter=20000))
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_fista_dimension_mismatch():
    with pytest.raises(ValueError):
        fista_encode(np.eye(3), np.ones((2, 4)), CodingConfig())


def test_coding_config_validation():
    with pytest.raises(ValueError):
        CodingConfig(lam=0)
    with pytest.raises(ValueError):
        CodingConfig(max_iter=0)
    with pytest.raises(ValueError):
        CodingConfig(tol=0)


# dictionary update and learning


def test_dict_update_zero_codes_unchanged():
    rng = np.random.default_rng(0)
    d = _unit_rows(rng.standard_normal((4, 6)))
    x = rng.standard_normal((10, 6))
    np.testing.assert_array_equal(dict_update(d, x, np.zeros((10, 4))), d)


def test_dict_update_stationary_point():
    rng = np.random.default_rng(1)
    d = _unit_rows(rng.standard_normal((4, 6)))
    a = rng.standard_normal((30, 4))
    x = a @ d
    np.testing.assert_allclose(dict_update(d, x, a), d, atol=1e-10)


def test_dict_update_decreases_objective_and_keeps_norms():
    rng = np.random.default_rng(2)
    d = _unit_rows(rng.standard_normal((8, 10)))
    x = rng.standard_normal((50, 10))
    a = rng.standard_normal((50, 8))
    new = dict_update(d, x, a)
    before = 0.5 * np.sum((x - a @ d) ** 2)
    after = 0.5 * np.sum((x - a @ new) ** 2)
    assert after <= before
    assert np.all(np.linalg.norm(new, axis=1) <= 1 + 1e-9)


def _sparse_problem(seed, n=1000, m=8, dim=16, s=3):
    rng = np.random.default_rng(seed)
    d = _unit_rows(rng.standard_normal((m, dim)))
    a = np.zeros((n, m))
    for i in range(n):
        idx = rng.choice(m, s, replace=False)
        a[i, idx] = rng.standard_normal(s) * 2
    return d, a @ d


def test_learn_dictionary_recovers_atoms():
    true, x = _sparse_problem(0)
    res = learn_dictionary(x, 8, CodingConfig(lam=0.05, seed=0), epochs=100)
    cos = greedy_cosine_match(true, res.dictionary)
    assert np.sum(cos >= 0.95) >= 7


def test_learn_dictionary_objective_monotone():
    _, x = _sparse_problem(1, n=300)
    res = learn_dictionary(x, 8, CodingConfig(lam=0.1, seed=1), epochs=20)
    obj = [h[1] for h in res.history]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(obj, obj[1:]))
    assert res.history[0][0] == 1 and len(res.history) == 20
    assert np.all(np.linalg.norm(res.dictionary, axis=1) <= 1 + 1e-9)


def test_learn_dictionary_deterministic():
    _, x = _sparse_problem(2, n=200)
    a = learn_dictionary(x, 6, CodingConfig(seed=3), epochs=3, lam="auto")
    b = learn_dictionary(x, 6, CodingConfig(seed=3), epochs=3, lam="auto")
    np.testing.assert_array_equal(a.dictionary, b.dictionary)
    assert a.lam == b.lam


def test_auto_lambda():
    d = np.eye(2)
    x = np.array([[1.0, -3.0], [2.0, 0.5]])
    assert auto_lambda(d, x) == pytest.approx(0.1 * (3.0 + 2.0) / 2)


def test_dictionary_learner_estimator():
    _, x = _sparse_problem(3, n=200)
    est = DictionaryLearner(n_atoms=8, epochs=5, random_state=0).fit(x)
    codes = est.transform(x[:10])
    assert codes.shape == (10, 8)
    assert est.components_.shape == (8, 16)
    assert est.get_params()["n_atoms"] == 8
