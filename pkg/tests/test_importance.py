import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wlra.errors import InputError, ShapeError
from wlra.importance import (
    as_importance,
    fisher_from_gradients,
    phi_metric,
    row_reduce,
    taylor_importance,
    uniform_importance,
)


def variance_oracle(values):
    values = [float(v) for v in values]
    mean = sum(values) / len(values)
    return sum((v - mean) ** 2 for v in values) / len(values)


def test_fisher_hand_example():
    assert np.array_equal(fisher_from_gradients([np.array([[1.0]]), np.array([[3.0]])]), [[5.0]])


def test_fisher_zero_and_sign():
    assert np.array_equal(fisher_from_gradients([np.zeros((2, 3))] * 4), np.zeros((2, 3)))
    g = np.random.default_rng(0).standard_normal((5, 3, 2))
    assert np.array_equal(fisher_from_gradients(g), fisher_from_gradients(-g))


def test_fisher_mean_of_squares_oracle():
    grads = np.random.default_rng(1).standard_normal((16, 4, 4))
    oracle = np.zeros((4, 4))
    for g in grads:
        for i in range(4):
            for j in range(4):
                oracle[i, j] += g[i, j] ** 2 / 16
    assert np.allclose(fisher_from_gradients(list(grads)), oracle, rtol=1e-14, atol=0)


def test_fisher_errors():
    with pytest.raises(InputError):
        fisher_from_gradients([])
    with pytest.raises(ShapeError):
        fisher_from_gradients([np.ones((2, 2)), np.ones((2, 3))])


def test_taylor():
    assert np.array_equal(taylor_importance(np.array([[2.0]]), np.array([[0.5]])), [[1.0]])
    assert np.array_equal(taylor_importance(np.zeros((2, 2)), np.ones((2, 2))), np.zeros((2, 2)))
    rng = np.random.default_rng(2)
    w, g = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    oracle = np.array([[abs(g[i, j] * w[i, j]) for j in range(3)] for i in range(3)])
    assert np.array_equal(taylor_importance(w, g), oracle)
    with pytest.raises(ShapeError):
        taylor_importance(np.ones((2, 2)), np.ones((2, 3)))


def test_row_reduce():
    r = row_reduce(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(r.values, [3.0, 7.0])
    assert np.allclose(r.sqrt_diag, [np.sqrt(3), np.sqrt(7)], rtol=1e-15)
    assert np.array_equal(row_reduce(uniform_importance(2, 3)).values, [3.0, 3.0])
    imp = np.random.default_rng(3).random((6, 5))
    rr = row_reduce(imp)
    assert np.allclose(rr.values, [sum(row) for row in imp], rtol=1e-14)
    assert np.allclose(rr.sqrt_diag**2, rr.values, rtol=1e-12)
    assert rr.values.sum() == pytest.approx(imp.sum(), rel=1e-12)


def test_row_constant_round_trip():
    rows = np.random.default_rng(4).random(5) + 0.1
    imp = np.repeat(rows[:, None], 7, axis=1)
    back = np.repeat((row_reduce(imp).values / 7)[:, None], 7, axis=1)
    assert np.allclose(back, imp, rtol=1e-12)


def test_uniform():
    assert np.array_equal(uniform_importance(2, 2), [[1.0, 1.0], [1.0, 1.0]])
    assert phi_metric(uniform_importance(4, 4), 2, 1e-12).phi == 0
    with pytest.raises(InputError):
        uniform_importance(0, 3)


def test_phi_constant_is_zero():
    assert phi_metric(np.full((20, 12), 3.7)).phi == 0.0


def test_phi_four_element_oracle():
    imp = np.array([[1.0, 1.0], [1.0, 9.0]])
    norm = 84**0.5
    oracle = variance_oracle([1 / norm, 1 / norm, 1 / norm, 9 / norm])
    rep = phi_metric(imp, 2, 1e-12)
    assert rep.phi == pytest.approx(oracle, rel=1e-12)
    assert (rep.p, rep.epsilon) == (2.0, 1e-12)


def test_phi_other_norms():
    imp = np.array([[1.0, 2.0], [3.0, 6.0]])
    for p in (1.0, 3.0, np.inf):
        norm = np.max(imp) if np.isinf(p) else np.sum(imp**p) ** (1 / p)
        assert phi_metric(imp, p).phi == pytest.approx(variance_oracle(imp.ravel() / norm), rel=1e-12)


def test_phi_epsilon_floor():
    tiny = np.full((2, 2), 1e-20)
    tiny[0, 0] = 3e-20
    rep = phi_metric(tiny, 2, 1e-12)
    assert rep.phi == pytest.approx(variance_oracle(tiny.ravel() / 1e-12), rel=1e-12)
    assert phi_metric(np.zeros((3, 3))).phi == 0.0


def test_phi_argument_errors():
    with pytest.raises(InputError):
        phi_metric(np.ones((2, 2)), p=0.5)
    with pytest.raises(InputError):
        phi_metric(np.ones((2, 2)), epsilon=0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e6), p=st.sampled_from([1.0, 2.0, 4.0]))
def test_property_phi_scale_and_permutation_invariant(seed, scale, p):
    rng = np.random.default_rng(seed)
    imp = rng.random((5, 7)) * rng.random((5, 1))
    base = phi_metric(imp, p).phi
    assert base >= 0
    assert phi_metric(imp * scale, p).phi == pytest.approx(base, rel=1e-12, abs=1e-300)
    shuffled = rng.permutation(imp.ravel()).reshape(7, 5)
    assert phi_metric(shuffled, p).phi == pytest.approx(base, rel=1e-12, abs=1e-300)


def test_importance_validation():
    with pytest.raises(InputError):
        as_importance(np.array([[-1.0]]))
    with pytest.raises(InputError):
        as_importance(np.array([[np.nan]]))
    with pytest.raises(ShapeError):
        as_importance(np.ones((2, 2)), like=np.ones((2, 3)))
