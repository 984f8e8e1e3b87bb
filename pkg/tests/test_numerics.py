import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hig import numerics as nx
from hig.errors import DegenerateVectorError, DimensionError, NumericError


def triple_loop(a, b):
    """Schoolbook product, independent of numpy's matmul."""
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            out[i][j] = sum(a[i][k] * b[k][j] for k in range(inner))
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(nx.matmul(np.eye(3), m), m)

    def test_hand_product(self):
        np.testing.assert_array_equal(nx.matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])

    def test_zero_annihilates(self):
        m = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(nx.matmul(np.zeros((2, 4)), m), np.zeros((2, 3)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            r, k, c = rng.integers(1, 6, size=3)
            a, b = rng.normal(size=(r, k)), rng.normal(size=(k, c))
            np.testing.assert_allclose(nx.matmul(a, b), triple_loop(a.tolist(), b.tolist()), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2 x 3\).*\(2 x 3\)"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_associativity(self, p, q, r, s, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(p, q)), rng.normal(size=(q, r)), rng.normal(size=(r, s))
        np.testing.assert_allclose(nx.matmul(nx.matmul(a, b), c), nx.matmul(a, nx.matmul(b, c)), atol=1e-9)


class TestCosine:
    def test_self_similarity(self):
        assert nx.cosine_similarity([0.3, -2.0, 5.0], [0.3, -2.0, 5.0]) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert nx.cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_hand_value(self):
        assert nx.cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateVectorError):
            nx.cosine_similarity([0, 0], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            nx.cosine_similarity([1, 0, 0], [1, 0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.floats(1e-3, 1e3))
    def test_positive_scale_invariance(self, u, v, alpha):
        u, v = np.array(u), np.array(v)
        if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
            return
        assert nx.cosine_similarity(alpha * u, v) == pytest.approx(nx.cosine_similarity(u, v), abs=1e-12)

    def test_matrix_zero_row_scores_zero(self, caplog):
        sims = nx.cosine_matrix(np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]))
        assert sims[1].tolist() == [0.0, 0.0, 0.0]
        assert sims[0, 2] == pytest.approx(1 / math.sqrt(2))
        assert "zero-norm" in caplog.text


class TestPrimitiveGradients:
    """Each primitive against central differences on a random instance."""

    @pytest.fixture
    def rng(self):
        return np.random.default_rng(7)

    def check(self, build, *params):
        assert nx.gradient_check(build, list(params)) < 1e-6

    def test_mm_add_relu(self, rng):
        w = nx.Parameter(rng.normal(size=(3, 4)), "w")
        b = nx.Parameter(rng.normal(size=(1, 4)), "b")
        x = nx.Tensor(rng.normal(size=(5, 3)))
        ones_l, ones_r = nx.Tensor(np.ones((1, 5))), nx.Tensor(np.ones((4, 1)))
        self.check(lambda: nx.mm(ones_l, nx.mm(nx.relu(nx.add(nx.mm(x, w), b)), ones_r)), w, b)

    def test_concat_take_transpose(self, rng):
        a = nx.Parameter(rng.normal(size=(3, 2)), "a")
        c = nx.Parameter(rng.normal(size=(3, 2)), "c")

        def build():
            z = nx.take_rows(nx.concat([a, c], axis=1), [2, 0, 2])
            zz = nx.mm(z, nx.transpose(z))
            return nx.mm(nx.mm(nx.Tensor(np.ones((1, 3))), zz), nx.Tensor(np.ones((3, 1))))

        self.check(build, a, c)

    def test_sigmoid_and_scale(self, rng):
        a = nx.Parameter(rng.normal(size=(2, 3)), "a")
        self.check(lambda: nx.scale(nx.mm(nx.mm(nx.Tensor(np.ones((1, 2))), nx.sigmoid(a)),
                                          nx.Tensor(np.ones((3, 1)))), 0.5), a)

    def test_focal_sum(self, rng):
        z = nx.Parameter(rng.normal(size=(4, 3)), "z")
        y = (rng.random((4, 3)) < 0.4).astype(float)
        w = (rng.random((4, 3)) < 0.8).astype(float)
        self.check(lambda: nx.focal_loss_sum(z, y, w, 0.25, 2.0), z)

    def test_concat_rows(self, rng):
        a = nx.Parameter(rng.normal(size=(2, 3)), "a")
        b = nx.Parameter(rng.normal(size=(1, 3)), "b")
        target = nx.Tensor(rng.normal(size=(3, 1)))
        self.check(lambda: nx.mm(nx.Tensor(np.ones((1, 3))), nx.mm(nx.concat([a, b], axis=0), target)), a, b)


class TestGradientCheck:
    def test_half_squared_norm_against_analytic(self):
        rng = np.random.default_rng(3)
        w = nx.Parameter(rng.normal(scale=0.3, size=(3, 4)), "w")
        x = rng.normal(size=(4, 1))

        def loss():
            wx = nx.mm(w, nx.Tensor(x))
            return nx.scale(nx.mm(nx.transpose(wx), wx), 0.5)

        nx.run_backward(loss(), [w])
        np.testing.assert_allclose(w.grad, w.value @ x @ x.T, atol=1e-12)
        assert nx.gradient_check(loss, [w], eps=1e-5) < 1e-4

    def test_constant_loss(self):
        w = nx.Parameter(np.ones((2, 2)), "w")
        assert nx.gradient_check(lambda: nx.Tensor([[3.0]]), [w]) == 0.0
        np.testing.assert_array_equal(w.grad, np.zeros((2, 2)))

    def test_linear_loss(self):
        w = nx.Parameter(np.random.default_rng(0).normal(size=(3, 2)), "w")

        def loss():
            return nx.mm(nx.mm(nx.Tensor(np.ones((1, 3))), w), nx.Tensor(np.ones((2, 1))))

        assert nx.gradient_check(loss, [w]) < 1e-8
        np.testing.assert_array_equal(w.grad, np.ones((3, 2)))

    def test_non_finite_loss(self):
        w = nx.Parameter(np.ones((1, 1)), "w")
        with pytest.raises(NumericError):
            nx.gradient_check(lambda: nx.Tensor([[np.inf]]), [w])

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            nx.gradient_check(lambda: nx.Tensor([[0.0]]), [], eps=0.0)


class TestAdamW:
    def test_frozen_is_bit_stable(self):
        p = nx.Parameter(np.random.default_rng(0).normal(size=(3, 3)), "p", frozen=True)
        before = p.value.copy()
        opt = nx.AdamW(lr=0.1)
        for _ in range(10):
            p.grad = np.random.default_rng(1).normal(size=(3, 3))
            opt.step([p])
        assert np.array_equal(p.value, before)
        assert opt.step_count == {}

    def test_zero_gradient_zero_decay(self):
        p = nx.Parameter(np.array([[1.5, -2.0]]), "p")
        opt = nx.AdamW(lr=1e-2, weight_decay=0.0)
        for _ in range(3):
            p.grad = np.zeros((1, 2))
            opt.step([p])
        np.testing.assert_array_equal(p.value, [[1.5, -2.0]])

    def test_first_step_moves_by_lr(self):
        # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps) ~ lr.
        p = nx.Parameter(np.array([[0.0]]), "p")
        p.grad = np.array([[1.0]])
        nx.AdamW(lr=1e-4, weight_decay=0.0).step([p])
        assert p.value[0, 0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_decoupled_decay(self):
        p = nx.Parameter(np.array([[2.0]]), "p")
        p.grad = np.zeros((1, 1))
        nx.AdamW(lr=0.1, weight_decay=0.5).step([p])
        assert p.value[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_empty_parameter_set(self):
        nx.AdamW().step([])

    def test_state_round_trip(self):
        rng = np.random.default_rng(5)
        p = nx.Parameter(rng.normal(size=(2, 2)), "p")
        opt = nx.AdamW(lr=1e-3)
        p.grad = rng.normal(size=(2, 2))
        opt.step([p])
        clone = nx.AdamW.from_state_dict(opt.state_dict())
        q = nx.Parameter(p.value.copy(), "p")
        g = rng.normal(size=(2, 2))
        p.grad, q.grad = g, g.copy()
        opt.step([p])
        clone.step([q])
        assert np.array_equal(p.value, q.value)


class TestMatrixValues:
    def test_as_matrix_rejects_non_finite(self):
        with pytest.raises(NumericError):
            nx.as_matrix([[1.0, np.nan]])

    def test_as_matrix_shape_check(self):
        with pytest.raises(DimensionError):
            nx.as_matrix([[1.0, 2.0]], rows=2)

    def test_parameter_gradient_shape(self):
        p = nx.Parameter(np.ones((2, 5)), "p")
        assert p.grad.shape == p.value.shape
