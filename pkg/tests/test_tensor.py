"""Tensor engine: op semantics, backward rules, finite-difference oracle."""

import numpy as np
import pytest

from xft import tensor as tn


def t(data, requires_grad=False, dtype=np.float32):
    return tn.Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        m = t([[3.0, 2.0], [2.0, 3.0]])
        out = tn.matmul(t(np.eye(2)), m)
        assert np.array_equal(out.data, m.data)

    def test_hand_expanded_2x2(self):
        # [[1,2],[3,4]] x [[5,6],[7,8]]: row-by-column expansion by hand
        out = t([[1.0, 2.0], [3.0, 4.0]]) @ t([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(out.data, np.array([[19.0, 22.0], [43.0, 50.0]], dtype=np.float32))

    def test_zero_matrix(self):
        out = t(np.zeros((2, 3))) @ t(np.arange(12.0).reshape(3, 4))
        assert np.array_equal(out.data, np.zeros((2, 4), dtype=np.float32))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 4\)"):
            t(np.zeros((2, 3))) @ t(np.zeros((2, 4)))


class TestSoftmax:
    def test_symmetric_input(self):
        out = tn.softmax(t([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_single_element(self):
        out = tn.softmax(t([4.2]))
        assert out.data[0] == pytest.approx(1.0)

    def test_high_precision_values(self):
        # frozen from a float64 exp/sum evaluation of [1.0, 0.5, 0.0]
        out = tn.softmax(t([1.0, 0.5, 0.0]))
        assert np.allclose(out.data, [0.506479, 0.307196, 0.186325], atol=1e-5)

    def test_sums_to_one_up_to_length_4096(self):
        rng = np.random.default_rng(7)
        for n in (1, 2, 3, 17, 512, 4096):
            v = t(rng.normal(scale=50.0, size=n))
            assert abs(float(tn.softmax(v).data.sum()) - 1.0) < 1e-6

    def test_extreme_magnitudes_stable(self):
        out = tn.softmax(t([1e30, 0.0, -1e30]))
        assert np.isfinite(out.data).all()
        assert abs(float(out.data.sum()) - 1.0) < 1e-6

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            tn.softmax(t([np.nan, 0.0]))


class TestBackward:
    def test_power_rule(self):
        x = t([3.0], requires_grad=True)
        y = (x * x).sum()
        tn.backward(y)
        assert x.grad[0] == pytest.approx(6.0)

    def test_constant_root_leaves_grads_empty(self):
        x = t([1.0, 2.0], requires_grad=True)
        c = t([5.0]).sum()
        tn.backward(c)  # no tracked inputs: no-op
        assert x.grad is None

    def test_non_scalar_root_rejected(self):
        x = t([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            tn.backward(x * 2.0)

    def test_accumulation_doubles_exactly(self):
        rng = np.random.default_rng(3)
        x = t(rng.normal(size=(4, 3)), requires_grad=True)
        w = t(rng.normal(size=(3, 2)), requires_grad=True)
        loss = tn.gelu(x @ w).sum()
        tn.backward(loss)
        gx, gw = x.grad.copy(), w.grad.copy()
        tn.backward(loss)
        assert np.array_equal(x.grad, 2 * gx)
        assert np.array_equal(w.grad, 2 * gw)

    def test_shared_subgraph_accumulates_once_per_path(self):
        x = t([2.0], requires_grad=True)
        y = x * 3.0
        z = (y + y).sum()  # dz/dx = 6
        tn.backward(z)
        assert x.grad[0] == pytest.approx(6.0)

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = t(rng.normal(size=(5, 6)), dtype=np.float64)
        w1 = t(rng.normal(size=(6, 8)), requires_grad=True, dtype=np.float64)
        b1 = t(rng.normal(size=(8,)), requires_grad=True, dtype=np.float64)
        w2 = t(rng.normal(size=(8, 4)), requires_grad=True, dtype=np.float64)
        targets = np.array([0, 3, 1, 2, 0])

        def f():
            logits = tn.gelu(x @ w1 + b1) @ w2
            logp = tn.log_softmax(logits)
            return -tn.take_along_rows(logp, targets[:, None]).mean()

        err = tn.finite_diff_check(f, [w1, b1, w2], h=1e-3)
        assert err < 1e-3


class TestFiniteDiffCheck:
    def test_sum_of_squares_is_nearly_exact(self):
        x = t([1.0, -2.0, 0.5], requires_grad=True, dtype=np.float64)
        err = tn.finite_diff_check(lambda: (x * x).sum(), [x])
        assert err < 1e-6

    def test_softmax_cross_entropy_composite(self):
        rng = np.random.default_rng(5)
        z = t(rng.normal(size=(3, 7)), requires_grad=True, dtype=np.float64)
        targets = np.array([1, 6, 0])

        def f():
            return -tn.take_along_rows(tn.log_softmax(z), targets[:, None]).mean()

        assert tn.finite_diff_check(f, [z]) < 1e-3

    def test_constant_function_reports_zero_error(self):
        x = t([1.0, 2.0], requires_grad=True, dtype=np.float64)
        c = t([4.0])
        err = tn.finite_diff_check(lambda: (c * c).sum(), [x])
        assert err == 0.0


# Relative-error tolerance for per-op gradient checks (float64 probes).
FD_TOL = 1e-3

# (name, op over param tensors, param shapes); op output is read out through
# a fixed random weighting so every element carries a distinct gradient.
OP_CASES = [
    ("add.same", lambda a, b: a + b, [(3, 5), (3, 5)]),
    ("add.bias", lambda a, b: a + b, [(4, 3), (3,)]),
    ("sub", lambda a, b: a - b, [(2, 6), (2, 6)]),
    ("rsub", lambda a: 1.0 - a, [(3, 2)]),
    ("mul.same", lambda a, b: a * b, [(3, 4), (3, 4)]),
    ("mul.scalar_tensor", lambda s, m: s * m, [(1, 1), (4, 3)]),
    ("mul.column", lambda c, m: c * m, [(5, 1), (5, 4)]),
    ("matmul", lambda a, b: a @ b, [(3, 4), (4, 2)]),
    ("transpose", lambda a: a.transpose(), [(3, 5)]),
    ("reshape", lambda a: a.reshape((8, 3)), [(4, 6)]),
    ("gather_rows", lambda a: tn.gather_rows(a, [0, 2, 2, 5]), [(6, 3)]),
    ("take_along_rows",
     lambda a: tn.take_along_rows(a, np.array([[0, 3], [1, 1], [4, 0], [2, 3]])),
     [(4, 5)]),
    ("scatter_rows", lambda a: tn.scatter_rows(a, [1, 4, 1], 6), [(3, 4)]),
    ("slice_cols", lambda a: tn.slice_cols(a, 1, 4), [(3, 6)]),
    ("concat_cols", lambda a, b: tn.concat_cols([a, b]), [(3, 2), (3, 4)]),
    ("softmax", tn.softmax, [(3, 6)]),
    ("log_softmax", tn.log_softmax, [(3, 6)]),
    ("gelu", tn.gelu, [(4, 4)]),
    ("identity", tn.identity, [(4, 4)]),
    ("layer_norm", tn.layer_norm, [(4, 6), (6,), (6,)]),
]


class TestGradientsAllOps:
    """Every differentiable op vs central differences, 100 random trials."""

    @pytest.mark.parametrize("name,op,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
    def test_random_trials(self, name, op, shapes):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        for _ in range(5):
            params = [tn.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
            out_shape = op(*params).shape
            readout = tn.Tensor(rng.normal(size=out_shape))
            f = lambda: (op(*params) * readout).sum()
            err = tn.finite_diff_check(f, params)
            assert err < FD_TOL, f"{name}: fd error {err}"


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = t([1.0, 2.0], requires_grad=True)
        with tn.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert y.is_leaf()

    def test_reenabled_after_block(self):
        x = t([1.0], requires_grad=True)
        with tn.no_grad():
            pass
        y = (x * 2.0).sum()
        tn.backward(y)
        assert x.grad[0] == pytest.approx(2.0)


class TestInvariants:
    def test_data_length_matches_shape(self):
        x = t(np.zeros((3, 5)))
        assert x.size == 15 and x.shape == (3, 5)

    def test_grad_shape_matches_data(self):
        x = t(np.ones((2, 3)), requires_grad=True)
        tn.backward((x * x).sum())
        assert x.grad.shape == x.data.shape

    def test_default_dtype_is_float32(self):
        assert t([1, 2, 3]).dtype == np.float32

    def test_broadcast_outside_supported_cases_rejected(self):
        with pytest.raises(ValueError):
            t(np.zeros((2, 3))) + t(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            t(np.zeros((2, 3))) * t(np.zeros((4, 3)))
