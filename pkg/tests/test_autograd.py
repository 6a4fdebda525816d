import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rnflm import autograd as ag
from rnflm.autograd import Tensor
from rnflm.errors import ContractError, DomainError, NonFiniteError, ShapeError, VocabularyError

RTOL = 1e-4


def leaf(rng, shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def check(fn, tensors):
    err = ag.gradient_errors(fn, tensors)
    assert err < RTOL, err


# one builder per op kind: rng -> (scalar closure, leaves)
def _unary(op, low=-2.0, high=2.0):
    def build(rng):
        x = leaf(rng, (3, 4), low, high)
        w = rng.normal(size=(3, 4))
        return (lambda: ag.sum_(op(x) * w)), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = leaf(rng, (3, 4))
        b = leaf(rng, (4,), 0.5, 2.0) if positive_b else leaf(rng, (4,))
        w = rng.normal(size=(3, 4))
        return (lambda: ag.sum_(op(a, b) * w)), [a, b]
    return build


def _matmul(rng):
    a, b = leaf(rng, (3, 4)), leaf(rng, (4, 2))
    w = rng.normal(size=(3, 2))
    return (lambda: ag.sum_(ag.matmul(a, b) * w)), [a, b]


def _concat(rng):
    a, b = leaf(rng, (2, 3)), leaf(rng, (2, 2))
    w = rng.normal(size=(2, 5))
    return (lambda: ag.sum_(ag.concat([a, b], axis=1) * w)), [a, b]


def _slice(rng):
    a = leaf(rng, (4, 5))
    idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 4, 0]))
    return (lambda: ag.sum_(ag.square(a[idx])) + ag.sum_(a[1:3, ::2])), [a]


def _embedding(rng):
    table = leaf(rng, (6, 3))
    ids = np.array([[0, 5, 5], [2, 1, 0]])
    w = rng.normal(size=(2, 3, 3))
    return (lambda: ag.sum_(ag.embedding(table, ids) * w)), [table]


def _log_softmax(rng):
    x = leaf(rng, (3, 5))
    w = rng.normal(size=(3, 5))
    return (lambda: ag.sum_(ag.log_softmax(x, axis=-1) * w)), [x]


def _dropout(rng):
    x = leaf(rng, (3, 4))
    mask = (rng.random((3, 4)) > 0.3).astype(float)
    return (lambda: ag.sum_(ag.square(ag.dropout_apply(x, mask, 0.3)))), [x]


def _reductions(rng):
    x = leaf(rng, (3, 4))
    w = rng.normal(size=4)
    return (lambda: ag.sum_(ag.mean(ag.square(x), axis=0) * w) + ag.mean(x)), [x]


def _reshape_transpose(rng):
    x = leaf(rng, (2, 6))
    w = rng.normal(size=(4, 3))
    return (lambda: ag.sum_(ag.transpose(ag.reshape(x, (3, 4))) * w)), [x]


OP_CASES = {
    "add": _binary(ag.add),
    "sub": _binary(ag.sub),
    "mul": _binary(ag.mul),
    "div": _binary(ag.div, positive_b=True),
    "matmul": _matmul,
    "tanh": _unary(ag.tanh),
    "sigmoid": _unary(ag.sigmoid),
    "exp": _unary(ag.exp),
    "log": _unary(ag.log, 0.2, 2.0),
    "softplus": _unary(ag.softplus),
    "square": _unary(ag.square),
    "sqrt": _unary(ag.sqrt, 0.2, 2.0),
    "sum/mean": _reductions,
    "concat": _concat,
    "slice": _slice,
    "embedding-lookup": _embedding,
    "log-softmax": _log_softmax,
    "dropout-mask-apply": _dropout,
    "reshape/transpose": _reshape_transpose,
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(50):
        fn, tensors = OP_CASES[kind](rng)
        check(fn, tensors)


class TestForwardExamples:
    def test_tanh_at_origin(self):
        np.testing.assert_array_equal(ag.forward_op("tanh", [Tensor([0.0])]).data, [0.0])

    def test_matmul_with_ones_gives_row_sums(self):
        a = np.arange(6.0).reshape(2, 3)
        out = ag.forward_op("matmul", [Tensor(a), Tensor(np.ones((3, 1)))])
        np.testing.assert_array_equal(out.data[:, 0], a.sum(axis=1))

    def test_log_softmax_uniform(self):
        out = ag.forward_op("log-softmax", [Tensor([1.0, 1.0, 1.0])])
        np.testing.assert_allclose(out.data, -np.log(3.0) * np.ones(3), rtol=1e-15)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            ag.forward_op("conv", [Tensor([1.0])])


class TestBackwardExamples:
    def test_sum_gives_ones(self):
        z = Tensor([0.3, -1.0, 2.0], requires_grad=True)
        ag.backward(ag.sum_(z))
        np.testing.assert_array_equal(z.grad, np.ones(3))

    def test_tanh_derivative(self):
        z = Tensor([0.5], requires_grad=True)
        ag.backward(ag.sum_(ag.tanh(z)))
        np.testing.assert_allclose(z.grad, [1.0 - np.tanh(0.5) ** 2], rtol=1e-14)
        numeric = ag.numerical_gradient(lambda: ag.sum_(ag.tanh(z)), [z])[0]
        np.testing.assert_allclose(z.grad, numeric, rtol=1e-9)

    def test_matrix_vector(self, rng):
        a = rng.normal(size=(4, 3))
        x = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        ag.backward(ag.sum_(ag.matmul(Tensor(a), x)))
        np.testing.assert_allclose(x.grad[:, 0], a.T @ np.ones(4), rtol=1e-14)
        numeric = ag.numerical_gradient(lambda: ag.sum_(ag.matmul(Tensor(a), x)), [x])[0]
        np.testing.assert_allclose(x.grad, numeric, rtol=1e-8)

    def test_repeated_calls_accumulate(self):
        z = Tensor([1.0, 2.0], requires_grad=True)
        ag.backward(ag.sum_(ag.square(z)))
        ag.backward(ag.sum_(ag.square(z)))
        np.testing.assert_array_equal(z.grad, [4.0, 8.0])

    def test_fan_out_sums_contributions(self, rng):
        x = leaf(rng, (5,))

        def fn():
            h = ag.tanh(x)
            return ag.sum_(h * h) + ag.sum_(ag.exp(h))

        check(fn, [x])

    def test_non_scalar_root_rejected(self):
        z = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ag.backward(z * 2.0)

    def test_root_off_graph_rejected(self):
        with pytest.raises(ContractError):
            ag.backward(ag.sum_(Tensor([1.0])))

    def test_topological_order_visits_each_node_once(self, rng):
        x = leaf(rng, (3,))
        h = ag.tanh(x)
        root = ag.sum_(h * h + h)
        order = ag.topological_order(root)
        assert len(order) == len({id(n) for n in order})
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(node)]

    def test_seeded_rerun_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            a, b = leaf(rng, (4, 4)), leaf(rng, (4, 2))
            ag.backward(ag.sum_(ag.log_softmax(ag.tanh(ag.matmul(a, b)), axis=0)))
            return a.grad, b.grad

        (a1, b1), (a2, b2) = run(), run()
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)


class TestErrors:
    def test_non_finite_construction(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_overflowing_op(self):
        with pytest.raises(NonFiniteError):
            ag.exp(Tensor([1000.0]))

    @pytest.mark.parametrize("op", [ag.log, ag.sqrt])
    def test_domain(self, op):
        with pytest.raises(DomainError):
            op(Tensor([1.0, 0.0]))

    def test_shape_mismatch_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="add"):
            ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_embedding_out_of_range(self):
        with pytest.raises(VocabularyError):
            ag.embedding(Tensor(np.ones((3, 2))), np.array([3]))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ag.no_grad():
            y = ag.tanh(x)
        assert not y.requires_grad and y._parents == ()


@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, (2,), elements=st.floats(-3, 3)))
def test_broadcast_gradient_unbroadcasts(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ag.backward(ag.sum_(ta * tb))
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, (3, 2)))
    np.testing.assert_allclose(tb.grad, a.sum(axis=0))
    assert ta.grad.shape == a.shape and tb.grad.shape == b.shape
