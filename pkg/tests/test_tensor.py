import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vitdd import tensor as T
from vitdd.errors import ContractError, DimensionError, LabelError, NumericError
from vitdd.tensor import Tensor

from conftest import central_fd


def leaf(a):
    return Tensor(a, requires_grad=True)


def check_grad(build, shapes, seed=0, tol=1e-5, atol=1e-9):
    """``build(*tensors) -> scalar Tensor``; compares tape gradients to central differences.

    ``atol`` sits above central-difference round-off (about eps*|f|/h = 1e-11)
    so near-zero gradients are not judged on relative noise alone.
    """
    rng = np.random.default_rng(seed)
    arrs = [rng.normal(size=s) for s in shapes]
    ts = [leaf(a) for a in arrs]
    build(*ts).backward()
    fd = central_fd(lambda: build(*[Tensor(a) for a in arrs]).item(), arrs)
    for t, g in zip(ts, fd):
        assert np.linalg.norm(t.grad - g) <= atol + tol * max(np.linalg.norm(t.grad), np.linalg.norm(g)), t.name


# ---- literal examples ------------------------------------------------------

def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))
    # hand expansion: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
    oracle = [[1 * 5 + 2 * 7, 1 * 6 + 2 * 8], [3 * 5 + 4 * 7, 3 * 6 + 4 * 8]]
    assert oracle == [[19, 22], [43, 50]]
    np.testing.assert_array_equal(T.matmul(a, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, oracle)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    z = sum(math.exp(v) for v in (1, 2, 3))
    oracle = [math.exp(v) / z for v in (1, 2, 3)]
    np.testing.assert_allclose(oracle, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, oracle, rtol=0, atol=1e-15)
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.zeros((2, 0))))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift(x, c):
    y = T.softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, y, atol=1e-12)


def test_softmax_shift_bitwise_with_identical_shift():
    x = np.array([[0.3, -1.2, 2.5], [4.0, 4.0, -3.0]])
    # after max subtraction both inputs present identical shifted values
    shifted = x - x.max(-1, keepdims=True)
    np.testing.assert_array_equal(T.softmax(Tensor(x)).data, T.softmax(Tensor(shifted)).data)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor([5.0] * 4), one, zero).data, np.zeros(4))
    b = np.array([0.5, -1.0, 2.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 3))), Tensor(np.zeros(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))
    xs = [1, 2, 3, 4]
    mu = sum(xs) / 4
    sd = math.sqrt(sum((v - mu) ** 2 for v in xs) / 4)
    oracle = [(v - mu) / sd for v in xs]
    np.testing.assert_allclose(oracle, [-1.34164, -0.44721, 0.44721, 1.34164], atol=5e-6)
    np.testing.assert_allclose(T.layer_norm(Tensor(xs), one, zero, eps=0.0).data, oracle, atol=1e-15)
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_moments(x):
    d = x.shape[-1]
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    var = x.var(-1)
    ok = var > 1e-3
    np.testing.assert_allclose(y[ok].mean(-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y[ok].var(-1), var[ok] / (var[ok] + 1e-6), atol=1e-9)


def test_gelu_examples():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    oracle = 1.0 * 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert abs(oracle - 0.8413447) < 5e-8
    assert abs(T.gelu(Tensor(1.0)).item() - oracle) < 1e-15


@given(arrays(np.float64, st.integers(1, 16), elements=st.floats(-30, 30)))
def test_gelu_odd_part_is_identity(x):
    np.testing.assert_allclose(T.gelu(Tensor(x)).data - T.gelu(Tensor(-x)).data, x, atol=1e-12)


def test_cross_entropy_examples():
    assert T.cross_entropy(Tensor([[0.0, 800.0, 0.0]]), [1]).item() == 0.0
    for k in (2, 7, 10):
        assert abs(T.cross_entropy(Tensor(np.zeros((3, k))), [0, 1, 1]).item() - math.log(k)) < 1e-15
    oracle = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert abs(oracle - 0.40761) < 5e-6
    assert abs(T.cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2]).item() - oracle) < 1e-15


def test_cross_entropy_label_error_names_row():
    with pytest.raises(LabelError, match="row 2"):
        T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 3, 4])
    with pytest.raises(LabelError, match="row 0"):
        T.cross_entropy(Tensor(np.zeros((1, 4))), [-1])


# ---- backward contract ---------------------------------------------------

def test_backward_sum_and_dot():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    v = leaf([1.0, -2.0, 0.5])
    T.dot(v, v).backward()
    np.testing.assert_array_equal(v.grad, 2 * v.data)


def test_backward_accumulates_until_zeroed():
    x = leaf([1.0, 2.0])
    T.sum_(x).backward()
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_contract_errors():
    with pytest.raises(ContractError):
        T.backward(leaf(np.ones(3)) * 2.0)
    with pytest.raises(ContractError):
        T.backward(Tensor(1.0))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._node is None


def test_tape_reverse_construction_order():
    x = leaf([1.0, 2.0])
    a = x * 2.0
    b = a + x
    c = T.sum_(b * a)
    tape = T.build_tape(c)
    seqs = [n.seq for n in tape]
    assert seqs == sorted(seqs)
    assert [n.output for n in tape][-1] is c
    produced = {id(n.output) for n in tape}
    # every input is either produced earlier on the tape or is a leaf/constant
    assert all(id(i) in produced or i._node is None for n in tape for i in n.inputs)
    for n in tape:
        assert all(i._node.seq < n.seq for i in n.inputs if i._node is not None)


def test_shared_subexpression_equals_pathwise_sum():
    rng = np.random.default_rng(3)
    xv = rng.normal(size=4)
    x = leaf(xv)
    s = T.gelu(x)
    T.sum_(s * s + s).backward()
    # same function with each use of s fed by an independent copy of x
    x1, x2, x3 = leaf(xv), leaf(xv), leaf(xv)
    T.sum_(T.gelu(x1) * T.gelu(x2) + T.gelu(x3)).backward()
    np.testing.assert_allclose(x.grad, x1.grad + x2.grad + x3.grad, rtol=1e-14, atol=1e-15)


def test_validate_detects_non_finite():
    Tensor([1.0, 2.0]).validate()
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan]).validate()
    with pytest.raises(NumericError):
        Tensor([np.inf]).validate()


# ---- gradients vs finite differences -------------------------------------

W = np.random.default_rng(99).normal(size=(3, 4, 5))  # fixed projection to make outputs scalar


def proj(t):
    return T.sum_(t * Tensor(W[: t.shape[0], : t.shape[1], : t.shape[2]]) if t.ndim == 3
                  else t * Tensor(W[0, : t.shape[0], : t.shape[1]]) if t.ndim == 2
                  else t * Tensor(W[0, 0, : t.shape[0]]))


GRAD_CASES = {
    "add": (lambda a, b: proj(T.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: proj(T.sub(a, b)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: proj(T.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: proj(T.scale(a, -2.5)), [(3, 4)]),
    "embedding_add": (lambda a, p: proj(T.embedding_add(a, p)), [(2, 4, 5), (4, 5)]),
    "reshape": (lambda a: proj(T.reshape(a, (4, 3))), [(3, 4)]),
    "transpose": (lambda a: proj(T.transpose(a, (1, 0, 2))), [(4, 3, 5)]),
    "concat": (lambda a, b: proj(T.concat([a, b], axis=1)), [(3, 1), (3, 3)]),
    "slice": (lambda a: proj(a[1:3, ::2]), [(4, 5)]),
    "sum_axis": (lambda a: proj(T.sum_(a, axis=0)), [(3, 4)]),
    "mean": (lambda a: proj(T.mean(a, axis=1, keepdims=True)), [(3, 4)]),
    "matmul": (lambda a, b: proj(T.matmul(a, b)), [(3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: proj(T.matmul(a, b)), [(3, 4, 2), (2, 5)]),
    "linear": (lambda x, w, b: proj(T.linear(x, w, b)), [(3, 4), (4, 5), (5,)]),
    "softmax": (lambda a: proj(T.softmax(a, axis=-1)), [(3, 5)]),
    "softmax_axis0": (lambda a: proj(T.softmax(a, axis=0)), [(3, 5)]),
    "layer_norm": (lambda x, g, b: proj(T.layer_norm(x, g, b)), [(3, 5), (5,), (5,)]),
    "gelu": (lambda a: proj(T.gelu(a)), [(3, 4)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, [0, 4, 2]), [(3, 5)]),
    "dot": (lambda a, b: T.dot(a, b), [(5,), (5,)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(name, seed):
    build, shapes = GRAD_CASES[name]
    check_grad(build, shapes, seed)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
@example(1, 1, 2, 3)  # two-feature layer norm: input gradients near 1e-7
def test_composed_graph_gradients(b, n, k, seed):
    def build(x, w, g, be):
        h = T.gelu(T.matmul(x, w))
        h = T.layer_norm(h, g, be)
        return T.cross_entropy(h, np.arange(b) % k)

    check_grad(build, [(b, n), (n, k), (k,), (k,)], seed)


# ---- bijections ------------------------------------------------------------

@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=1, max_size=4), elements=st.floats(-1, 1)),
       st.randoms(use_true_random=False))
def test_reshape_transpose_bijections(x, r):
    t = Tensor(x)
    back = T.reshape(T.reshape(t, (-1,)), x.shape)
    np.testing.assert_array_equal(back.data, x)
    axes = list(range(x.ndim))
    r.shuffle(axes)
    inv = np.argsort(axes)
    np.testing.assert_array_equal(T.transpose(T.transpose(t, tuple(axes)), tuple(inv)).data, x)


def test_storage_is_flat_row_major():
    t = Tensor(np.arange(6.0).reshape(2, 3).T)
    assert t.data.flags["C_CONTIGUOUS"] and t.size == int(np.prod(t.shape))
    np.testing.assert_array_equal(t.data.ravel(), [0, 3, 1, 4, 2, 5])
