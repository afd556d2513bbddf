import itertools
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avtower import numerics as nx
from avtower.numerics import GraphError, ShapeError, Tensor, grad_check


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def mp_softmax(xs):
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(float(x))) for x in xs]
        s = mpmath.fsum(e)
        return [float(v / s) for v in e]


def mp_gelu(x):
    with mpmath.workdps(50):
        x = mpmath.mpf(float(x))
        return float(x * (1 + mpmath.erf(x / mpmath.sqrt(2))) / 2)


def loop_rms_norm(x, gain, eps):
    out = np.empty_like(x)
    for idx in itertools.product(*(range(n) for n in x.shape[:-1])):
        row = x[idx]
        ms = 0.0
        for v in row:
            ms += v * v
        ms /= len(row)
        denom = (ms + eps) ** 0.5
        for j in range(len(row)):
            out[idx + (j,)] = row[j] / denom * gain[j]
    return out


# -- matmul ---------------------------------------------------------------
def test_matmul_identity_and_projector():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), a).data, a.data)
    out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop_all_small_shapes():
    rng = np.random.default_rng(0)
    for m, k, n in itertools.product(range(1, 9), repeat=3):
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        nx.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    report = grad_check(lambda x, y: nx.tsum(nx.matmul(x, y)), [a, b], eps=1e-5, tol=1e-6)
    assert report.passed, report.line()


# -- softmax --------------------------------------------------------------
def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)
    assert nx.softmax(Tensor([7.5])).data.tolist() == [1.0]
    np.testing.assert_allclose(nx.softmax(Tensor([1.0, 2.0, 3.0])).data, mp_softmax([1, 2, 3]), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(xs, c):
    x = np.array(xs)
    p = nx.softmax(Tensor(x)).data
    assert abs(p.sum() - 1) < 1e-6 and np.all(p >= 0)
    assert np.max(np.abs(nx.softmax(Tensor(x + c)).data - p)) < 1e-6


def test_softmax_stable_for_large_inputs():
    p = nx.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(p)) and np.allclose(p, 0.5)


# -- rms_norm -------------------------------------------------------------
def test_rms_norm_constant_vector_and_zero_gain():
    for c in (3.0, -0.25):
        out = nx.rms_norm(Tensor(np.full(5, c)), Tensor(np.ones(5)), eps=1e-12).data
        np.testing.assert_allclose(out, np.sign(c), atol=1e-9)
    assert np.all(nx.rms_norm(Tensor(np.arange(4.0)), Tensor(np.zeros(4)), 1e-6).data == 0)


def test_rms_norm_matches_scalar_loop():
    rng = np.random.default_rng(2)
    x, g = rng.standard_normal((3, 2, 7)), rng.standard_normal(7)
    np.testing.assert_allclose(nx.rms_norm(Tensor(x), Tensor(g), 1e-6).data, loop_rms_norm(x, g, 1e-6),
                               rtol=0, atol=1e-12)


# -- elementwise / shape ops ----------------------------------------------
def test_gelu_zero_and_extended_precision_grid():
    assert nx.gelu(Tensor(np.zeros(1))).data[0] == 0.0
    grid = np.linspace(-6, 6, 97)
    ref = np.array([mp_gelu(x) for x in grid])
    np.testing.assert_allclose(nx.gelu(Tensor(grid)).data, ref, rtol=0, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_split_concat_round_trip(data):
    rank = data.draw(st.integers(1, 4))
    base = data.draw(st.lists(st.integers(1, 4), min_size=rank, max_size=rank))
    axis = data.draw(st.integers(0, rank - 1))
    parts = data.draw(st.lists(st.integers(0, 4), min_size=1, max_size=4))
    rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
    xs = []
    for n in parts:
        shape = list(base)
        shape[axis] = n
        xs.append(rng.standard_normal(shape))
    joined = nx.concat([Tensor(x) for x in xs], axis=axis)
    back = nx.split(joined, parts, axis=axis)
    assert len(back) == len(xs)
    for a, b in zip(back, xs):
        assert np.array_equal(a.data, b)


def test_split_size_mismatch_and_reshape_errors():
    with pytest.raises(ShapeError):
        nx.split(Tensor(np.ones((2, 5))), [2, 2], axis=1)
    with pytest.raises(ShapeError):
        nx.reshape(Tensor(np.ones(6)), (4, 2))


def test_broadcasting_add_mul():
    a, b = np.arange(6.0).reshape(2, 3), np.array([1.0, 2.0, 3.0])
    assert np.array_equal(nx.add(Tensor(a), Tensor(b)).data, a + b)
    assert np.array_equal(nx.mul(Tensor(a), Tensor(b)).data, a * b)


# -- backward -------------------------------------------------------------
def test_backward_sum_of_squares_is_2x():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    nx.tsum(nx.square(x)).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_disconnected_leaf_keeps_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    nx.tsum(nx.mul(x, 2.0)).backward()
    assert np.array_equal(y.grad, np.zeros(3))


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        nx.mul(x, 2.0).backward()
    loss = nx.tsum(nx.square(x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_gradients_accumulate_over_reused_nodes():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = nx.mul(x, x)
    nx.tsum(nx.add(y, y)).backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad


# -- grad_check -----------------------------------------------------------
def test_grad_check_linear_function_is_exact():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(5)
    r = grad_check(lambda x: nx.tsum(nx.mul(x, Tensor(w))), [Tensor(rng.standard_normal(5))])
    assert r.passed and r.max_rel_error < 1e-9


def test_grad_check_rejects_non_scalar():
    with pytest.raises(GraphError):
        grad_check(lambda x: nx.mul(x, 2.0), [Tensor(np.ones(3))])


def test_grad_check_catches_wrong_backward(monkeypatch):
    monkeypatch.setattr(nx, "_gelu_grad", lambda x, cdf=None: np.ones_like(x))
    rng = np.random.default_rng(4)
    r = grad_check(lambda x: nx.tsum(nx.gelu(x)), [Tensor(rng.standard_normal(6))])
    assert not r.passed


@pytest.mark.parametrize("op", ["add", "mul", "div", "exp", "gelu", "silu", "softmax", "rms_norm", "transpose"])
def test_ops_pass_grad_check_on_random_shapes(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    for _ in range(4):
        rank = int(rng.integers(1, 5))
        shape = tuple(int(n) for n in rng.integers(1, 4, size=rank))
        x = Tensor(rng.standard_normal(shape))
        proj = rng.standard_normal(shape)
        if op in ("add", "mul", "div"):
            y = Tensor(np.abs(rng.standard_normal(shape[-1:])) + 0.5)
            fn = {"add": nx.add, "mul": nx.mul, "div": nx.div}[op]
            r = grad_check(lambda a, b: nx.tsum(nx.mul(fn(a, b), Tensor(proj))), [x, y])
        elif op == "rms_norm":
            g = Tensor(rng.standard_normal(shape[-1:]))
            r = grad_check(lambda a, b: nx.tsum(nx.mul(nx.rms_norm(a, b, 1e-6), Tensor(proj))), [x, g])
        elif op == "transpose":
            perm = tuple(rng.permutation(rank))
            pt = proj.transpose(perm)
            r = grad_check(lambda a: nx.tsum(nx.mul(nx.transpose(a, perm), Tensor(pt))), [x])
        else:
            f = {"exp": nx.exp, "gelu": nx.gelu, "silu": nx.silu, "softmax": nx.softmax}[op]
            r = grad_check(lambda a: nx.tsum(nx.mul(f(a), Tensor(proj))), [x])
        assert r.passed, r.line()


def test_f32_default_and_nonfinite_detection():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert not nx.parameters_finite([Tensor([np.nan])])
