import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msalign import tensor_core as tc
from msalign.errors import ContractError, DimensionError, EvaluationError, ParameterError
from msalign.tensor_core import GradTape, Tensor, backward


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = tc.matmul(Tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_value():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_softmax_rows_uniform_row():
    out = tc.softmax_rows(Tensor([[2.5, 2.5, 2.5]]), 0.3)
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_rows_two_logits():
    out = tc.softmax_rows(Tensor([[1.0, 0.0]]), 1.0)
    e = np.e
    np.testing.assert_allclose(out.data, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-14)
    np.testing.assert_allclose(out.data, [[0.7311, 0.2689]], atol=1e-4)


def test_softmax_rows_flat_limit():
    out = tc.softmax_rows(Tensor([[1.0, 0.0]]), 1e9)
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-9)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rows_rejects_bad_temperature(t):
    with pytest.raises(ParameterError):
        tc.softmax_rows(Tensor([[1.0, 0.0]]), t)


def test_backward_sum_gives_ones():
    tape = GradTape()
    x = tape.watch(np.arange(6.0).reshape(2, 3))
    grads = backward(x.sum())
    np.testing.assert_array_equal(grads[x.tape_id].data, np.ones((2, 3)))


def test_backward_sum_of_squares():
    tape = GradTape()
    x = tape.watch([1.0, 2.0, 3.0])
    grads = backward((x * x).sum())
    np.testing.assert_array_equal(grads[x.tape_id].data, [2.0, 4.0, 6.0])


def test_backward_without_tracked_leaves_is_empty():
    assert backward(Tensor([1.0, 2.0]).sum()) == {}


def test_backward_untouched_leaf_gets_zeros():
    tape = GradTape()
    x = tape.watch([1.0, 2.0])
    y = tape.watch(np.ones((2, 2)))
    grads = backward((x * 3.0).sum())
    np.testing.assert_array_equal(grads[y.tape_id].data, np.zeros((2, 2)))
    assert set(grads) == {x.tape_id, y.tape_id}


def test_backward_rejects_non_scalar():
    tape = GradTape()
    x = tape.watch([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_detach_blocks_gradient():
    tape = GradTape()
    x = tape.watch([1.0, 2.0])
    grads = backward((x * tc.detach(x)).sum())
    np.testing.assert_array_equal(grads[x.tape_id].data, [1.0, 2.0])


def test_grad_check_linear_exact():
    err = tc.grad_check(lambda p: (p[0] * 3.0).sum(), [np.random.default_rng(0).normal(size=(3, 4))],
                        eps=1e-5, probes=12)
    assert err < 1e-10


def test_grad_check_skips_hinge_kink():
    report = tc.check_gradients(lambda p: tc.relu(p[0]).sum(), [np.zeros(1)], eps=1e-5, probes=1)
    assert report.skipped == 1 and report.checked == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_flags_non_finite():
    with pytest.raises(EvaluationError):
        tc.grad_check(lambda p: tc.log(p[0]).sum(), [np.array([-1.0])], probes=1)


def test_grad_check_eps_range():
    with pytest.raises(ParameterError):
        tc.grad_check(lambda p: p[0].sum(), [np.ones(2)], eps=1e-2)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                     elements=st.floats(-50, 50))


@given(finite_rows)
def test_softmax_rows_sum_to_one(m):
    out = tc.softmax_rows(Tensor(m), 1.0).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


@given(finite_rows, st.floats(-50, 50))
def test_softmax_rows_shift_invariant(m, c):
    shift = np.linspace(-1, 1, m.shape[0])[:, None] * c
    a = tc.softmax_rows(Tensor(m), 0.7).data
    b = tc.softmax_rows(Tensor(m + shift), 0.7).data
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=30)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_backward_is_linear(x0):
    def grads_of(fn):
        tape = GradTape()
        x = tape.watch(x0)
        return backward(fn(x))[x.tape_id].data

    f1 = lambda x: (tc.tanh(x) * x).sum()
    f2 = lambda x: tc.log_softmax(x, axis=1).sum() + tc.exp(x * 0.1).mean()
    both = grads_of(lambda x: f1(x) + f2(x))
    np.testing.assert_allclose(both, grads_of(f1) + grads_of(f2), atol=1e-12)


def _rand(*shape, seed=0, low=None):
    x = np.random.default_rng(seed).normal(size=shape)
    return np.abs(x) + low if low is not None else x


OPS = {
    "add": (lambda p: (p[0] + p[1]).sum(), [_rand(3, 4), _rand(1, 4, seed=1)]),
    "sub": (lambda p: ((p[0] - p[1]) * p[0]).sum(), [_rand(3, 4), _rand(4, seed=1)]),
    "mul": (lambda p: (p[0] * p[1] * p[0]).sum(), [_rand(3, 4), _rand(3, 1, seed=1)]),
    "div": (lambda p: (p[0] / p[1]).sum(), [_rand(3, 4), _rand(3, 4, seed=1, low=0.5)]),
    "matmul": (lambda p: tc.tanh(p[0] @ p[1]).sum(), [_rand(3, 4), _rand(4, 2, seed=1)]),
    "einsum": (lambda p: tc.tanh(tc.einsum("bij,jk->bik", p[0], p[1])).sum(),
               [_rand(2, 3, 4), _rand(4, 5, seed=1)]),
    "einsum3": (lambda p: tc.einsum("ij,jk,k->i", p[0], p[1], p[2]).sum(),
                [_rand(2, 3), _rand(3, 4, seed=1), _rand(4, seed=2)]),
    "exp": (lambda p: tc.exp(p[0]).sum(), [_rand(5)]),
    "log": (lambda p: tc.log(p[0]).sum(), [_rand(5, low=0.5)]),
    "sqrt": (lambda p: tc.sqrt(p[0]).sum(), [_rand(5, low=0.5)]),
    "tanh": (lambda p: tc.tanh(p[0]).sum(), [_rand(5)]),
    "sigmoid": (lambda p: (tc.sigmoid(p[0]) * p[0]).sum(), [_rand(5)]),
    "relu": (lambda p: (tc.relu(p[0]) * p[0]).sum(), [_rand(6)]),
    "mean": (lambda p: (tc.mean(p[0], axis=1) * tc.mean(p[0], axis=1)).sum(), [_rand(3, 4)]),
    "sum_keepdims": (lambda p: (tc.tsum(p[0], axis=0, keepdims=True) * p[0]).sum(), [_rand(3, 4)]),
    "max": (lambda p: (tc.tmax(p[0], axis=1) * tc.tmax(p[0], axis=1)).sum(), [_rand(3, 4)]),
    "softmax_rows": (lambda p: (tc.softmax_rows(p[0], 0.5) * p[1]).sum(), [_rand(3, 4), _rand(3, 4, seed=1)]),
    "masked_softmax": (lambda p: (tc.softmax(p[0], axis=1, mask=np.array([[1, 1, 0, 1]] * 3, bool))
                                  * p[1]).sum(), [_rand(3, 4), _rand(3, 4, seed=1)]),
    "log_softmax": (lambda p: (tc.log_softmax(p[0], axis=0) * p[1]).sum(), [_rand(3, 4), _rand(3, 4, seed=1)]),
    "l2_normalize": (lambda p: (tc.l2_normalize(p[0], axis=1) * p[1]).sum(), [_rand(3, 4), _rand(3, 4, seed=1)]),
    "reshape_transpose": (lambda p: (p[0].reshape(4, 3).T * p[1]).sum(), [_rand(3, 4), _rand(3, 4, seed=1)]),
    "getitem": (lambda p: (p[0][np.array([0, 2, 0])] * p[1]).sum(), [_rand(3, 4), _rand(3, 4, seed=1)]),
    "concat_stack": (lambda p: (tc.concat([p[0], p[1]], axis=1).sum(axis=1)
                                * tc.stack([p[0][:, 0], p[1][:, 1]], axis=1).sum(axis=1)).sum(),
                     [_rand(3, 4), _rand(3, 2, seed=1)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_every_op(name):
    f, params = OPS[name]
    assert tc.grad_check(f, params, eps=1e-5, probes=50) < 1e-6
