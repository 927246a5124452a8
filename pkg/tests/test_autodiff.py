import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from twospeed import autodiff as ad
from twospeed.autodiff import Tape, Tensor

import gradcases

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


def grads_of(f, *xs):
    for x in xs:
        x.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return [x.grad for x in xs]


# ---------------------------------------------------------------- forward values


def test_matmul_hand_computed():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity_and_zero():
    a = Tensor(np.random.default_rng(0).standard_normal((3, 3)))
    np.testing.assert_array_equal(ad.matmul(a, Tensor(np.eye(3))).data, a.data)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.zeros((2, 3))), a).data, np.zeros((2, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 3, 5, 5)))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    np.testing.assert_allclose(ad.conv2d(x, Tensor(k), Tensor(np.zeros(3))).data, x.data)


def test_conv_all_ones_center_is_nine():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 3, 3)
    assert out.data[0, 1, 1] == 9.0
    assert out.data[0, 0, 0] == 4.0  # corner sees a 2x2 neighbourhood under zero padding


def test_conv_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[o, i, j] = (xp[:, i : i + 3, j : j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, atol=1e-12)


def test_maxpool_forward_and_tie_break():
    out = ad.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.data.item() == 4.0
    x = Tensor(np.ones((1, 4, 4)), requires_grad=True)
    (g,) = grads_of(lambda: ad.tensor_sum(ad.maxpool2d(x)), x)
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = 1.0  # first element of each window in row-major order
    np.testing.assert_array_equal(g, expected)


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ad.ShapeError):
        ad.maxpool2d(Tensor(np.ones((1, 3, 4))))


def test_activations():
    assert ad.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ad.gelu(Tensor([0.0])).data.item() == 0.0
    # tanh form evaluated by hand: 0.5*3*(1+tanh(sqrt(2/pi)*(3+0.044715*27)))
    assert ad.gelu(Tensor([3.0])).data.item() == pytest.approx(2.996363, abs=1e-6)
    with pytest.raises(ValueError):
        ad.activation(Tensor([1.0]), "swish")


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax(Tensor([math.log(3.0), 0.0])).data, [0.75, 0.25])


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_simplex_even_for_huge_inputs(x):
    p = ad.softmax(Tensor(x)).data
    # exp underflows once a row spans more than ~745; below that every entry is strictly positive
    spread = x.max(axis=-1, keepdims=True) - x
    assert np.all(p[spread < 700] > 0)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, ad.softmax(Tensor(x)).data, atol=1e-12)


def test_layer_norm_constant_and_random():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(ad.layer_norm(Tensor(np.full((2, 4), 7.0)), g, b).data, 0.0)
    x = np.random.default_rng(3).standard_normal((5, 16)) * 3 + 2
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_dropout_identities_and_rate():
    x = Tensor(np.random.default_rng(4).standard_normal((10, 10)))
    assert ad.dropout(x, 0.5, False) is x
    assert ad.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, np.random.default_rng(0))
    y = ad.dropout(Tensor(np.ones(100_000)), 0.3, True, np.random.default_rng(5)).data
    kept = (y != 0).mean()
    assert abs(kept - 0.7) <= 0.01
    np.testing.assert_allclose(y[y != 0], 1 / 0.7)


def test_cross_entropy_examples():
    assert ad.cross_entropy_loss(Tensor(np.zeros((2, 17))), [0, 16]).data == pytest.approx(2.833213344, abs=1e-9)
    big = np.zeros((1, 3))
    big[0, 1] = 60.0
    assert ad.cross_entropy_loss(Tensor(big), [1]).data < 1e-20
    with pytest.raises(ValueError):
        ad.cross_entropy_loss(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(6)
    logits = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    labels = np.array([0, 3, 4, 1])
    (g,) = grads_of(lambda: ad.cross_entropy_loss(logits, labels), logits)
    e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g, (p - np.eye(5)[labels]) / 4, atol=1e-12)


# ---------------------------------------------------------------- backward semantics


def test_backward_linear_and_quadratic():
    x = Tensor(np.arange(5.0), requires_grad=True)
    assert grads_of(lambda: ad.tensor_sum(x), x)[0].tolist() == [1.0] * 5
    np.testing.assert_array_equal(grads_of(lambda: ad.tensor_sum(ad.mul(x, x)), x)[0], 2 * x.data)


def test_backward_diamond_sums_branches():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)

    def f():
        y = ad.mul(x, 3.0)
        return ad.tensor_sum(ad.add(ad.mul(y, y), ad.relu(y)))

    (g,) = grads_of(f, x)
    np.testing.assert_allclose(g, 18 * x.data + 3 * (x.data > 0))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.mul(x, 2.0)
    assert not y.requires_grad


def test_tape_nodes_in_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = ad.mul(x, 2.0)
        b = ad.add(a, x)
        ad.tensor_sum(b)
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert not inp.requires_grad or inp is x or id(inp) in produced
        produced.add(id(node.output))


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = ad.OptimizerState.for_params([p], lr=0.1)
    ad.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.step == 1


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.5]), requires_grad=True)
    st_ = ad.OptimizerState.for_params([p], lr=1e-3)
    ad.adam_step([p], [np.ones(1)], st_)
    # mhat = 1, vhat = 1, step = lr / (1 + eps)
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_decoupled_decay_shrinks_geometrically():
    p = Tensor(np.array([2.0]), requires_grad=True)
    st_ = ad.OptimizerState.for_params([p], lr=0.1, weight_decay=0.5)
    for _ in range(3):
        ad.adam_step([p], [np.zeros(1)], st_)
    assert p.data[0] == pytest.approx(2.0 * 0.95**3, rel=1e-12)
    q = Tensor(np.array([2.0]), requires_grad=True)
    st2 = ad.OptimizerState.for_params([q], lr=0.1, weight_decay=0.5)
    ad.adam_step([q], [np.zeros(1)], st2, decay_mask=[False])
    assert q.data[0] == 2.0


def test_adam_bit_reproducible_and_shape_checked():
    rng = np.random.default_rng(7)
    g = rng.standard_normal((3, 2))
    outs = []
    for _ in range(2):
        p = Tensor(np.ones((3, 2)), requires_grad=True)
        s = ad.OptimizerState.for_params([p], lr=0.01, weight_decay=0.1)
        for _ in range(4):
            ad.adam_step([p], [g], s)
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]
    with pytest.raises(ad.ShapeError):
        ad.adam_step([p], [np.ones(3)], s)


# ---------------------------------------------------------------- finite differences


def test_fd_linear_is_exact():
    x = Tensor(np.random.default_rng(8).standard_normal(6), requires_grad=True)
    assert ad.finite_diff_check(lambda: ad.tensor_sum(x), x) < 1e-9


def test_fd_cubic():
    x = Tensor(np.random.default_rng(9).standard_normal(6), requires_grad=True)
    assert ad.finite_diff_check(lambda: ad.tensor_sum(ad.mul(ad.mul(x, x), x)), x, h=1e-4) <= 1e-6


@pytest.mark.parametrize("name", sorted(gradcases.OP_CASES))
def test_op_gradients(name):
    for seed in range(3):
        assert gradcases.max_case_error(gradcases.OP_CASES[name], seed) <= 1e-4
