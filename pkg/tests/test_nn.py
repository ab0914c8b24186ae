import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from n1gin.nn import (
    Activation, AdamState, BatchNorm1d, Dense, Mlp, Mode, Param, Tape, TapeError, Var, adam_step, add,
    backward, bce_loss, concat, grad_check, linear, load_state_dict, mlp_forward, relu, scale_one_plus,
    segment_max, sigmoid, spmm, state_dict,
)

seeds = st.integers(0, 2**32 - 1)


def numeric_grad(f, p, h=1e-6):
    """Central differences of ``f(tape) -> Var`` with respect to one parameter array.

    Entries whose probes fall on different sides of a kink come back as nan.
    """
    t = Tape()
    f(t)
    base = t.branches()

    def probe():
        t = Tape()
        value = f(t).value.item()
        return value, all(np.array_equal(a, b) for a, b in zip(t.branches(), base))

    out = np.zeros_like(p.value)
    flat = p.value.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up, ok_up = probe()
        flat[j] = orig - h
        down, ok_down = probe()
        flat[j] = orig
        out.reshape(-1)[j] = (up - down) / (2 * h) if ok_up and ok_down else np.nan
    return out


def total(x, tape):
    return linear(x, Var(np.ones((1, x.value.shape[1]))), tape=tape)


def scalar_sum(x, tape):
    rows = spmm(sp.csr_matrix(np.ones((1, x.value.shape[0]))), x, tape)
    return total(rows, tape)


# --- backward ---------------------------------------------------------------------

def test_w_squared():
    w = Param(np.array([[3.0]]))
    tape = Tape()
    backward(tape, linear(w, w, tape=tape), [w])  # w * w
    assert w.grad[0, 0] == pytest.approx(6.0)


def test_relu_gradient_at_negative_input():
    x = Param(np.array([[-2.0, 3.0]]))
    tape = Tape()
    backward(tape, total(relu(x, tape), tape), [x])
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])


def test_unreached_params_get_zero_grad():
    a, b = Param(np.ones((1, 2))), Param(np.full((1, 2), 5.0))
    b.grad = np.full((1, 2), 9.0)
    tape = Tape()
    backward(tape, total(a, tape), [a, b])
    np.testing.assert_array_equal(b.grad, 0.0)
    np.testing.assert_array_equal(a.grad, 1.0)


def test_backward_errors():
    a = Param(np.ones((1, 2)))
    with pytest.raises(TapeError):
        backward(Tape(), total(a, None))
    tape = Tape()
    x = relu(a, tape)
    y = relu(x, tape)
    tape.nodes[0].inputs = (y,)  # x now consumes y: a cycle
    with pytest.raises(TapeError, match="cycle"):
        backward(tape, total(y, tape))
    tape = Tape()
    with pytest.raises(ValueError):
        backward(tape, relu(a, tape))
    tape = Tape()
    backward(tape, total(a, tape))
    with pytest.raises(TapeError):
        relu(a, tape)


@given(seeds)
def test_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Param(rng.normal(size=(5, 3)))
    w = Param(rng.normal(size=(4, 3)))
    b = Param(rng.normal(size=4))
    eps = Param(np.array(rng.normal()))
    mat = sp.csr_matrix(rng.normal(size=(6, 5)) * (rng.random((6, 5)) < 0.5))
    seg = np.concatenate([[0, 1, 2], rng.integers(0, 3, size=3)])
    head = 0.3 * rng.normal(size=(1, 12))  # keeps the sigmoid away from saturation
    target = rng.integers(0, 2, size=(3, 1)).astype(float)

    def f(tape=None):
        h = linear(x, w, b, tape)
        h = relu(add(h, scale_one_plus(h, eps, tape), tape), tape)
        m = segment_max(spmm(mat, h, tape), seg, 3, tape)
        z = concat([m, sigmoid(m, tape), m], tape)
        return bce_loss(sigmoid(linear(z, Var(head), tape=tape), tape), target, tape)

    tape = Tape()
    params = [x, w, b, eps]
    backward(tape, f(tape), params)
    for p in params:
        expected = numeric_grad(f, p, h=1e-4)
        smooth = np.isfinite(expected)
        np.testing.assert_allclose(p.grad[smooth], expected[smooth], rtol=1e-5, atol=1e-6)


def test_segment_max_routes_gradient_to_first_max():
    x = Param(np.array([[1.0], [3.0], [3.0], [2.0]]))
    tape = Tape()
    m = segment_max(x, np.array([0, 0, 0, 1]), 2, tape)
    np.testing.assert_array_equal(m.value, [[3.0], [2.0]])
    backward(tape, scalar_sum(m, tape), [x])
    np.testing.assert_array_equal(x.grad.ravel(), [0, 1, 0, 1])


def test_tape_records_kink_branches():
    x = Var(np.array([[-1.0, 2.0]]))
    tape = Tape()
    relu(x, tape)
    add(x, x, tape)
    (mask,) = tape.branches()
    np.testing.assert_array_equal(mask, [[False, True]])


# --- loss -------------------------------------------------------------------------------

def test_bce_examples():
    assert float(bce_loss(Var([0.5]), [1.0]).value) == pytest.approx(np.log(2))
    assert float(bce_loss(Var([1.0]), [1.0]).value) == pytest.approx(0.0, abs=1e-6)
    assert float(bce_loss(Var([0.9, 0.1]), [1.0, 0.0]).value) == pytest.approx(-np.log(0.9))
    assert float(bce_loss(Var([0.9, 0.1]), [1.0, 0.0]).value) == pytest.approx(0.1054, abs=1e-4)


def test_bce_clamps_and_checks_shapes():
    assert np.isfinite(bce_loss(Var([0.0]), [1.0]).value)
    with pytest.raises(ValueError):
        bce_loss(Var([0.5, 0.5]), [1.0])
    p = Param(np.array([0.0, 0.3]))
    tape = Tape()
    backward(tape, bce_loss(p, [1.0, 1.0], tape), [p])
    assert p.grad[0] == 0.0 and p.grad[1] == pytest.approx(-1 / (2 * 0.3))


# --- layers -------------------------------------------------------------------------------

def identity_mlp(dim):
    mlp = Mlp([dim, dim], np.random.default_rng(0), batch_norm=[True])
    mlp.dense[0].weight.value = np.eye(dim)
    mlp.set_mode(Mode.EVAL)
    return mlp


def test_identity_mlp_is_relu():
    mlp = identity_mlp(3)
    x = np.array([[1.0, -2.0, 0.5], [-1.0, 4.0, 0.0]])
    out = mlp_forward(mlp, x).value
    np.testing.assert_allclose(out, np.maximum(x, 0) / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_zero_weights_give_constant_output():
    mlp = Mlp([3, 4], np.random.default_rng(1), batch_norm=[False], activations=[Activation.IDENTITY])
    mlp.dense[0].weight.value[:] = 0
    out = mlp_forward(mlp, np.random.default_rng(2).normal(size=(5, 3))).value
    np.testing.assert_array_equal(out, np.tile(mlp.dense[0].bias.value, (5, 1)))
    bn = Mlp([3, 4], np.random.default_rng(1))
    bn.dense[0].weight.value[:] = 0
    bn.norm[0].beta.value = np.array([1.0, -1.0, 2.0, 0.0])
    out = mlp_forward(bn, np.ones((5, 3))).value
    np.testing.assert_array_equal(out, np.tile([1.0, 0.0, 2.0, 0.0], (5, 1)))


def test_eval_mode_batch_independent():
    mlp = Mlp([3, 16, 16], np.random.default_rng(3))
    mlp_forward(mlp, np.random.default_rng(4).normal(size=(20, 3)))  # populate running stats
    mlp.set_mode(Mode.EVAL)
    row = np.array([[0.3, -1.0, 2.0]])
    one = mlp_forward(mlp, row).value
    two = mlp_forward(mlp, np.vstack([row, row])).value
    np.testing.assert_array_equal(two[0], two[1])
    # BLAS may round differently for a different row count
    np.testing.assert_allclose(two, np.vstack([one, one]), rtol=0, atol=1e-14)


def test_mlp_shape_errors():
    mlp = Mlp([3, 4], np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(mlp, np.ones((2, 5)))
    with pytest.raises(ValueError):
        Mlp([3], np.random.default_rng(0))
    with pytest.raises(ValueError):
        Mlp([3, 4, 5], np.random.default_rng(0), batch_norm=[True])


def test_dense_before_batch_norm_has_no_bias():
    mlp = Mlp([3, 4, 1], np.random.default_rng(0), batch_norm=[True, False])
    assert mlp.dense[0].bias is None and mlp.dense[1].bias is not None


def test_init_bounds():
    d = Dense(9, 50, np.random.default_rng(0))
    assert np.abs(d.weight.value).max() <= 1 / 3
    assert np.abs(d.weight.value).max() > 0.25


@given(seeds, st.integers(16, 64))
def test_batch_norm_train_statistics(seed, n):
    rng = np.random.default_rng(seed)
    bn = BatchNorm1d(4)
    bn.gamma.value = rng.uniform(-3, 3, 4)
    bn.beta.value = rng.normal(size=4)
    x = rng.normal(size=(n, 4)) * rng.uniform(0.5, 5, 4) + rng.normal(size=4) * 10
    out = bn(Var(x)).value
    np.testing.assert_allclose(out.mean(axis=0), bn.beta.value, atol=1e-5)
    var = x.var(axis=0)
    np.testing.assert_allclose(out.std(axis=0), np.abs(bn.gamma.value) * np.sqrt(var / (var + 1e-5)), rtol=1e-9)
    big = var >= 1.0  # eps is negligible once the batch variance is O(1)
    np.testing.assert_allclose(out.std(axis=0)[big], np.abs(bn.gamma.value)[big], rtol=1e-5)
    assert np.all(bn.running_var >= 0)


def test_batch_norm_running_stats():
    bn = BatchNorm1d(1)
    x = np.array([[1.0], [2.0], [3.0], [6.0]])
    bn(Var(x))
    assert bn.running_mean[0] == pytest.approx(0.1 * 3.0)
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))
    bn.set_mode(Mode.EVAL)
    before = bn.running_mean.copy()
    bn(Var(x))
    np.testing.assert_array_equal(bn.running_mean, before)


# --- Adam -----------------------------------------------------------------------------------

def test_adam_zero_grad():
    p = Param(np.array([1.0, -2.0]))
    state = adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    p = Param(np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -7.0, 1e-3])
    adam_step([p], [g], AdamState(lr=1e-2))
    np.testing.assert_allclose(p.value, [1.0 - 1e-2, -2.0 + 1e-2, 0.5 - 1e-2], rtol=1e-5)


def test_adam_reduces_quadratic():
    a = np.diag([1.0, 10.0])
    p = Param(np.array([3.0, -2.0]))

    def loss():
        return 0.5 * p.value @ a @ p.value

    before = loss()
    state = AdamState(lr=0.1)
    for _ in range(2):
        adam_step([p], [a @ p.value], state)
    assert loss() < before and state.step == 2


def test_adam_state_round_trip():
    p = Param(np.ones(3))
    state = adam_step([p], [np.arange(3.0)], AdamState())
    back = AdamState.from_dict(state.to_dict())
    assert back.step == 1
    np.testing.assert_array_equal(back.m[0], state.m[0])
    with pytest.raises(ValueError):
        adam_step([p], [np.ones(2)], back)


# --- gradient checking and state -------------------------------------------------------------

def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(0)
    d = Dense(4, 3, rng)
    x = Var(rng.normal(size=(6, 4)))
    c = Var(rng.normal(size=(1, 3)))
    err = grad_check(lambda tape: scalar_sum(linear(d(x, tape), c, tape=tape), tape), d.parameters())
    assert err <= 1e-9


def test_grad_check_mlp_bce():
    rng = np.random.default_rng(1)
    mlp = Mlp([5, 16, 16], rng)
    head = Mlp([16, 1], rng, batch_norm=[False], activations=[Activation.IDENTITY])
    x = Var(rng.normal(size=(24, 5)))
    y = rng.integers(0, 2, size=(24, 1)).astype(float)

    def loss(tape):
        return bce_loss(sigmoid(head(mlp(x, tape), tape), tape), y, tape)

    assert grad_check(loss, mlp.parameters() + head.parameters(), n_samples=150) <= 1e-4


def test_state_dict_round_trip():
    rng = np.random.default_rng(2)
    a = Mlp([3, 8, 2], rng)
    mlp_forward(a, rng.normal(size=(10, 3)))
    b = Mlp([3, 8, 2], np.random.default_rng(99))
    load_state_dict(b, state_dict(a))
    a.set_mode(Mode.EVAL)
    b.set_mode(Mode.EVAL)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(mlp_forward(a, x).value, mlp_forward(b, x).value)
    bad = state_dict(a)
    bad.pop(next(iter(bad)))
    with pytest.raises(ValueError):
        load_state_dict(b, bad)
