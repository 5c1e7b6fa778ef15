import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.interpolate import PchipInterpolator

from utils import tensorgrad as tg
from utils.errors import CheckpointIntegrityError, TapeUsageError, TensorDomainError, TensorShapeError
from utils.tensorgrad import MemoryAccountant, Tape, Tensor

RNG = np.random.default_rng(7)
C = RNG.uniform(0.5, 1.5, (3, 4))
W = RNG.standard_normal((4, 2))
W2 = RNG.standard_normal((2, 3))
CURVE = PchipInterpolator(np.arange(4.0), np.array([1.0, 0.2, -0.4, 0.3]))
NOISE = RNG.standard_normal((3, 4))

# name -> (input shape, function of one tensor)
CASES = {
    'add': ((3, 4), lambda x: tg.add(x, C)),
    'add_broadcast': ((4,), lambda x: tg.add(C, x)),
    'sub': ((3, 4), lambda x: tg.sub(C, x)),
    'mul_self': ((3, 4), lambda x: tg.mul(x, x)),
    'mul_broadcast': ((4,), lambda x: tg.mul(C, x)),
    'div': ((3, 4), lambda x: tg.div(C, x)),
    'div_numerator': ((3, 4), lambda x: tg.div(x, C)),
    'scale': ((3, 4), lambda x: tg.scale(x, -2.5)),
    'matmul_left': ((3, 4), lambda x: tg.matmul(x, W)),
    'matmul_right': ((3, 4), lambda x: tg.matmul(W2, x)),
    'transpose': ((3, 4), lambda x: tg.transpose(x)),
    'sigmoid': ((3, 4), tg.sigmoid),
    'softplus': ((3, 4), tg.softplus),
    'silu': ((3, 4), tg.silu),
    'sin': ((3, 4), tg.sin),
    'cos': ((3, 4), tg.cos),
    'exp': ((3, 4), tg.exp),
    'log': ((3, 4), tg.log),
    'square': ((3, 4), tg.square),
    'sqrt': ((3, 4), tg.sqrt),
    'softmax': ((3, 4), tg.softmax),
    'softmax_axis0': ((3, 4), lambda x: tg.softmax(x, axis=0)),
    'cumsum': ((3, 4), tg.cumsum),
    'simplex_cumsum': ((5,), tg.simplex_cumsum),
    'concat': ((3, 4), lambda x: tg.concat([x, tg.square(x)], axis=1)),
    'slice': ((3, 4), lambda x: x[1:, ::2]),
    'slice_repeated': ((4,), lambda x: x[[0, 0, 2, 0]]),
    'slice_repeated_rows': ((3, 4), lambda x: x[[2, 2], 1:]),
    'reshape': ((3, 4), lambda x: tg.reshape(x, (2, 6))),
    'sum': ((3, 4), tg.sum_),
    'sum_axis': ((3, 4), lambda x: tg.sum_(x, axis=0, keepdims=True)),
    'mean_axis': ((3, 4), lambda x: tg.mean(x, axis=1)),
    'interp': ((3, 4), lambda x: tg.interp(x, CURVE)),
    'reparam': ((3, 4), lambda x: tg.gaussian_reparam(tg.sin(x), tg.exp(x), NOISE)),
    'stack_scalars': ((3,), lambda x: tg.stack_scalars([x[0], tg.square(x[1]), x[2]])),
}


def _weights_for(fn, shape):
    out = fn(Tensor(np.ones(shape)))
    return np.random.default_rng(3).standard_normal(out.shape)


def _tape_grad(fn, x0, weights):
    with Tape() as tape:
        x = tape.variable(x0)
        loss = tg.sum_(tg.mul(fn(x), weights))
    return tape.backward(loss).of(x)


@pytest.mark.parametrize('name', sorted(CASES))
def test_op_gradient_matches_finite_differences(name):
    shape, fn = CASES[name]
    x0 = np.random.default_rng(11).uniform(0.5, 1.5, shape)
    weights = _weights_for(fn, shape)
    auto = _tape_grad(fn, x0, weights)
    num = tg.numerical_grad(lambda a: tg.sum_(tg.mul(fn(Tensor(a)), weights)).item(), x0)
    np.testing.assert_allclose(auto, num, rtol=1e-6, atol=1e-8)


def test_repeated_index_gradients_add_up():
    with Tape() as tape:
        x = tape.variable(np.array([1.0, 2.0, 3.0]))
        loss = tg.sum_(x[[0, 0, 2]])
    np.testing.assert_array_equal(tape.backward(loss).of(x), [2.0, 0.0, 1.0])


def test_sigmoid_softmax_cumsum_values():
    assert tg.sigmoid(0.0).item() == 0.5
    sm = tg.softmax(np.array([0.0, 0.0, 1.0])).data
    np.testing.assert_allclose(sm, [0.211941, 0.211941, 0.576117], atol=1e-6)
    cs = tg.simplex_cumsum(np.array([0.0, 0.0, 1.0])).data
    np.testing.assert_allclose(cs, [0.211941, 0.423883, 1.0], atol=1e-6)
    assert cs[-1] == 1.0


def test_gaussian_reparam_examples():
    np.testing.assert_array_equal(tg.gaussian_reparam([1.0, 2.0], 0.0, [5.0, 5.0]).data, [1.0, 2.0])
    np.testing.assert_array_equal(tg.gaussian_reparam([0.0, 0.0], 2.0, [1.0, -1.0]).data, [2.0, -2.0])
    with Tape() as tape:
        std = tape.variable(np.array([0.7, 0.7]))
        loss = tg.sum_(tg.gaussian_reparam(np.zeros(2), std, np.array([1.0, -1.0])))
    np.testing.assert_array_equal(tape.backward(loss).of(std), [1.0, -1.0])


def test_gaussian_reparam_rejects_negative_std():
    with pytest.raises(TensorDomainError):
        tg.gaussian_reparam(np.zeros(2), -1.0, np.ones(2))


def test_backward_scalar_examples():
    with Tape() as tape:
        w = tape.variable(3.0)
        loss = tg.square(w)
    assert tape.backward(loss).of(w) == pytest.approx(6.0)

    with Tape() as tape:
        w = tape.variable(0.0)
        loss = tg.sigmoid(w)
    assert tape.backward(loss).of(w) == pytest.approx(0.25)


def test_three_layer_composition_against_finite_differences():
    rng = np.random.default_rng(5)
    w1, w2, w3 = rng.standard_normal((2, 8)), rng.standard_normal((8, 8)), rng.standard_normal((8, 1))
    x = rng.standard_normal((6, 2))

    def net(a):
        h = tg.silu(tg.matmul(x, a))
        h = tg.sigmoid(tg.matmul(h, w2))
        return tg.sum_(tg.square(tg.matmul(h, w3)))

    with Tape() as tape:
        v = tape.variable(w1)
        loss = net(v)
    auto = tape.backward(loss).of(v)
    num = tg.numerical_grad(lambda a: net(a).item(), w1)
    rel = np.max(np.abs(auto - num)) / np.max(np.abs(num))
    assert rel < 1e-6


def test_unreached_leaf_gets_zero_gradient():
    with Tape() as tape:
        a = tape.variable(np.ones(3), name='a')
        b = tape.variable(np.ones(2), name='b')
        loss = tg.sum_(tg.square(a))
    grads = tape.backward(loss).by_name()
    np.testing.assert_array_equal(grads['b'], np.zeros(2))
    np.testing.assert_array_equal(grads['a'], 2.0 * np.ones(3))


def test_tape_is_single_use():
    with Tape() as tape:
        w = tape.variable(1.0)
        loss = tg.square(w)
    tape.backward(loss)
    with pytest.raises(TapeUsageError):
        tape.backward(loss)


def test_backward_needs_scalar():
    with Tape() as tape:
        w = tape.variable(np.ones(3))
        out = tg.square(w)
    with pytest.raises(TapeUsageError):
        tape.backward(out)


def test_untracked_ops_stay_off_tape():
    with Tape() as tape:
        tg.add(np.ones(2), np.ones(2))
        with tg.no_grad():
            w = Tensor(np.ones(2))
            tg.square(w)
    assert tape.nodes == []


def test_shape_errors_name_the_op():
    with pytest.raises(TensorShapeError, match='matmul'):
        tg.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(TensorShapeError, match='add'):
        tg.add(np.ones((2, 3)), np.ones((4,)))


def test_domain_errors():
    with pytest.raises(TensorDomainError):
        tg.log(np.array([1.0, 0.0]))
    with pytest.raises(TensorDomainError):
        tg.sqrt(np.array([-1.0]))


def test_tensors_are_immutable():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=12))
def test_simplex_cumsum_ends_at_one_and_increases(values):
    out = tg.simplex_cumsum(np.array(values)).data
    assert out[-1] == 1.0
    assert np.all(np.diff(out) >= -1e-15)
    assert np.all(out > 0)


# rematerialization

def _mlp(params):
    w1, w2 = params

    def f(x):
        return tg.matmul(tg.silu(tg.matmul(x, w1)), w2)
    return f


def test_checkpoint_of_square_is_transparent():
    x0 = np.array([0.5, -1.5, 2.0])
    with Tape() as tape:
        x = tape.variable(x0)
        y = tg.checkpoint(tg.square, [x])
        loss = tg.sum_(y)
    np.testing.assert_array_equal(y.data, x0 ** 2)
    np.testing.assert_array_equal(tape.backward(loss).of(x), 2.0 * x0)


def _chain_run(K, enabled):
    rng = np.random.default_rng(2)
    f = _mlp((rng.standard_normal((4, 32)) / 2.0, rng.standard_normal((32, 4)) / 6.0))
    x0 = rng.standard_normal((16, 4))
    acct = MemoryAccountant()
    with Tape(acct) as tape:
        x = tape.variable(x0)
        h = x
        for _ in range(K):
            h = tg.add(h, tg.checkpoint(f, [h], enabled=enabled))
        loss = tg.sum_(tg.square(h))
    return tape.backward(loss).of(x), acct


def test_chained_checkpoints_match_plain_gradients():
    remat, _ = _chain_run(10, True)
    plain, _ = _chain_run(10, False)
    np.testing.assert_allclose(remat, plain, rtol=1e-12, atol=1e-12)


def test_checkpoint_keeps_one_interior_live():
    _, single = _chain_run(1, False)
    _, remat = _chain_run(10, True)
    _, plain = _chain_run(10, False)
    assert single.interior_peak_bytes > 0
    assert remat.interior_peak_bytes == single.interior_peak_bytes
    assert plain.interior_peak_bytes == 10 * single.interior_peak_bytes
    assert remat.interior_live_bytes == 0 and plain.live_bytes == 0


def test_checkpoint_detects_nondeterministic_recipe():
    calls = []

    def drifting(x):
        calls.append(1)
        return tg.scale(x, float(len(calls)))

    with Tape() as tape:
        x = tape.variable(np.ones(2))
        loss = tg.sum_(tg.checkpoint(drifting, [x]))
    with pytest.raises(CheckpointIntegrityError):
        tape.backward(loss)
