import zlib

import numpy as np
import pytest

from sparse_sharing import tensor as T
from sparse_sharing.errors import ConfigError, DimensionError, InputError, LabelError, NonFiniteError
from sparse_sharing.tensor import GradTape, Tensor

from conftest import check_op

TRIALS = 50


def _proj(t, rng_w):
    """Generic scalar readout so every output entry gets its own weight."""
    return T.sum_all(T.mul(t, Tensor(rng_w)))


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(ndim))


@pytest.mark.parametrize(
    "name",
    ["matmul", "add_broadcast", "mul_broadcast", "scale", "mask_mul", "tanh", "sigmoid", "relu", "reshape", "concat", "take_rows"],
)
def test_pointwise_and_linear_ops_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(TRIALS):
        if name == "matmul":
            m, k, n = _shape(rng, 3)
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            w = rng.normal(size=(m, n))
            worst = max(worst, check_op(lambda x, y: _proj(T.matmul(x, y), w), [a, b]))
        elif name in ("add_broadcast", "mul_broadcast"):
            m, n = _shape(rng)
            a, b = rng.normal(size=(m, n)), rng.normal(size=(n,))
            w = rng.normal(size=(m, n))
            op = T.add if name == "add_broadcast" else T.mul
            worst = max(worst, check_op(lambda x, y: _proj(op(x, y), w), [a, b]))
        elif name == "scale":
            a = rng.normal(size=_shape(rng))
            c = float(rng.normal())
            w = rng.normal(size=a.shape)
            worst = max(worst, check_op(lambda x: _proj(T.scale(x, c), w), [a]))
        elif name == "mask_mul":
            a = rng.normal(size=_shape(rng))
            m = rng.integers(0, 2, size=a.shape).astype(float)
            w = rng.normal(size=a.shape)
            worst = max(worst, check_op(lambda x: _proj(T.mask_mul(x, m), w), [a]))
        elif name in ("tanh", "sigmoid"):
            a = rng.normal(size=_shape(rng)) * 2
            w = rng.normal(size=a.shape)
            worst = max(worst, check_op(lambda x: _proj(T.elementwise(name, x), w), [a]))
        elif name == "relu":
            a = rng.normal(size=_shape(rng))
            a[np.abs(a) < 1e-3] = 0.5  # keep away from the kink
            w = rng.normal(size=a.shape)
            worst = max(worst, check_op(lambda x: _proj(T.relu(x), w), [a]))
        elif name == "reshape":
            m, n = _shape(rng)
            a = rng.normal(size=(m, n))
            w = rng.normal(size=(n, m))
            worst = max(worst, check_op(lambda x: _proj(T.reshape(x, (n, m)), w), [a]))
        elif name == "concat":
            m, n1, n2 = _shape(rng, 3)
            a, b = rng.normal(size=(m, n1)), rng.normal(size=(m, n2))
            w = rng.normal(size=(m, n1 + n2))
            worst = max(worst, check_op(lambda x, y: _proj(T.concat([x, y], axis=1), w), [a, b]))
        else:
            m, n = _shape(rng)
            ids = rng.integers(0, m, size=int(rng.integers(1, 7)))  # repeats accumulate
            a = rng.normal(size=(m, n))
            w = rng.normal(size=(len(ids), n))
            worst = max(worst, check_op(lambda x: _proj(T.take_rows(x, ids), w), [a]))
    assert worst < 1e-6, worst


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(TRIALS):
        n, k = _shape(rng, 2, 1, 5)
        logits = rng.normal(size=(n, k)) * 3
        targets = rng.integers(0, k, size=n)
        worst = max(worst, check_op(lambda x: T.softmax_cross_entropy(x, targets), [logits]))
    assert worst < 1e-6


def test_dropout_gradient_with_replayed_mask():
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(TRIALS):
        a = rng.normal(size=_shape(rng))
        w = rng.normal(size=a.shape)

        def f(x):
            return _proj(T.dropout(x, 0.4, True, np.random.default_rng(trial)), w)

        worst = max(worst, check_op(f, [a]))
    assert worst < 1e-6


def test_conv1d_maxpool_gradient():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(TRIALS):
        n_words, d_c, filters, width = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        lengths = rng.integers(width, width + 4, size=n_words)
        chars = rng.normal(size=(n_words, int(lengths.max()), d_c))
        weight = rng.normal(size=(width * d_c, filters))
        bias = rng.normal(size=filters)
        w = rng.normal(size=(n_words, filters))
        worst = max(worst, check_op(lambda c, wt, b: _proj(T.conv1d_maxpool(c, wt, b, width, lengths), w), [chars, weight, bias]))
    assert worst < 1e-6


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_gradient(reverse):
    rng = np.random.default_rng(4 + reverse)
    worst = 0.0
    for _ in range(TRIALS):
        b, n, d, h = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        lengths = rng.integers(1, n + 1, size=b)
        lengths[0] = n
        arrays = [rng.normal(size=(b, n, d)), rng.normal(size=(d, 4 * h)), rng.normal(size=(h, 4 * h)), rng.normal(size=4 * h)]
        valid = (np.arange(n)[None, :] < lengths[:, None])[..., None]
        w = rng.normal(size=(b, n, h)) * valid  # padded outputs are not read

        def f(x, wi, wh, bias):
            return _proj(T.lstm(x, wi, wh, bias, lengths, reverse=reverse), w)

        worst = max(worst, check_op(f, arrays))
    assert worst < 1e-6


def test_birnn_gradient_and_layout():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(TRIALS):
        n, d, h = int(rng.integers(1, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x = rng.normal(size=(n, d))
        params = [rng.normal(size=s) for s in [(d, 4 * h), (h, 4 * h), (4 * h,)] * 2]
        w = rng.normal(size=(n, 2 * h))

        def f(x, *p):
            return _proj(T.birnn_layer(x, p[:3], p[3:]), w)

        worst = max(worst, check_op(f, [x] + params))
    assert worst < 1e-6


def test_reverse_lstm_ignores_padding():
    rng = np.random.default_rng(7)
    d, h = 3, 2
    wi, wh, bias = (Tensor(rng.normal(size=s)) for s in [(d, 4 * h), (h, 4 * h), (4 * h,)])
    x = rng.normal(size=(1, 5, d))
    padded = np.concatenate([x, rng.normal(size=(1, 3, d))], axis=1)
    alone = T.lstm(Tensor(x), wi, wh, bias, reverse=True).data
    batch = T.lstm(Tensor(padded), wi, wh, bias, lengths=[5], reverse=True).data
    np.testing.assert_array_equal(alone[0], batch[0, :5])


def test_birnn_output_shape():
    rng = np.random.default_rng(8)
    p = [Tensor(rng.normal(size=s)) for s in [(5, 8), (2, 8), (8,)]]
    assert T.birnn_layer(Tensor(rng.normal(size=(4, 5))), p, p).shape == (4, 4)
    assert T.birnn_layer(Tensor(rng.normal(size=(3, 4, 5))), p, p).shape == (3, 4, 4)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_broadcast_mismatch_raises():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        T.mul(Tensor([np.inf]), Tensor([0.0]))


def test_dropout_rate_validation_and_eval_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert T.dropout(x, 0.5, False, None) is x
    with pytest.raises(ConfigError):
        T.dropout(x, 1.0, True, np.random.default_rng(0))


def test_dropout_is_inverted():
    x = Tensor(np.ones((200, 200)))
    out = T.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.02


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_take_rows_out_of_range():
    with pytest.raises(InputError):
        T.take_rows(Tensor(np.zeros((2, 3))), [2])


def test_gradient_of_untouched_leaf_is_zero():
    a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        out = T.sum_all(T.tanh(a))
    tape.backward(out)
    np.testing.assert_array_equal(tape.gradient(b), np.zeros(3))


def test_no_recording_without_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        pass
    T.tanh(a)
    assert len(tape) == 0


def test_mask_mul_gradient_is_zero_on_masked_entries():
    a = Tensor(np.ones(4), requires_grad=True)
    m = np.array([1.0, 0.0, 1.0, 0.0])
    with GradTape() as tape:
        out = T.sum_all(T.mask_mul(a, m))
    tape.backward(out)
    np.testing.assert_array_equal(tape.gradient(a), m)


def test_conv_pool_tie_goes_to_first_window():
    chars = Tensor(np.ones((1, 4, 1)), requires_grad=True)
    weight, bias = Tensor(np.ones((2, 1))), Tensor(np.zeros(1))
    with GradTape() as tape:
        out = T.sum_all(T.conv1d_maxpool(chars, weight, bias, 2, [4]))
    tape.backward(out)
    np.testing.assert_array_equal(tape.gradient(chars)[0, :, 0], [1.0, 1.0, 0.0, 0.0])


def test_lstm_overflow_is_not_hidden_by_saturation():
    x = Tensor(np.full((1, 2, 1), 10.0))
    huge = Tensor(np.full((1, 4), 1e308))
    with pytest.raises(NonFiniteError), np.errstate(over="ignore", invalid="ignore"):
        T.lstm(x, huge, Tensor(np.zeros((1, 4))), Tensor(np.zeros(4)))
    # the recurrent term overflows only once saturated states are summed
    with pytest.raises(NonFiniteError), np.errstate(over="ignore", invalid="ignore"):
        T.lstm(x, Tensor(np.ones((1, 12))), Tensor(np.full((3, 12), 1e308)), Tensor(np.zeros(12)))
