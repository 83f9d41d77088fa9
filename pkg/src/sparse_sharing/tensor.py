"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`GradTape` only when at
least one operand requires a gradient, so inference code that runs outside a
tape pays no bookkeeping cost.  Recurrent and convolutional layers are fused
kernels with hand-written backward passes; everything else is pointwise or a
single BLAS call.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError, LabelError, NonFiniteError

_local = threading.local()

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional array of doubles that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records operations in execution order and replays them backwards.

    Usage::

        with GradTape() as tape:
            loss = f(w)
        tape.backward(loss)
        tape.gradient(w)
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Backward) -> None:
        self._nodes.append((out, parents, fn))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        for out, parents, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        self._grads = grads

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Accumulated gradient of the last backward() wrt ``tensor``; zeros if untouched."""
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return np.broadcast_to(g, tensor.shape).copy() if g.shape != tensor.shape else g


def active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: Backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced NaN or Inf")
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# linear algebra and pointwise ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return g @ y.T, x.T @ g

    return _result(x @ y, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    x, y = a.data, b.data
    return _result(x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mask_mul(a: Tensor, mask) -> Tensor:
    """Elementwise product with a constant 0/1 mask; the mask gets no gradient."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape and m.size != 1:
        raise DimensionError(f"mask shape {m.shape} does not match {a.shape}")
    return _result(a.data * m, (a,), lambda g: (g * m,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "mask_mul": mask_mul,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(table: Tensor, ids) -> Tensor:
    """Row gather, ``table[ids]``; used for embedding lookup and position selection."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < -n or ids.max() >= n):
        raise InputError("row index out of range")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# losses and regularisation


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over positions of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"{n} positions but {targets.shape} targets")
    if n == 0:
        raise InputError("no positions to score")
    if targets.min() < 0 or targets.max() >= k:
        raise LabelError(f"target outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, targets])

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss), (logits,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolution over characters


def conv1d_maxpool(chars: Tensor, weight: Tensor, bias: Tensor, width: int, lengths=None) -> Tensor:
    """Valid 1-D convolution followed by max-over-time pooling.

    ``chars`` is ``[n, d_c]`` for one word or ``[W, n, d_c]`` for a padded batch
    whose true lengths are ``lengths``; the caller pads so that every real
    window fits.  ``weight`` is ``[width * d_c, d_out]``.  Pooling ties go to
    the lowest window index.
    """
    single = chars.ndim == 2
    x = chars.data[None] if single else chars.data
    if x.ndim != 3:
        raise DimensionError(f"chars must be 2-D or 3-D, got {chars.shape}")
    nw_words, n, d_c = x.shape
    if width < 1:
        raise ConfigError("convolution width must be >= 1")
    if weight.shape[0] != width * d_c or bias.shape != (weight.shape[1],):
        raise DimensionError(f"conv weight {weight.shape} / bias {bias.shape} vs width {width}, d_c {d_c}")
    lengths = np.full(nw_words, n) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if n == 0 or lengths.min() < 1:
        raise InputError("empty character sequence")
    if lengths.min() < width:
        raise InputError(f"character sequence shorter than convolution width {width}")
    n_win = n - width + 1
    idx = np.arange(n_win)[:, None] + np.arange(width)[None, :]
    windows = x[:, idx, :].reshape(nw_words, n_win, width * d_c)
    w = weight.data
    scores = windows @ w + bias.data
    valid = np.arange(n_win)[None, :] <= (lengths - width)[:, None]
    scores = np.where(valid[:, :, None], scores, -np.inf)
    arg = scores.argmax(axis=1)  # first max wins
    pooled = np.take_along_axis(scores, arg[:, None, :], axis=1)[:, 0, :]
    d_out = w.shape[1]

    def backward(g):
        g = g[None] if single else g
        d_scores = np.zeros((nw_words, n_win, d_out))
        np.put_along_axis(d_scores, arg[:, None, :], g[:, None, :], axis=1)
        d_w = windows.reshape(-1, width * d_c).T @ d_scores.reshape(-1, d_out)
        d_b = d_scores.sum(axis=(0, 1))
        d_win = (d_scores @ w.T).reshape(nw_words, n_win, width, d_c)
        d_x = np.zeros_like(x)
        for j in range(width):
            d_x[:, j : j + n_win, :] += d_win[:, :, j, :]
        return (d_x[0] if single else d_x), d_w, d_b

    return _result(pooled[0] if single else pooled, (chars, weight, bias), backward)


# ---------------------------------------------------------------------------
# recurrent layers


def _reverse_index(lengths: np.ndarray, n: int) -> np.ndarray:
    """Per-row permutation reversing the first ``lengths[b]`` steps, padding left in place."""
    pos = np.arange(n)[None, :]
    rev = lengths[:, None] - 1 - pos
    return np.where(pos < lengths[:, None], rev, pos)


def _check_lstm(x: np.ndarray, params: Sequence[Tensor]) -> int:
    if x.ndim != 3:
        raise DimensionError(f"lstm input must be [B, L, d_in], got {x.shape}")
    w_ih, w_hh, bias = params
    d_in = x.shape[2]
    h = w_hh.shape[0]
    if w_ih.shape != (d_in, 4 * h) or w_hh.shape != (h, 4 * h) or bias.shape != (4 * h,):
        raise DimensionError(f"lstm params {w_ih.shape}, {w_hh.shape}, {bias.shape} do not fit d_in={d_in}, h={h}")
    if x.shape[1] < 1:
        raise InputError("empty sequence")
    return h


def _lstm_stack(inputs: Tensor, directions: Sequence[tuple[Sequence[Tensor], bool]], lengths) -> Tensor:
    """Run several LSTMs over the same input in one time loop.

    ``directions`` holds ``(params, reverse)`` pairs; their hidden states are
    concatenated along the last axis in that order.  Stacking the directions
    lets every step be one batched matmul instead of one per direction.
    """
    x = inputs.data
    hs_ = [_check_lstm(x, p) for p, _ in directions]
    if len(set(hs_)) != 1:
        raise DimensionError("stacked directions need equal hidden sizes")
    h = hs_[0]
    b_sz, n, d_in = x.shape
    n_dir = len(directions)
    lengths = np.full(b_sz, n) if lengths is None else np.asarray(lengths, dtype=np.int64)
    rows = np.arange(b_sz)[:, None]
    perm = _reverse_index(lengths, n)
    perms = [perm if rev else None for _, rev in directions]

    wx = np.stack([p[0].data for p, _ in directions])  # [D, d, 4h]
    wh = np.stack([p[1].data for p, _ in directions])  # [D, h, 4h]
    bias = np.stack([p[2].data for p, _ in directions])
    xs = np.stack([x[rows, pm] if pm is not None else x for pm in perms])  # [D, B, L, d]
    # time-major [L, D, B, 4h] so each step reads one contiguous slab
    pre = np.matmul(xs.reshape(n_dir, b_sz * n, d_in), wx).reshape(n_dir, b_sz, n, 4 * h)
    pre = np.ascontiguousarray((pre + bias[:, None, None, :]).transpose(2, 0, 1, 3))
    # saturating gates would hide an overflow, so check pre-activations here
    if not np.isfinite(pre).all():
        raise NonFiniteError("recurrent input projection produced NaN or Inf")
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, so one tanh call covers all four gates
    half = np.full(4 * h, 0.5)
    half[2 * h : 3 * h] = 1.0
    sig = np.ones(4 * h, dtype=bool)
    sig[2 * h : 3 * h] = False

    acts = np.empty((n, n_dir, b_sz, 4 * h))
    cells = np.empty((n + 1, n_dir, b_sz, h))
    cells[0] = 0.0
    tanh_c = np.empty((n, n_dir, b_sz, h))
    hs = np.empty((n + 1, n_dir, b_sz, h))
    hs[0] = 0.0
    for t in range(n):
        z = pre[t] + np.matmul(hs[t], wh)
        if not np.isfinite(z).all():
            raise NonFiniteError("recurrent pre-activation produced NaN or Inf")
        a = acts[t]
        np.tanh(z * half, out=a)
        a[..., :h * 2] += 1.0
        a[..., :h * 2] *= 0.5
        a[..., 3 * h :] += 1.0
        a[..., 3 * h :] *= 0.5
        c = cells[t + 1]
        np.multiply(a[..., h : 2 * h], cells[t], out=c)
        c += a[..., :h] * a[..., 2 * h : 3 * h]
        np.tanh(c, out=tanh_c[t])
        np.multiply(a[..., 3 * h :], tanh_c[t], out=hs[t + 1])

    states = hs[1:].transpose(1, 2, 0, 3)  # [D, B, L, h]
    outs = [states[k][rows, pm] if pm is not None else states[k] for k, pm in enumerate(perms)]
    out = np.concatenate(outs, axis=-1)

    def backward(grad):
        parts = np.split(grad, n_dir, axis=-1)
        dh_all = np.stack([g[rows, pm] if pm is not None else g for g, pm in zip(parts, perms)])
        dh_all = np.ascontiguousarray(dh_all.transpose(2, 0, 1, 3))  # [L, D, B, h]
        # derivative factors that do not depend on the incoming gradient
        i, f, g, o = acts[..., :h], acts[..., h : 2 * h], acts[..., 2 * h : 3 * h], acts[..., 3 * h :]
        k_c = o * (1.0 - tanh_c * tanh_c)
        k_gates = np.empty((n, n_dir, b_sz, 3, h))
        k_gates[..., 0, :] = g * i * (1.0 - i)
        k_gates[..., 1, :] = cells[:-1] * f * (1.0 - f)
        k_gates[..., 2, :] = i * (1.0 - g * g)
        k_o = tanh_c * o * (1.0 - o)
        f = np.ascontiguousarray(f)
        dz = np.empty((n, n_dir, b_sz, 4 * h))
        dh_next = np.zeros((n_dir, b_sz, h))
        dc = np.zeros((n_dir, b_sz, h))
        whT = np.ascontiguousarray(wh.transpose(0, 2, 1))
        for t in range(n - 1, -1, -1):
            dh = dh_all[t] + dh_next
            dc *= f[t + 1] if t + 1 < n else 0.0
            dc += dh * k_c[t]
            dzt = dz[t]
            dzt[..., : 3 * h] = (dc[..., None, :] * k_gates[t]).reshape(n_dir, b_sz, 3 * h)
            np.multiply(dh, k_o[t], out=dzt[..., 3 * h :])
            dh_next = np.matmul(dzt, whT)
        dz_b = dz.transpose(1, 2, 0, 3).reshape(n_dir, b_sz * n, 4 * h)
        h_prev = hs[:-1].transpose(1, 2, 0, 3).reshape(n_dir, b_sz * n, h)
        d_wx = np.matmul(xs.reshape(n_dir, b_sz * n, d_in).transpose(0, 2, 1), dz_b)
        d_wh = np.matmul(h_prev.transpose(0, 2, 1), dz_b)
        d_b = dz_b.sum(axis=1)
        d_xs = np.matmul(dz_b, wx.transpose(0, 2, 1)).reshape(n_dir, b_sz, n, d_in)
        d_x = np.zeros_like(x)
        grads = [d_x]
        for k, pm in enumerate(perms):
            d_x += d_xs[k][rows, pm] if pm is not None else d_xs[k]
            grads += [d_wx[k], d_wh[k], d_b[k]]
        return tuple(grads)

    parents = (inputs,) + tuple(t for p, _ in directions for t in p)
    return _result(out, parents, backward)


def lstm(inputs: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, lengths=None, reverse: bool = False) -> Tensor:
    """Unidirectional LSTM over ``[B, L, d_in]`` from a zero state.

    Gate layout along the ``4h`` axis is input, forget, cell, output.  With
    ``reverse`` each row is read back-to-front over its own length, so padding
    at the tail never leaks into real positions.
    """
    return _lstm_stack(inputs, [((w_ih, w_hh, bias), reverse)], lengths)


def birnn_layer(inputs: Tensor, forward_params: Sequence[Tensor], backward_params: Sequence[Tensor], lengths=None) -> Tensor:
    """Bidirectional LSTM; output ``[.., L, 2h]`` is forward states then backward states.

    Accepts a single sequence ``[L, d_in]`` or a padded batch ``[B, L, d_in]``.
    Each params triple is ``(w_ih, w_hh, bias)``.
    """
    single = inputs.ndim == 2
    x = reshape(inputs, (1,) + inputs.shape) if single else inputs
    out = _lstm_stack(x, [(tuple(forward_params), False), (tuple(backward_params), True)], lengths)
    return reshape(out, out.shape[1:]) if single else out
