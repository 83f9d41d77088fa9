"""Linear-chain CRF head.

Transitions live in a ``(K+2) x (K+2)`` matrix indexed ``[from, to]`` where
index ``K`` is the virtual begin tag and ``K+1`` the virtual end tag, so the
emission matrix stays ``L x K``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError, LabelError
from .tensor import Tensor, _result


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.squeeze(axis) if axis is not None else out.reshape(())


def init_transitions(num_tags: int) -> np.ndarray:
    return np.zeros((num_tags + 2, num_tags + 2))


def _arrays(emissions, transitions) -> tuple[np.ndarray, np.ndarray]:
    e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=np.float64)
    t = transitions.data if isinstance(transitions, Tensor) else np.asarray(transitions, dtype=np.float64)
    if e.ndim != 2:
        raise DimensionError(f"emissions must be [L, K], got {e.shape}")
    if e.shape[0] < 1:
        raise InputError("empty sequence")
    k = e.shape[1]
    if t.shape != (k + 2, k + 2):
        raise DimensionError(f"transitions {t.shape} do not fit {k} tags")
    return e, t


def _check_tags(tags, length: int, k: int) -> np.ndarray:
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != (length,):
        raise DimensionError(f"{length} positions but {tags.shape} tags")
    if tags.min() < 0 or tags.max() >= k:
        raise LabelError(f"tag outside [0, {k})")
    return tags


def sequence_score(emissions, tags, transitions) -> float:
    e, t = _arrays(emissions, transitions)
    n, k = e.shape
    tags = _check_tags(tags, n, k)
    bos, eos = k, k + 1
    score = e[np.arange(n), tags].sum()
    score += t[bos, tags[0]] + t[tags[:-1], tags[1:]].sum() + t[tags[-1], eos]
    return float(score)


def _forward(e: np.ndarray, t: np.ndarray) -> np.ndarray:
    """alpha[i, j] = log-sum of scores of prefixes ending in tag j at position i."""
    n, k = e.shape
    trans = t[:k, :k]
    alpha = np.empty((n, k))
    alpha[0] = t[k, :k] + e[0]
    for i in range(1, n):
        alpha[i] = logsumexp(alpha[i - 1][:, None] + trans, axis=0) + e[i]
    return alpha


def _backward(e: np.ndarray, t: np.ndarray) -> np.ndarray:
    n, k = e.shape
    trans = t[:k, :k]
    beta = np.empty((n, k))
    beta[-1] = t[:k, k + 1]
    for i in range(n - 2, -1, -1):
        beta[i] = logsumexp(trans + (e[i + 1] + beta[i + 1])[None, :], axis=1)
    return beta


def log_partition(emissions, transitions) -> float:
    e, t = _arrays(emissions, transitions)
    k = e.shape[1]
    alpha = _forward(e, t)
    return float(logsumexp(alpha[-1] + t[:k, k + 1]))


def viterbi(emissions, transitions) -> tuple[list[int], float]:
    """Best tag path and its score; ties go to the lowest tag id."""
    e, t = _arrays(emissions, transitions)
    n, k = e.shape
    trans = t[:k, :k]
    delta = t[k, :k] + e[0]
    back = np.zeros((n, k), dtype=np.int64)
    for i in range(1, n):
        cand = delta[:, None] + trans
        back[i] = cand.argmax(axis=0)
        delta = cand[back[i], np.arange(k)] + e[i]
    final = delta + t[:k, k + 1]
    best = int(final.argmax())
    score = float(final[best])
    path = [best]
    for i in range(n - 1, 0, -1):
        best = int(back[i, best])
        path.append(best)
    path.reverse()
    return path, score


def nll_loss(emissions: Tensor, tags, transitions: Tensor) -> Tensor:
    """``log_partition - sequence_score``, differentiable in emissions and transitions."""
    emissions = emissions if isinstance(emissions, Tensor) else Tensor(emissions)
    transitions = transitions if isinstance(transitions, Tensor) else Tensor(transitions)
    e, t = _arrays(emissions, transitions)
    n, k = e.shape
    tags = _check_tags(tags, n, k)
    bos, eos = k, k + 1
    alpha = _forward(e, t)
    beta = _backward(e, t)
    log_z = logsumexp(alpha[-1] + t[:k, eos])
    loss = log_z - sequence_score(e, tags, t)

    def backward(g):
        unary = np.exp(alpha + beta - log_z)
        d_e = unary.copy()
        d_e[np.arange(n), tags] -= 1.0
        d_t = np.zeros_like(t)
        if n > 1:
            pair = alpha[:-1, :, None] + t[None, :k, :k] + (e[1:] + beta[1:])[:, None, :] - log_z
            d_t[:k, :k] = np.exp(pair).sum(axis=0)
            np.add.at(d_t, (tags[:-1], tags[1:]), -1.0)
        d_t[bos, :k] = unary[0]
        d_t[bos, tags[0]] -= 1.0
        d_t[:k, eos] = unary[-1]
        d_t[tags[-1], eos] -= 1.0
        return d_e * g, d_t * g

    return _result(np.asarray(loss), (emissions, transitions), backward)
