import numpy as np
import pytest

from sparse_sharing.data import EncodedSentence, Vocabulary
from sparse_sharing.model import ModelConfig, init_parameters
from sparse_sharing.tensor import GradTape, Tensor


def numeric_grad(f, arrays, index, eps=1e-5):
    """Central differences of scalar ``f()`` wrt ``arrays[index]``, perturbed in place."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_op(build, arrays, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build(*tensors)`` must return a scalar tensor; every array is a leaf.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        out = build(*leaves)
    tape.backward(out)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = tape.gradient(leaf)
        numeric = numeric_grad(lambda: build(*[Tensor(a) for a in arrays]).item(), arrays, k, eps)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def random_sentences(rng, n, vocab_size, n_labels, lo=1, hi=6, n_chars=None):
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        chars = None
        if n_chars is not None:
            chars = tuple(rng.integers(2, n_chars, size=int(rng.integers(1, 5))) for _ in range(length))
        out.append(EncodedSentence(rng.integers(2, vocab_size, size=length), rng.integers(0, n_labels, size=length), chars))
    return out


def tiny_vocab(n=10):
    return Vocabulary([f"t{i}" for i in range(n - 2)])


@pytest.fixture
def tiny_net():
    def make(layers=1, char_cnn=False, heads=(("a", "softmax", 3),), seed=0, hidden=4, dropout=0.0, residual=True):
        vocab = tiny_vocab(10)
        chars = Vocabulary([c for c in "abcdef"]) if char_cnn else None
        cfg = ModelConfig(word_dim=3, hidden=hidden, layers=layers, char_cnn=char_cnn, char_dim=2, char_filters=2, dropout=dropout, residual=residual)
        specs = [(name, kind, [f"L{i}" for i in range(k)]) for name, kind, k in heads]
        return init_parameters(cfg, vocab, specs, seed, chars)

    return make
