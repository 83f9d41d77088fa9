"""Shared BiLSTM encoder with optional character CNN, plus per-task heads.

All encoder parameters live in one flat vector laid out by a
:class:`~sparse_sharing.masks.ParamSpace`.  A task's mask is applied inside
the forward pass by multiplying each prunable block with its slice of the
mask, so a single parameter store serves every task.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import crf
from .data import EncodedSentence, Vocabulary
from .errors import ConfigError, FormatError, InputError, StructuralError
from .masks import MaskMatrix, ParamBlock, ParamSpace
from .rng import stream
from .tensor import (
    GradTape,
    Tensor,
    add,
    birnn_layer,
    concat,
    conv1d_maxpool,
    dropout,
    mask_mul,
    matmul,
    reshape,
    scale,
    softmax_cross_entropy,
    take_rows,
)

HEAD_KINDS = ("softmax", "crf")


@dataclass
class ModelConfig:
    word_dim: int = 50
    hidden: int = 50
    layers: int = 1
    char_cnn: bool = False
    char_dim: int = 30
    char_filters: int = 30
    conv_width: int = 3
    dropout: float = 0.5
    residual: bool = True
    vocab_size: int = 0
    char_vocab_size: int = 0

    def validate(self) -> None:
        dims = [self.word_dim, self.hidden, self.layers, self.vocab_size]
        if self.char_cnn:
            dims += [self.char_dim, self.char_filters, self.conv_width, self.char_vocab_size]
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"model dimensions must be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def input_dim(self) -> int:
        return self.word_dim + (self.char_filters if self.char_cnn else 0)

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden


def build_space(config: ModelConfig) -> ParamSpace:
    config.validate()
    h = config.hidden
    blocks = [ParamBlock("embed.word", (config.vocab_size, config.word_dim), False, 0)]
    if config.char_cnn:
        blocks += [
            ParamBlock("embed.char", (config.char_vocab_size, config.char_dim), False, 0),
            ParamBlock("char_conv.weight", (config.conv_width * config.char_dim, config.char_filters), True, 0),
            ParamBlock("char_conv.bias", (config.char_filters,), True, 0),
        ]
    for layer in range(1, config.layers + 1):
        d_in = config.input_dim if layer == 1 else 2 * h
        for direction in ("fwd", "bwd"):
            prefix = f"lstm{layer}.{direction}"
            blocks += [
                ParamBlock(f"{prefix}.w_ih", (d_in, 4 * h), True, layer),
                ParamBlock(f"{prefix}.w_hh", (h, 4 * h), True, layer),
                ParamBlock(f"{prefix}.bias", (4 * h,), True, layer),
            ]
    return ParamSpace(blocks)


@dataclass
class TaskHead:
    name: str
    kind: str
    labels: list[str]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def copy(self) -> "TaskHead":
        return TaskHead(self.name, self.kind, list(self.labels), {k: v.copy() for k, v in self.params.items()})


@dataclass
class BaseNetwork:
    config: ModelConfig
    space: ParamSpace
    theta: np.ndarray
    vocab: Vocabulary
    char_vocab: Vocabulary | None = None

    def block(self, name: str) -> np.ndarray:
        """Writable view of one parameter block in its own shape."""
        return self.theta[self.space.slice_of(name)].reshape(self.space.block(name).shape)

    def copy(self) -> "BaseNetwork":
        return BaseNetwork(self.config, self.space, self.theta.copy(), self.vocab, self.char_vocab)

    @property
    def num_parameters(self) -> int:
        return self.space.total


def init_parameters(
    config: ModelConfig,
    vocab: Vocabulary,
    head_specs: Sequence[tuple[str, str, Sequence[str]]],
    seed: int,
    char_vocab: Vocabulary | None = None,
) -> tuple[BaseNetwork, dict[str, TaskHead]]:
    """Fresh encoder and heads at the initial point.

    Recurrent weights are U(-1/sqrt(h), 1/sqrt(h)) with forget-gate biases at
    1 and other biases at 0; embeddings are U(-0.1, 0.1); head weights use a
    Glorot uniform range; CRF transitions start at zero.
    """
    config.vocab_size = len(vocab)
    if config.char_cnn:
        if char_vocab is None:
            raise ConfigError("char_cnn needs a character vocabulary")
        config.char_vocab_size = len(char_vocab)
    space = build_space(config)
    net = BaseNetwork(config, space, np.zeros(space.total), vocab, char_vocab if config.char_cnn else None)
    rng = stream(seed, "init/encoder")
    h = config.hidden
    bound = 1.0 / np.sqrt(h)
    for block in space.blocks:
        view = net.block(block.name)
        if block.name.startswith("embed."):
            view[...] = rng.uniform(-0.1, 0.1, block.shape)
        elif block.name.startswith("char_conv.weight"):
            fan = block.shape[0]
            view[...] = rng.uniform(-1.0 / np.sqrt(fan), 1.0 / np.sqrt(fan), block.shape)
        elif block.name.endswith(".bias") and block.name.startswith("lstm"):
            view[...] = 0.0
            view[h : 2 * h] = 1.0
        elif block.name.endswith(".bias"):
            view[...] = 0.0
        else:
            view[...] = rng.uniform(-bound, bound, block.shape)

    heads = {}
    for name, kind, labels in head_specs:
        heads[name] = init_head(name, kind, labels, config.output_dim, seed)
    return net, heads


def init_head(name: str, kind: str, labels: Sequence[str], in_dim: int, seed: int) -> TaskHead:
    if kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {kind!r}")
    k = len(labels)
    if k < 1:
        raise ConfigError(f"head {name!r} has an empty label alphabet")
    rng = stream(seed, f"init/head/{name}")
    limit = np.sqrt(6.0 / (in_dim + k))
    params = {"weight": rng.uniform(-limit, limit, (in_dim, k)), "bias": np.zeros(k)}
    if kind == "crf":
        params["transitions"] = crf.init_transitions(k)
    return TaskHead(name, kind, list(labels), params)


def load_word_vectors(net: BaseNetwork, path: str | Path) -> int:
    """Copy pretrained vectors into the word embedding table; returns rows filled.

    The file is the common text format: one ``word v1 ... vd`` line per
    entry, an optional ``count dim`` header, and ``d`` equal to ``word_dim``.
    Words outside the vocabulary are skipped and unmatched rows keep their
    random initialization.
    """
    table = net.block("embed.word")
    dim = table.shape[1]
    filled = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                continue
            if len(parts) - 1 != dim:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            if parts[0] not in net.vocab:
                continue
            try:
                table[net.vocab.id(parts[0])] = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric vector entry") from None
            filled += 1
    return filled


# ---------------------------------------------------------------------------
# forward computation


class Bound:
    """Leaf tensors for one forward/backward pass over the current parameter values."""

    def __init__(self, net: BaseNetwork, head: TaskHead, mask: MaskMatrix | None, track: bool):
        self.net = net
        self.leaves = {b.name: Tensor(net.block(b.name), requires_grad=track, name=b.name) for b in net.space.blocks}
        self.head_leaves = {k: Tensor(v, requires_grad=track, name=f"head.{k}") for k, v in head.params.items()}
        if mask is None:
            self.effective = dict(self.leaves)
        else:
            block_masks = net.space.block_masks(mask)
            self.effective = {
                name: mask_mul(leaf, block_masks[name]) if name in block_masks else leaf
                for name, leaf in self.leaves.items()
            }

    def encoder_grad(self, tape: GradTape) -> np.ndarray:
        g = np.empty(self.net.space.total)
        for block in self.net.space.blocks:
            g[self.net.space.slice_of(block.name)] = tape.gradient(self.leaves[block.name]).reshape(-1)
        return g

    def head_grads(self, tape: GradTape) -> dict[str, np.ndarray]:
        return {k: tape.gradient(t) for k, t in self.head_leaves.items()}


def _pad_words(batch: Sequence[EncodedSentence]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in batch], dtype=np.int64)
    if len(batch) == 0 or lengths.min() < 1:
        raise InputError("empty sentence")
    ids = np.zeros((len(batch), int(lengths.max())), dtype=np.int64)
    for b, s in enumerate(batch):
        ids[b, : len(s)] = s.words
    return ids, lengths


def _char_features(config: ModelConfig, eff: dict[str, Tensor], batch, n_max: int) -> Tensor:
    width = config.conv_width
    left = (width - 1) // 2
    words: list[np.ndarray] = []
    for s in batch:
        if s.chars is None:
            raise InputError("character CNN enabled but sentence has no character ids")
        words.extend(s.chars)
        words.extend([np.zeros(1, dtype=np.int64)] * (n_max - len(s)))
    padded_lens = np.array([max(len(w), 1) + width - 1 for w in words])
    ids = np.zeros((len(words), int(padded_lens.max())), dtype=np.int64)
    for i, w in enumerate(words):
        ids[i, left : left + len(w)] = w
    chars = take_rows(eff["embed.char"], ids)
    pooled = conv1d_maxpool(chars, eff["char_conv.weight"], eff["char_conv.bias"], width, padded_lens)
    return reshape(pooled, (len(batch), n_max, config.char_filters))


def encode(bound: Bound, batch: Sequence[EncodedSentence], train: bool, rng: np.random.Generator | None) -> Tensor:
    """Encoder features for every real token of the batch, ``[sum(lengths), 2h]``."""
    net, eff = bound.net, bound.effective
    config = net.config
    ids, lengths = _pad_words(batch)
    b_sz, n_max = ids.shape
    x = take_rows(eff["embed.word"], ids)
    if config.char_cnn:
        x = concat([x, _char_features(config, eff, batch, n_max)], axis=-1)
    x = dropout(x, config.dropout, train, rng)
    for layer in range(1, config.layers + 1):
        fwd = [eff[f"lstm{layer}.fwd.{p}"] for p in ("w_ih", "w_hh", "bias")]
        bwd = [eff[f"lstm{layer}.bwd.{p}"] for p in ("w_ih", "w_hh", "bias")]
        out = birnn_layer(x, fwd, bwd, lengths)
        x = add(out, x) if layer > 1 and config.residual else out
    x = dropout(x, config.dropout, train, rng)
    flat = reshape(x, (b_sz * n_max, config.output_dim))
    valid = (np.arange(b_sz)[:, None] * n_max + np.arange(n_max)[None, :])[np.arange(n_max)[None, :] < lengths[:, None]]
    return take_rows(flat, valid)


def emissions(bound: Bound, features: Tensor) -> Tensor:
    return add(matmul(features, bound.head_leaves["weight"]), bound.head_leaves["bias"])


def _sentence_slices(batch: Sequence[EncodedSentence]) -> list[slice]:
    out, start = [], 0
    for s in batch:
        out.append(slice(start, start + len(s)))
        start += len(s)
    return out


def batch_loss(bound: Bound, head: TaskHead, batch: Sequence[EncodedSentence], train: bool, rng) -> Tensor:
    """Per-sentence loss averaged over the batch.

    For the softmax head that is the token cross entropy summed within each
    sentence, so both head kinds share one scale.
    """
    scores = emissions(bound, encode(bound, batch, train, rng))
    if head.kind == "softmax":
        ce = softmax_cross_entropy(scores, np.concatenate([s.labels for s in batch]))
        return scale(ce, scores.shape[0] / len(batch))
    total = None
    trans = bound.head_leaves["transitions"]
    for s, sl in zip(batch, _sentence_slices(batch)):
        nll = crf.nll_loss(take_rows(scores, np.arange(sl.start, sl.stop)), s.labels, trans)
        total = nll if total is None else add(total, nll)
    return scale(total, 1.0 / len(batch))


def _as_encoded(net: BaseNetwork, sentence) -> EncodedSentence:
    if isinstance(sentence, EncodedSentence):
        return sentence
    tokens = list(sentence)
    if not tokens:
        raise InputError("empty sentence")
    if all(isinstance(t, str) for t in tokens):
        chars = None
        if net.char_vocab is not None:
            chars = tuple(net.char_vocab.encode(t) for t in tokens)
        return EncodedSentence(net.vocab.encode(tokens), np.zeros(len(tokens), np.int64), chars)
    return EncodedSentence(np.asarray(tokens, dtype=np.int64), np.zeros(len(tokens), np.int64))


def forward(net: BaseNetwork, head: TaskHead, mask: MaskMatrix | None, sentence, train: bool = False, rng=None) -> Tensor:
    """Per-token scores ``[L, K]`` for one sentence under ``mask``."""
    enc = _as_encoded(net, sentence)
    if len(enc) == 0:
        raise InputError("empty sentence")
    bound = Bound(net, head, mask, track=False)
    return emissions(bound, encode(bound, [enc], train, rng))


def predict_batch(net: BaseNetwork, head: TaskHead, mask: MaskMatrix | None, batch: Sequence[EncodedSentence]) -> list[np.ndarray]:
    bound = Bound(net, head, mask, track=False)
    scores = emissions(bound, encode(bound, batch, False, None)).data
    out = []
    for sl in _sentence_slices(batch):
        if head.kind == "crf":
            path, _ = crf.viterbi(scores[sl], head.params["transitions"])
            out.append(np.asarray(path, dtype=np.int64))
        else:
            out.append(scores[sl].argmax(axis=1))
    return out


def predict(net, head, mask, sentences, batch_size: int = 64) -> list[np.ndarray]:
    """Label ids per sentence: argmax per token, or the Viterbi path for CRF heads."""
    encoded = [_as_encoded(net, s) for s in sentences]
    out: list[np.ndarray] = []
    for i in range(0, len(encoded), batch_size):
        out.extend(predict_batch(net, head, mask, encoded[i : i + batch_size]))
    return out


def masked_copy(net: BaseNetwork, mask: MaskMatrix) -> BaseNetwork:
    """Dense network whose pruned coordinates are overwritten with zero."""
    out = net.copy()
    out.theta *= net.space.expand(mask)
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    """Full parameter state: encoder vector, head parameters and RNG states."""

    tag: str
    theta: np.ndarray
    heads: dict[str, dict[str, np.ndarray]]
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def equals(self, other: "Checkpoint") -> bool:
        if not np.array_equal(self.theta, other.theta) or self.heads.keys() != other.heads.keys():
            return False
        return all(
            self.heads[t].keys() == other.heads[t].keys()
            and all(np.array_equal(self.heads[t][k], other.heads[t][k]) for k in self.heads[t])
            for t in self.heads
        )


def network_meta(net: BaseNetwork, heads: dict[str, TaskHead]) -> dict:
    return {
        "model": asdict(net.config),
        "space_digest": net.space.digest().hex(),
        "vocab": net.vocab.tokens[2:],
        "char_vocab": net.char_vocab.tokens[2:] if net.char_vocab is not None else None,
        "heads": [{"name": h.name, "kind": h.kind, "labels": h.labels} for h in heads.values()],
    }


def snapshot(net: BaseNetwork, heads: dict[str, TaskHead], tag: str, rng_state: dict | None = None) -> Checkpoint:
    return Checkpoint(
        tag,
        net.theta.copy(),
        {name: {k: v.copy() for k, v in h.params.items()} for name, h in heads.items()},
        dict(rng_state or {}),
        network_meta(net, heads),
    )


def restore(ckpt: Checkpoint, net: BaseNetwork, heads: dict[str, TaskHead]) -> None:
    if ckpt.theta.shape != net.theta.shape:
        raise StructuralError("checkpoint does not match network layout")
    net.theta[...] = ckpt.theta
    for name, params in ckpt.heads.items():
        if name in heads:
            for k, v in params.items():
                heads[name].params[k][...] = v


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    dims = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
    return struct.pack("<H", len(raw)) + raw + dims + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path: str | Path, ckpt: Checkpoint, space: ParamSpace) -> None:
    """Versioned header, config echo, named little-endian double blocks, RNG state blob."""
    header = json.dumps({"tag": ckpt.tag, **ckpt.meta}, sort_keys=True).encode()
    arrays = [(b.name, ckpt.theta[space.slice_of(b.name)].reshape(b.shape)) for b in space.blocks]
    for task in sorted(ckpt.heads):
        arrays += [(f"head.{task}.{k}", v) for k, v in sorted(ckpt.heads[task].items())]
    rng_blob = json.dumps(ckpt.rng_state, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    parts += [_pack_array(n, a) for n, a in arrays]
    parts += [struct.pack("<I", len(rng_blob)), rng_blob]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    try:
        if blob[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, n_header = struct.unpack_from("<HI", blob, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        meta = json.loads(blob[pos : pos + n_header])
        pos += n_header
        (n_arrays,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays = {}
        for _ in range(n_arrays):
            (n_name,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n_name].decode()
            pos += n_name
            (ndim,) = struct.unpack_from("<B", blob, pos)
            shape = struct.unpack_from(f"<{ndim}I", blob, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise FormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
        (n_rng,) = struct.unpack_from("<I", blob, pos)
        rng_state = json.loads(blob[pos + 4 : pos + 4 + n_rng])
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    tag = meta.pop("tag")
    heads: dict[str, dict[str, np.ndarray]] = {}
    encoder = []
    for name, arr in arrays.items():
        if name.startswith("head."):
            task, key = name[5:].rsplit(".", 1)
            heads.setdefault(task, {})[key] = arr
        else:
            encoder.append(arr.reshape(-1))
    theta = np.concatenate(encoder) if encoder else np.zeros(0)
    return Checkpoint(tag, theta, heads, rng_state, meta)


def network_from_checkpoint(ckpt: Checkpoint) -> tuple[BaseNetwork, dict[str, TaskHead]]:
    meta = ckpt.meta
    config = ModelConfig(**meta["model"])
    space = build_space(config)
    if space.digest().hex() != meta["space_digest"]:
        raise StructuralError("checkpoint layout digest mismatch")
    char_vocab = Vocabulary(meta["char_vocab"]) if meta.get("char_vocab") is not None else None
    net = BaseNetwork(config, space, ckpt.theta.copy(), Vocabulary(meta["vocab"]), char_vocab)
    heads = {
        h["name"]: TaskHead(h["name"], h["kind"], list(h["labels"]), {k: v.copy() for k, v in ckpt.heads[h["name"]].items()})
        for h in meta["heads"]
    }
    return net, heads
