"""Sequence-labelling corpora: CoNLL ingestion, scheme conversion, vocabularies
and the synthetic generators used for desk-scale experiments."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, LabelError, ParseError
from .schemes import RepairReport, decode_spans, encode_spans

PAD, UNK = "<pad>", "<unk>"
DOCSTART = "-DOCSTART-"


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple[str, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise InputError(f"{len(self.tokens)} tokens but {len(self.labels)} labels")
        if not self.tokens:
            raise InputError("empty sentence")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def chars(self) -> tuple[tuple[str, ...], ...]:
        return tuple(tuple(tok) for tok in self.tokens)


def sentence(tokens: Iterable[str], labels: Iterable[str]) -> LabeledSentence:
    return LabeledSentence(tuple(tokens), tuple(labels))


@dataclass
class TaskDataset:
    """One task's labelled splits.

    ``metric`` is ``"accuracy"`` or ``"span_f1"``; span tasks also carry the
    ``scheme`` their labels are written in.
    """

    name: str
    train: list[LabeledSentence]
    dev: list[LabeledSentence]
    test: list[LabeledSentence]
    labels: list[str] = field(default_factory=list)
    metric: str = "accuracy"
    scheme: str | None = None

    def __post_init__(self):
        if self.metric not in ("accuracy", "span_f1"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.metric == "span_f1" and self.scheme is None:
            raise ConfigError(f"task {self.name!r}: span F1 needs a tagging scheme")
        seen = sorted({lab for s in self.splits() for lab in s.labels})
        if not self.labels:
            self.labels = seen
        else:
            unknown = set(seen) - set(self.labels)
            if unknown:
                raise LabelError(f"task {self.name!r}: labels {sorted(unknown)[:5]} not in alphabet")

    def splits(self) -> Iterable[LabeledSentence]:
        yield from self.train
        yield from self.dev
        yield from self.test

    @property
    def size(self) -> int:
        """N_t used for proportional sampling: training sentences."""
        return len(self.train)

    def label_index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}


# ---------------------------------------------------------------------------
# CoNLL files


def read_conll(path: str | Path, token_column: int = 0, label_column: int = -1) -> list[LabeledSentence]:
    """Whitespace-separated columns, one token per line, blank line between sentences."""
    sentences: list[LabeledSentence] = []
    tokens: list[str] = []
    labels: list[str] = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            cols = raw.split()
            if not cols:
                if tokens:
                    sentences.append(sentence(tokens, labels))
                tokens, labels, width = [], [], None
                continue
            if cols[0] == DOCSTART:
                continue
            if width is None:
                width = len(cols)
            if len(cols) != width:
                raise ParseError(f"expected {width} columns, found {len(cols)}", lineno)
            try:
                tokens.append(cols[token_column])
                labels.append(cols[label_column])
            except IndexError:
                raise ParseError(f"missing column in row with {len(cols)} fields", lineno) from None
            if len(cols) < 2:
                raise ParseError("row has no label column", lineno)
    if tokens:
        sentences.append(sentence(tokens, labels))
    return sentences


def write_conll(path: str | Path, sentences: Iterable[LabeledSentence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            for tok, lab in zip(s.tokens, s.labels):
                fh.write(f"{tok} {lab}\n")
            fh.write("\n")


def convert_scheme(labels: Sequence[str], source: str, target: str, report: RepairReport | None = None) -> list[str]:
    """Span-preserving relabelling between tagging schemes."""
    spans = decode_spans(labels, source, report)
    return encode_spans(spans, len(labels), target)


def convert_sentences(sentences, source: str, target: str, report: RepairReport | None = None):
    return [
        LabeledSentence(s.tokens, tuple(convert_scheme(s.labels, source, target, report)))
        for s in sentences
    ]


# ---------------------------------------------------------------------------
# vocabularies


class Vocabulary:
    """Token to id map; id 0 is padding and id 1 the shared unknown token."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, 1)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.index.get(t, 1) for t in tokens], dtype=np.int64)


def build_vocab(sentences: Iterable[LabeledSentence], min_count: int = 1) -> Vocabulary:
    """Frequency-descending, then lexicographic; callers pass training sentences only."""
    counts = Counter(tok for s in sentences for tok in s.tokens)
    if not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def build_char_vocab(sentences: Iterable[LabeledSentence]) -> Vocabulary:
    counts = Counter(ch for s in sentences for tok in s.tokens for ch in tok)
    return Vocabulary(sorted(counts, key=lambda c: (-counts[c], c)))


@dataclass(frozen=True)
class EncodedSentence:
    words: np.ndarray
    labels: np.ndarray
    chars: tuple[np.ndarray, ...] | None = None

    def __len__(self) -> int:
        return len(self.words)


def encode_sentences(sentences, vocab: Vocabulary, label_index: dict[str, int], char_vocab: Vocabulary | None = None):
    out = []
    for s in sentences:
        try:
            labels = np.array([label_index[lab] for lab in s.labels], dtype=np.int64)
        except KeyError as exc:
            raise LabelError(f"label {exc.args[0]!r} not in alphabet") from None
        chars = None
        if char_vocab is not None:
            chars = tuple(char_vocab.encode(tok) for tok in s.tokens)
        out.append(EncodedSentence(vocab.encode(s.tokens), labels, chars))
    return out


# ---------------------------------------------------------------------------
# synthetic tasks


def gen_position_task(base: TaskDataset | Sequence[LabeledSentence], max_position: int = 63, name: str = "position") -> TaskDataset:
    """Label every token with its 0-based position, capped at ``max_position``."""
    if max_position < 1:
        raise ConfigError("max_position must be >= 1")

    def relabel(sents):
        return [
            LabeledSentence(s.tokens, tuple(str(min(i, max_position)) for i in range(len(s))))
            for s in sents
        ]

    alphabet = [str(i) for i in range(max_position + 1)]
    if isinstance(base, TaskDataset):
        return TaskDataset(name, relabel(base.train), relabel(base.dev), relabel(base.test), alphabet)
    return TaskDataset(name, relabel(base), [], [], alphabet)


@dataclass(frozen=True)
class PatternSource:
    """Latent structure behind :func:`gen_pattern_tasks`, kept for inspection."""

    n_other_states: int
    n_entity_types: int
    shared_states: frozenset[int]
    word_class: dict[str, int]

    @property
    def n_states(self) -> int:
        return self.n_other_states + self.n_entity_types


def _split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int]:
    n_train = int(round(n * fractions[0]))
    n_dev = int(round(n * fractions[1]))
    return n_train, n_dev


def gen_pattern_tasks(
    seed: int,
    vocab_size: int = 200,
    n_sentences: int = 2000,
    relatedness: float = 0.5,
    *,
    n_entity_types: int = 4,
    n_other_states: int = 6,
    length_range: tuple[int, int] = (8, 24),
    entity_rate: float = 0.15,
    n_word_classes: int = 5,
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    names: tuple[str, str] = ("pattern_a", "pattern_b"),
    return_source: bool = False,
):
    """Two token-tagging tasks driven by one latent Markov chain.

    The chain moves between ``n_other_states`` background states (one of them
    emits type-specific cue words ahead of entities) and ``n_entity_types``
    entity states.  Entity words come from per-type pools mixed with an
    ambiguous pool that background states also emit, so some spans can only
    be typed from context.

    Task A tags entity spans in BIO2 (``B-T3``, ``I-T3``, ``O``).  Task B
    copies task A's labels under a renaming at positions whose latent state is
    in a shared subset holding ``round(relatedness * n_states)`` states; every
    other position is labelled with a fixed random class of its word.  Task A
    and the tokens are drawn from a stream that does not depend on
    ``relatedness``.
    """
    if vocab_size < 20 or n_sentences < 3 or n_entity_types < 1 or n_other_states < 2:
        raise ConfigError("pattern generator parameters too small")
    if not 0.0 <= relatedness <= 1.0:
        raise ConfigError("relatedness must lie in [0, 1]")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ConfigError("bad sentence length range")

    root = np.random.SeedSequence([seed, 0x5A7])
    rng, rng_b = (np.random.Generator(np.random.PCG64(s)) for s in root.spawn(2))

    words = [f"w{i:03d}" for i in range(vocab_size)]
    order = rng.permutation(vocab_size)
    n_cue = 2 * n_entity_types
    n_amb = max(2, vocab_size // 20)
    n_ent_each = max(2, vocab_size // (3 * n_entity_types))
    cue_words = [[words[order[2 * k]], words[order[2 * k + 1]]] for k in range(n_entity_types)]
    pos = n_cue
    amb_pool = [words[i] for i in order[pos : pos + n_amb]]
    pos += n_amb
    ent_pools = []
    for _ in range(n_entity_types):
        ent_pools.append([words[i] for i in order[pos : pos + n_ent_each]])
        pos += n_ent_each
    rest = [words[i] for i in order[pos:]]
    n_plain = n_other_states - 1  # last background state emits cues
    if len(rest) < n_plain:
        raise ConfigError("vocabulary too small for the requested number of states")
    other_pools = [rest[j::n_plain] for j in range(n_plain)]
    cue_state = n_other_states - 1

    trans = rng.dirichlet(np.full(n_plain, 0.5), size=n_plain)
    type_probs = rng.dirichlet(np.full(n_entity_types, 4.0))
    pool_weights = [rng.dirichlet(np.ones(len(p))) for p in other_pools]

    sentences: list[tuple[list[str], list[int], list[str]]] = []
    for _ in range(n_sentences):
        length = int(rng.integers(lo, hi + 1))
        toks: list[str] = []
        states: list[int] = []
        labs: list[str] = []
        state = int(rng.integers(n_plain))
        while len(toks) < length:
            if rng.random() < entity_rate and len(toks) < length - 1:
                kind = int(rng.choice(n_entity_types, p=type_probs))
                if rng.random() < 0.5:
                    toks.append(cue_words[kind][int(rng.integers(2))])
                    states.append(cue_state)
                    labs.append("O")
                span = 1 + int(rng.choice(3, p=[0.5, 0.3, 0.2]))
                span = min(span, length - len(toks))
                for j in range(span):
                    pool = amb_pool if rng.random() < 0.25 else ent_pools[kind]
                    toks.append(pool[int(rng.integers(len(pool)))])
                    states.append(n_other_states + kind)
                    labs.append(("B-" if j == 0 else "I-") + f"T{kind}")
                continue
            state = int(rng.choice(n_plain, p=trans[state]))
            if rng.random() < 0.1:
                toks.append(amb_pool[int(rng.integers(len(amb_pool)))])
            else:
                pool = other_pools[state]
                toks.append(pool[int(rng.choice(len(pool), p=pool_weights[state]))])
            states.append(state)
            labs.append("O")
        sentences.append((toks[:length], states[:length], labs[:length]))

    n_states = n_other_states + n_entity_types
    n_shared = int(math.floor(relatedness * n_states + 0.5))
    shared = frozenset(int(s) for s in rng_b.permutation(n_states)[:n_shared])
    rename = rng_b.permutation(n_entity_types)
    word_class = {w: int(c) for w, c in zip(words, rng_b.integers(n_word_classes, size=vocab_size))}

    def renamed(label: str) -> str:
        if label == "O":
            return "N"
        return f"{label[0]}-R{rename[int(label[3:])]}"

    a_sents, b_sents = [], []
    for toks, states, labs in sentences:
        a_sents.append(sentence(toks, labs))
        b_labs = [renamed(lab) if st in shared else f"C{word_class[tok]}" for tok, st, lab in zip(toks, states, labs)]
        b_sents.append(sentence(toks, b_labs))

    n_train, n_dev = _split_counts(n_sentences, fractions)
    a_labels = ["O"] + [f"{p}-T{k}" for k in range(n_entity_types) for p in "BI"]
    b_labels = ["N"] + [f"{p}-R{k}" for k in range(n_entity_types) for p in "BI"]
    b_labels += [f"C{c}" for c in range(n_word_classes)]
    task_a = TaskDataset(
        names[0], a_sents[:n_train], a_sents[n_train : n_train + n_dev], a_sents[n_train + n_dev :],
        a_labels, metric="span_f1", scheme="BIO2",
    )
    task_b = TaskDataset(
        names[1], b_sents[:n_train], b_sents[n_train : n_train + n_dev], b_sents[n_train + n_dev :],
        b_labels, metric="accuracy",
    )
    if return_source:
        return task_a, task_b, PatternSource(n_other_states, n_entity_types, shared, word_class)
    return task_a, task_b
