"""Stochastic multi-task training of overlapping masked subnetworks.

Each step samples a task with probability proportional to its training-set
size, draws a mini-batch from it, and takes a plain SGD step on that task's
subnetwork: encoder coordinates outside the task's mask are never touched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np

from .data import EncodedSentence, TaskDataset, Vocabulary, encode_sentences
from .errors import ConfigError, DimensionError, DivergenceError, NonFiniteError
from .evaluation import corpus_span_f1, token_accuracy
from .masks import MaskMatrix
from .model import BaseNetwork, Bound, Checkpoint, TaskHead, batch_loss, predict_batch, snapshot
from .rng import get_state, stream
from .tensor import GradTape


@dataclass
class TrainerConfig:
    lr: float = 0.1
    batch_size: int = 10
    steps: int = 1000
    epochs: float | None = None
    eval_every: int = 200
    loss_weights: dict[str, float] = field(default_factory=dict)
    lr_decay: float = 0.0
    clip_norm: float | None = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ConfigError("loss weights must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")

    def weight(self, task: str) -> float:
        return float(self.loss_weights.get(task, 1.0))

    def resolve_steps(self, total_train_sentences: int) -> int:
        """Step budget; an ``epochs`` setting overrides ``steps``."""
        if self.epochs is None:
            return int(self.steps)
        return int(math.ceil(self.epochs * total_train_sentences / self.batch_size))


@dataclass
class TaskData:
    """A task's encoded splits plus the metadata needed to score it."""

    name: str
    train: list[EncodedSentence]
    dev: list[EncodedSentence]
    test: list[EncodedSentence]
    labels: list[str]
    metric: str = "accuracy"
    scheme: str | None = None

    @property
    def size(self) -> int:
        return len(self.train)


def prepare_tasks(datasets: Sequence[TaskDataset], vocab: Vocabulary, char_vocab: Vocabulary | None = None) -> dict[str, TaskData]:
    out = {}
    for ds in datasets:
        idx = ds.label_index()
        out[ds.name] = TaskData(
            ds.name,
            encode_sentences(ds.train, vocab, idx, char_vocab),
            encode_sentences(ds.dev, vocab, idx, char_vocab),
            encode_sentences(ds.test, vocab, idx, char_vocab),
            list(ds.labels),
            ds.metric,
            ds.scheme,
        )
    if not out:
        raise ConfigError("no tasks given")
    return out


# ---------------------------------------------------------------------------
# scoring


def score(net: BaseNetwork, head: TaskHead, mask: MaskMatrix | None, sentences: Sequence[EncodedSentence], task: TaskData, batch_size: int = 64) -> float:
    """Token accuracy or span F1 (as a fraction) of ``head`` on ``sentences``."""
    preds: list[np.ndarray] = []
    for i in range(0, len(sentences), batch_size):
        preds.extend(predict_batch(net, head, mask, sentences[i : i + batch_size]))
    gold = [s.labels for s in sentences]
    if task.metric == "accuracy":
        return token_accuracy(preds, gold)
    names = task.labels
    return corpus_span_f1([[names[i] for i in p] for p in preds], [[names[i] for i in g] for g in gold], task.scheme)


def mean_loss(net: BaseNetwork, head: TaskHead, mask: MaskMatrix | None, sentences: Sequence[EncodedSentence], batch_size: int = 64) -> float:
    """Eval-mode loss averaged over batches, weighted by batch size."""
    total = 0.0
    for i in range(0, len(sentences), batch_size):
        batch = sentences[i : i + batch_size]
        bound = Bound(net, head, mask, track=False)
        total += batch_loss(bound, head, batch, False, None).item() * len(batch)
    return total / len(sentences)


# ---------------------------------------------------------------------------
# sampling


def sample_task(sizes: Sequence[int], rng: np.random.Generator) -> int:
    """Index ``t`` drawn with probability ``sizes[t] / sum(sizes)``."""
    if len(sizes) == 0:
        raise ConfigError("no tasks to sample from")
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.min() < 1:
        raise ConfigError("every task needs at least one training sentence")
    cdf = np.cumsum(sizes / sizes.sum())
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), len(sizes) - 1)


def task_probabilities(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


class BatchStream:
    """Endless mini-batches over ``n`` items, reshuffled every pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


# ---------------------------------------------------------------------------
# updates


def joint_loss(losses: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted sum of per-task losses."""
    if len(losses) != len(weights):
        raise DimensionError(f"{len(losses)} losses but {len(weights)} weights")
    return float(sum(w * l for w, l in zip(weights, losses)))


def masked_update(
    net: BaseNetwork,
    head: TaskHead,
    mask: MaskMatrix | None,
    batch: Sequence[EncodedSentence],
    lr: float,
    *,
    rng: np.random.Generator | None = None,
    clip_norm: float | None = None,
    weight: float = 1.0,
    train: bool = True,
) -> float:
    """One SGD step on the subnetwork selected by ``mask``; returns the batch loss.

    ``mask=None`` is the mask-free path used for hard sharing.  Encoder
    coordinates whose mask bit is 0 receive an exactly-zero step.
    """
    if not batch:
        raise ConfigError("empty batch")
    try:
        with GradTape() as tape:
            bound = Bound(net, head, mask, track=True)
            loss = batch_loss(bound, head, batch, train, rng)
        tape.backward(loss, np.asarray(weight, dtype=np.float64))
    except NonFiniteError as exc:
        raise DivergenceError(f"task {head.name!r}: non-finite value during update ({exc})") from None
    value = loss.item()
    g_enc = bound.encoder_grad(tape)
    if mask is not None:
        g_enc = g_enc * net.space.expand(mask)
    g_head = bound.head_grads(tape)
    if clip_norm is not None:
        norm = math.sqrt(float(g_enc @ g_enc) + sum(float(np.sum(g * g)) for g in g_head.values()))
        if not math.isfinite(norm):
            raise DivergenceError(f"task {head.name!r}: gradient norm is not finite")
        if norm > clip_norm:
            factor = clip_norm / norm
            g_enc = g_enc * factor
            g_head = {k: g * factor for k, g in g_head.items()}
    net.theta -= lr * g_enc
    for k, g in g_head.items():
        head.params[k] -= lr * g
    return value


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainState:
    step: int = 0
    running_loss: dict[str, float] = field(default_factory=dict)
    updates: dict[str, int] = field(default_factory=dict)
    best_dev: dict[str, float] = field(default_factory=dict)
    rng_states: dict = field(default_factory=dict)

    def record(self, task: str, loss: float) -> None:
        self.running_loss[task] = self.running_loss.get(task, 0.0) + loss
        self.updates[task] = self.updates.get(task, 0) + 1


@dataclass
class TrainResult:
    state: TrainState
    final: Checkpoint
    best: dict[str, Checkpoint]
    log: list[dict]


def train_parallel(
    net: BaseNetwork,
    heads: Mapping[str, TaskHead],
    masks: Mapping[str, MaskMatrix] | None,
    tasks: Mapping[str, TaskData],
    config: TrainerConfig,
    *,
    log_file: IO[str] | None = None,
    stream_key: str = "train",
) -> TrainResult:
    """Run the proportional-sampling loop in place on ``net`` and ``heads``.

    ``masks=None`` selects the mask-free hard-sharing path.  With
    ``eval_every > 0`` every task is scored on its dev split at step 0, at the
    cadence and at the end; a snapshot is kept for each task's best dev score.
    """
    config.validate()
    names = list(tasks)
    if masks is not None and set(masks) != set(names):
        raise ConfigError("need exactly one mask per task")
    seed = config.seed
    sizes = [tasks[t].size for t in names]
    task_rng = stream(seed, f"{stream_key}/tasks")
    drop_rng = stream(seed, f"{stream_key}/dropout")
    batches = {t: BatchStream(tasks[t].size, config.batch_size, stream(seed, f"{stream_key}/batches/{i}")) for i, t in enumerate(names)}
    steps = config.resolve_steps(sum(sizes))
    state = TrainState()
    best: dict[str, Checkpoint] = {}
    log: list[dict] = []

    def evaluate(step: int) -> None:
        for t in names:
            mask = masks[t] if masks is not None else None
            value = score(net, heads[t], mask, tasks[t].dev, tasks[t]) if tasks[t].dev else float("nan")
            n_up = state.updates.get(t, 0)
            record = {
                "step": step,
                "task": t,
                "dev_metric": value,
                "train_loss": state.running_loss.get(t, 0.0) / n_up if n_up else None,
            }
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if t not in state.best_dev or value > state.best_dev[t]:
                state.best_dev[t] = value
                best[t] = snapshot(net, heads, f"best/{t}")
            state.running_loss[t] = 0.0
            state.updates[t] = 0

    if config.eval_every > 0:
        evaluate(0)
    for step in range(1, steps + 1):
        t = names[sample_task(sizes, task_rng)]
        batch = [tasks[t].train[i] for i in batches[t].next()]
        lr = config.lr / (1.0 + config.lr_decay * (step - 1))
        loss = masked_update(
            net,
            heads[t],
            masks[t] if masks is not None else None,
            batch,
            lr,
            rng=drop_rng,
            clip_norm=config.clip_norm,
            weight=config.weight(t),
        )
        state.step = step
        state.record(t, loss)
        if config.eval_every > 0 and (step % config.eval_every == 0 or step == steps):
            evaluate(step)
    state.rng_states = {"tasks": get_state(task_rng), "dropout": get_state(drop_rng)}
    final = snapshot(net, heads, "final", state.rng_states)
    return TrainResult(state, final, best, log)


def train_hard_sharing(net, heads, tasks, config: TrainerConfig, **kwargs) -> TrainResult:
    """All tasks read and update the whole encoder; no masking anywhere."""
    return train_parallel(net, heads, None, tasks, config, **kwargs)
