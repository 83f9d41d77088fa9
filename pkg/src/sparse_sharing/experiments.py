"""Desk-scale synthetic experiments.

``negative_transfer`` pairs the entity-tagging pattern task with the
unrelated position-prediction task on the same sentences and compares single
task, hard sharing and sparse sharing.  ``relatedness_overlap`` measures how
much two pattern tasks' pruned subnets overlap as their label functions share
more latent structure.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import build_vocab, gen_pattern_tasks, gen_position_task
from .imp import ImpConfig, generate_subnets, multi_task_warmup, select_all
from .masks import MaskMatrix, overlap_ratio, sparsity
from .model import BaseNetwork, ModelConfig, TaskHead, init_parameters, restore
from .trainer import TaskData, TrainerConfig, TrainResult, prepare_tasks, score, train_parallel

PATTERN = "pattern"
POSITION = "position"


@dataclass
class SyntheticConfig:
    vocab_size: int = 200
    n_sentences: int = 2000
    relatedness: float = 0.5
    hidden: int = 50
    word_dim: int = 50
    dropout: float = 0.5
    lr: float = 0.2
    batch_size: int = 10
    steps: int = 1000
    eval_every: int = 100
    warmup_steps: int = 100
    alpha: float = 0.3
    min_sparsity: float = 0.3
    imp_steps: int = 500
    max_position: int = 63

    def model(self) -> ModelConfig:
        return ModelConfig(word_dim=self.word_dim, hidden=self.hidden, dropout=self.dropout)

    def trainer(self, seed: int, steps: int) -> TrainerConfig:
        return TrainerConfig(lr=self.lr, batch_size=self.batch_size, steps=steps, eval_every=self.eval_every, seed=seed)

    def imp(self, seed: int) -> ImpConfig:
        return ImpConfig(alpha=self.alpha, min_sparsity=self.min_sparsity, steps=self.imp_steps, warmup_steps=self.warmup_steps, seed=seed)


def _best_test(net: BaseNetwork, heads: dict[str, TaskHead], masks, result: TrainResult, task: str, data: TaskData) -> float:
    restore(result.best[task], net, heads)
    return score(net, heads[task], masks[task] if masks is not None else None, data.test, data)


def _setup(cfg: SyntheticConfig, seed: int):
    pattern, _ = gen_pattern_tasks(seed, cfg.vocab_size, cfg.n_sentences, cfg.relatedness, names=(PATTERN, "unused"))
    position = gen_position_task(pattern, cfg.max_position, POSITION)
    vocab = build_vocab(pattern.train)
    tasks = prepare_tasks([pattern, position], vocab)
    specs = [(PATTERN, "softmax", pattern.labels), (POSITION, "softmax", position.labels)]

    def fresh():
        return init_parameters(cfg.model(), vocab, specs, seed)

    return tasks, fresh


@dataclass
class TransferRow:
    seed: int
    mode: str
    task: str
    score: float
    delta: float


@dataclass
class TransferReport:
    rows: list[TransferRow] = field(default_factory=list)
    extras: dict[int, dict] = field(default_factory=dict)

    def deltas(self, mode: str, task: str) -> list[float]:
        return [r.delta for r in self.rows if r.mode == mode and r.task == task]

    def mean_delta(self, mode: str, task: str) -> float:
        return float(np.mean(self.deltas(mode, task)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seed", "mode", "task", "score", "delta"])
        for r in self.rows:
            writer.writerow([r.seed, r.mode, r.task, f"{r.score:.6f}", f"{r.delta:+.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        lines = ["Synthetic negative transfer: score change vs single-task training (points x100)", ""]
        lines.append(f"{'mode':<8}{'task':<10}{'mean delta':>12}  per seed")
        for mode in ("single", "hard", "sparse"):
            for task in (PATTERN, POSITION):
                ds = self.deltas(mode, task)
                if ds:
                    per = " ".join(f"{100 * d:+.2f}" for d in ds)
                    lines.append(f"{mode:<8}{task:<10}{100 * np.mean(ds):>+12.2f}  {per}")
        return "\n".join(lines) + "\n"


def negative_transfer_seed(cfg: SyntheticConfig, seed: int) -> tuple[list[TransferRow], dict]:
    """Single, hard and sparse runs for one seed.

    Single-task runs take ``steps`` updates each; the two-task runs take
    ``2 * steps`` so that, under proportional sampling over equal-sized
    tasks, each task sees about as many updates as when trained alone.
    Scores are test metrics of each task's best-dev state.
    """
    tasks, fresh = _setup(cfg, seed)
    t0 = time.perf_counter()
    single = {}
    for task in (PATTERN, POSITION):
        net, heads = fresh()
        res = train_parallel(net, heads, None, {task: tasks[task]}, cfg.trainer(seed, cfg.steps))
        single[task] = _best_test(net, heads, None, res, task, tasks[task])

    joint = cfg.trainer(seed, 2 * cfg.steps)
    net, heads = fresh()
    res = train_parallel(net, heads, None, tasks, joint)
    hard = {t: _best_test(net, heads, None, res, t, tasks[t]) for t in tasks}

    net, heads = fresh()
    icfg = cfg.imp(seed)
    warm = multi_task_warmup(net, heads, tasks, icfg.warmup_steps, joint)
    ledger = generate_subnets(net, heads, tasks, warm, icfg, joint)
    masks = select_all(ledger)
    restore(warm, net, heads)
    res = train_parallel(net, heads, masks, tasks, joint)
    sparse = {t: _best_test(net, heads, masks, res, t, tasks[t]) for t in tasks}

    rows = []
    for mode, scores in (("single", single), ("hard", hard), ("sparse", sparse)):
        for t in (PATTERN, POSITION):
            rows.append(TransferRow(seed, mode, t, scores[t], scores[t] - single[t]))
    extras = {
        "sparsity": {t: sparsity(m, net.space) for t, m in masks.items()},
        "overlap_ratio": overlap_ratio(list(masks.values())),
        "seconds": time.perf_counter() - t0,
    }
    return rows, extras


def negative_transfer(cfg: SyntheticConfig, seeds: Sequence[int], out_dir: str | Path | None = None, progress=None) -> TransferReport:
    report = TransferReport()
    for seed in seeds:
        rows, extras = negative_transfer_seed(cfg, seed)
        report.rows += rows
        report.extras[seed] = extras
        if progress is not None:
            progress(seed, rows, extras)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "negative_transfer.csv").write_text(report.to_csv())
        (out / "negative_transfer.txt").write_text(report.summary())
    return report


# ---------------------------------------------------------------------------
# relatedness vs overlap


@dataclass
class OverlapResult:
    seed: int
    relatedness: float
    floor_overlap: float
    selected_overlap: float
    selected: dict[str, MaskMatrix]


def relatedness_overlap(cfg: SyntheticConfig, seed: int, relatedness: float) -> OverlapResult:
    """IMP on both pattern tasks; overlap of the floor masks and of the selected masks.

    Both tasks' final masks have the same kept count, so the floor overlap
    compares subnets of equal size.
    """
    a, b = gen_pattern_tasks(seed, cfg.vocab_size, cfg.n_sentences, relatedness)
    vocab = build_vocab(a.train)
    tasks = prepare_tasks([a, b], vocab)
    specs = [(d.name, "softmax", d.labels) for d in (a, b)]
    net, heads = init_parameters(cfg.model(), vocab, specs, seed)
    icfg = cfg.imp(seed)
    tcfg = cfg.trainer(seed, icfg.steps)
    warm = multi_task_warmup(net, heads, tasks, icfg.warmup_steps, tcfg)
    ledger = generate_subnets(net, heads, tasks, warm, icfg, tcfg)
    selected = select_all(ledger)
    final = ledger.final_masks()
    return OverlapResult(
        seed,
        relatedness,
        overlap_ratio(list(final.values())),
        overlap_ratio(list(selected.values())),
        selected,
    )
