"""Per-task subnet generation by iterative magnitude pruning with warmup rewinding."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError, ProgressStallError, SelectionError
from .masks import MaskMatrix, ParamSpace, full_mask, load_mask, save_mask, sparsity
from .model import BaseNetwork, Checkpoint, TaskHead, restore, snapshot
from .trainer import TaskData, TrainerConfig, score, train_parallel

TIE_TOLERANCE = 1e-9


@dataclass
class ImpConfig:
    alpha: float = 0.1
    min_sparsity: float = 0.5
    steps: int = 200
    epochs: float | None = None
    warmup_steps: int = 0
    warmup_epochs: float | None = None
    concurrent: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("pruning rate alpha must lie in (0, 1)")
        if not 0.0 < self.min_sparsity < 1.0:
            raise ConfigError("minimal sparsity must lie in (0, 1)")
        if self.epochs is None and self.steps < 1:
            raise ConfigError("IMP needs at least one training step per iteration")
        if self.warmup_steps < 0:
            raise ConfigError("warmup steps must be >= 0")


@dataclass
class Candidate:
    task: str
    iteration: int
    mask: MaskMatrix
    dev_score: float | None
    sparsity: float

    @property
    def remaining(self) -> int:
        return self.mask.kept


@dataclass
class CandidateLedger:
    """Every mask visited by IMP per task, in iteration order.

    The last entry of each task is the mask that crossed the sparsity floor;
    it was never trained, so its ``dev_score`` is ``None``.
    """

    candidates: dict[str, list[Candidate]] = field(default_factory=dict)
    warmup: str | None = None

    def tasks(self) -> list[str]:
        return list(self.candidates)

    def final_masks(self) -> dict[str, MaskMatrix]:
        return {t: c[-1].mask for t, c in self.candidates.items()}

    def save(self, directory: str | Path, space: ParamSpace) -> None:
        out = Path(directory)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        rows = []
        for task, cands in self.candidates.items():
            for c in cands:
                save_mask(out / "masks" / mask_filename(task, c.iteration), c.mask, space)
                rows.append([task, c.iteration, c.remaining, f"{c.sparsity:.10f}", "" if c.dev_score is None else repr(c.dev_score)])
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["task", "z", "remaining_count", "sparsity", "dev_score"])
            writer.writerows(rows)
        if self.warmup is not None:
            (out / "warmup.txt").write_text(self.warmup + "\n")

    @classmethod
    def load(cls, directory: str | Path, space: ParamSpace) -> "CandidateLedger":
        root = Path(directory)
        metrics = root / "metrics.csv"
        if not metrics.exists():
            raise IntegrityError(f"{metrics}: missing candidate metrics table")
        ledger = cls()
        with open(metrics, newline="") as fh:
            for row in csv.DictReader(fh):
                path = root / "masks" / mask_filename(row["task"], int(row["z"]))
                if not path.exists():
                    raise IntegrityError(f"{path}: missing mask file")
                try:
                    mask = load_mask(path, space)
                except FormatError as exc:
                    raise IntegrityError(f"{path}: {exc}") from None
                if mask.kept != int(row["remaining_count"]):
                    raise IntegrityError(f"{path}: kept count disagrees with metrics table")
                dev = float(row["dev_score"]) if row["dev_score"] else None
                ledger.candidates.setdefault(row["task"], []).append(
                    Candidate(row["task"], int(row["z"]), mask, dev, float(row["sparsity"]))
                )
        warm = root / "warmup.txt"
        if warm.exists():
            ledger.warmup = warm.read_text().strip()
        return ledger


def mask_filename(task: str, iteration: int) -> str:
    return f"{task}_z{iteration:03d}.ssmk"


def prune_count(alpha: float, remaining: int) -> int:
    """floor(alpha * remaining), with alpha read as the decimal it was written as."""
    return math.floor(Fraction(repr(float(alpha))) * remaining)


def prune_step(theta: np.ndarray, mask: MaskMatrix, alpha: float) -> MaskMatrix:
    """Drop the ``floor(alpha * kept)`` kept coordinates of smallest magnitude.

    ``theta`` holds the trained values of the prunable coordinates, aligned
    with the mask bits.  Pruning is global across blocks; equal magnitudes go
    lowest index first.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != mask.bits.shape:
        raise ConfigError(f"{theta.size} values for a mask of {len(mask)} bits")
    kept = np.flatnonzero(mask.bits)
    n = prune_count(alpha, kept.size)
    if n == 0:
        raise ProgressStallError(f"cannot prune {alpha} of {kept.size} remaining coordinates")
    order = np.lexsort((kept, np.abs(theta[kept])))
    bits = mask.bits.copy()
    bits[kept[order[:n]]] = False
    return mask.with_bits(bits, mask.iteration + 1)


def remaining_schedule(prunable: int, fixed: int, alpha: float, floor: float) -> list[int]:
    """Kept prunable counts visited by IMP until the remaining fraction reaches ``floor``."""
    total = prunable + fixed
    counts = [prunable]
    while (counts[-1] + fixed) / total > floor:
        n = prune_count(alpha, counts[-1])
        if n == 0:
            raise ProgressStallError("pruning stalls before reaching the sparsity floor")
        counts.append(counts[-1] - n)
    return counts


def multi_task_warmup(
    net: BaseNetwork,
    heads: Mapping[str, TaskHead],
    tasks: Mapping[str, TaskData],
    steps: int,
    trainer_config: TrainerConfig,
) -> Checkpoint:
    """Unmasked multi-task training for ``steps`` steps; returns the rewind point."""
    if not tasks:
        raise ConfigError("warmup needs at least one task")
    if steps < 0:
        raise ConfigError("warmup steps must be >= 0")
    if steps > 0:
        cfg = TrainerConfig(**{**vars(trainer_config), "steps": steps, "epochs": None, "eval_every": 0})
        train_parallel(net, heads, None, tasks, cfg, stream_key="warmup")
    return snapshot(net, heads, "warmup")


def _run_task(
    task: str,
    net: BaseNetwork,
    heads: Mapping[str, TaskHead],
    data: TaskData,
    warm: Checkpoint,
    config: ImpConfig,
    trainer_config: TrainerConfig,
) -> list[Candidate]:
    space = net.space
    net = net.copy()
    heads = {k: h.copy() for k, h in heads.items()}
    local = {task: heads[task]}
    mask = full_mask(space, task)
    out: list[Candidate] = []
    cfg = TrainerConfig(
        **{**vars(trainer_config), "steps": config.steps, "epochs": config.epochs, "eval_every": 0, "seed": config.seed}
    )
    while True:
        restore(warm, net, heads)
        # stream key excludes the task name: identical data gives identical masks
        train_parallel(net, local, {task: mask}, {task: data}, cfg, stream_key=f"imp/z{mask.iteration}")
        dev = score(net, heads[task], mask, data.dev, data) if data.dev else float("nan")
        out.append(Candidate(task, mask.iteration, mask, dev, sparsity(mask, space)))
        mask = prune_step(space.prunable_values(net.theta), mask, config.alpha)
        s = sparsity(mask, space)
        if s <= config.min_sparsity:
            out.append(Candidate(task, mask.iteration, mask, None, s))
            return out


def generate_subnets(
    net: BaseNetwork,
    heads: Mapping[str, TaskHead],
    tasks: Mapping[str, TaskData],
    warm: Checkpoint,
    config: ImpConfig,
    trainer_config: TrainerConfig,
) -> CandidateLedger:
    """Run IMP independently for every task, rewinding to ``warm`` each iteration.

    ``net`` and ``heads`` are not modified; each task works on private copies.
    """
    config.validate()
    space = net.space
    if space.n_fixed / space.total >= config.min_sparsity:
        raise ConfigError(
            f"minimal sparsity {config.min_sparsity} is below the non-prunable fraction {space.n_fixed / space.total:.4f}"
        )
    remaining_schedule(space.n_prunable, space.n_fixed, config.alpha, config.min_sparsity)
    names = list(tasks)
    args = [(t, net, heads, tasks[t], warm, config, trainer_config) for t in names]
    if config.concurrent and len(names) > 1:
        with ThreadPoolExecutor(max_workers=len(names)) as pool:
            results = list(pool.map(lambda a: _run_task(*a), args))
    else:
        results = [_run_task(*a) for a in args]
    return CandidateLedger(dict(zip(names, results)), warm.tag)


def select_subnet(candidates: Sequence[Candidate]) -> MaskMatrix:
    """Best dev score; near-ties (within 1e-9) go to the most pruned candidate."""
    scored = [c for c in candidates if c.dev_score is not None and not math.isnan(c.dev_score)]
    if not scored:
        raise SelectionError("no scored candidate to select from")
    best = max(c.dev_score for c in scored)
    tied = [c for c in scored if c.dev_score >= best - TIE_TOLERANCE]
    return min(tied, key=lambda c: (c.sparsity, -c.iteration)).mask


def select_all(ledger: CandidateLedger) -> dict[str, MaskMatrix]:
    return {t: select_subnet(c) for t, c in ledger.candidates.items()}
