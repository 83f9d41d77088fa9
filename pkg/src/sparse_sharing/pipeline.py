"""End-to-end experiment stages and the on-disk run ledger.

Layout of a run directory::

    config.yaml             config echo (re-parses to an equal config)
    inputs.sha256           content hash of every task split
    checkpoints/            theta0, warmup, final and best-per-task states
    candidates/             every IMP mask plus metrics.csv
    selections.json         chosen mask per task
    train_log.jsonl         periodic dev scores and running train loss
    metrics.json            dev and test scores of the best-dev states
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .config import ExperimentConfig
from .data import (
    TaskDataset,
    Vocabulary,
    build_char_vocab,
    build_vocab,
    convert_sentences,
    gen_pattern_tasks,
    gen_position_task,
    read_conll,
)
from .errors import ConfigError, IntegrityError, UndefinedRatioError
from .imp import CandidateLedger, generate_subnets, mask_filename, multi_task_warmup, select_subnet
from .masks import MaskMatrix, hierarchical_masks, load_mask, overlap_ratio, sparsity
from .model import (
    BaseNetwork,
    Checkpoint,
    TaskHead,
    init_parameters,
    load_checkpoint,
    load_word_vectors,
    restore,
    save_checkpoint,
    snapshot,
)
from .schemes import RepairReport
from .trainer import TaskData, TrainResult, prepare_tasks, score, train_parallel


# ---------------------------------------------------------------------------
# data


def load_datasets(config: ExperimentConfig) -> list[TaskDataset]:
    """Materialize every configured task, in config order."""
    built: dict[str, TaskDataset] = {}
    pattern_cache: dict[str, tuple[TaskDataset, TaskDataset]] = {}
    pending = [s for s in config.tasks if s.source != "position"] + [s for s in config.tasks if s.source == "position"]
    for spec in pending:
        if spec.source == "conll":
            splits = []
            report = RepairReport()
            for path in (spec.train, spec.dev, spec.test):
                sents = read_conll(path, spec.token_column, spec.label_column) if path else []
                if spec.target_scheme is not None:
                    if spec.scheme is None:
                        raise ConfigError(f"task {spec.name!r}: target_scheme needs the source scheme")
                    sents = convert_sentences(sents, spec.scheme, spec.target_scheme, report)
                splits.append(sents)
            scheme = spec.target_scheme or spec.scheme
            metric = spec.metric or ("span_f1" if scheme else "accuracy")
            built[spec.name] = TaskDataset(spec.name, *splits, metric=metric, scheme=scheme)
        elif spec.source == "pattern":
            args = {"seed": config.seed, **spec.generator}
            key = json.dumps(args, sort_keys=True)
            if key not in pattern_cache:
                try:
                    pattern_cache[key] = gen_pattern_tasks(**args)
                except TypeError as exc:
                    raise ConfigError(f"task {spec.name!r}: bad generator arguments ({exc})") from None
            ds = pattern_cache[key][0 if spec.which == "a" else 1]
            built[spec.name] = dataclasses.replace(ds, name=spec.name)
        else:
            built[spec.name] = gen_position_task(built[spec.base], spec.max_position, spec.name)
    return [built[s.name] for s in config.tasks]


def input_digest(datasets: list[TaskDataset]) -> str:
    """sha256 over a canonical rendering of every split, label alphabet and metric."""
    h = hashlib.sha256()
    for ds in datasets:
        h.update(f"task\t{ds.name}\t{ds.metric}\t{ds.scheme}\t{' '.join(ds.labels)}\n".encode())
        for split, sents in (("train", ds.train), ("dev", ds.dev), ("test", ds.test)):
            h.update(f"split\t{split}\t{len(sents)}\n".encode())
            for s in sents:
                h.update(("\n".join(f"{t} {l}" for t, l in zip(s.tokens, s.labels)) + "\n\n").encode())
    return h.hexdigest()


@dataclass
class Prepared:
    config: ExperimentConfig
    datasets: list[TaskDataset]
    tasks: dict[str, TaskData]
    vocab: Vocabulary
    char_vocab: Vocabulary | None
    digest: str

    def head_specs(self) -> list[tuple[str, str, list[str]]]:
        kinds = {s.name: s.head for s in self.config.tasks}
        return [(ds.name, kinds[ds.name], ds.labels) for ds in self.datasets]

    def fresh_network(self) -> tuple[BaseNetwork, dict[str, TaskHead]]:
        model = dataclasses.replace(self.config.model)
        return init_parameters(model, self.vocab, self.head_specs(), self.config.seed, self.char_vocab)


def prepare(config: ExperimentConfig) -> Prepared:
    datasets = load_datasets(config)
    train_sents = [s for ds in datasets for s in ds.train]
    if not train_sents:
        raise ConfigError("no training sentences in any task")
    vocab = build_vocab(train_sents, config.min_count)
    char_vocab = build_char_vocab(train_sents) if config.model.char_cnn else None
    tasks = prepare_tasks(datasets, vocab, char_vocab)
    digest = input_digest(datasets)
    if config.word_vectors is not None:
        digest = hashlib.sha256((digest + hashlib.sha256(Path(config.word_vectors).read_bytes()).hexdigest()).encode()).hexdigest()
    return Prepared(config, datasets, tasks, vocab, char_vocab, digest)


# ---------------------------------------------------------------------------
# ledger


class RunLedger:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def checkpoint(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.ssck")

    def begin(self, prep: Prepared) -> None:
        self.path("checkpoints").mkdir(parents=True, exist_ok=True)
        prep.config.save(self.path("config.yaml"))
        digest = self.path("inputs.sha256")
        if digest.exists() and digest.read_text().strip() != prep.digest:
            raise IntegrityError(f"{digest}: run directory holds results for different inputs")
        digest.write_text(prep.digest + "\n")

    def save_checkpoint(self, name: str, ckpt: Checkpoint, net: BaseNetwork) -> None:
        self.path("checkpoints").mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.checkpoint(name), ckpt, net.space)

    def load_checkpoint(self, name: str) -> Checkpoint:
        path = self.checkpoint(name)
        if not path.exists():
            raise IntegrityError(f"{path}: missing checkpoint (run the earlier stage first)")
        return load_checkpoint(path)

    def write_json(self, name: str, data) -> None:
        self.path(name).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def read_json(self, name: str):
        path = self.path(name)
        if not path.exists():
            raise IntegrityError(f"{path}: missing ledger file")
        return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# stages


def stage_init(prep: Prepared, ledger: RunLedger) -> tuple[BaseNetwork, dict[str, TaskHead]]:
    net, heads = prep.fresh_network()
    if prep.config.word_vectors is not None:
        load_word_vectors(net, prep.config.word_vectors)
    ledger.save_checkpoint("theta0", snapshot(net, heads, "theta0"), net)
    return net, heads


def stage_warmup(prep: Prepared, ledger: RunLedger, net: BaseNetwork, heads: dict[str, TaskHead]) -> Checkpoint:
    cfg = prep.config
    steps = cfg.imp.warmup_steps
    if cfg.imp.warmup_epochs is not None:
        steps = dataclasses.replace(cfg.trainer, epochs=cfg.imp.warmup_epochs).resolve_steps(sum(t.size for t in prep.tasks.values()))
    warm = multi_task_warmup(net, heads, prep.tasks, steps, cfg.trainer)
    ledger.save_checkpoint("warmup", warm, net)
    return warm


def stage_generate(prep: Prepared, ledger: RunLedger, net: BaseNetwork, heads: dict[str, TaskHead], warm: Checkpoint) -> CandidateLedger:
    cands = generate_subnets(net, heads, prep.tasks, warm, prep.config.imp, prep.config.trainer)
    cands.save(ledger.path("candidates"), net.space)
    return cands


def stage_select(ledger: RunLedger, cands: CandidateLedger, space) -> dict[str, MaskMatrix]:
    chosen = {}
    record = {}
    for task, cs in cands.candidates.items():
        mask = select_subnet(cs)
        cand = next(c for c in cs if c.iteration == mask.iteration)
        chosen[task] = mask
        record[task] = {
            "z": mask.iteration,
            "mask_file": f"candidates/masks/{mask_filename(task, mask.iteration)}",
            "kept_prunable": mask.kept,
            "sparsity": sparsity(mask, space),
            "dev_score": cand.dev_score,
        }
    ledger.write_json("selections.json", record)
    return chosen


def load_selections(ledger: RunLedger, space) -> dict[str, MaskMatrix]:
    record = ledger.read_json("selections.json")
    out = {}
    for task, entry in record.items():
        path = ledger.path(entry["mask_file"])
        if not path.exists():
            raise IntegrityError(f"{path}: selected mask file is missing")
        out[task] = load_mask(path, space)
    return out


def stage_train(
    prep: Prepared,
    ledger: RunLedger,
    net: BaseNetwork,
    heads: dict[str, TaskHead],
    masks: Mapping[str, MaskMatrix] | None,
) -> dict[str, TrainResult]:
    """Train per the sharing mode; returns one result per independent run.

    Single mode trains each task alone from the same initial point, so it
    returns one result per task; every other mode returns one shared run.
    """
    cfg = prep.config
    results: dict[str, TrainResult] = {}
    start = snapshot(net, heads, "start")
    with open(ledger.path("train_log.jsonl"), "w") as log:
        if cfg.mode == "single":
            for task in prep.tasks:
                restore(start, net, heads)
                results[task] = train_parallel(net, heads, None, {task: prep.tasks[task]}, cfg.trainer, log_file=log)
                ledger.save_checkpoint(f"final_{task}", results[task].final, net)
        else:
            res = train_parallel(net, heads, masks, prep.tasks, cfg.trainer, log_file=log)
            ledger.save_checkpoint("final", res.final, net)
            results = {t: res for t in prep.tasks}
    for task, res in results.items():
        if task in res.best:
            ledger.save_checkpoint(f"best_{task}", res.best[task], net)
    return results


def evaluate_checkpoint(
    prep: Prepared,
    net: BaseNetwork,
    heads: dict[str, TaskHead],
    ckpt: Checkpoint,
    task: str,
    mask: MaskMatrix | None,
) -> dict[str, float | None]:
    restore(ckpt, net, heads)
    data = prep.tasks[task]
    out: dict[str, float | None] = {}
    for split in ("dev", "test"):
        sents = getattr(data, split)
        out[split] = score(net, heads[task], mask, sents, data) if sents else None
    return out


def stage_evaluate(
    prep: Prepared,
    ledger: RunLedger,
    net: BaseNetwork,
    heads: dict[str, TaskHead],
    masks: Mapping[str, MaskMatrix] | None,
    results: Mapping[str, TrainResult],
) -> dict:
    """Score each task's best-dev state (or the final state without a dev split)."""
    cfg = prep.config
    report: dict = {"mode": cfg.mode, "seed": cfg.seed, "inputs_sha256": prep.digest, "tasks": {}}
    for task, res in results.items():
        ckpt = res.best.get(task, res.final)
        mask = masks[task] if masks is not None else None
        scores = evaluate_checkpoint(prep, net, heads, ckpt, task, mask)
        report["tasks"][task] = {
            "metric": prep.tasks[task].metric,
            **scores,
            "sparsity": sparsity(mask, net.space) if mask is not None else 1.0,
        }
    if masks is not None and len(masks) > 1:
        try:
            report["overlap_ratio"] = overlap_ratio(list(masks.values()))
        except UndefinedRatioError:
            report["overlap_ratio"] = None
    ledger.write_json("metrics.json", report)
    return report


def run_experiment(config: ExperimentConfig) -> dict:
    """The full pipeline for the configured sharing mode; returns the metrics report."""
    prep = prepare(config)
    ledger = RunLedger(config.output_dir)
    ledger.begin(prep)
    net, heads = stage_init(prep, ledger)
    masks: dict[str, MaskMatrix] | None = None
    if config.mode == "hierarchical":
        masks = {m.task: m for m in hierarchical_masks(net.space, config.hierarchy)}
    elif config.mode == "sparse":
        warm = stage_warmup(prep, ledger, net, heads)
        cands = stage_generate(prep, ledger, net, heads, warm)
        masks = stage_select(ledger, cands, net.space)
        restore(warm, net, heads)
    results = stage_train(prep, ledger, net, heads, masks)
    return stage_evaluate(prep, ledger, net, heads, masks, results)
