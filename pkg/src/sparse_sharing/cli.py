"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 divergence.
``SPARSE_SHARING_OUTPUT_DIR`` and ``SPARSE_SHARING_SEED`` override the
config file; explicit flags override both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from .config import ENV_OUTPUT_DIR, ENV_SEED, MODES, ExperimentConfig, load_config
from .data import gen_pattern_tasks, gen_position_task, write_conll
from .errors import ConfigError, IntegrityError, SparseSharingError
from .evaluation import analysis_report
from .imp import CandidateLedger
from .masks import hierarchical_masks
from .model import load_checkpoint, network_from_checkpoint, restore
from .pipeline import (
    Prepared,
    RunLedger,
    evaluate_checkpoint,
    load_selections,
    prepare,
    run_experiment,
    stage_evaluate,
    stage_generate,
    stage_init,
    stage_select,
    stage_train,
    stage_warmup,
)


def _config(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed, output_dir=args.output_dir, mode=getattr(args, "mode", None))


def _load(args) -> tuple[Prepared, RunLedger]:
    cfg = _config(args)
    prep = prepare(cfg)
    ledger = RunLedger(cfg.output_dir)
    ledger.begin(prep)
    return prep, ledger


def _print(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _start_network(prep: Prepared, ledger: RunLedger, name: str):
    net, heads = prep.fresh_network()
    restore(ledger.load_checkpoint(name), net, heads)
    return net, heads


def _masks(prep: Prepared, ledger: RunLedger, space):
    if prep.config.mode == "sparse":
        return load_selections(ledger, space)
    if prep.config.mode == "hierarchical":
        return {m.task: m for m in hierarchical_masks(space, prep.config.hierarchy)}
    return None


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    report = run_experiment(_config(args))
    _print(report)
    return 0


def cmd_warmup(args) -> int:
    prep, ledger = _load(args)
    net, heads = stage_init(prep, ledger)
    stage_warmup(prep, ledger, net, heads)
    print(f"wrote {ledger.checkpoint('theta0')} and {ledger.checkpoint('warmup')}")
    return 0


def cmd_generate(args) -> int:
    prep, ledger = _load(args)
    warm = ledger.load_checkpoint("warmup")
    net, heads = _start_network(prep, ledger, "warmup")
    cands = stage_generate(prep, ledger, net, heads, warm)
    for task, cs in cands.candidates.items():
        print(f"{task}: {len(cs)} candidate masks")
    return 0


def cmd_select(args) -> int:
    prep, ledger = _load(args)
    net, _ = prep.fresh_network()
    cands = CandidateLedger.load(ledger.path("candidates"), net.space)
    stage_select(ledger, cands, net.space)
    _print(ledger.read_json("selections.json"))
    return 0


def cmd_train(args) -> int:
    prep, ledger = _load(args)
    mode = prep.config.mode
    start = "warmup" if mode == "sparse" else "theta0"
    if not ledger.checkpoint(start).exists():
        if mode == "sparse":
            raise IntegrityError(f"{ledger.checkpoint(start)}: run warmup first")
        stage_init(prep, ledger)
    net, heads = _start_network(prep, ledger, start)
    masks = _masks(prep, ledger, net.space)
    results = stage_train(prep, ledger, net, heads, masks)
    _print(stage_evaluate(prep, ledger, net, heads, masks, results))
    return 0


def cmd_evaluate(args) -> int:
    prep, ledger = _load(args)
    net, heads = prep.fresh_network()
    masks = _masks(prep, ledger, net.space)
    out = {}
    for task in prep.tasks:
        if args.checkpoint:
            ckpt = load_checkpoint(args.checkpoint)
        else:
            name = f"best_{task}"
            ckpt = ledger.load_checkpoint(name)
        out[task] = evaluate_checkpoint(prep, net, heads, ckpt, task, masks[task] if masks else None)
    _print(out)
    return 0


def cmd_analyze(args) -> int:
    root = Path(args.ledger)
    ledger = RunLedger(root)
    net, _ = network_from_checkpoint(ledger.load_checkpoint("theta0"))
    cands = CandidateLedger.load(root / "candidates", net.space)
    selected = load_selections(ledger, net.space)
    out_dir = Path(args.out) if args.out else root / "analysis"
    docs = analysis_report(cands, selected, net.space, out_dir)
    sys.stdout.write(docs["summary.txt"])
    print(f"report written to {out_dir}")
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    a, b = gen_pattern_tasks(args.seed, args.vocab_size, args.sentences, args.relatedness)
    pos = gen_position_task(a, args.max_position)
    tasks = []
    for ds in (a, b, pos):
        for split in ("train", "dev", "test"):
            write_conll(out / f"{ds.name}.{split}.conll", getattr(ds, split))
        spec = {"name": ds.name, "source": "conll", **{s: f"{ds.name}.{s}.conll" for s in ("train", "dev", "test")}}
        if ds.metric == "span_f1":
            spec.update(scheme=ds.scheme, metric="span_f1")
        tasks.append(spec)
    example = {"mode": "sparse", "seed": args.seed, "output_dir": "run", "tasks": tasks[:2]}
    (out / "config.yaml").write_text(yaml.safe_dump(example, sort_keys=False))
    print(f"wrote {len(tasks)} tasks to {out}")
    return 0


def cmd_negative_transfer(args) -> int:
    from .experiments import SyntheticConfig, negative_transfer

    seed = args.seed if args.seed is not None else int(os.environ.get(ENV_SEED, "0"))
    seeds = args.seeds if args.seeds else list(range(seed, seed + 5))
    if len(seeds) < 1:
        raise ConfigError("need at least one seed")
    given = {
        "vocab_size": args.vocab_size,
        "n_sentences": args.sentences,
        "steps": args.steps,
        "lr": args.lr,
        "imp_steps": args.imp_steps,
        "alpha": args.alpha,
        "min_sparsity": args.min_sparsity,
    }
    cfg = SyntheticConfig(**{k: v for k, v in given.items() if v is not None})
    out = args.output_dir or os.environ.get(ENV_OUTPUT_DIR) or "runs/negative_transfer"

    def progress(s, rows, extras):
        print(f"seed {s} done in {extras['seconds']:.0f}s", file=sys.stderr)

    report = negative_transfer(cfg, seeds, out, progress)
    sys.stdout.write(report.summary())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-sharing", description="Multi-task learning with sparse subnet sharing.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, mode=True):
        p.add_argument("config", help="experiment YAML file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        if mode:
            p.add_argument("--mode", choices=MODES, default=None)
        return p

    with_config(sub.add_parser("run", help="full pipeline for the configured sharing mode")).set_defaults(func=cmd_run)
    with_config(sub.add_parser("warmup", help="initialize and run multi-task warmup"), False).set_defaults(func=cmd_warmup)
    with_config(sub.add_parser("generate-subnets", help="IMP candidates from the warmup point"), False).set_defaults(func=cmd_generate)
    with_config(sub.add_parser("select", help="pick one candidate mask per task"), False).set_defaults(func=cmd_select)
    with_config(sub.add_parser("train", help="parallel training and evaluation")).set_defaults(func=cmd_train)
    p = with_config(sub.add_parser("evaluate", help="score checkpoints on dev and test"))
    p.add_argument("--checkpoint", default=None, help="checkpoint file (default: each task's best)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="sparsity and overlap report from a run directory")
    p.add_argument("ledger")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth-data", help="write synthetic CoNLL corpora and an example config")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--relatedness", type=float, default=0.5)
    p.add_argument("--max-position", type=int, default=63)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("negative-transfer", help="pattern task + position task: single vs hard vs sparse")
    p.add_argument("--seed", type=int, default=None, help="first seed (five consecutive seeds by default)")
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--output-dir", default=None)
    # unset options keep the SyntheticConfig defaults
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--sentences", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="single-task steps; joint runs take twice as many")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--imp-steps", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--min-sparsity", type=float, default=None)
    p.set_defaults(func=cmd_negative_transfer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SparseSharingError as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(error), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 2}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
