"""Token accuracy, exact-match span F1 and the structural analysis report."""

from __future__ import annotations

import csv
import io
import itertools
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, UndefinedRatioError
from .masks import MaskMatrix, ParamSpace, overlap_ratio, sparsity
from .schemes import RepairReport, decode_spans

if TYPE_CHECKING:
    from .imp import CandidateLedger

SPARSITY_HEADER = "remaining_fraction"
SPARSITY_NOTE = (
    "'sparsity' in these reports is the remaining fraction of encoder parameters "
    "(kept / total, embeddings counted as kept); 1.0 means unpruned."
)
OR_NOTE = "Overlap ratios are computed over prunable encoder coordinates only."


def token_accuracy(pred: Sequence[Sequence], gold: Sequence[Sequence]) -> float:
    if len(pred) != len(gold):
        raise AlignmentError(f"{len(pred)} predicted vs {len(gold)} gold sentences")
    hits = total = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise AlignmentError(f"sentence lengths differ: {len(p)} vs {len(g)}")
        hits += int(np.sum(np.asarray(p) == np.asarray(g)))
        total += len(g)
    if total == 0:
        raise AlignmentError("no tokens to score")
    return hits / total


def extract_spans(labels: Sequence[str], scheme: str, report: RepairReport | None = None) -> set[tuple[int, int, str]]:
    return set(decode_spans(labels, scheme, report))


def span_f1(pred: Iterable[set], gold: Iterable[set]) -> tuple[float, float, float]:
    """Micro precision, recall and F1 over per-sentence span sets (exact match)."""
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise AlignmentError(f"{len(pred)} predicted vs {len(gold)} gold sentences")
    n_pred = sum(len(p) for p in pred)
    n_gold = sum(len(g) for g in gold)
    correct = sum(len(set(p) & set(g)) for p, g in zip(pred, gold))
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def corpus_span_f1(pred_labels, gold_labels, scheme: str) -> float:
    pred = [extract_spans(p, scheme) for p in pred_labels]
    gold = [extract_spans(g, scheme) for g in gold_labels]
    return span_f1(pred, gold)[2]


# ---------------------------------------------------------------------------
# analysis report


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def _safe_or(masks: Sequence[MaskMatrix]) -> float | None:
    try:
        return overlap_ratio(masks)
    except UndefinedRatioError:
        return None


def analysis_report(
    ledger: "CandidateLedger",
    selected: Mapping[str, MaskMatrix],
    space: ParamSpace,
    out_dir: str | Path | None = None,
) -> dict[str, str]:
    """Sparsity table, pairwise and T-way overlap ratios, and per-iteration curves.

    Returns the documents by file name; when ``out_dir`` is given they are
    also written there.  Output depends only on the inputs, so regenerating
    from a persisted ledger is byte-identical.
    """
    tasks = sorted(selected)
    sel_rows = []
    for t in tasks:
        m = selected[t]
        sel_rows.append([t, m.iteration, m.kept, space.n_prunable, _fmt(sparsity(m, space))])
    sparsity_csv = _csv(sel_rows, ["task", "z", "kept_prunable", "prunable_total", SPARSITY_HEADER])

    or_rows = []
    for a, b in itertools.combinations(tasks, 2):
        or_rows.append([f"{a}&{b}", _fmt(_safe_or([selected[a], selected[b]]))])
    if len(tasks) > 2:
        or_rows.append(["&".join(tasks), _fmt(_safe_or([selected[t] for t in tasks]))])
    overlap_csv = _csv(or_rows, ["tasks", "overlap_ratio"])

    # candidates at the same iteration share a remaining count, so they line up
    by_z: dict[int, dict[str, object]] = {}
    for t in tasks:
        for cand in ledger.candidates.get(t, []):
            by_z.setdefault(cand.iteration, {})[t] = cand
    curve_rows = []
    for z in sorted(by_z):
        entry = by_z[z]
        if len(entry) != len(tasks):
            continue
        masks = [entry[t].mask for t in tasks]
        scores = [entry[t].dev_score for t in tasks]
        mean = float(np.mean(scores)) if all(s is not None for s in scores) else None
        spars = float(np.mean([entry[t].sparsity for t in tasks]))
        ratio = _safe_or(masks) if len(tasks) > 1 else 1.0
        curve_rows.append([z, _fmt(spars), _fmt(ratio), _fmt(mean)])
    curve_csv = _csv(curve_rows, ["z", SPARSITY_HEADER, "overlap_ratio", "mean_dev_score"])

    lines = ["Sparse sharing structure report", "", SPARSITY_NOTE, OR_NOTE, "", "Selected subnets:"]
    for row in sel_rows:
        lines.append(f"  {row[0]}: iteration {row[1]}, {row[2]}/{row[3]} prunable kept, {SPARSITY_HEADER} {row[4]}")
    lines += ["", "Overlap ratios:"]
    for name, value in or_rows:
        lines.append(f"  {name}: {value or 'undefined'}")
    lines.append("")
    summary = "\n".join(lines) + "\n"

    docs = {"sparsity.csv": sparsity_csv, "overlap.csv": overlap_csv, "curve.csv": curve_csv, "summary.txt": summary}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in docs.items():
            (out / name).write_text(text, encoding="utf-8")
    return docs
