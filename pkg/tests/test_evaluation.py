import numpy as np
import pytest

from sparse_sharing.errors import AlignmentError
from sparse_sharing.evaluation import SPARSITY_HEADER, analysis_report, extract_spans, span_f1, token_accuracy
from sparse_sharing.imp import Candidate, CandidateLedger
from sparse_sharing.masks import MaskMatrix, ParamBlock, ParamSpace, full_mask, sparsity


def test_token_accuracy_examples():
    assert token_accuracy([[1, 2]], [[1, 2]]) == 1.0
    assert token_accuracy([[1, 2, 3, 4]], [[1, 2, 3, 0]]) == 0.75
    assert token_accuracy([["a"]], [["b"]]) == 0.0
    with pytest.raises(AlignmentError):
        token_accuracy([[1, 2]], [[1]])


def test_extract_spans_examples():
    assert extract_spans(["B-PER", "E-PER", "O", "S-LOC"], "BIOES") == {(0, 1, "PER"), (3, 3, "LOC")}
    assert extract_spans(["B-NP", "I-NP", "O", "B-VP"], "BIO2") == {(0, 1, "NP"), (3, 3, "VP")}
    assert extract_spans(["O", "O"], "BIO2") == set()


def test_span_f1_examples():
    a, b = (0, 0, "X"), (2, 3, "Y")
    assert span_f1([{a}], [{a, b}]) == pytest.approx((1.0, 0.5, 2 / 3))
    assert span_f1([{a, b}], [{a, b}]) == (1.0, 1.0, 1.0)
    assert span_f1([{a}], [set()]) == (0.0, 0.0, 0.0)


def test_span_f1_is_micro_averaged():
    a, b, c = (0, 0, "X"), (1, 1, "X"), (2, 2, "X")
    # sentence 1 all right, sentence 2 all wrong: micro counts, not a mean of per-sentence F1
    p, r, f = span_f1([{a, b}, {c}], [{a, b}, {a}])
    assert (p, r) == (2 / 3, 2 / 3)


def _space():
    return ParamSpace([ParamBlock("emb", (4,), False, 0), ParamBlock("w", (8,), True, 1)])


def _ledger(space):
    cands = {}
    for task, seed in (("a", 0), ("b", 1)):
        rng = np.random.default_rng(seed)
        m = full_mask(space, task)
        lst = [Candidate(task, 1, m, 0.5, 1.0)]
        bits = m.bits.copy()
        bits[rng.permutation(8)[:4]] = False
        m2 = MaskMatrix(task, bits, 2)
        lst.append(Candidate(task, 2, m2, None, sparsity(m2, space)))
        cands[task] = lst
    return CandidateLedger(cands, "warmup")


def test_analysis_report_hard_sharing_row():
    space = _space()
    ledger = _ledger(space)
    docs = analysis_report(ledger, {"a": full_mask(space, "a"), "b": full_mask(space, "b")}, space)
    assert SPARSITY_HEADER in docs["sparsity.csv"].splitlines()[0]
    assert docs["overlap.csv"].splitlines()[1] == "a&b,1.000000"
    for row in docs["sparsity.csv"].splitlines()[1:]:
        assert row.endswith("1.000000")


def test_analysis_report_disjoint_and_deterministic(tmp_path):
    space = _space()
    ledger = _ledger(space)
    sel = {"a": MaskMatrix("a", np.arange(8) < 4), "b": MaskMatrix("b", np.arange(8) >= 4)}
    d1 = analysis_report(ledger, sel, space, tmp_path / "r1")
    d2 = analysis_report(ledger, sel, space, tmp_path / "r2")
    assert d1 == d2
    assert (tmp_path / "r1" / "overlap.csv").read_bytes() == (tmp_path / "r2" / "overlap.csv").read_bytes()
    assert "a&b,0.000000" in d1["overlap.csv"]
    curve = d1["curve.csv"].splitlines()
    assert curve[0] == f"z,{SPARSITY_HEADER},overlap_ratio,mean_dev_score"
    assert len(curve) == 3


def test_three_task_report_has_joint_ratio():
    space = _space()
    masks = {t: full_mask(space, t) for t in "abc"}
    ledger = CandidateLedger({t: [Candidate(t, 1, m, 1.0, 1.0)] for t, m in masks.items()})
    docs = analysis_report(ledger, masks, space)
    assert "a&b&c,1.000000" in docs["overlap.csv"]
