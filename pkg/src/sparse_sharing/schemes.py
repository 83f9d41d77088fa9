"""Span decoding and encoding for BIO1 (IOB1), BIO2 and BIOES label sequences."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

SCHEMES = ("BIO1", "BIO2", "BIOES")

Span = tuple[int, int, str]


@dataclass
class RepairReport:
    """Counts malformed continuations that were reinterpreted while decoding."""

    repairs: int = 0
    examples: list[str] = field(default_factory=list)

    def note(self, what: str) -> None:
        self.repairs += 1
        if len(self.examples) < 20:
            self.examples.append(what)


def _check_scheme(scheme: str) -> str:
    s = scheme.upper()
    if s == "IOB1":
        s = "BIO1"
    if s not in SCHEMES:
        raise ConfigError(f"unknown tagging scheme {scheme!r}")
    return s


def _split(label: str) -> tuple[str, str]:
    if label == "O" or len(label) < 3 or label[1] != "-":
        return "O", ""
    return label[0].upper(), label[2:]


def decode_spans(labels, scheme: str, report: RepairReport | None = None) -> list[Span]:
    """Spans ``(start, end_inclusive, type)`` in order of their start.

    Decoding is lenient: an ``I-X`` with no open ``X`` span starts a new one
    (counted as a repair except under BIO1, where that is the normal way a
    span opens); under BIOES an ``E-X`` with no open span is read as ``S-X``
    and a span closed without ``E`` is kept.
    """
    scheme = _check_scheme(scheme)
    spans: list[Span] = []
    open_type: str | None = None
    open_start = 0

    def close(end: int, clean: bool) -> None:
        nonlocal open_type
        if open_type is not None:
            if not clean and scheme == "BIOES" and report is not None:
                report.note(f"span {open_type}@{open_start} ended without E-")
            spans.append((open_start, end, open_type))
            open_type = None

    for i, label in enumerate(labels):
        prefix, kind = _split(label)
        if prefix == "O":
            close(i - 1, False)
        elif prefix == "B":
            close(i - 1, False)
            open_type, open_start = kind, i
        elif prefix == "I":
            if open_type == kind:
                continue
            close(i - 1, False)
            if scheme != "BIO1" and report is not None:
                report.note(f"I-{kind}@{i} without open span")
            open_type, open_start = kind, i
        elif prefix == "E":
            if open_type == kind:
                close(i, True)
                continue
            close(i - 1, False)
            if report is not None:
                report.note(f"E-{kind}@{i} without open span")
            spans.append((i, i, kind))
        elif prefix == "S":
            close(i - 1, False)
            spans.append((i, i, kind))
        else:
            close(i - 1, False)
            if report is not None:
                report.note(f"unknown prefix in {label!r}@{i}")
    close(len(labels) - 1, scheme != "BIOES")
    return spans


def encode_spans(spans, length: int, scheme: str) -> list[str]:
    scheme = _check_scheme(scheme)
    if scheme == "BIO1":
        raise ConfigError("BIO1 is accepted as input only")
    labels = ["O"] * length
    for start, end, kind in spans:
        if scheme == "BIOES" and start == end:
            labels[start] = f"S-{kind}"
            continue
        labels[start] = f"B-{kind}"
        for j in range(start + 1, end + 1):
            labels[j] = f"I-{kind}"
        if scheme == "BIOES":
            labels[end] = f"E-{kind}"
    return labels
