"""SLU evaluation: edit distance, CER/CVER, F1 / label-F1, SLU-F1, IC accuracy, RER.

SLU-F1 here is this package's own definition (greedy same-label pairing with
fractional word/char credit, harmonic mean of the two F1s). Do not compare its
numbers with scores from the official SLURP scorer without re-checking.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence


@dataclass
class SemanticFrame:
    intent: str | None = None
    slots: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"intent": self.intent, "slots": [{"label": l, "value": v} for l, v in self.slots]}

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticFrame":
        slots = [(s["label"], s["value"]) for s in d.get("slots", [])]
        return cls(d.get("intent"), slots)


@dataclass
class EditCounts:
    distance: int
    substitutions: int
    deletions: int
    insertions: int


@dataclass
class EvalReport:
    metrics: dict[str, float]
    counts: dict[str, float]
    n_utterances: int

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "counts": self.counts, "n_utterances": self.n_utterances}

    def percent(self) -> dict[str, float]:
        return {k: 100.0 * v for k, v in self.metrics.items()}


def normalize_value(value: str) -> str:
    return " ".join(value.lower().split())


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditCounts:
    """Unit-cost Levenshtein distance with S/D/I counts from one optimal alignment.

    Backtrace prefers substitution (or match), then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(sub, d[i][j - 1] + 1, d[i - 1][j] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return EditCounts(d[n][m], s, dl, ins)


def _check_aligned(refs, hyps):
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")


def _units(frame: SemanticFrame, with_values: bool):
    if with_values:
        return [(label, normalize_value(value)) for label, value in frame.slots]
    return [label for label, _ in frame.slots]


def concept_error_counts(refs, hyps, with_values: bool) -> dict[str, int]:
    _check_aligned(refs, hyps)
    tot = Counter()
    for r, h in zip(refs, hyps):
        ru = _units(r, with_values)
        e = edit_distance(ru, _units(h, with_values))
        tot.update(S=e.substitutions, D=e.deletions, I=e.insertions, N=len(ru))
    return {k: tot[k] for k in "SDIN"}


def concept_error_rate(refs: Sequence[SemanticFrame], hyps: Sequence[SemanticFrame], with_values: bool = False) -> float:
    """WER-style error over slot labels (CER) or label/value composite units (CVER)."""
    c = concept_error_counts(refs, hyps, with_values)
    if c["N"] == 0:
        raise ValueError("references contain no concepts")
    return (c["S"] + c["D"] + c["I"]) / c["N"]


def _prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * tp / (2 * tp + fp + fn)
    return p, r, f


def entity_counts(refs, hyps, mode: str = "exact") -> tuple[int, int, int]:
    if mode not in ("exact", "label-only"):
        raise ValueError(f"unknown entity_f1 mode {mode!r}")
    _check_aligned(refs, hyps)
    tp = fp = fn = 0
    for r, h in zip(refs, hyps):
        rc = Counter(_units(r, mode == "exact"))
        hc = Counter(_units(h, mode == "exact"))
        hit = sum((rc & hc).values())
        tp += hit
        fp += sum(hc.values()) - hit
        fn += sum(rc.values()) - hit
    return tp, fp, fn


def entity_f1(refs, hyps, mode: str = "exact") -> tuple[float, float, float]:
    """Micro-averaged precision, recall, F1 over multiset-matched entities."""
    return _prf(*entity_counts(refs, hyps, mode))


def slu_f1_counts(refs, hyps) -> dict[str, float]:
    _check_aligned(refs, hyps)
    c = Counter()
    for r, h in zip(refs, hyps):
        labels = {label for label, _ in r.slots} | {label for label, _ in h.slots}
        for label in sorted(labels):
            rv = [normalize_value(v) for l, v in r.slots if l == label]
            hv = [normalize_value(v) for l, v in h.slots if l == label]
            pairs = sorted(
                (edit_distance(a.split(), b.split()).distance, i, j)
                for i, a in enumerate(rv) for j, b in enumerate(hv)
            )
            used_r, used_h = set(), set()
            for _, i, j in pairs:
                if i in used_r or j in used_h:
                    continue
                used_r.add(i)
                used_h.add(j)
                a, b = rv[i], hv[j]
                wa, wb = a.split(), b.split()
                dw = edit_distance(wa, wb).distance / max(len(wa), len(wb), 1)
                dc = edit_distance(a, b).distance / max(len(a), len(b), 1)
                c.update(word_tp=1 - dw, word_fp=dw, word_fn=dw, char_tp=1 - dc, char_fp=dc, char_fn=dc)
            extra_h = len(hv) - len(used_h)
            extra_r = len(rv) - len(used_r)
            c.update(word_fp=extra_h, char_fp=extra_h, word_fn=extra_r, char_fn=extra_r)
    keys = ("word_tp", "word_fp", "word_fn", "char_tp", "char_fp", "char_fn")
    return {k: float(c[k]) for k in keys}


def slu_f1(refs, hyps) -> tuple[float, float, float]:
    """(word_f1, char_f1, slu_f1) with edit-distance partial credit for slot values."""
    c = slu_f1_counts(refs, hyps)
    wf = _prf(c["word_tp"], c["word_fp"], c["word_fn"])[2]
    cf = _prf(c["char_tp"], c["char_fp"], c["char_fn"])[2]
    both = 2 * wf * cf / (wf + cf) if wf + cf > 0 else 0.0
    return wf, cf, both


def ic_accuracy(refs, hyps) -> float:
    """Fraction of exactly matching intents. A missing hypothesis intent counts as wrong."""
    _check_aligned(refs, hyps)
    if not refs:
        raise ValueError("no utterances")
    if any(r.intent is None for r in refs):
        raise ValueError("reference frame without intent")
    return sum(r.intent == h.intent for r, h in zip(refs, hyps)) / len(refs)


# --------------------------------------------------------------------------- #

LOWER_IS_BETTER = frozenset({"cer", "cver"})


def _error(name: str, value: float) -> float:
    kind = name.rsplit("/", 1)[-1].lower()
    return value if kind in LOWER_IS_BETTER else 100.0 - value


def per_metric_rer(baseline: dict[str, float], system: dict[str, float]) -> tuple[dict[str, float], list[str]]:
    """Relative error reduction in percent per metric; metrics with zero baseline error are skipped.

    Keys are metric names, optionally dataset-qualified (``"media/cver"``). A
    name ending in ``cer`` or ``cver`` is an error rate; anything else is an
    accuracy-like score whose error is ``100 - value``.
    """
    if set(baseline) != set(system):
        raise ValueError("reports cover different metrics")
    out, skipped = {}, []
    for name in baseline:
        base = _error(name, baseline[name])
        if base == 0:
            skipped.append(name)
            continue
        out[name] = (base - _error(name, system[name])) / base * 100.0
    return out, skipped


def relative_error_reduction(baseline: dict[str, float], system: dict[str, float]) -> float:
    """Mean RER (%) over metrics given in percent."""
    rer, _ = per_metric_rer(baseline, system)
    if not rer:
        raise ValueError("no metric with non-zero baseline error")
    return sum(rer.values()) / len(rer)


# --------------------------------------------------------------------------- #

def evaluate_frames(refs: Sequence[SemanticFrame], hyps: Sequence[SemanticFrame], task: str = "sf") -> EvalReport:
    """Metric bundle per task: ``ic`` (SLURP-like), ``sf`` (MEDIA-like), ``ner`` (SLUE-like)."""
    _check_aligned(refs, hyps)
    metrics, counts = {}, {}
    if task not in ("ic", "sf", "ner"):
        raise ValueError(f"unknown task {task!r}")
    if task == "ic":
        metrics["ic_accuracy"] = ic_accuracy(refs, hyps)
    if task in ("ic", "sf"):
        for name, wv in (("cer", False), ("cver", True)):
            c = concept_error_counts(refs, hyps, wv)
            counts.update({f"{name}_{k}": v for k, v in c.items()})
            metrics[name] = (c["S"] + c["D"] + c["I"]) / c["N"] if c["N"] else 0.0
        wf, cf, sf = slu_f1(refs, hyps)
        metrics.update(word_f1=wf, char_f1=cf, slu_f1=sf)
    for mode, key in (("exact", "f1"), ("label-only", "label_f1")):
        tp, fp, fn = entity_counts(refs, hyps, mode)
        counts.update({f"{key}_tp": tp, f"{key}_fp": fp, f"{key}_fn": fn})
        metrics[key] = _prf(tp, fp, fn)[2]
    return EvalReport(metrics, counts, len(refs))


def read_frames_jsonl(path) -> dict[str, SemanticFrame]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            if "id" not in row or "frame" not in row:
                raise ValueError(f"{path}:{line_no}: expected keys 'id' and 'frame'")
            out[str(row["id"])] = SemanticFrame.from_dict(row["frame"])
    return out


def score_files(ref_path, hyp_path, task: str = "sf") -> EvalReport:
    """Score two id-keyed JSON-lines files; ids missing from the hypothesis count as empty frames."""
    refs = read_frames_jsonl(ref_path)
    hyps = read_frames_jsonl(hyp_path)
    ids = sorted(refs)
    return evaluate_frames([refs[i] for i in ids], [hyps.get(i, SemanticFrame()) for i in ids], task)
