"""Adaptor pretraining objectives: CTC, modality correlation, label-smoothed AED."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import torch

from . import core
from .model import HiddenSequence


class Objective(str, Enum):
    PRE_ENC_CTC = "preenc-ctc"
    PRE_ENC_MC = "preenc-mc"
    POST_ENC_MC = "postenc-mc"
    POST_DEC_MC = "postdec-mc"
    POST_DEC_AED = "postdec-aed"


@dataclass
class ObjectiveSpec:
    objectives: tuple[Objective, ...]
    weights: dict[Objective, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.objectives:
            raise ValueError("objective spec must name at least one objective")
        self.objectives = tuple(Objective(o) for o in self.objectives)
        if len(set(self.objectives)) != len(self.objectives):
            raise ValueError("duplicate objective")
        self.weights = {Objective(k): float(v) for k, v in self.weights.items()}

    @classmethod
    def parse(cls, text: str) -> "ObjectiveSpec":
        """``"postdec-aed,preenc-ctc"``; an optional ``:weight`` suffix per item."""
        objectives, weights = [], {}
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            name, _, w = item.partition(":")
            try:
                obj = Objective(name.strip().lower())
            except ValueError:
                raise ValueError(f"unknown objective {name!r}") from None
            objectives.append(obj)
            if w:
                weights[obj] = float(w)
        return cls(tuple(objectives), weights)

    def weight(self, obj: Objective) -> float:
        return self.weights.get(obj, 1.0)

    def __contains__(self, obj) -> bool:
        return Objective(obj) in self.objectives

    def __str__(self):
        return ",".join(o.value for o in self.objectives)


# --------------------------------------------------------------------------- #
# modality correlation

@dataclass
class CorrelationMatrix:
    values: torch.Tensor  # [L_max, L_max]
    l_text: int
    l_speech: int


def correlation(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-by-row dot products ``a @ b.T`` with a fixed per-element reduction order."""
    return (a.unsqueeze(-2) * b.unsqueeze(-3)).sum(-1)


def _padded_rows(h: HiddenSequence, i: int, n: int) -> torch.Tensor:
    x = core.row_normalize(h.row(i))
    if x.shape[0] < n:
        x = torch.cat([x, x.new_zeros(n - x.shape[0], x.shape[1])], 0)
    return x


def correlation_matrices(h_speech: HiddenSequence, h_text: HiddenSequence, i: int = 0):
    """Speech-text and text-text correlation matrices of utterance ``i``, zero-padded to L_max."""
    ls, lt = int(h_speech.lengths[i]), int(h_text.lengths[i])
    n = max(ls, lt)
    s = _padded_rows(h_speech, i, n)
    t = _padded_rows(h_text, i, n)
    return CorrelationMatrix(correlation(s, t), lt, ls), CorrelationMatrix(correlation(t, t), lt, ls)


def mc_loss(h_speech: HiddenSequence, h_text: HiddenSequence, reduction: str = "mean") -> torch.Tensor:
    """Modality correlation loss.

    Per utterance: MSE between the speech-text and text-text correlation
    matrices of row-normalized, zero-padded representations, restricted to the
    top-left L_text x L_text block. Batch reduction is the mean of per-utterance
    losses.
    """
    if h_speech.stage != h_text.stage:
        raise ValueError(f"mc_loss: stage mismatch {h_speech.stage.value} vs {h_text.stage.value}")
    if h_speech.values.shape[-1] != h_text.values.shape[-1]:
        raise core.ShapeError("mc_loss: hidden sizes differ")
    if len(h_speech.lengths) != len(h_text.lengths):
        raise core.ShapeError("mc_loss: batch sizes differ")
    losses = []
    for i in range(len(h_text.lengths)):
        lt = int(h_text.lengths[i])
        if lt == 0:
            raise ValueError("mc_loss: L_Text = 0")
        c_st, c_tt = correlation_matrices(h_speech, h_text, i)
        n = c_st.values.shape[0]
        keep = torch.zeros(n, n, dtype=torch.bool)
        keep[:lt, :lt] = True
        diff = c_st.values[keep] - c_tt.values[keep]
        losses.append((diff * diff).mean())
    out = torch.stack(losses)
    out = out.mean() if reduction == "mean" else out
    return core.check_finite("mc_loss", out)


# --------------------------------------------------------------------------- #
# CTC

def ctc_min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(logits: torch.Tensor, input_lengths, targets: Sequence[Sequence[int]], blank: int,
             reduction: str = "none") -> torch.Tensor:
    """Negative log-probability of ``targets`` summed over blank-augmented alignments.

    ``logits`` is [B, T, V] (or [T, V] for a single utterance). Infeasible
    utterances (too few frames) get ``+inf``. ``reduction="mean"`` averages
    over feasible utterances and returns ``+inf`` when none is feasible.
    """
    single = logits.dim() == 2
    if single:
        logits = logits.unsqueeze(0)
        targets = [targets]
    b, t_max, _ = logits.shape
    if input_lengths is None:
        in_len = [t_max] * b
    else:
        in_len = [int(x) for x in torch.as_tensor(input_lengths).reshape(-1)]
    targets = [list(x) for x in targets]
    if len(targets) != b or len(in_len) != b:
        raise core.ShapeError("ctc_loss: batch sizes differ")
    logp = core.log_softmax(logits)
    s_max = 2 * max((len(x) for x in targets), default=0) + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    skip = torch.zeros(b, s_max, dtype=torch.bool)
    for i, x in enumerate(targets):
        for j, tok in enumerate(x):
            ext[i, 2 * j + 1] = tok
            if j > 0 and tok != x[j - 1]:
                skip[i, 2 * j + 1] = True
    emit = logp.gather(2, ext.unsqueeze(1).expand(b, t_max, s_max))  # [B, T, S]
    neg = torch.full((b, s_max), core.NEG_LARGE, dtype=logp.dtype)
    alpha = neg.clone()
    if t_max > 0:
        alpha[:, 0] = emit[:, 0, 0]
        if s_max > 1:
            alpha[:, 1] = emit[:, 0, 1]
        alpha = torch.where(torch.arange(s_max) < 2, alpha, neg)
    t_len = torch.tensor(in_len)
    pad1 = torch.full((b, 1), core.NEG_LARGE, dtype=logp.dtype)
    pad2 = torch.full((b, 2), core.NEG_LARGE, dtype=logp.dtype)
    for t in range(1, t_max):
        prev1 = torch.cat([pad1, alpha], 1)[:, :s_max]
        prev2 = torch.where(skip, torch.cat([pad2, alpha], 1)[:, :s_max], neg)
        step = core.logsumexp(torch.stack([alpha, prev1, prev2]), axis=0) + emit[:, t]
        alpha = torch.where((t < t_len).unsqueeze(1), step, alpha)
    out = []
    for i, x in enumerate(targets):
        n = 2 * len(x) + 1
        if ctc_min_frames(x) > in_len[i] or (in_len[i] == 0 and x):
            out.append(torch.tensor(math.inf, dtype=logp.dtype))
            continue
        if in_len[i] == 0:
            out.append(torch.zeros((), dtype=logp.dtype))
            continue
        ends = alpha[i, n - 1: n] if n == 1 else alpha[i, n - 2: n]
        out.append(-torch.logsumexp(ends, 0))
    losses = torch.stack(out)
    if single:
        return losses[0]
    if reduction == "mean":
        ok = torch.isfinite(losses)
        return losses[ok].mean() if bool(ok.any()) else torch.tensor(math.inf, dtype=logp.dtype)
    return losses


# --------------------------------------------------------------------------- #
# AED

def aed_loss(logits: torch.Tensor, targets: torch.Tensor, lengths=None, smoothing: float = 0.1) -> torch.Tensor:
    """Label-smoothed cross-entropy over teacher-forced logits, padding excluded.

    ``logits`` [B, L, V] with ``targets`` [B, L] (or unbatched [L, V] / [L]).
    """
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    if logits.shape[:2] != targets.shape:
        raise core.ShapeError(f"aed_loss: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    b, n, v = logits.shape
    if lengths is None:
        mask = torch.ones(b, n, dtype=torch.bool)
    else:
        mask = torch.arange(n)[None, :] < torch.as_tensor(lengths)[:, None]
    return core.label_smoothed_ce(logits.reshape(-1, v), targets.reshape(-1), smoothing, mask.reshape(-1))


def token_accuracy(logits: torch.Tensor, targets: torch.Tensor, lengths) -> tuple[int, int]:
    mask = torch.arange(targets.shape[1])[None, :] < torch.as_tensor(lengths)[:, None]
    hit = (logits.argmax(-1) == targets) & mask
    return int(hit.sum()), int(mask.sum())


# --------------------------------------------------------------------------- #

def combine(spec: ObjectiveSpec, losses: Mapping[Objective, torch.Tensor]) -> torch.Tensor | None:
    """Weighted sum of the component losses; ``None`` if any of them is infeasible."""
    missing = [o.value for o in spec.objectives if o not in losses]
    if missing:
        raise ValueError(f"combine: no loss for {missing}")
    total = None
    for obj in spec.objectives:
        value = losses[obj]
        if not bool(torch.isfinite(value).all()):
            return None
        term = spec.weight(obj) * value
        total = term if total is None else total + term
    return total
