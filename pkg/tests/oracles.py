"""Independent reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def collapse(path, blank):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def ctc_brute_force(logp: np.ndarray, target, blank: int) -> float:
    """-log sum over every length-T path that collapses to ``target``, by enumeration."""
    t_len, v = logp.shape
    total = -math.inf
    for path in itertools.product(range(v), repeat=t_len):
        if collapse(path, blank) == list(target):
            s = float(sum(logp[t, k] for t, k in enumerate(path)))
            total = np.logaddexp(total, s)
    return -total


def mc_truncated(h_speech: np.ndarray, h_text: np.ndarray) -> float:
    """MC loss computed directly on the L_text x L_text block, no padding or masking."""
    lt = h_text.shape[0]

    def norm(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)

    s = norm(h_speech)[:lt]
    t = norm(h_text)
    if s.shape[0] < lt:
        s = np.concatenate([s, np.zeros((lt - s.shape[0], s.shape[1]))])
    c_st = s @ t.T
    c_tt = t @ t.T
    return float(((c_st - c_tt) ** 2).mean())


def levenshtein(a, b) -> int:
    """Plain recursive edit distance with memoization."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def wer(ref_words, hyp_words) -> tuple[int, int]:
    return levenshtein(tuple(ref_words), tuple(hyp_words)), len(ref_words)
