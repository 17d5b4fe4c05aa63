"""Reference text-generation metrics over token sequences.

ROUGE-1 and ROUGE-L as F1 with clipped counts, BLEU-4 with add-one smoothing
on zero counts and the standard brevity penalty, plus position-segmented
evaluation over contiguous token bins.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

METRIC_NAMES = ("rouge1", "rougeL", "bleu")


class EmptyReferenceError(ValueError):
    pass


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _f1(overlap: float, cand_len: int, ref_len: int) -> float:
    if overlap == 0 or cand_len == 0:
        return 0.0
    p = overlap / cand_len
    r = overlap / ref_len
    return 2 * p * r / (p + r)


def rouge1(candidate, reference) -> float:
    """Unigram-overlap F1 with clipped counts."""
    if len(reference) == 0:
        raise EmptyReferenceError("empty reference")
    if len(candidate) == 0:
        return 0.0
    cand, ref = Counter(candidate), Counter(reference)
    overlap = sum(min(c, ref[t]) for t, c in cand.items())
    return _f1(overlap, len(candidate), len(reference))


def _lcs_len(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rougeL(candidate, reference) -> float:
    """Longest-common-subsequence F1."""
    if len(reference) == 0:
        raise EmptyReferenceError("empty reference")
    if len(candidate) == 0:
        return 0.0
    return _f1(_lcs_len(list(candidate), list(reference)), len(candidate), len(reference))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions (n <= max_n), add-one
    smoothing on zero counts, brevity penalty exp(1 - r/c) when c < r."""
    if len(candidate) == 0 or len(reference) == 0:
        raise EmptyReferenceError("empty candidate or reference")
    cand = list(candidate)
    ref = list(reference)
    log_sum, used = 0.0, 0
    for n in range(1, max_n + 1):
        total = len(cand) - n + 1
        if total <= 0:
            continue
        cn = _ngrams(cand, n)
        rn = _ngrams(ref, n)
        clipped = sum(min(c, rn[g]) for g, c in cn.items())
        p = clipped / total if clipped > 0 else 1.0 / (total + 1)
        log_sum += math.log(p)
        used += 1
    geo = math.exp(log_sum / used)
    c, r = len(cand), len(ref)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * geo


def _metric(name: str, candidate, reference) -> float:
    if name == "rouge1":
        return rouge1(candidate, reference)
    if name == "rougeL":
        return rougeL(candidate, reference)
    if name == "bleu":
        return bleu(candidate, reference)
    raise ValueError(f"unknown metric {name!r}")


@dataclass
class SegmentedScores:
    """Per-segment metric means over pairs, plus whole-sequence means."""
    k: int
    segments: dict       # metric -> [k values]
    overall: dict        # metric -> value

    def rows(self):
        for name in METRIC_NAMES:
            yield name, self.segments[name], self.overall[name]


def _segment_bounds(ref_len: int, k: int):
    size = ref_len // k
    return [(j * size, (j + 1) * size if j < k - 1 else None) for j in range(k)]


def segment_eval(pairs, k: int = 4) -> SegmentedScores:
    """Split each (candidate, reference) pair into k contiguous position bins.

    Bin boundaries come from the reference length; the last bin takes the
    remainder of both sequences, so k=1 reproduces the overall metric exactly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to evaluate")
    seg_sums = {name: [0.0] * k for name in METRIC_NAMES}
    overall_sums = {name: 0.0 for name in METRIC_NAMES}

    def metric_or_zero(name, cand, ref):
        if not ref or not cand:
            return 0.0
        return _metric(name, cand, ref)

    for cand, ref in pairs:
        if len(ref) < k:
            warnings.warn(f"reference of length {len(ref)} shorter than k={k}; "
                          f"degenerate bins scored 0", stacklevel=2)
        for j, (lo, hi) in enumerate(_segment_bounds(len(ref), k)):
            rseg = list(ref[lo:]) if hi is None else list(ref[lo:hi])
            cseg = list(cand[lo:]) if hi is None else list(cand[lo:hi])
            for name in METRIC_NAMES:
                seg_sums[name][j] += metric_or_zero(name, cseg, rseg)
        for name in METRIC_NAMES:
            overall_sums[name] += metric_or_zero(name, list(cand), list(ref))
    n = len(pairs)
    return SegmentedScores(
        k=k,
        segments={m: [v / n for v in vals] for m, vals in seg_sums.items()},
        overall={m: v / n for m, v in overall_sums.items()})
