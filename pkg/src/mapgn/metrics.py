"""Corpus scoring: BLEU-3, ROUGE-L, and exact-match METEOR over characters.

All metrics treat a sentence as its sequence of Unicode characters, matching
the models' tokenization. BLEU-3 is corpus-level (pooled modified n-gram
counts, brevity penalty, zero-count levels floored at 1/(2*candidate-count));
ROUGE-L is the mean per-sentence LCS F1; METEOR is the exact-match stage
with the canonical constants (alpha=0.9, beta=3, gamma=0.5), where the
unigram alignment maximizes matches and then minimizes chunks.

Chunk minimization is NP-hard in general (it contains minimum common string
partition), so the exact branch-and-bound search carries a node budget;
sentences at the scale this package processes stay well inside it. If the
budget is ever exhausted the search falls back to repeatedly extracting the
longest common substring, which keeps the match count exact and can only
overestimate the chunk count.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

_BLEU_ORDER = 3
_CHUNK_NODE_BUDGET = 500_000


@dataclass
class SentenceScore:
    index: int
    bleu3: float
    rouge_l: float
    meteor: float
    hyp_len: int
    ref_len: int
    ngram_matches: tuple[int, int, int]
    ngram_totals: tuple[int, int, int]
    lcs: int
    unigram_matches: int
    chunks: int


@dataclass
class MetricReport:
    bleu3: float
    rouge_l: float
    meteor: float
    per_sentence: list[SentenceScore] = field(default_factory=list)


def _check_corpus(hypotheses, references):
    if len(hypotheses) != len(references):
        raise ValueError(
            f"corpus size mismatch: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("cannot score an empty corpus")


def _ngrams(seq: str, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _pair_ngram_counts(hyp: str, ref: str):
    matches, totals = [], []
    for n in range(1, _BLEU_ORDER + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        matches.append(sum(min(count, r[gram]) for gram, count in h.items()))
        totals.append(sum(h.values()))
    return tuple(matches), tuple(totals)


def _bleu_from_counts(matches, totals, hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for m, t in zip(matches, totals):
        if m > 0:
            p = m / t
        else:
            p = 1.0 / (2.0 * max(1, t))
        log_sum += math.log(p)
    precision_mean = math.exp(log_sum / _BLEU_ORDER)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * precision_mean


def bleu3(hypotheses: list[str], references: list[str]) -> float:
    """Corpus BLEU with modified 1..3-gram precisions pooled over all pairs."""
    _check_corpus(hypotheses, references)
    matches = [0] * _BLEU_ORDER
    totals = [0] * _BLEU_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        m, t = _pair_ngram_counts(hyp, ref)
        for n in range(_BLEU_ORDER):
            matches[n] += m[n]
            totals[n] += t[n]
        hyp_len += len(hyp)
        ref_len += len(ref)
    return _bleu_from_counts(matches, totals, hyp_len, ref_len)


def lcs_length(a: str, b: str) -> int:
    """Longest common subsequence length via the classic DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for ch in a:
        cur = [0]
        for j, other in enumerate(b, start=1):
            if ch == other:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _rouge_sentence(hyp: str, ref: str) -> tuple[float, int]:
    if not hyp or not ref:
        return 0.0, 0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0, 0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2.0 * p * r / (p + r), lcs


def rouge_l(hypotheses: list[str], references: list[str]) -> float:
    """Mean per-sentence LCS F1 (beta = 1)."""
    _check_corpus(hypotheses, references)
    return sum(_rouge_sentence(h, r)[0] for h, r in zip(hypotheses, references)) / len(hypotheses)


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------

def _max_matches(hyp: str, ref: str) -> int:
    h = Counter(hyp)
    r = Counter(ref)
    return sum(min(count, r[ch]) for ch, count in h.items())


def _extension_table(hyp: str, ref: str) -> list[list[int]]:
    """ext[i][j] = length of the common substring starting at hyp[i], ref[j]."""
    n, m = len(hyp), len(ref)
    ext = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row = ext[i]
        nxt = ext[i + 1]
        for j in range(m - 1, -1, -1):
            if hyp[i] == ref[j]:
                row[j] = nxt[j + 1] + 1
    return ext


class _ChunkSearch:
    """Iterative-deepening search for the minimum chunk count at maximum matches."""

    def __init__(self, hyp: str, ref: str, budget: int = _CHUNK_NODE_BUDGET):
        self.hyp = hyp
        self.ref = ref
        self.ext = _extension_table(hyp, ref)
        self.longest = max((max(row) for row in self.ext), default=0)
        self.budget = budget
        self.nodes = 0

    def run(self, need: int) -> int | None:
        """Minimum chunks covering `need` matches, or None if over budget."""
        if need == 0:
            return 0
        lower = max(1, -(-need // self.longest))
        for chunks in range(lower, need + 1):
            self.failed: set[tuple[int, int, int]] = set()
            try:
                if self._feasible(0, 0, need, chunks):
                    return chunks
            except _Budget:
                return None
        return need  # unreachable: `need` singleton chunks always work

    def _feasible(self, start: int, used: int, need: int, left: int) -> bool:
        if need == 0:
            return True
        if left == 0 or need > left * self.longest:
            return False
        key = (start, used, left)
        if key in self.failed:
            return False
        self.nodes += 1
        if self.nodes > self.budget:
            raise _Budget
        for i in range(start, len(self.hyp) - need + 1):
            for j in range(len(self.ref)):
                if used >> j & 1:
                    continue
                run = self.ext[i][j]
                if run == 0:
                    continue
                limit = 1
                while limit < run and limit < need and not (used >> (j + limit) & 1):
                    limit += 1
                for length in range(limit, 0, -1):
                    bits = ((1 << length) - 1) << j
                    if self._feasible(i + length, used | bits, need - length, left - 1):
                        return True
        self.failed.add(key)
        return False


class _Budget(Exception):
    pass


def _greedy_chunks(hyp: str, ref: str, need: int) -> int:
    """Upper bound: repeatedly extract the longest available common substring."""
    h_used = [False] * len(hyp)
    r_used = [False] * len(ref)
    chunks = 0
    matched = 0
    while matched < need:
        best_len, best = 0, None
        for i in range(len(hyp)):
            for j in range(len(ref)):
                length = 0
                while (i + length < len(hyp) and j + length < len(ref)
                       and not h_used[i + length] and not r_used[j + length]
                       and hyp[i + length] == ref[j + length]):
                    length += 1
                if length > best_len:
                    best_len, best = length, (i, j)
        if best is None:
            break
        i, j = best
        for k in range(best_len):
            h_used[i + k] = True
            r_used[j + k] = True
        matched += best_len
        chunks += 1
    return chunks


def meteor_alignment(hyp: str, ref: str) -> tuple[int, int]:
    """(matches, chunks) of the maximum alignment with fewest chunks."""
    matches = _max_matches(hyp, ref)
    if matches == 0:
        return 0, 0
    chunks = _ChunkSearch(hyp, ref).run(matches)
    if chunks is None:
        chunks = _greedy_chunks(hyp, ref, matches)
    return matches, chunks


def _meteor_sentence(hyp: str, ref: str) -> tuple[float, int, int]:
    if not hyp or not ref:
        return 0.0, 0, 0
    matches, chunks = meteor_alignment(hyp, ref)
    if matches == 0:
        return 0.0, 0, 0
    p = matches / len(hyp)
    r = matches / len(ref)
    f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_BETA
    return f_mean * (1.0 - penalty), matches, chunks


def meteor(hypotheses: list[str], references: list[str]) -> float:
    """Mean per-sentence exact-match METEOR."""
    _check_corpus(hypotheses, references)
    return sum(_meteor_sentence(h, r)[0] for h, r in zip(hypotheses, references)) / len(hypotheses)


def evaluate_corpus(hypotheses: list[str], references: list[str]) -> MetricReport:
    """All three corpus scores plus per-sentence rows with the raw counts."""
    _check_corpus(hypotheses, references)
    rows = []
    pooled_matches = [0] * _BLEU_ORDER
    pooled_totals = [0] * _BLEU_ORDER
    hyp_len = ref_len = 0
    rouge_sum = meteor_sum = 0.0
    for idx, (hyp, ref) in enumerate(zip(hypotheses, references)):
        m, t = _pair_ngram_counts(hyp, ref)
        for n in range(_BLEU_ORDER):
            pooled_matches[n] += m[n]
            pooled_totals[n] += t[n]
        hyp_len += len(hyp)
        ref_len += len(ref)
        rouge, lcs = _rouge_sentence(hyp, ref)
        met, matches, chunks = _meteor_sentence(hyp, ref)
        rouge_sum += rouge
        meteor_sum += met
        rows.append(SentenceScore(
            index=idx,
            bleu3=_bleu_from_counts(m, t, len(hyp), len(ref)),
            rouge_l=rouge,
            meteor=met,
            hyp_len=len(hyp),
            ref_len=len(ref),
            ngram_matches=m,
            ngram_totals=t,
            lcs=lcs,
            unigram_matches=matches,
            chunks=chunks,
        ))
    n = len(hypotheses)
    return MetricReport(
        bleu3=_bleu_from_counts(pooled_matches, pooled_totals, hyp_len, ref_len),
        rouge_l=rouge_sum / n,
        meteor=meteor_sum / n,
        per_sentence=rows,
    )
