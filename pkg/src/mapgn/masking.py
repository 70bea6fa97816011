"""Token-span corruption strategies and pre-training example construction.

A contiguous span covering roughly half of each sentence is selected; every
position inside the span independently gets one of three actions (replace
with MASK, replace with a random token, leave unchanged) according to the
strategy's probabilities. The four built-in strategies differ in the action
split and in where random replacement tokens come from: ``mass1``/``mass2``
draw them from the whole non-special vocabulary, ``mapgn`` draws them from
the span's own original tokens, so replacements leak content but not
position. The decoder is trained on the span fragment only: it consumes the
token just before the span (BOS when the span starts the sentence) followed
by the fragment shifted right by one.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .vocab import BOS_ID, MASK_ID, NUM_SPECIALS

RANDOM_FROM_ALL = "all-vocab"
RANDOM_FROM_SPAN = "masking-span"

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class MaskingSpec:
    """One corruption strategy: action probabilities plus random-token source."""

    name: str
    p_mask: float
    p_random: float
    p_unchanged: float
    random_source: str = RANDOM_FROM_ALL
    span_ratio: float = 0.5

    def __post_init__(self):
        total = self.p_mask + self.p_random + self.p_unchanged
        if abs(total - 1.0) > _PROB_TOL:
            raise ValueError(f"masking spec {self.name!r}: probabilities sum to {total!r}, not 1")
        if min(self.p_mask, self.p_random, self.p_unchanged) < 0:
            raise ValueError(f"masking spec {self.name!r}: negative probability")
        if self.random_source not in (RANDOM_FROM_ALL, RANDOM_FROM_SPAN):
            raise ValueError(f"masking spec {self.name!r}: unknown random source {self.random_source!r}")
        if not 0.0 < self.span_ratio <= 1.0:
            raise ValueError(f"masking spec {self.name!r}: span ratio {self.span_ratio} outside (0, 1]")


PRESETS: dict[str, MaskingSpec] = {
    "mass1": MaskingSpec("mass1", 0.80, 0.10, 0.10, RANDOM_FROM_ALL),
    "mass2": MaskingSpec("mass2", 0.40, 0.40, 0.20, RANDOM_FROM_ALL),
    "mass3": MaskingSpec("mass3", 0.40, 0.00, 0.60, RANDOM_FROM_ALL),
    "mapgn": MaskingSpec("mapgn", 0.40, 0.40, 0.20, RANDOM_FROM_SPAN),
}


def get_spec(name: str) -> MaskingSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown masking preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class MaskedExample:
    """One corrupted training instance; span bounds are 1-based inclusive."""

    encoder_input: list[int]
    decoder_input: list[int]
    targets: list[int]
    span: tuple[int, int]


def sample_span(n: int, span_ratio: float, rng) -> tuple[int, int]:
    """Pick a contiguous span of length max(1, floor(ratio*n + 0.5)); 1-based."""
    if n < 1:
        raise ValueError(f"cannot sample a span from a sentence of length {n}")
    k = max(1, int(np.floor(span_ratio * n + 0.5)))
    a = int(rng.integers(1, n - k + 2))
    return a, a + k - 1


def span_length(n: int, span_ratio: float = 0.5) -> int:
    return max(1, int(np.floor(span_ratio * n + 0.5)))


def _check_tokens(tokens) -> None:
    if any(t < NUM_SPECIALS for t in tokens):
        raise ValueError("special tokens are not allowed inside sentences offered to masking")


def _corrupt(tokens, a: int, b: int, spec: MaskingSpec, rng, vocab_size: int):
    """Apply per-position actions over [a, b]; returns (corrupted, actions, random_values)."""
    span_tokens = list(tokens[a - 1:b])  # snapshot before replacements land
    out = list(tokens)
    actions: list[str] = []
    random_values: list[int] = []
    for pos in range(a - 1, b):
        u = rng.random()
        if u < spec.p_mask:
            out[pos] = MASK_ID
            actions.append("mask")
        elif u < spec.p_mask + spec.p_random:
            if spec.random_source == RANDOM_FROM_SPAN:
                value = span_tokens[int(rng.integers(0, len(span_tokens)))]
            else:
                value = int(rng.integers(NUM_SPECIALS, vocab_size))
            out[pos] = value
            actions.append("random")
            random_values.append(value)
        else:
            actions.append("unchanged")
    return out, actions, random_values


def corrupt_span(tokens, span: tuple[int, int], spec: MaskingSpec, rng, vocab_size: int) -> list[int]:
    """Corrupt positions a..b (1-based inclusive) of a token sequence."""
    a, b = span
    if not 1 <= a <= b <= len(tokens):
        raise ValueError(f"span {span} out of range for sentence of length {len(tokens)}")
    if vocab_size <= NUM_SPECIALS:
        raise ValueError("vocabulary has no non-special tokens to draw replacements from")
    _check_tokens(tokens)
    out, _, _ = _corrupt(tokens, a, b, spec, rng, vocab_size)
    return out


def build_pretrain_example(sentence, spec: MaskingSpec, rng, vocab_size: int) -> MaskedExample:
    """Sample a span, corrupt the encoder input, cut the decoder fragment."""
    sentence = list(sentence)
    _check_tokens(sentence)
    a, b = sample_span(len(sentence), spec.span_ratio, rng)
    encoder_input = corrupt_span(sentence, (a, b), spec, rng, vocab_size)
    first = BOS_ID if a == 1 else sentence[a - 2]
    decoder_input = [first] + sentence[a - 1:b - 1]
    targets = sentence[a - 1:b]
    return MaskedExample(encoder_input, decoder_input, targets, (a, b))


@dataclass
class MaskingReport:
    """Aggregate statistics over many corruptions of a corpus."""

    samples: int
    positions: int
    fractions: dict[str, float]
    span_lengths: dict[int, int] = field(default_factory=dict)
    containment_rate: float | None = None


def masking_report(corpus, spec: MaskingSpec, rng, samples: int, vocab_size: int) -> MaskingReport:
    """Corrupt `samples` sentences (cycling the corpus) and tally the actions."""
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise ValueError("masking report needs a non-empty corpus")
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    action_counts: Counter[str] = Counter()
    span_lengths: Counter[int] = Counter()
    random_total = 0
    random_in_span = 0
    for i in range(samples):
        sentence = corpus[i % len(corpus)]
        a, b = sample_span(len(sentence), spec.span_ratio, rng)
        span_lengths[b - a + 1] += 1
        _, actions, random_values = _corrupt(sentence, a, b, spec, rng, vocab_size)
        action_counts.update(actions)
        span_multiset = Counter(sentence[a - 1:b])
        for value in random_values:
            random_total += 1
            if span_multiset[value] > 0:
                random_in_span += 1
    positions = sum(action_counts.values())
    fractions = {
        name: action_counts[name] / positions for name in ("mask", "random", "unchanged")
    }
    rate = random_in_span / random_total if random_total else None
    return MaskingReport(
        samples=samples,
        positions=positions,
        fractions=fractions,
        span_lengths=dict(sorted(span_lengths.items())),
        containment_rate=rate,
    )
