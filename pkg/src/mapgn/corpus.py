"""Corpus loading plus a synthetic spoken-to-normalized task generator.

The generator builds normalized-style sentences from a small closed-alphabet
word lexicon, then derives spoken versions by inverting a substitution table
(dialect-like fragment rewrites, vowel doubling) and inserting filler words.
Marker characters used by fillers and dialect fragments never occur in
normalized text, so a rule-based oracle can normalize any generated spoken
sentence exactly; the oracle gives a score ceiling for trained models.
Sources and targets share most characters verbatim, which makes the task
copy-heavy on purpose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

VOWELS = "aeiou"
ACCENT_VOWELS = "àèìòù"  # à è ì ò ù
CONSONANTS = "bcdfghklmnprstv"
PUNCTUATION = " .,!?-':;"
DIALECT_CHARS = "jwy"
FILLER_CHARS = "qxz"
ALPHABET = frozenset(VOWELS + ACCENT_VOWELS + CONSONANTS + PUNCTUATION
                     + DIALECT_CHARS + FILLER_CHARS)

_SUBSTITUTIONS: tuple[tuple[str, str], ...] = (
    # (spoken fragment, normalized fragment); spoken forms are unambiguous
    # because j/w/y never occur in normalized text and CV syllables never
    # produce doubled vowels.
    ("ja", "ra"), ("ji", "ri"), ("ju", "ru"),
    ("wa", "va"), ("wo", "vo"),
    ("ye", "le"), ("yo", "lo"),
    ("aa", "a"), ("ee", "e"), ("oo", "o"),
)

_FILLERS: tuple[str, ...] = ("qo", "xum", "zaa", "q")


@dataclass(frozen=True)
class SynthRuleSet:
    """Substitution table, filler inventory and sampling knobs for the task."""

    substitutions: tuple[tuple[str, str], ...] = _SUBSTITUTIONS
    fillers: tuple[str, ...] = _FILLERS
    insertion_prob: float = 0.25
    substitution_prob: float = 0.5
    seed: int = 0
    lexicon_size: int = 160

    def __post_init__(self):
        if not 0.0 <= self.insertion_prob <= 1.0 or not 0.0 <= self.substitution_prob <= 1.0:
            raise ValueError("rule probabilities must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps({
            "substitutions": [list(pair) for pair in self.substitutions],
            "fillers": list(self.fillers),
            "insertion_prob": self.insertion_prob,
            "substitution_prob": self.substitution_prob,
            "seed": self.seed,
            "lexicon_size": self.lexicon_size,
        }, ensure_ascii=False, indent=2)

    @staticmethod
    def from_json(text: str) -> "SynthRuleSet":
        raw = json.loads(text)
        return SynthRuleSet(
            substitutions=tuple((s, n) for s, n in raw["substitutions"]),
            fillers=tuple(raw["fillers"]),
            insertion_prob=raw["insertion_prob"],
            substitution_prob=raw["substitution_prob"],
            seed=raw["seed"],
            lexicon_size=raw["lexicon_size"],
        )


def build_lexicon(rules: SynthRuleSet) -> list[str]:
    """Deterministic word inventory of 2-3 consonant+vowel syllables."""
    rng = np.random.default_rng((rules.seed, 101))
    syllables = [c + v for c in CONSONANTS for v in VOWELS]
    accent_syllables = [c + v for c, v in zip("nrstl", ACCENT_VOWELS)]
    words: list[str] = []
    seen = set()
    while len(words) < rules.lexicon_size:
        n_syll = int(rng.integers(2, 4))
        parts = [syllables[int(rng.integers(0, len(syllables)))] for _ in range(n_syll)]
        if rng.random() < 0.08:
            parts[int(rng.integers(0, n_syll))] = accent_syllables[
                int(rng.integers(0, len(accent_syllables)))]
        word = "".join(parts)
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _normalized_sentence(lexicon: list[str], rng) -> str:
    n_words = int(rng.integers(3, 7))
    tokens = []
    for i in range(n_words):
        word = lexicon[int(rng.integers(0, len(lexicon)))]
        if rng.random() < 0.06:
            word = word + "-" + lexicon[int(rng.integers(0, len(lexicon)))]
        if rng.random() < 0.06:
            word = "l'" + word
        if i < n_words - 1:
            u = rng.random()
            if u < 0.06:
                word += ","
            elif u < 0.08:
                word += ":"
            elif u < 0.10:
                word += ";"
        tokens.append(word)
    enders = ".!?"
    u = rng.random()
    ender = "." if u < 0.7 else enders[1] if u < 0.85 else enders[2]
    return " ".join(tokens) + ender


def derive_spoken(normalized: str, rules: SynthRuleSet, rng) -> str:
    """Inverse substitutions plus filler insertion; rng-gated per site."""
    inverse = {norm: spoken for spoken, norm in rules.substitutions}
    fragments = sorted(inverse, key=len, reverse=True)
    out = []
    i = 0
    while i < len(normalized):
        hit = None
        for frag in fragments:
            if normalized.startswith(frag, i):
                hit = frag
                break
        if hit is not None and rng.random() < rules.substitution_prob:
            out.append(inverse[hit])
            i += len(hit)
        else:
            out.append(normalized[i])
            i += 1
    spoken = "".join(out)
    if rules.fillers and rules.insertion_prob > 0:
        words = spoken.split(" ")
        with_fillers = []
        for word in words:
            if rng.random() < rules.insertion_prob:
                with_fillers.append(rules.fillers[int(rng.integers(0, len(rules.fillers)))])
            with_fillers.append(word)
        spoken = " ".join(with_fillers)
    return spoken


def oracle_normalize(spoken: str, rules: SynthRuleSet) -> str:
    """Rule-exact normalization: drop filler words, undo substitutions."""
    filler_set = set(rules.fillers)
    tokens = [t for t in spoken.split(" ") if t not in filler_set]
    text = " ".join(tokens)
    fragments = sorted((s for s, _ in rules.substitutions), key=len, reverse=True)
    table = dict(rules.substitutions)
    out = []
    i = 0
    while i < len(text):
        for frag in fragments:
            if text.startswith(frag, i):
                out.append(table[frag])
                i += len(frag)
                break
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


@dataclass
class SynthCorpus:
    unpaired: list[str]
    train: list[tuple[str, str]] = field(default_factory=list)
    valid: list[tuple[str, str]] = field(default_factory=list)
    test: list[tuple[str, str]] = field(default_factory=list)


def synth_corpus(rules: SynthRuleSet, n_unpaired: int, n_paired: int,
                 rng: np.random.Generator) -> SynthCorpus:
    """Unpaired normalized-style sentences plus disjoint paired splits.

    All normalized sentences (unpaired pool and each paired split) are
    mutually distinct, so pre-training never sees a test target. The paired
    set splits 80/10/10 into train/valid/test.
    """
    if n_unpaired < 1 or n_paired < 1:
        raise ValueError("corpus sizes must be >= 1")
    if not rules.substitutions and not rules.fillers:
        raise DataError("rule set is empty: nothing distinguishes spoken from normalized text")
    lexicon = build_lexicon(rules)
    seen: set[str] = set()

    def fresh_sentence() -> str:
        while True:
            sentence = _normalized_sentence(lexicon, rng)
            if sentence not in seen:
                seen.add(sentence)
                return sentence

    unpaired = [fresh_sentence() for _ in range(n_unpaired)]
    pairs = []
    for _ in range(n_paired):
        normalized = fresh_sentence()
        pairs.append((derive_spoken(normalized, rules, rng), normalized))
    n_valid = max(1, n_paired // 10)
    n_test = max(1, n_paired // 10)
    n_train = n_paired - n_valid - n_test
    if n_train < 1:
        raise ValueError(f"n_paired={n_paired} too small to split into train/valid/test")
    return SynthCorpus(
        unpaired=unpaired,
        train=pairs[:n_train],
        valid=pairs[n_train:n_train + n_valid],
        test=pairs[n_train + n_valid:],
    )


# ---------------------------------------------------------------------------
# file loading
# ---------------------------------------------------------------------------

def load_unpaired(path: str, max_chars: int = 10_000) -> list[str]:
    """One sentence per line; blank lines skipped; oversize lines rejected."""
    sentences = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if len(line) > max_chars:
                raise DataError(f"{path}:{lineno}: line exceeds {max_chars} characters")
            sentences.append(line)
    return sentences


def load_paired(path: str, max_chars: int = 10_000) -> list[tuple[str, str]]:
    """Tab-separated source TAB target per line."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
            source, target = fields
            if not source or not target:
                raise DataError(f"{path}:{lineno}: empty source or target")
            if max(len(source), len(target)) > max_chars:
                raise DataError(f"{path}:{lineno}: line exceeds {max_chars} characters")
            pairs.append((source, target))
    return pairs


def save_unpaired(path: str, sentences: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sentence in sentences:
            fh.write(sentence + "\n")


def save_paired(path: str, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for source, target in pairs:
            fh.write(f"{source}\t{target}\n")
