"""Pointer-generator seq2seq with masked-span self-supervised pre-training.

The package implements the full pipeline on a small numpy-backed autodiff
engine: character vocabularies, the four span-corruption strategies, the
encoder-decoder and pointer-generator architectures, label-smoothed Adam
training with transfer and checkpointing, greedy/beam decoding, BLEU-3 /
ROUGE-L / METEOR scoring, and a synthetic spoken-to-normalized task for
verification. ``estimators`` exposes the pipeline as scikit-learn style
estimators; ``cli`` provides the command-line surface.
"""

from .estimators import Seq2SeqNormalizer, SpanMaskingPretrainer
from .masking import PRESETS, MaskedExample, MaskingSpec
from .metrics import MetricReport, bleu3, evaluate_corpus, meteor, rouge_l
from .model import ModelConfig
from .training import TrainConfig
from .vocab import Vocab, build_vocab

__all__ = [
    "MaskedExample",
    "MaskingSpec",
    "MetricReport",
    "ModelConfig",
    "PRESETS",
    "Seq2SeqNormalizer",
    "SpanMaskingPretrainer",
    "TrainConfig",
    "Vocab",
    "bleu3",
    "build_vocab",
    "evaluate_corpus",
    "meteor",
    "rouge_l",
]

__version__ = "0.1.0"
