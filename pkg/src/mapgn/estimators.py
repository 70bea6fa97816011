"""Scikit-learn style estimators wrapping the pre-train / fine-tune pipeline.

``SpanMaskingPretrainer.fit(sentences)`` runs self-supervised span-masked
training on unpaired text; ``Seq2SeqNormalizer.fit(sources, targets)``
fine-tunes on paired text (optionally warm-started from a fitted pretrainer
or a checkpoint file), and ``predict`` decodes new sources. Both follow the
usual conventions: constructor arguments are hyperparameters stored verbatim,
learned state lives in trailing-underscore attributes, and
``get_params``/``set_params``/``clone`` work as with any other estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .decoding import beam_decode, greedy_decode
from .masking import MaskingSpec, get_spec
from .metrics import bleu3
from .model import ModelConfig, init_params
from .training import TrainConfig, train, transfer_params
from .vocab import NUM_SPECIALS, build_vocab


def validate_text_list(data, name: str) -> list[str]:
    """Accept any iterable of strings; reject everything else early."""
    if isinstance(data, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    items = list(data)
    if not items:
        raise ValueError(f"{name} is empty")
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise TypeError(f"{name}[{i}] is {type(item).__name__}, expected str")
    return items


def _resolve_masking(masking) -> MaskingSpec:
    if isinstance(masking, MaskingSpec):
        return masking
    return get_spec(masking)


class _SeqEstimator(BaseEstimator):
    """Shared hyperparameters and config assembly."""

    def __init__(self, arch="pointer-generator", emb_dim=24, enc_layers=2, enc_hidden=32,
                 dec_layers=1, dec_hidden=32, dropout=0.1, max_len=200, steps=500,
                 batch_size=32, lr=1e-3, label_smoothing=0.1, grad_clip=5.0,
                 min_count=1, seed=0):
        self.arch = arch
        self.emb_dim = emb_dim
        self.enc_layers = enc_layers
        self.enc_hidden = enc_hidden
        self.dec_layers = dec_layers
        self.dec_hidden = dec_hidden
        self.dropout = dropout
        self.max_len = max_len
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.label_smoothing = label_smoothing
        self.grad_clip = grad_clip
        self.min_count = min_count
        self.seed = seed

    def _model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            arch=self.arch, vocab_size=vocab_size, emb_dim=self.emb_dim,
            enc_layers=self.enc_layers, enc_hidden=self.enc_hidden,
            dec_layers=self.dec_layers, dec_hidden=self.dec_hidden,
            dropout=self.dropout, max_len=self.max_len)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, label_smoothing=self.label_smoothing,
            batch_size=self.batch_size, max_len=self.max_len, steps=self.steps,
            seed=self.seed, grad_clip=self.grad_clip)


class SpanMaskingPretrainer(_SeqEstimator):
    """Self-supervised span-masked pre-training on unpaired sentences.

    Parameters mirror the model and optimizer configuration; ``masking``
    selects one of the built-in strategies ("mass1", "mass2", "mass3",
    "mapgn") or takes a custom MaskingSpec.
    """

    def __init__(self, masking="mapgn", arch="pointer-generator", emb_dim=24, enc_layers=2,
                 enc_hidden=32, dec_layers=1, dec_hidden=32, dropout=0.1, max_len=200,
                 steps=500, batch_size=32, lr=1e-3, label_smoothing=0.1, grad_clip=5.0,
                 min_count=1, seed=0):
        super().__init__(arch=arch, emb_dim=emb_dim, enc_layers=enc_layers,
                         enc_hidden=enc_hidden, dec_layers=dec_layers, dec_hidden=dec_hidden,
                         dropout=dropout, max_len=max_len, steps=steps, batch_size=batch_size,
                         lr=lr, label_smoothing=label_smoothing, grad_clip=grad_clip,
                         min_count=min_count, seed=seed)
        self.masking = masking

    def fit(self, X, y=None):
        sentences = validate_text_list(X, "X")
        spec = _resolve_masking(self.masking)
        self.vocab_ = build_vocab(sentences, min_count=self.min_count)
        encoded = [self.vocab_.encode(s) for s in sentences]
        usable = [ids for ids in encoded if all(t >= NUM_SPECIALS for t in ids)]
        self.n_dropped_ = len(encoded) - len(usable)
        if not usable:
            raise ValueError("every sentence contains out-of-vocabulary characters")
        self.model_config_ = self._model_config(self.vocab_.size)
        params = init_params(self.model_config_, np.random.default_rng(self.seed))
        result = train("pretrain", usable, params, self.model_config_, self._train_config(),
                       masking_spec=spec)
        self.params_ = result.params
        self.loss_log_ = result.log
        return self


class Seq2SeqNormalizer(_SeqEstimator):
    """Supervised sequence-to-sequence normalizer with optional warm start.

    ``pretrained`` may be a fitted SpanMaskingPretrainer (its vocabulary and
    name-matching parameters are reused) or a checkpoint path written by the
    command-line tools. ``predict`` decodes greedily by default; set ``beam``
    for beam search.
    """

    def __init__(self, arch="pointer-generator", emb_dim=24, enc_layers=2, enc_hidden=32,
                 dec_layers=1, dec_hidden=32, dropout=0.1, max_len=200, steps=500,
                 batch_size=32, lr=1e-3, label_smoothing=0.1, grad_clip=5.0,
                 min_count=1, seed=0, pretrained=None, beam=1):
        super().__init__(arch=arch, emb_dim=emb_dim, enc_layers=enc_layers,
                         enc_hidden=enc_hidden, dec_layers=dec_layers, dec_hidden=dec_hidden,
                         dropout=dropout, max_len=max_len, steps=steps, batch_size=batch_size,
                         lr=lr, label_smoothing=label_smoothing, grad_clip=grad_clip,
                         min_count=min_count, seed=seed)
        self.pretrained = pretrained
        self.beam = beam

    def _warm_start(self, sources: list[str], targets: list[str]):
        if self.pretrained is None:
            vocab = build_vocab(sources + targets, min_count=self.min_count)
            config = self._model_config(vocab.size)
            return vocab, config, init_params(config, np.random.default_rng(self.seed)), []
        if isinstance(self.pretrained, SpanMaskingPretrainer):
            check_is_fitted(self.pretrained)
            vocab = self.pretrained.vocab_
            donor = self.pretrained.params_
        else:
            raise TypeError(
                f"pretrained must be a fitted SpanMaskingPretrainer or None, got "
                f"{type(self.pretrained).__name__}; checkpoint files are handled by "
                f"the finetune subcommand")
        config = self._model_config(vocab.size)
        params, copied = transfer_params(donor, config, np.random.default_rng(self.seed))
        return vocab, config, params, copied

    def fit(self, X, y):
        sources = validate_text_list(X, "X")
        targets = validate_text_list(y, "y")
        if len(sources) != len(targets):
            raise ValueError(f"X and y differ in length: {len(sources)} vs {len(targets)}")
        self.vocab_, self.model_config_, params, self.transferred_ = \
            self._warm_start(sources, targets)
        pairs = [(self.vocab_.encode(s), self.vocab_.encode(t))
                 for s, t in zip(sources, targets)]
        result = train("finetune", pairs, params, self.model_config_, self._train_config())
        self.params_ = result.params
        self.loss_log_ = result.log
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self)
        sources = validate_text_list(X, "X")
        out = []
        for text in sources:
            ids = self.vocab_.encode(text)[:self.max_len]
            if self.beam and self.beam > 1:
                hyp = beam_decode(self.params_, self.model_config_, ids, self.beam, self.max_len)
            else:
                hyp = greedy_decode(self.params_, self.model_config_, ids, self.max_len)
            out.append(self.vocab_.decode(hyp.tokens))
        return out

    def score(self, X, y) -> float:
        """Corpus BLEU-3 of the decoded X against y."""
        references = validate_text_list(y, "y")
        return bleu3(self.predict(X), references)
