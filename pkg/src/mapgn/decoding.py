"""Greedy and beam-search decoding over a trained model.

Beam search keeps the top hypotheses by summed log-probability; finished
hypotheses (EOS emitted) move to a result pool and compete by total
log-probability, without length normalization unless asked for. The search
always protects the continuation the width-1 search would take, so a wider
beam never returns a lower-scoring hypothesis than greedy, and beam=1 is
exactly greedy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DecodeState, ModelConfig, decode_step, init_decode
from .tensor import Tensor
from .vocab import BOS_ID, EOS_ID

_LOG_FLOOR = 1e-300


def _with_eos(source_ids) -> np.ndarray:
    """Sources end with EOS, mirroring the training batch assemblers."""
    return np.asarray([list(source_ids) + [EOS_ID]], dtype=np.int64)


@dataclass
class Hypothesis:
    """Decoded token ids (no BOS/EOS), their total log-probability, and whether EOS was reached."""

    tokens: list[int]
    log_prob: float
    finished: bool


@dataclass
class _Beam:
    tokens: list[int]
    log_prob: float
    state: DecodeState
    last: int
    on_greedy_path: bool


def greedy_decode(params: dict[str, Tensor], config: ModelConfig, source_ids,
                  max_len: int) -> Hypothesis:
    """Argmax decoding until EOS or max_len tokens."""
    state = init_decode(_with_eos(source_ids), params, config)
    tokens: list[int] = []
    log_prob = 0.0
    last = BOS_ID
    for _ in range(max_len):
        probs, state = decode_step(state, last, params, config)
        token = int(np.argmax(probs))
        log_prob += float(np.log(max(np.float64(probs[token]), _LOG_FLOOR)))
        if token == EOS_ID:
            return Hypothesis(tokens, log_prob, True)
        tokens.append(token)
        last = token
    return Hypothesis(tokens, log_prob, False)


def _score(hyp: Hypothesis, length_norm: bool) -> float:
    if not length_norm:
        return hyp.log_prob
    return hyp.log_prob / max(1, len(hyp.tokens))


def beam_decode(params: dict[str, Tensor], config: ModelConfig, source_ids,
                beam: int, max_len: int, length_norm: bool = False) -> Hypothesis:
    """Best hypothesis under beam search; beam=1 reproduces greedy bit-exactly."""
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    root = init_decode(_with_eos(source_ids), params, config)
    live: list[_Beam] = [_Beam([], 0.0, root, BOS_ID, True)]
    finished: list[Hypothesis] = []

    for _ in range(max_len):
        if not live:
            break
        candidates: list[tuple[float, int, int, _Beam, bool]] = []
        for parent_rank, parent in enumerate(live):
            probs, state = decode_step(parent.state, parent.last, params, config)
            logs = np.log(np.maximum(probs.astype(np.float64), _LOG_FLOOR))
            width = min(beam + 1, logs.shape[0])
            top = np.argsort(-logs, kind="stable")[:width]
            for child_rank, token in enumerate(top):
                token = int(token)
                child = _Beam(parent.tokens if token == EOS_ID else parent.tokens + [token],
                              parent.log_prob + float(logs[token]), state, token,
                              parent.on_greedy_path and child_rank == 0)
                candidates.append((-child.log_prob, parent_rank, token, child, child.on_greedy_path))
        candidates.sort(key=lambda item: item[:3])
        next_live: list[_Beam] = []
        protected: _Beam | None = None
        for _, _, token, child, is_greedy in candidates:
            if token == EOS_ID:
                finished.append(Hypothesis(child.tokens, child.log_prob, True))
                continue
            if len(next_live) < beam:
                next_live.append(child)
            elif is_greedy:
                protected = child
        if protected is not None:
            next_live[-1] = protected
        live = next_live
        if finished and live:
            best_finished = max(_score(h, length_norm) for h in finished)
            if not length_norm and max(h.log_prob for h in live) <= best_finished:
                break

    pool = finished + [Hypothesis(h.tokens, h.log_prob, False) for h in live]
    return max(pool, key=lambda h: _score(h, length_norm))
