"""Attention-based encoder-decoder and pointer-generator architectures.

Both models are pure functions from a named parameter map and token ids to
per-step output distributions. The encoder is a stacked bidirectional LSTM;
the decoder a stacked unidirectional LSTM initialized through a learned
affine+tanh bridge from the final encoder states. Additive attention over
the top encoder layer produces a context vector; the generator head turns
[context; decoder state] into a vocabulary softmax, and the pointer
architecture additionally mixes in attention mass scattered onto the source
tokens, weighted by a learned copy/generate gate.

Everything here runs batched: token ids arrive as (batch, length) integer
arrays, and the per-position encoder states live in a (length, batch,
features) tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

ARCH_ENCODER_DECODER = "encoder-decoder"
ARCH_POINTER_GENERATOR = "pointer-generator"
ARCHITECTURES = (ARCH_ENCODER_DECODER, ARCH_POINTER_GENERATOR)


@dataclass(frozen=True)
class ModelConfig:
    arch: str = ARCH_POINTER_GENERATOR
    vocab_size: int = 5
    emb_dim: int = 512
    enc_layers: int = 4
    enc_hidden: int = 256  # per direction
    dec_layers: int = 2
    dec_hidden: int = 256
    dropout: float = 0.1
    max_len: int = 200

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHITECTURES}")
        for f in fields(self):
            if f.name in ("arch", "dropout"):
                continue
            if getattr(self, f.name) < 1:
                raise ValueError(f"model config: {f.name} must be positive")
        if self.vocab_size < 5:
            raise ValueError("model config: vocab_size must cover the 5 special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"model config: dropout {self.dropout} outside [0, 1)")


def _uniform(rng, shape, dtype):
    return np.asarray(rng.uniform(-0.1, 0.1, size=shape), dtype=dtype)


def _lstm_param_shapes(in_dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        "x_weights": (in_dim, 4 * hidden),
        "h_weights": (hidden, 4 * hidden),
        "bias": (4 * hidden,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every trainable tensor, in creation order."""
    e, eh, dh, v = config.emb_dim, config.enc_hidden, config.dec_hidden, config.vocab_size
    ctx = 2 * eh
    shapes: dict[str, tuple[int, ...]] = {"embedding": (v, e)}
    for layer in range(config.enc_layers):
        in_dim = e if layer == 0 else ctx
        for direction in ("fwd", "bwd"):
            for part, shape in _lstm_param_shapes(in_dim, eh).items():
                shapes[f"enc.l{layer}.{direction}.{part}"] = shape
    for layer in range(config.dec_layers):
        in_dim = e if layer == 0 else dh
        for part, shape in _lstm_param_shapes(in_dim, dh).items():
            shapes[f"dec.l{layer}.{part}"] = shape
    for layer in range(config.dec_layers):
        shapes[f"bridge.l{layer}.hidden.weight"] = (ctx, dh)
        shapes[f"bridge.l{layer}.hidden.bias"] = (dh,)
        shapes[f"bridge.l{layer}.cell.weight"] = (ctx, dh)
        shapes[f"bridge.l{layer}.cell.bias"] = (dh,)
    shapes["attn.enc_proj"] = (ctx, dh)
    shapes["attn.dec_proj"] = (dh, dh)
    shapes["attn.bias"] = (dh,)
    shapes["attn.score"] = (dh, 1)
    shapes["gen.hidden.weight"] = (ctx + dh, dh)
    shapes["gen.hidden.bias"] = (dh,)
    shapes["gen.out.weight"] = (dh, v)
    shapes["gen.out.bias"] = (v,)
    if config.arch == ARCH_POINTER_GENERATOR:
        shapes["copy.hidden.weight"] = (ctx + dh, dh)
        shapes["copy.hidden.bias"] = (dh,)
        shapes["copy.out.weight"] = (dh, 1)
        shapes["copy.out.bias"] = (1,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(-0.1, 0.1) weights, zero biases, forget-gate bias +1."""
    dtype = T.default_dtype()
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias") or name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
            if ".bias" in name and (name.startswith("enc.") or name.startswith("dec.")):
                hidden = shape[0] // 4
                data[hidden:2 * hidden] = 1.0
        else:
            data = _uniform(rng, shape, dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _lstm_cell(params: dict[str, Tensor], prefix: str, x, h, c, hidden: int):
    z = T.add(T.add(T.matmul(x, params[prefix + ".x_weights"]),
                    T.matmul(h, params[prefix + ".h_weights"])),
              params[prefix + ".bias"])
    i = T.sigmoid(T.narrow(z, 0, hidden))
    f = T.sigmoid(T.narrow(z, hidden, hidden))
    g = T.tanh(T.narrow(z, 2 * hidden, hidden))
    o = T.sigmoid(T.narrow(z, 3 * hidden, hidden))
    c_next = T.add(T.mul(f, c), T.mul(i, g))
    h_next = T.mul(o, T.tanh(c_next))
    return h_next, c_next


@dataclass
class EncoderStates:
    """Per-position hidden representations plus the final-state summary."""

    states: Tensor  # (M, B, 2*enc_hidden), top layer
    final_hidden: Tensor  # (B, 2*enc_hidden)
    final_cell: Tensor  # (B, 2*enc_hidden)
    source_ids: np.ndarray  # (B, M)
    attn_proj: Tensor | None = field(default=None, repr=False)  # (M*B, A) cache

    @property
    def length(self) -> int:
        return self.states.data.shape[0]

    @property
    def batch(self) -> int:
        return self.states.data.shape[1]

    def hidden_matrix(self, index: int = 0) -> np.ndarray:
        """The (M, 2*enc_hidden) representation matrix of one batch element."""
        return self.states.data[:, index, :]


def encode(source_ids: np.ndarray, params: dict[str, Tensor], config: ModelConfig,
           training: bool = False, rng: np.random.Generator | None = None) -> EncoderStates:
    """Run the stacked bidirectional encoder over a (batch, length) id array."""
    source_ids = np.asarray(source_ids)
    if source_ids.ndim != 2:
        raise T.ShapeError(f"encode: source ids must be (batch, length), got {source_ids.shape}")
    batch, length = source_ids.shape
    if length == 0 or batch == 0:
        raise ValueError("encode: empty source")
    if length > config.max_len:
        raise ValueError(f"encode: source length {length} exceeds max_len {config.max_len}")

    eh = config.enc_hidden
    dtype = params["embedding"].data.dtype
    inputs = [T.embedding(params["embedding"], source_ids[:, t]) for t in range(length)]
    zero = Tensor(np.zeros((batch, eh), dtype=dtype))
    finals: dict[str, tuple[Tensor, Tensor]] = {}
    for layer in range(config.enc_layers):
        if layer > 0 and training and config.dropout > 0.0:
            inputs = [T.dropout(x, config.dropout, training, rng) for x in inputs]
        per_dir: dict[str, list[Tensor]] = {}
        for direction in ("fwd", "bwd"):
            prefix = f"enc.l{layer}.{direction}"
            order = range(length) if direction == "fwd" else range(length - 1, -1, -1)
            h, c = zero, zero
            outputs: list[Tensor | None] = [None] * length
            for t in order:
                h, c = _lstm_cell(params, prefix, inputs[t], h, c, eh)
                outputs[t] = h
            per_dir[direction] = outputs
            if layer == config.enc_layers - 1:
                finals[direction] = (h, c)
        inputs = [T.concat([per_dir["fwd"][t], per_dir["bwd"][t]]) for t in range(length)]

    states = T.stack(inputs)
    final_hidden = T.concat([finals["fwd"][0], finals["bwd"][0]])
    final_cell = T.concat([finals["fwd"][1], finals["bwd"][1]])
    return EncoderStates(states, final_hidden, final_cell, source_ids)


def _attention_proj(enc: EncoderStates, params: dict[str, Tensor]) -> Tensor:
    if enc.attn_proj is None:
        flat = T.reshape(enc.states, (enc.length * enc.batch, enc.states.data.shape[2]))
        enc.attn_proj = T.add(T.matmul(flat, params["attn.enc_proj"]), params["attn.bias"])
    return enc.attn_proj


def attention(enc: EncoderStates, dec_state: Tensor, params: dict[str, Tensor]):
    """Additive attention: returns (weights (B, M), context (B, 2*enc_hidden))."""
    m, batch = enc.length, enc.batch
    if dec_state.data.ndim != 2 or dec_state.data.shape[0] != batch:
        raise T.ShapeError(
            f"attention: decoder state {dec_state.data.shape} does not match batch {batch}")
    proj = _attention_proj(enc, params)
    v_proj = T.matmul(dec_state, params["attn.dec_proj"])
    scores = T.matmul(T.tanh(T.add(proj, T.tile_rows(v_proj, m))), params["attn.score"])
    alpha = T.softmax(T.transpose2d(T.reshape(scores, (m, batch))))
    context = T.attend(alpha, enc.states)
    return alpha, context


def _head(params: dict[str, Tensor], prefix: str, context: Tensor, dec_state: Tensor) -> Tensor:
    joint = T.concat([context, dec_state])
    hidden = T.tanh(T.add(T.matmul(joint, params[prefix + ".hidden.weight"]),
                          params[prefix + ".hidden.bias"]))
    return T.add(T.matmul(hidden, params[prefix + ".out.weight"]), params[prefix + ".out.bias"])


def generator_dist(context: Tensor, dec_state: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Vocabulary distribution: softmax over a two-stage head on [context; state]."""
    return T.softmax(_head(params, "gen", context, dec_state))


def copy_gate(context: Tensor, dec_state: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Generate-vs-copy gate in [0, 1], shape (B,)."""
    logit = _head(params, "copy", context, dec_state)
    return T.reshape(T.sigmoid(logit), (logit.data.shape[0],))


def mix_distributions(gen: Tensor, p_gen: Tensor, alpha: Tensor,
                      source_ids: np.ndarray) -> Tensor:
    """Blend generation and copying: p*G + (1-p) * attention scattered on source ids."""
    source_ids = np.asarray(source_ids)
    if alpha.data.shape != source_ids.shape:
        raise T.ShapeError(
            f"mix_distributions: weights {alpha.data.shape} vs source ids {source_ids.shape}")
    vocab_size = gen.data.shape[-1]
    copied = T.copy_scatter(alpha, source_ids, vocab_size)
    return T.add(T.scale_rows(gen, p_gen), T.scale_rows(copied, T.affine(p_gen, scale=-1.0, shift=1.0)))


def _bridge(enc: EncoderStates, params: dict[str, Tensor], config: ModelConfig):
    hs, cs = [], []
    for layer in range(config.dec_layers):
        hs.append(T.tanh(T.add(T.matmul(enc.final_hidden, params[f"bridge.l{layer}.hidden.weight"]),
                               params[f"bridge.l{layer}.hidden.bias"])))
        cs.append(T.tanh(T.add(T.matmul(enc.final_cell, params[f"bridge.l{layer}.cell.weight"]),
                               params[f"bridge.l{layer}.cell.bias"])))
    return hs, cs


def _decoder_step(params, config, x, hs, cs, training, rng):
    new_hs, new_cs = [], []
    for layer in range(config.dec_layers):
        if layer > 0 and training and config.dropout > 0.0:
            x = T.dropout(x, config.dropout, training, rng)
        h, c = _lstm_cell(params, f"dec.l{layer}", x, hs[layer], cs[layer], config.dec_hidden)
        new_hs.append(h)
        new_cs.append(c)
        x = h
    return x, new_hs, new_cs


def step_distribution(enc: EncoderStates, dec_state: Tensor, params: dict[str, Tensor],
                      config: ModelConfig, return_gate: bool = False):
    """Output distribution for one decoder step, per the configured architecture."""
    alpha, context = attention(enc, dec_state, params)
    gen = generator_dist(context, dec_state, params)
    if config.arch == ARCH_POINTER_GENERATOR:
        gate = copy_gate(context, dec_state, params)
        dist = mix_distributions(gen, gate, alpha, enc.source_ids)
    else:
        gate = None
        dist = gen
    if return_gate:
        return dist, gate
    return dist


def forward_teacher_forced(source_ids: np.ndarray, decoder_input_ids: np.ndarray,
                           params: dict[str, Tensor], config: ModelConfig,
                           training: bool = False, rng: np.random.Generator | None = None,
                           return_gates: bool = False):
    """Per-step output distributions for gold-forced decoding.

    Returns a list of (batch, vocab) tensors, one per decoder position;
    with return_gates also the per-step copy gates (None for the plain
    encoder-decoder).
    """
    decoder_input_ids = np.asarray(decoder_input_ids)
    if decoder_input_ids.ndim != 2:
        raise T.ShapeError(
            f"forward: decoder ids must be (batch, length), got {decoder_input_ids.shape}")
    if decoder_input_ids.shape[1] > config.max_len + 1:
        raise ValueError(
            f"forward: decoder length {decoder_input_ids.shape[1]} exceeds max_len {config.max_len}")
    enc = encode(source_ids, params, config, training, rng)
    hs, cs = _bridge(enc, params, config)
    dists, gates = [], []
    for t in range(decoder_input_ids.shape[1]):
        x = T.embedding(params["embedding"], decoder_input_ids[:, t])
        dec_state, hs, cs = _decoder_step(params, config, x, hs, cs, training, rng)
        dist, gate = step_distribution(enc, dec_state, params, config, return_gate=True)
        dists.append(dist)
        gates.append(gate)
    if return_gates:
        return dists, gates
    return dists


@dataclass
class DecodeState:
    """Incremental decoder state for one search hypothesis."""

    enc: EncoderStates
    hidden: list[Tensor]
    cell: list[Tensor]


def init_decode(source_ids: np.ndarray, params: dict[str, Tensor],
                config: ModelConfig) -> DecodeState:
    enc = encode(np.asarray(source_ids), params, config, training=False)
    hs, cs = _bridge(enc, params, config)
    return DecodeState(enc, hs, cs)


def decode_step(state: DecodeState, token_id: int, params: dict[str, Tensor],
                config: ModelConfig) -> tuple[np.ndarray, DecodeState]:
    """Feed one token; returns (vocab probabilities, next state)."""
    ids = np.full((state.enc.batch,), token_id, dtype=np.int64)
    x = T.embedding(params["embedding"], ids)
    dec_state, hs, cs = _decoder_step(params, config, x, state.hidden, state.cell, False, None)
    dist = step_distribution(state.enc, dec_state, params, config)
    return dist.data[0], DecodeState(state.enc, hs, cs)
