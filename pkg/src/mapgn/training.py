"""Losses, Adam optimization, the training loop, transfer, and checkpoints.

Pre-training and fine-tuning share one loop. Fine-tuning consumes paired
examples (decoder fed BOS + target, predicting target + EOS); pre-training
consumes span-masked examples built on the fly, predicting the masked
fragment only. Label-smoothed NLL is used for both, with PAD steps excluded
from loss, gradient, and smoothing support.

Determinism contract: given the same seed and config, shuffling, masking and
dropout streams are all derived from keyed rngs (seed, purpose, step/epoch/
example index), so a run can be reproduced bit-for-bit and a checkpoint can
be resumed mid-stream without disturbing the schedule.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .errors import CheckpointError, DataError, NumericError
from .masking import MaskedExample, MaskingSpec, build_pretrain_example
from .model import ModelConfig, forward_teacher_forced, init_params, param_shapes
from .vocab import BOS_ID, EOS_ID, PAD_ID

NLL_FLOOR = 1e-12

CHECKPOINT_MAGIC = b"MPGN"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {4: "<f4", 8: "<f8"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_smoothing: float = 0.1
    batch_size: int = 64
    max_len: int = 200
    steps: int = 1000
    seed: int = 0
    grad_clip: float | None = 5.0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = only at the end
    valid_every: int = 0  # 0 = never
    precision: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing {self.label_smoothing} outside [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smoothed_nll(dist: Tensor, target: int, smoothing: float, v_effective: int) -> Tensor:
    """Label-smoothed NLL of one distribution row.

    q = (1 - smoothing) * onehot(target) + smoothing / v_effective; callers
    that need PAD excluded from the support go through sequence_nll, which
    assembles PAD-aware target rows.
    """
    q = np.full(dist.data.shape[-1], smoothing / v_effective, dtype=dist.data.dtype)
    q[target] += 1.0 - smoothing
    return T.affine(T.sum_all(T.mul(Tensor(q), T.safe_log(dist, NLL_FLOOR))), scale=-1.0)


def _batch_target_matrix(targets: np.ndarray, vocab_size: int, smoothing: float, dtype):
    """Per-row smoothing targets; PAD target rows are all zero (no loss, no grad)."""
    batch = targets.shape[0]
    v_effective = vocab_size - 1  # PAD is outside the smoothing support
    q = np.full((batch, vocab_size), smoothing / v_effective, dtype=dtype)
    q[:, PAD_ID] = 0.0
    q[np.arange(batch), targets] += 1.0 - smoothing
    q[targets == PAD_ID] = 0.0
    return q


def sequence_nll(dists: list[Tensor], targets: np.ndarray, smoothing: float) -> Tensor:
    """Sum of per-step smoothed NLL over non-PAD steps, averaged over the batch."""
    batch, length = targets.shape
    if length != len(dists):
        raise T.ShapeError(f"sequence_nll: {len(dists)} steps vs targets of length {length}")
    vocab_size = dists[0].data.shape[-1]
    total: Tensor | None = None
    for t, dist in enumerate(dists):
        q = Tensor(_batch_target_matrix(targets[:, t], vocab_size, smoothing, dist.data.dtype))
        step = T.sum_all(T.mul(q, T.safe_log(dist, NLL_FLOOR)))
        total = step if total is None else T.add(total, step)
    return T.affine(total, scale=-1.0 / batch)


def _pad_rows(rows: list[list[int]], length: int) -> np.ndarray:
    out = np.full((len(rows), length), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def _source_matrix(rows: list[list[int]]) -> np.ndarray:
    """Sources end with EOS and are right-padded with further EOS markers.

    The trailing EOS makes the stop decision copyable (otherwise the gate
    must open for a token that never appears in the source, which
    destabilizes copy-heavy training), and an EOS tail is a benign filler
    for ragged batches: the encoder runs over real tokens everywhere, so no
    attention masking is needed. Batches are formed within coarse length
    buckets to keep the tails short.
    """
    width = max(len(row) for row in rows) + 1
    out = np.full((len(rows), width), EOS_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def finetune_arrays(pairs: list[tuple[list[int], list[int]]]):
    """(source, decoder input, targets) arrays for one batch."""
    if not pairs:
        raise DataError("empty batch")
    sources = _source_matrix([src for src, _ in pairs])
    width = max(len(tgt) for _, tgt in pairs) + 1
    dec_in = _pad_rows([[BOS_ID] + tgt for _, tgt in pairs], width)
    targets = _pad_rows([tgt + [EOS_ID] for _, tgt in pairs], width)
    return sources, dec_in, targets


def fine_tune_loss(pairs, params, config: ModelConfig, train_config: TrainConfig,
                   training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Batch loss on paired data: decoder sees BOS + Y and predicts Y + EOS."""
    sources, dec_in, targets = finetune_arrays(pairs)
    dists = forward_teacher_forced(sources, dec_in, params, config, training, rng)
    return sequence_nll(dists, targets, train_config.label_smoothing)


def pretrain_arrays(examples: list[MaskedExample]):
    """Same layout as finetune_arrays; targets are the span fragments only."""
    if not examples:
        raise DataError("empty batch")
    sources = _source_matrix([ex.encoder_input for ex in examples])
    width = max(len(ex.targets) for ex in examples)
    dec_in = _pad_rows([ex.decoder_input for ex in examples], width)
    targets = _pad_rows([ex.targets for ex in examples], width)
    return sources, dec_in, targets


def pretrain_loss(examples, params, config: ModelConfig, train_config: TrainConfig,
                  training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Batch loss on masked examples: predict the span fragment only."""
    sources, dec_in, targets = pretrain_arrays(examples)
    dists = forward_teacher_forced(sources, dec_in, params, config, training, rng)
    return sequence_nll(dists, targets, train_config.label_smoothing)


def token_accuracy(pairs, params, config: ModelConfig):
    """Teacher-forced argmax accuracy plus the mean copy gate on copyable steps.

    Returns (accuracy, mean_gate_or_None); copyable steps are those whose
    gold token also occurs in the source line.
    """
    correct = total = 0
    gate_sum = 0.0
    gate_n = 0
    ordered = sorted(pairs, key=lambda pair: len(pair[0]))
    for start in range(0, len(ordered), 64):
        batch = ordered[start:start + 64]
        sources, dec_in, targets = finetune_arrays(batch)
        dists, gates = forward_teacher_forced(sources, dec_in, params, config,
                                              return_gates=True)
        for t, dist in enumerate(dists):
            live = targets[:, t] != PAD_ID
            pred = dist.data.argmax(axis=1)
            correct += int((pred[live] == targets[live, t]).sum())
            total += int(live.sum())
            if gates[t] is not None:
                copyable = live & (sources == targets[:, t][:, None]).any(axis=1)
                gate_sum += float(gates[t].data[copyable].sum())
                gate_n += int(copyable.sum())
    gate = gate_sum / gate_n if gate_n else None
    return (correct / total if total else 0.0), gate


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: dict[str, Tensor]) -> OptimizerState:
    state = OptimizerState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], state: OptimizerState, config: TrainConfig) -> None:
    """One bias-corrected Adam update from the accumulated gradients."""
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g
    if config.grad_clip is not None:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            grads = {name: g * scale for name, g in grads.items()}
    state.step += 1
    t = state.step
    correction1 = 1.0 - config.beta1 ** t
    correction2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# parameter transfer
# ---------------------------------------------------------------------------

def transfer_params(pretrained: dict[str, Tensor], target_config: ModelConfig,
                    rng: np.random.Generator) -> tuple[dict[str, Tensor], list[str]]:
    """Copy name-matching tensors into a freshly initialized target model.

    Returns (params, copied names). Names only in the target stay at their
    fresh initialization; a shape mismatch on a shared name is an error.
    """
    params = init_params(target_config, rng)
    shapes = param_shapes(target_config)
    copied = []
    for name, tensor in pretrained.items():
        if name not in params:
            continue
        if tensor.data.shape != shapes[name]:
            raise ValueError(
                f"transfer: parameter {name!r} has shape {tensor.data.shape}, "
                f"target expects {shapes[name]}")
        params[name] = Tensor(tensor.data.copy(), requires_grad=True)
        copied.append(name)
    return params, copied


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: dict[str, Tensor], optimizer: OptimizerState | None,
                    metadata: dict) -> None:
    """Binary checkpoint: magic, version, JSON metadata, named tensors."""
    arrays: dict[str, np.ndarray] = {name: p.data for name, p in params.items()}
    if optimizer is not None:
        for name, arr in optimizer.m.items():
            arrays[f"opt.m.{name}"] = arr
        for name, arr in optimizer.v.items():
            arrays[f"opt.v.{name}"] = arr
    meta = dict(metadata)
    meta["optimizer_step"] = optimizer.step if optimizer is not None else None
    meta["tensor_count"] = len(arrays)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            width = arr.dtype.itemsize
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BI", width, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(_DTYPE_CODES[width], copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_checkpoint(path: str, expect_vocab_sha: str | None = None):
    """Read a checkpoint back; returns (params, optimizer or None, metadata)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(meta["tensor_count"]):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            width, rank = struct.unpack("<BI", _read_exact(fh, 5))
            if width not in _DTYPE_CODES:
                raise CheckpointError(f"{path}: unknown tensor dtype code {width}")
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, count * width)
            arrays[name] = np.frombuffer(raw, dtype=_DTYPE_CODES[width]).reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after declared tensors")
    if expect_vocab_sha is not None and meta.get("vocab_sha256") != expect_vocab_sha:
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {meta.get('vocab_sha256')!r}, "
            f"expected {expect_vocab_sha!r})")
    params = {}
    optimizer = None
    if meta.get("optimizer_step") is not None:
        optimizer = OptimizerState(step=meta["optimizer_step"])
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            optimizer.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            optimizer.v[name[6:]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return params, optimizer, meta


def checkpoint_metadata(model_config: ModelConfig, step: int, vocab_sha: str,
                        masking: str | None = None) -> dict:
    return {
        "arch": model_config.arch,
        "model_config": asdict(model_config),
        "step": step,
        "vocab_sha256": vocab_sha,
        "masking": masking,
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

BUCKET_WIDTH = 8


def bucketed_batches(lengths: list[int], batch_size: int, rng: np.random.Generator,
                     bucket_width: int = BUCKET_WIDTH) -> list[list[int]]:
    """Batches of item indices drawn within coarse length buckets, shuffled twice."""
    order = rng.permutation(len(lengths))
    groups: dict[int, list[int]] = {}
    for idx in order:
        groups.setdefault(lengths[idx] // bucket_width, []).append(int(idx))
    batches = []
    for bucket in sorted(groups):
        items = groups[bucket]
        for i in range(0, len(items), batch_size):
            batches.append(items[i:i + batch_size])
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    optimizer: OptimizerState
    log: list[tuple[int, float, float, float]]  # (step, loss, lr, seconds)
    best_params: dict[str, Tensor] | None = None
    best_valid_loss: float | None = None


def _clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: Tensor(p.data.copy(), requires_grad=True) for name, p in params.items()}


def train(mode: str, data, params: dict[str, Tensor], model_config: ModelConfig,
          config: TrainConfig, masking_spec: MaskingSpec | None = None,
          valid_data=None, optimizer: OptimizerState | None = None, start_step: int = 0,
          log_file=None, checkpoint_path: str | None = None,
          checkpoint_meta: dict | None = None) -> TrainResult:
    """Run `config.steps` optimization steps; deterministic given config.seed.

    mode is "pretrain" (data: token id sentences, masking_spec required) or
    "finetune" (data: (source ids, target ids) pairs). Sentences are
    truncated to config.max_len before batching. When valid_data is given,
    the parameters with the best validation loss are tracked and returned.
    """
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"unknown training mode {mode!r}")
    if mode == "pretrain" and masking_spec is None:
        raise ValueError("pre-training needs a masking spec")
    if not data:
        raise DataError("training dataset is empty")

    if mode == "pretrain":
        data = [list(s[:config.max_len]) for s in data]
        lengths = [len(s) for s in data]
    else:
        data = [(list(s[:config.max_len]), list(t[:config.max_len])) for s, t in data]
        lengths = [len(s) for s, _ in data]
    vocab_size = model_config.vocab_size

    if optimizer is None:
        optimizer = init_optimizer(params)
    seed = config.seed
    epoch = -1
    batches: list[list[int]] = []
    per_epoch = 0
    log: list[tuple[int, float, float, float]] = []
    best_params = None
    best_valid = None
    started = time.monotonic()

    def batch_for(step: int):
        nonlocal epoch, batches, per_epoch
        if not batches:
            probe = bucketed_batches(lengths, config.batch_size, np.random.default_rng((seed, 17, 0)))
            per_epoch = len(probe)
        wanted_epoch = step // per_epoch
        if wanted_epoch != epoch:
            epoch = wanted_epoch
            batches = bucketed_batches(lengths, config.batch_size,
                                       np.random.default_rng((seed, 17, epoch)))
        return epoch, batches[step % per_epoch]

    for step in range(start_step, start_step + config.steps):
        ep, indices = batch_for(step)
        if mode == "pretrain":
            batch = [
                build_pretrain_example(data[i], masking_spec,
                                       np.random.default_rng((seed, 23, ep, i)), vocab_size)
                for i in indices
            ]
            loss_fn = pretrain_loss
        else:
            batch = [data[i] for i in indices]
            loss_fn = fine_tune_loss
        drop_rng = np.random.default_rng((seed, 29, step))
        T.zero_grads(params.values())
        with T.Tape():
            loss = loss_fn(batch, params, model_config, config, training=True, rng=drop_rng)
            T.backward(loss)
        adam_step(params, optimizer, config)
        loss_value = float(loss.data)
        elapsed = time.monotonic() - started
        row = (step + 1, loss_value, config.lr, elapsed)
        log.append(row)
        if log_file is not None and ((step + 1) % max(1, config.log_every) == 0
                                     or step + 1 == start_step + config.steps):
            log_file.write(f"{row[0]},{row[1]:.6f},{row[2]},{row[3]:.3f}\n")
            log_file.flush()
        if valid_data and config.valid_every and ((step + 1) % config.valid_every == 0
                                                  or step + 1 == start_step + config.steps):
            vloss = evaluate_loss(mode, valid_data, params, model_config, config, masking_spec)
            if best_valid is None or vloss < best_valid:
                best_valid = vloss
                best_params = _clone_params(params)
        if checkpoint_path and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            meta = dict(checkpoint_meta or {})
            meta["step"] = step + 1
            save_checkpoint(checkpoint_path, params, optimizer, meta)
    if checkpoint_path:
        meta = dict(checkpoint_meta or {})
        meta["step"] = start_step + config.steps
        save_checkpoint(checkpoint_path, params, optimizer, meta)
    return TrainResult(params, optimizer, log, best_params, best_valid)


def evaluate_loss(mode: str, data, params, model_config: ModelConfig, config: TrainConfig,
                  masking_spec: MaskingSpec | None = None) -> float:
    """Mean per-batch loss over a held-out set, without dropout or gradient."""
    if mode == "pretrain":
        data = [list(s[:config.max_len]) for s in data]
        lengths = [len(s) for s in data]
    else:
        data = [(list(s[:config.max_len]), list(t[:config.max_len])) for s, t in data]
        lengths = [len(s) for s, _ in data]
    batches = bucketed_batches(lengths, config.batch_size, np.random.default_rng(99))
    total = 0.0
    for b, indices in enumerate(batches):
        if mode == "pretrain":
            batch = [
                build_pretrain_example(data[i], masking_spec,
                                       np.random.default_rng((7, 23, 0, i)),
                                       model_config.vocab_size)
                for i in indices
            ]
            loss = pretrain_loss(batch, params, model_config, config)
        else:
            loss = fine_tune_loss([data[i] for i in indices], params, model_config, config)
        total += float(loss.data)
    return total / len(batches)
