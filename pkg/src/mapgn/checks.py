"""Finite-difference gradient verification for primitives and the full model.

Everything here is meant to run under float64 (wrap calls in
``tensor.precision("float64")``), where central differences resolve to well
below the 1e-6 acceptance threshold.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, grad_check
from .model import ModelConfig, init_params
from .training import TrainConfig, fine_tune_loss


def _rand(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(np.asarray(rng.uniform(low, high, size=shape), dtype=T.default_dtype()),
                  requires_grad=True)


def _const(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(np.asarray(rng.uniform(low, high, size=shape), dtype=T.default_dtype()))


def _readout(x: Tensor, weights: Tensor) -> Tensor:
    """Scalar projection so constant-sum outputs (softmax) still move the loss."""
    return T.sum_all(T.mul(x, weights))


def _case(rng, name: str):
    """One (point, scalar function) instance for the named primitive."""
    if name == "add":
        other = _const(rng, 3, 4)
        w = _const(rng, 3, 4)
        return _rand(rng, 3, 4), lambda x: _readout(T.add(x, other), w)
    if name == "add[bias]":
        mat = _const(rng, 3, 4)
        w = _const(rng, 3, 4)
        return _rand(rng, 4), lambda x: _readout(T.add(mat, x), w)
    if name == "mul":
        other = _const(rng, 3, 4)
        return _rand(rng, 3, 4), lambda x: T.sum_all(T.mul(x, other))
    if name == "affine":
        return _rand(rng, 3, 3), lambda x: T.sum_all(T.affine(x, scale=1.7, shift=-0.3))
    if name == "matmul[lhs]":
        rhs = _const(rng, 4, 2)
        w = _const(rng, 3, 2)
        return _rand(rng, 3, 4), lambda x: _readout(T.matmul(x, rhs), w)
    if name == "matmul[rhs]":
        lhs = _const(rng, 3, 4)
        w = _const(rng, 3, 2)
        return _rand(rng, 4, 2), lambda x: _readout(T.matmul(lhs, x), w)
    if name == "concat":
        other = _const(rng, 3, 3)
        w = _const(rng, 3, 5)
        return _rand(rng, 3, 2), lambda x: _readout(T.concat([x, other]), w)
    if name == "narrow":
        w = _const(rng, 3, 3)
        return _rand(rng, 3, 6), lambda x: _readout(T.narrow(x, 1, 3), w)
    if name == "stack":
        other = _const(rng, 2, 3)
        w = _const(rng, 2, 2, 3)
        return _rand(rng, 2, 3), lambda x: _readout(T.stack([x, other]), w)
    if name == "reshape":
        w = _const(rng, 2, 6)
        return _rand(rng, 3, 4), lambda x: _readout(T.reshape(x, (2, 6)), w)
    if name == "transpose2d":
        w = _const(rng, 4, 3)
        return _rand(rng, 3, 4), lambda x: _readout(T.transpose2d(x), w)
    if name == "tanh":
        w = _const(rng, 3, 4)
        return _rand(rng, 3, 4), lambda x: _readout(T.tanh(x), w)
    if name == "sigmoid":
        w = _const(rng, 3, 4)
        return _rand(rng, 3, 4), lambda x: _readout(T.sigmoid(x), w)
    if name == "softmax":
        w = _const(rng, 3, 5)
        return _rand(rng, 3, 5), lambda x: _readout(T.softmax(x), w)
    if name == "safe_log":
        w = _const(rng, 3, 4)
        return _rand(rng, 3, 4, low=0.5, high=2.0), lambda x: _readout(T.safe_log(x, 1e-12), w)
    if name == "sum_all":
        return _rand(rng, 3, 4), lambda x: T.sum_all(x)
    if name == "embedding":
        ids = np.asarray(rng.integers(0, 6, size=5))
        w = _const(rng, 5, 3)
        return _rand(rng, 6, 3), lambda x: _readout(T.embedding(x, ids), w)
    if name == "dropout":
        w = _const(rng, 4, 4)
        seed = int(rng.integers(0, 2**31))  # same mask on every evaluation
        return _rand(rng, 4, 4), lambda x: _readout(
            T.dropout(x, 0.4, True, np.random.default_rng(seed)), w)
    if name == "tile_rows":
        w = _const(rng, 6, 3)
        return _rand(rng, 2, 3), lambda x: _readout(T.tile_rows(x, 3), w)
    if name == "attend[weights]":
        states = _const(rng, 4, 2, 3)
        w = _const(rng, 2, 3)
        return _rand(rng, 2, 4), lambda x: _readout(T.attend(x, states), w)
    if name == "attend[states]":
        alpha = _const(rng, 2, 4)
        w = _const(rng, 2, 3)
        return _rand(rng, 4, 2, 3), lambda x: _readout(T.attend(alpha, x), w)
    if name == "copy_scatter":
        ids = np.asarray(rng.integers(0, 6, size=(2, 4)))
        w = _const(rng, 2, 6)
        return _rand(rng, 2, 4), lambda x: _readout(T.copy_scatter(x, ids, 6), w)
    if name == "scale_rows[matrix]":
        scales = _const(rng, 3)
        w = _const(rng, 3, 4)
        return _rand(rng, 3, 4), lambda x: _readout(T.scale_rows(x, scales), w)
    if name == "scale_rows[scales]":
        mat = _const(rng, 3, 4)
        w = _const(rng, 3, 4)
        return _rand(rng, 3), lambda x: _readout(T.scale_rows(mat, x), w)
    raise KeyError(name)


PRIMITIVE_NAMES = (
    "add", "add[bias]", "mul", "affine", "matmul[lhs]", "matmul[rhs]", "concat",
    "narrow", "stack", "reshape", "transpose2d", "tanh", "sigmoid", "softmax",
    "safe_log", "sum_all", "embedding", "dropout", "tile_rows", "attend[weights]",
    "attend[states]", "copy_scatter", "scale_rows[matrix]", "scale_rows[scales]",
)


def primitive_grad_errors(rng: np.random.Generator, points: int = 10) -> dict[str, float]:
    """Max finite-difference error per primitive op over random points."""
    results: dict[str, float] = {}
    for name in PRIMITIVE_NAMES:
        worst = 0.0
        for _ in range(points):
            point, fn = _case(rng, name)
            worst = max(worst, grad_check(fn, point))
        results[name] = worst
    return results


def toy_model(rng: np.random.Generator, arch: str = "pointer-generator"):
    """The small configuration used for whole-model gradient checks."""
    config = ModelConfig(arch=arch, vocab_size=7, emb_dim=4, enc_layers=2, enc_hidden=4,
                         dec_layers=2, dec_hidden=4, dropout=0.0, max_len=16)
    params = init_params(config, rng)
    return config, params


def full_model_grad_errors(rng: np.random.Generator) -> dict[str, float]:
    """Finite-difference check of the teacher-forced loss for every parameter.

    Toy setup: vocab 7, all dims 4, source length 3, two decoder steps. The
    numeric side perturbs each parameter in place, so the loss closure reads
    the live parameter map.
    """
    config, params = toy_model(rng)
    train_config = TrainConfig(label_smoothing=0.1, steps=1, batch_size=1)
    pair = ([5, 6, 5], [6])  # source of 3 tokens; target y + EOS gives 2 steps

    def loss_fn(_point):
        return fine_tune_loss([pair], params, config, train_config)

    return {name: grad_check(loss_fn, tensor) for name, tensor in params.items()}
