"""
Forward and backward passes for the layer types of fedxray.network.

Everything works on batches shaped (n, C, H, W); `forward` is the single-input convenience wrapper.
"""

from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedxray.loggers import setup_logger
from fedxray.network import (
    Conv2d,
    DimensionError,
    Flatten,
    FullyConnected,
    Gradient,
    MaxPool2d,
    NetworkSpec,
    NumericError,
    ParamVector,
    ReLU,
    Tensor,
    check_params,
    flatten_params,
    unflatten_params,
)
from fedxray.utils import chunks

logger = setup_logger(__name__)


@dataclass(frozen=True)
class LocalTraining:
    lr: float = 0.001
    epochs: int = 1
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (n, C, Ho, Wo, k, k) read-only view
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values after {where}")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _layer_forward(layer, weights: List[np.ndarray], x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    if isinstance(layer, Conv2d):
        w, b = weights
        win = _windows(x, layer.kernel, layer.stride)
        out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True) + b[None, :, None, None]
        return out, (x.shape, win)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0), (x,)
    if isinstance(layer, MaxPool2d):
        win = _windows(x, layer.kernel, layer.step)
        n, c, ho, wo, k, _ = win.shape
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), (x.shape,)
    if isinstance(layer, FullyConnected):
        w, b = weights
        return x @ w.T + b, (x,)
    raise TypeError(f"no forward rule for {layer!r}")


def _layer_backward(layer, weights: List[np.ndarray], cache: tuple, dout: np.ndarray):
    """Returns (dx, [dweight, dbias] or [])."""
    if isinstance(layer, Conv2d):
        w, _ = weights
        x_shape, win = cache
        k, s = layer.kernel, layer.stride
        dw = np.einsum("nchwij,nohw->ocij", win, dout, optimize=True)
        db = dout.sum(axis=(0, 2, 3))
        dx = np.zeros(x_shape, dtype=dout.dtype)
        ho, wo = dout.shape[2], dout.shape[3]
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.einsum("nohw,oc->nchw", dout, w[:, :, i, j])
        return dx, [dw, db]
    if isinstance(layer, ReLU):
        (x,) = cache
        return dout * (x > 0), []
    if isinstance(layer, MaxPool2d):
        x_shape, arg = cache
        k, s = layer.kernel, layer.step
        n, c, ho, wo = arg.shape
        dx = np.zeros(x_shape, dtype=dout.dtype)
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
        rows = hi * s + arg // k
        cols = wi * s + arg % k
        # overlapping windows may route to the same input cell
        np.add.at(dx, (ni, ci, rows, cols), dout)
        return dx, []
    if isinstance(layer, Flatten):
        (x_shape,) = cache
        return dout.reshape(x_shape), []
    if isinstance(layer, FullyConnected):
        w, _ = weights
        (x,) = cache
        return dout @ w, [dout.T @ x, dout.sum(axis=0)]
    raise TypeError(f"no backward rule for {layer!r}")


def _check_inputs(spec: NetworkSpec, inputs: Tensor) -> np.ndarray:
    inputs = np.asarray(inputs)
    if inputs.ndim != 4 or tuple(inputs.shape[1:]) != spec.input_shape:
        raise DimensionError(f"{spec.name} expects inputs (n, {spec.input_shape}), got {inputs.shape}")
    return inputs


def _logits(params: ParamVector, spec: NetworkSpec, inputs: np.ndarray, keep_caches: bool):
    weights = unflatten_params(spec, check_params(params, spec))
    x = inputs.astype(spec.dtype, copy=False)
    caches = []
    for layer, layer_weights in zip(spec.layers[:-1], weights[:-1]):
        x, cache = _layer_forward(layer, layer_weights, x)
        _check_finite(x, type(layer).__name__)
        if keep_caches:
            caches.append(cache)
    return x, weights, caches


def forward_batch(params: ParamVector, spec: NetworkSpec, inputs: Tensor) -> np.ndarray:
    """Softmax probabilities, shape (n, M)."""
    inputs = _check_inputs(spec, inputs)
    logits, _, _ = _logits(params, spec, inputs, keep_caches=False)
    return softmax(logits)


def forward(params: ParamVector, spec: NetworkSpec, input: Tensor) -> np.ndarray:
    input = np.asarray(input)
    if tuple(input.shape) != spec.input_shape:
        raise DimensionError(f"{spec.name} expects input {spec.input_shape}, got {input.shape}")
    return forward_batch(params, spec, input[None])[0]


def predict(params: ParamVector, spec: NetworkSpec, inputs: Tensor, batch_size: int = 1000) -> np.ndarray:
    inputs = _check_inputs(spec, inputs)
    labels = [
        _logits(params, spec, inputs[i : i + batch_size], keep_caches=False)[0].argmax(axis=1)
        for i in range(0, len(inputs), batch_size)
    ]
    return np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)


def loss_and_grad(params: ParamVector, spec: NetworkSpec, batch: Tuple[Tensor, np.ndarray]) -> Tuple[float, Gradient]:
    """Mean cross-entropy over the batch and its gradient with respect to the ParamVector."""
    inputs, labels = batch
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("loss_and_grad needs a nonempty batch")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    inputs = _check_inputs(spec, inputs)
    if len(inputs) != len(labels):
        raise DimensionError(f"{len(inputs)} inputs but {len(labels)} labels")

    logits, weights, caches = _logits(params, spec, inputs, keep_caches=True)
    n = len(labels)
    log_probs = log_softmax(logits)
    loss = float(-log_probs[np.arange(n), labels].mean())

    dout = np.exp(log_probs)
    dout[np.arange(n), labels] -= 1.0
    dout /= n
    grads = [[] for _ in spec.layers]
    for index in range(len(spec.layers) - 2, -1, -1):
        dout, grads[index] = _layer_backward(spec.layers[index], weights[index], caches[index], dout)
    return loss, flatten_params(spec, grads)


def sgd_step(
    params: ParamVector,
    grad: Gradient,
    lr: float,
    momentum: float,
    weight_decay: float,
    buffer: np.ndarray | None = None,
) -> Tuple[ParamVector, np.ndarray]:
    """
    v <- momentum * v + grad + weight_decay * params
    params <- params - lr * v

    The momentum buffer belongs to the caller; pass None (or an empty array) on the first step.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    params = np.asarray(params)
    grad = np.asarray(grad)
    if grad.shape != params.shape:
        raise DimensionError(f"grad shape {grad.shape} != params shape {params.shape}")
    if buffer is None or np.size(buffer) == 0:
        buffer = np.zeros_like(params)
    elif np.shape(buffer) != params.shape:
        raise DimensionError(f"momentum buffer shape {np.shape(buffer)} != params shape {params.shape}")
    velocity = momentum * buffer + grad + weight_decay * params
    return params - lr * velocity, velocity


def fit(
    params: ParamVector,
    spec: NetworkSpec,
    inputs: Tensor,
    labels: np.ndarray,
    hyper: LocalTraining,
    seed,
    extra_grad: Callable[[ParamVector], Gradient] | None = None,
    after_step: Callable[[ParamVector], ParamVector] | None = None,
) -> Tuple[ParamVector, List[float]]:
    """
    Mini-batch momentum SGD for `hyper.epochs` passes over (inputs, labels).

    seed: anything numpy.random.default_rng accepts; it drives the shuffling only.
    extra_grad: gradient of additional objective terms, added to every batch gradient.
    after_step: maps the parameters after every SGD step (used for non-smooth penalty terms).

    Returns the trained parameters and the mean batch loss of each epoch.
    """
    params = np.array(check_params(params, spec), copy=True)
    rng = np.random.default_rng(seed)
    buffer = None
    epoch_losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(labels))
        total, seen = 0.0, 0
        for batch in chunks(order, hyper.batch_size):
            loss, grad = loss_and_grad(params, spec, (inputs[batch], labels[batch]))
            if extra_grad is not None:
                grad = grad + extra_grad(params)
            params, buffer = sgd_step(params, grad, hyper.lr, hyper.momentum, hyper.weight_decay, buffer)
            if after_step is not None:
                params = after_step(params)
            total += loss * len(batch)
            seen += len(batch)
        epoch_losses.append(total / max(seen, 1))
        logger.debug(f"epoch {epoch}: loss {epoch_losses[-1]:.6f}")
    return params, epoch_losses
