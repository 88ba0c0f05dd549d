"""Dense numeric kernel: layer primitives, their backward passes and SGD.

Tensors are plain ``numpy.ndarray`` objects.  Weights and activations are
float32; anything that reduces over an epoch is done by the caller in float64.
Every forward returns ``(output, cache)``; the cache may be handed to the
matching backward exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, StateError

DTYPE = np.float32
LEAKY_SLOPE = 0.01


class LayerCache:
    """Saved forward state; one forward writes it, one backward consumes it."""

    __slots__ = ("kind", "_saved", "consumed")

    def __init__(self, kind: str, **saved):
        self.kind = kind
        self._saved = saved
        self.consumed = False

    def take(self, kind: str) -> dict:
        if self.consumed:
            raise StateError(f"{self.kind} cache already consumed by a backward pass")
        if kind != self.kind:
            raise StateError(f"expected a {kind} cache, got {self.kind}")
        self.consumed = True
        saved, self._saved = self._saved, {}
        return saved


def _require_cache(cache, kind):
    if cache is None:
        raise StateError(f"missing {kind} cache; run the forward pass first")
    return cache.take(kind)


# -- affine ------------------------------------------------------------------

def affine_forward(x, weight, bias):
    """``out[b, o] = sum_i x[b, i] * weight[o, i] + bias[o]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"affine: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"affine: bias shape {tuple(bias.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    out = x @ weight.T
    out += bias
    return out, LayerCache("affine", x=x, weight=weight)


def affine_backward(grad_out, cache):
    saved = _require_cache(cache, "affine")
    x, weight = saved["x"], saved["weight"]
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise DimensionError(
            f"affine backward: grad shape {tuple(grad_out.shape)} does not match output "
            f"{(x.shape[0], weight.shape[0])}"
        )
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# -- convolution (valid padding, stride 1) ----------------------------------

def _im2col(x, k):
    # (B, C, H, W) -> (B*H'*W', C*k*k), row-major over (c, ki, kj)
    b, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, H', W', k, k
    ho, wo = h - k + 1, w - k + 1
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)


def conv2d_forward(x, kernels, bias):
    """Cross-correlation of ``x[B,C,H,W]`` with ``kernels[F,C,K,K]``."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and kernels, got {tuple(x.shape)} and {tuple(kernels.shape)}"
        )
    b, c, h, w = x.shape
    f, kc, k, k2 = kernels.shape
    if kc != c or k != k2:
        raise DimensionError(
            f"conv2d: input shape {tuple(x.shape)} incompatible with kernel shape {tuple(kernels.shape)}"
        )
    if k > h or k > w:
        raise DimensionError(
            f"conv2d: kernel {tuple(kernels.shape)} larger than input {tuple(x.shape)}"
        )
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {tuple(bias.shape)} does not match {f} filters")
    ho, wo = h - k + 1, w - k + 1
    cols = _im2col(x, k)
    out = cols @ kernels.reshape(f, -1).T
    out += bias
    out = np.ascontiguousarray(out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))
    return out, LayerCache("conv2d", cols=cols, x_shape=x.shape, kernels=kernels)


def conv2d_backward(grad_out, cache):
    saved = _require_cache(cache, "conv2d")
    cols, (b, c, h, w), kernels = saved["cols"], saved["x_shape"], saved["kernels"]
    f, _, k, _ = kernels.shape
    ho, wo = h - k + 1, w - k + 1
    if grad_out.shape != (b, f, ho, wo):
        raise DimensionError(
            f"conv2d backward: grad shape {tuple(grad_out.shape)} does not match output {(b, f, ho, wo)}"
        )
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, f)
    grad_k = (g2.T @ cols).reshape(kernels.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = np.zeros((b, c, h, w), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            grad_x[:, :, i:i + ho, j:j + wo] += np.einsum(
                "bfyx,fc->bcyx", grad_out, kernels[:, :, i, j], optimize=False
            )
    return grad_x, grad_k, grad_b


# -- pooling ----------------------------------------------------------------

def maxpool2x2_forward(x):
    if x.ndim != 4:
        raise DimensionError(f"maxpool: expected 4-d input, got {tuple(x.shape)}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool: spatial dims must be even, got {tuple(x.shape)}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    # argmax returns the first occurrence, which fixes the tie rule
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, LayerCache("maxpool", arg=arg, x_shape=x.shape)


def maxpool2x2_backward(grad_out, cache):
    saved = _require_cache(cache, "maxpool")
    arg, (b, c, h, w) = saved["arg"], saved["x_shape"]
    if grad_out.shape != arg.shape:
        raise DimensionError(f"maxpool backward: grad shape {tuple(grad_out.shape)} != {tuple(arg.shape)}")
    win = np.zeros(arg.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(win, arg[..., None], grad_out[..., None], axis=-1)
    return win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


# -- activation / loss --------------------------------------------------------

def leaky_relu(x, slope=LEAKY_SLOPE):
    """``max(slope*x, x)``; returns ``(out, cache)``."""
    out = np.where(x >= 0, x, x * np.asarray(slope, dtype=x.dtype))
    return out, LayerCache("leaky_relu", x=x, slope=slope)


def leaky_relu_backward(grad_out, cache):
    saved = _require_cache(cache, "leaky_relu")
    x, slope = saved["x"], saved["slope"]
    # derivative is taken as 1 at exactly zero
    return np.where(x >= 0, grad_out, grad_out * np.asarray(slope, dtype=grad_out.dtype))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, grad_logits)`` with ``grad = (softmax - onehot) / B``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got {tuple(logits.shape)}")
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {tuple(logits.shape)}")
    if n == 0:
        raise InputError("softmax_cross_entropy needs at least one sample")
    if labels.min() < 0 or labels.max() >= classes:
        raise InputError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    prob = np.exp(z - logsum[:, None])
    prob[rows, labels] -= 1.0
    prob /= n
    return loss, prob.astype(logits.dtype)


# -- optimizer ---------------------------------------------------------------

@dataclass
class SgdConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InputError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(weight, grad, cfg: SgdConfig, velocity=None, learning_rate=None):
    """One SGD step with optional classical momentum.

    ``v <- momentum * v + (grad + weight_decay * w)``; ``w <- w - lr * v``.
    Returns ``(new_weight, new_velocity)``; ``new_velocity`` is None when
    momentum is zero and no buffer was passed.

    A learning rate of exactly 0 is accepted here (it is how a frozen update
    is expressed); the config rejects negative rates only.
    """
    if weight.shape != grad.shape:
        raise DimensionError(f"sgd_step: weight {tuple(weight.shape)} vs grad {tuple(grad.shape)}")
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    step = grad if cfg.weight_decay == 0 else grad + cfg.weight_decay * weight
    if cfg.momentum or velocity is not None:
        if velocity is None:
            velocity = np.zeros_like(weight)
        elif velocity.shape != weight.shape:
            raise DimensionError(f"sgd_step: velocity {tuple(velocity.shape)} vs weight {tuple(weight.shape)}")
        velocity = cfg.momentum * velocity + step
        step = velocity
    new = weight - np.asarray(lr, dtype=weight.dtype) * step
    return new.astype(weight.dtype, copy=False), velocity
