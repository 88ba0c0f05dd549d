"""Masked sparse layers and the composed feed-forward model.

Every weight tensor has a companion 0/1 mask.  The forward pass uses
``weight * mask``; the backward pass returns the *raw* weight gradient at
every position (dangling ones included) because growth ranks dangling
connections by that gradient.  Updates multiply the gradient by the mask, so
inactive positions stay exactly zero.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, StateError
from .tensor import DTYPE, SgdConfig

AFFINE = "affine"
CONV2D = "conv2d"


@dataclass
class MaskedLayer:
    kind: str
    weight: np.ndarray
    mask: np.ndarray  # uint8, same shape as weight
    bias: np.ndarray
    activation: str = "leaky_relu"  # or "none"
    pool: str = "none"  # or "max2x2"; conv only

    def __post_init__(self):
        if self.mask.shape != self.weight.shape:
            raise DimensionError(
                f"mask shape {self.mask.shape} does not match weight shape {self.weight.shape}"
            )

    @property
    def out_units(self):
        return self.weight.shape[0]

    @property
    def in_units(self):
        return self.weight.shape[1]

    def unit_view(self, array):
        """Reshape a weight-shaped array to ``(out_units, in_units, positions)``.

        For a conv layer an output filter and an input channel are the
        "neurons"; the kernel taps are the positions joining them.
        """
        return array.reshape(self.out_units, self.in_units, -1)

    def effective_weight(self):
        return self.weight * self.mask

    def copy(self):
        return MaskedLayer(
            self.kind, self.weight.copy(), self.mask.copy(), self.bias.copy(), self.activation, self.pool
        )


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class NetworkModel:
    layers: list
    input_shape: tuple
    class_count: int
    seed: int = 0
    arch: dict = field(default_factory=dict)
    input_pad: int = 0
    meta: dict = field(default_factory=dict)
    _caches: list = field(default=None, repr=False, compare=False)

    def copy(self):
        return NetworkModel(
            [layer.copy() for layer in self.layers],
            tuple(self.input_shape),
            self.class_count,
            self.seed,
            copy.deepcopy(self.arch),
            self.input_pad,
            copy.deepcopy(self.meta),
        )

    def load_state(self, other):
        """Overwrite parameters and masks in place from ``other``."""
        for mine, theirs in zip(self.layers, other.layers):
            np.copyto(mine.weight, theirs.weight)
            np.copyto(mine.mask, theirs.mask)
            np.copyto(mine.bias, theirs.bias)
        self.meta = copy.deepcopy(other.meta)
        self._caches = None

    def is_dense(self):
        return all(bool(layer.mask.all()) for layer in self.layers)


# -- construction ------------------------------------------------------------

ARCHITECTURES = ("lenet300100", "lenet5", "mlp")


def _layer_specs(arch, widths, input_shape, class_count):
    """Return (kind, weight_shape, activation, pool) tuples plus input pad."""
    if arch == "lenet300100":
        widths = [int(np.prod(input_shape)), 300, 100, class_count]
        arch = "mlp"
    if arch == "mlp":
        if widths is None or len(widths) < 2:
            raise InputError("mlp needs at least an input and an output width")
        specs = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            act = "leaky_relu" if i < len(widths) - 2 else "none"
            specs.append((AFFINE, (fan_out, fan_in), act, "none"))
        return specs, 0
    if arch == "lenet5":
        c, h, w = input_shape
        pad = max(0, (32 - h) // 2)
        side = ((h + 2 * pad - 4) // 2 - 4) // 2
        specs = [
            (CONV2D, (6, c, 5, 5), "leaky_relu", "max2x2"),
            (CONV2D, (16, 6, 5, 5), "leaky_relu", "max2x2"),
            (AFFINE, (120, 16 * side * side), "leaky_relu", "none"),
            (AFFINE, (84, 120), "leaky_relu", "none"),
            (AFFINE, (class_count, 84), "none", "none"),
        ]
        return specs, pad
    raise InputError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")


def _sparse_mask(shape, density, rng):
    out_units, in_units = shape[0], shape[1]
    taps = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    total = out_units * in_units * taps
    target = int(round(density * total))
    needed = max(out_units, in_units)
    if target < needed:
        raise InputError(
            f"density {density} gives {target} connections for a {shape} layer, "
            f"but {needed} are needed so no neuron is orphaned"
        )
    mask = np.zeros(total, dtype=np.uint8)
    # a covering set that gives every output and input unit one connection
    rows = rng.permutation(out_units)
    cols = rng.permutation(in_units)
    i = np.arange(needed)
    cover = (rows[i % out_units] * in_units + cols[i % in_units]) * taps + rng.integers(0, taps, needed)
    mask[cover] = 1
    free = np.flatnonzero(mask == 0)
    extra = target - int(mask.sum())
    if extra > 0:
        mask[rng.choice(free, size=extra, replace=False)] = 1
    return mask.reshape(shape)


def build_model(arch="lenet300100", init="dense", density=0.3, seed=0, widths=None,
                input_shape=(1, 28, 28), class_count=10):
    """Construct a masked network.

    ``arch`` is ``lenet300100``, ``lenet5`` or ``mlp`` (with ``widths`` listing
    every layer width including input and output).  ``init="sparse"`` activates
    a random subset of ``density`` per layer while keeping at least one input
    and one output connection per neuron; weights use a He-style uniform bound
    scaled by the active fan-in.
    """
    if init not in ("dense", "sparse"):
        raise InputError(f"init must be 'dense' or 'sparse', got {init!r}")
    if init == "sparse" and not 0 < density <= 1:
        raise InputError(f"sparse density must lie in (0, 1], got {density}")
    if arch == "mlp" and widths is not None:
        input_shape = tuple(input_shape) if int(np.prod(input_shape)) == widths[0] else (widths[0],)
        class_count = widths[-1]
    specs, pad = _layer_specs(arch, widths, tuple(input_shape), class_count)
    rng = np.random.default_rng(seed)
    layers = []
    for kind, shape, act, pool in specs:
        fan_in = int(np.prod(shape[1:]))
        if init == "sparse":
            mask = _sparse_mask(shape, density, rng)
            eff_fan_in = max(1.0, density * fan_in)
        else:
            mask = np.ones(shape, dtype=np.uint8)
            eff_fan_in = fan_in
        bound = math.sqrt(6.0 / eff_fan_in)
        weight = rng.uniform(-bound, bound, size=shape).astype(DTYPE) * mask
        layers.append(MaskedLayer(kind, weight, mask, np.zeros(shape[0], dtype=DTYPE), act, pool))
    descriptor = {"arch": arch, "init": init, "density": density, "seed": seed,
                  "widths": list(widths) if widths is not None else None}
    model = NetworkModel(layers, tuple(input_shape), class_count, seed, descriptor, pad)
    _check_composes(model)
    return model


def _check_composes(model):
    x = np.zeros((1,) + tuple(model.input_shape), dtype=DTYPE)
    model_forward(model, x, keep_cache=False)


# -- forward / backward --------------------------------------------------------

def _prepare_input(model, x):
    x = np.asarray(x, dtype=DTYPE)
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        if x.ndim >= 2 and int(np.prod(x.shape[1:])) == int(np.prod(model.input_shape)):
            x = x.reshape((x.shape[0],) + tuple(model.input_shape))
        else:
            raise DimensionError(
                f"batch shape {tuple(x.shape)} does not match model input shape {tuple(model.input_shape)}"
            )
    if model.input_pad:
        p = model.input_pad
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return x


def model_forward(model, batch, keep_cache=True):
    """Logits for ``batch``; stores per-layer caches for ``model_backward``."""
    x = _prepare_input(model, batch)
    caches = []
    for layer in model.layers:
        w = layer.effective_weight()
        if layer.kind == AFFINE:
            shape_in = x.shape
            x2 = x.reshape(x.shape[0], -1)
            if x2.shape[1] != layer.in_units:
                raise DimensionError(
                    f"affine layer expects {layer.in_units} inputs, got shape {tuple(shape_in)}"
                )
            x, c_main = T.affine_forward(x2, w, layer.bias)
        else:
            shape_in = x.shape
            x, c_main = T.conv2d_forward(x, w, layer.bias)
        c_act = c_pool = None
        if layer.activation == "leaky_relu":
            x, c_act = T.leaky_relu(x)
        if layer.pool == "max2x2":
            x, c_pool = T.maxpool2x2_forward(x)
        caches.append((shape_in, c_main, c_act, c_pool))
    model._caches = caches if keep_cache else None
    return x


def model_backward(model, grad_logits):
    """Per-layer raw gradients (dangling positions included) and input grad.

    Returns ``(grads, grad_input)`` where ``grads[i]`` is a :class:`LayerGrad`.
    """
    caches = model._caches
    if caches is None:
        raise StateError("no forward caches; call model_forward before model_backward")
    model._caches = None
    grads = [None] * len(model.layers)
    g = grad_logits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        shape_in, c_main, c_act, c_pool = caches[i]
        if c_pool is not None:
            g = T.maxpool2x2_backward(g, c_pool)
        if c_act is not None:
            g = T.leaky_relu_backward(g, c_act)
        if layer.kind == AFFINE:
            g, gw, gb = T.affine_backward(g, c_main)
            g = g.reshape(shape_in)
        else:
            g, gw, gb = T.conv2d_backward(g, c_main)
        grads[i] = LayerGrad(gw, gb)
    if model.input_pad:
        p = model.input_pad
        g = g[:, :, p:-p, p:-p]
    return grads, g


class SgdState:
    """Momentum buffers and the current learning rate for one model."""

    def __init__(self, model=None, cfg: SgdConfig | None = None):
        self.cfg = cfg or SgdConfig()
        self.learning_rate = self.cfg.learning_rate
        self.velocity = None
        if model is not None and self.cfg.momentum:
            self.reset(model)

    def reset(self, model):
        self.velocity = [
            (np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in model.layers
        ]

    def copy(self):
        other = SgdState(cfg=self.cfg)
        other.learning_rate = self.learning_rate
        if self.velocity is not None:
            other.velocity = [(vw.copy(), vb.copy()) for vw, vb in self.velocity]
        return other


def apply_update(model, grads, cfg: SgdConfig, state: SgdState | None = None, learning_rate=None):
    """SGD step on every layer with gradients restricted to active positions."""
    if len(grads) != len(model.layers):
        raise DimensionError(f"{len(grads)} gradients for {len(model.layers)} layers")
    lr = learning_rate
    if lr is None:
        lr = state.learning_rate if state is not None else cfg.learning_rate
    use_velocity = state is not None and cfg.momentum
    if use_velocity and state.velocity is None:
        state.reset(model)
    for i, (layer, grad) in enumerate(zip(model.layers, grads)):
        if grad.weight.shape != layer.weight.shape or grad.bias.shape != layer.bias.shape:
            raise DimensionError(
                f"layer {i}: gradient shapes {grad.weight.shape}/{grad.bias.shape} do not match "
                f"{layer.weight.shape}/{layer.bias.shape}"
            )
        gw = grad.weight * layer.mask
        vw, vb = state.velocity[i] if use_velocity else (None, None)
        if vw is not None:
            vw = vw * layer.mask
        layer.weight, vw = T.sgd_step(layer.weight, gw, cfg, vw, lr)
        layer.weight *= layer.mask
        layer.bias, vb = T.sgd_step(layer.bias, grad.bias, cfg, vb, lr)
        if use_velocity:
            state.velocity[i] = (vw, vb)
    return model


# -- reporting ---------------------------------------------------------------

@dataclass
class SparsityReport:
    active: list
    total: list
    bias_count: int

    @property
    def active_weights(self):
        return int(sum(self.active))

    @property
    def total_weights(self):
        return int(sum(self.total))

    @property
    def active_params(self):
        return self.active_weights + self.bias_count

    @property
    def total_params(self):
        return self.total_weights + self.bias_count

    @property
    def density(self):
        return self.active_weights / self.total_weights


def sparsity_report(model):
    return SparsityReport(
        active=[int(np.count_nonzero(layer.mask)) for layer in model.layers],
        total=[int(layer.mask.size) for layer in model.layers],
        bias_count=int(sum(layer.bias.size for layer in model.layers)),
    )


def predict(model, images, batch_size=1000):
    out = []
    for start in range(0, len(images), batch_size):
        logits = model_forward(model, images[start:start + batch_size], keep_cache=False)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
