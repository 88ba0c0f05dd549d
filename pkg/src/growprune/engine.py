"""Gradient-based connection growth and magnitude-based pruning.

Growth ranks every weight position by its mean absolute gradient over one
frozen-parameter pass of the data and activates dangling positions at or
above a percentile threshold.  Pruning removes active positions at or below a
percentile of the active magnitudes.  ``recoverable_prune`` iterates pruning
with retraining and rolls back the first iteration whose accuracy cannot be
recovered; ``nonrecoverable_prune`` relaxes both the accuracy bar and the
no-orphan rule for a deployment-only model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimensionError, InputError
from .network import model_backward, model_forward, sparsity_report
from .tensor import softmax_cross_entropy
from .training import Trainer, correct_count

log = logging.getLogger(__name__)

PER_LAYER = "per_layer"
GLOBAL = "global"
PAPER_LITERAL = "paper_literal"
DESCENT = "descent"


def nearest_rank(n, p):
    """1-based nearest rank ``max(1, ceil(p/100 * n))``, computed exactly."""
    return max(1, math.ceil(Fraction(p) * n / 100))


def percentile_threshold(values, p):
    """Nearest-rank percentile: the ``ceil(p/100*n)``-th smallest value."""
    values = np.asarray(values).ravel()
    if values.size == 0:
        raise InputError("percentile of an empty set")
    if not 0 <= p < 100:
        raise InputError(f"percentile must lie in [0, 100), got {p}")
    k = nearest_rank(values.size, p) - 1
    return np.partition(values, k)[k].item()


@dataclass
class GradientStats:
    mean_abs: list  # per layer, float64, mean |dL/dw| over batches
    mean: list  # per layer, float64, signed mean dL/dw
    batches: int


@dataclass
class GrowthConfig:
    alpha: float = 40.0
    scope: str = PER_LAYER
    init_sign: str = PAPER_LITERAL
    learning_rate: float | None = None  # None: use the trainer's current rate
    interval: int = 3

    def __post_init__(self):
        if not 0 <= self.alpha < 100:
            raise InputError(f"alpha must lie in [0, 100), got {self.alpha}")
        if self.scope not in (PER_LAYER, GLOBAL):
            raise InputError(f"scope must be {PER_LAYER!r} or {GLOBAL!r}")
        if self.init_sign not in (PAPER_LITERAL, DESCENT):
            raise InputError(f"init_sign must be {PAPER_LITERAL!r} or {DESCENT!r}")
        if self.interval < 1:
            raise InputError(f"growth interval must be >= 1, got {self.interval}")


@dataclass
class PruneConfig:
    beta: float = 4.0
    recovery_epochs: int = 10
    accuracy_slack: float = 0.0
    max_iterations: int = 1000
    min_retrain_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.beta < 100:
            raise InputError(f"beta must lie in (0, 100), got {self.beta}")
        if self.recovery_epochs < 1:
            raise InputError("recovery_epochs must be positive")
        if self.accuracy_slack < 0:
            raise InputError("accuracy_slack must be non-negative")
        if not 0 <= self.min_retrain_epochs <= self.recovery_epochs:
            raise InputError("min_retrain_epochs must lie in [0, recovery_epochs]")


@dataclass
class PhaseReport:
    kind: str
    grown: list = field(default_factory=list)
    pruned: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    rolled_back: bool = False
    retrain_epochs: int = 0
    warnings: list = field(default_factory=list)
    orphans: list = field(default_factory=list)

    @property
    def total_grown(self):
        return int(sum(self.grown))

    @property
    def total_pruned(self):
        return int(sum(self.pruned))


# -- gradient statistics and growth ----------------------------------------------

def accumulate_gradients(model, dataset, batch_size=64):
    """Mean |raw weight gradient| per position over one pass, weights frozen."""
    n = len(dataset)
    if n == 0:
        raise InputError("cannot accumulate gradients over an empty dataset")
    sum_abs = [np.zeros(layer.weight.shape, dtype=np.float64) for layer in model.layers]
    sum_sgn = [np.zeros(layer.weight.shape, dtype=np.float64) for layer in model.layers]
    batches = 0
    for start in range(0, n, batch_size):
        logits = model_forward(model, dataset.images[start:start + batch_size])
        _, grad = softmax_cross_entropy(logits, dataset.labels[start:start + batch_size])
        grads, _ = model_backward(model, grad)
        for acc_abs, acc_sgn, g in zip(sum_abs, sum_sgn, grads):
            acc_abs += np.abs(g.weight)
            acc_sgn += g.weight
        batches += 1
    return GradientStats([s / batches for s in sum_abs], [s / batches for s in sum_sgn], batches)


def grow_connections(model, stats: GradientStats, cfg: GrowthConfig, learning_rate=None):
    """Activate dangling positions whose mean |grad| reaches the alpha-th percentile.

    New weights start at ``s * eta * mean_grad`` with ``s = +1`` for
    ``paper_literal`` and ``s = -1`` for ``descent``.
    """
    if len(stats.mean_abs) != len(model.layers):
        raise DimensionError(f"stats cover {len(stats.mean_abs)} layers, model has {len(model.layers)}")
    for i, (layer, s) in enumerate(zip(model.layers, stats.mean_abs)):
        if s.shape != layer.weight.shape:
            raise DimensionError(f"layer {i}: stats shape {s.shape} != weight shape {layer.weight.shape}")
    eta = cfg.learning_rate if cfg.learning_rate is not None else learning_rate
    if eta is None:
        raise InputError("growth needs a learning rate for weight initialization")
    sign = 1.0 if cfg.init_sign == PAPER_LITERAL else -1.0
    report = PhaseReport("grow")
    if cfg.scope == GLOBAL:
        shared = percentile_threshold(np.concatenate([s.ravel() for s in stats.mean_abs]), cfg.alpha)
    for layer, s, m in zip(model.layers, stats.mean_abs, stats.mean):
        thr = shared if cfg.scope == GLOBAL else percentile_threshold(s, cfg.alpha)
        new = (layer.mask == 0) & (s >= thr)
        layer.mask[new] = 1
        layer.weight[new] = (sign * eta * m[new]).astype(layer.weight.dtype)
        report.grown.append(int(np.count_nonzero(new)))
        report.thresholds.append(thr)
    return report


# -- pruning ---------------------------------------------------------------------

def unit_counts(layer):
    """Active connections per output unit and per input unit of a layer."""
    view = layer.unit_view(layer.mask)
    return view.sum(axis=(1, 2), dtype=np.int64), view.sum(axis=(0, 2), dtype=np.int64)


def prune_step(model, cfg: PruneConfig, keep_neurons=True):
    """Deactivate up to the nearest-rank beta% smallest active weights per layer.

    Candidates are active positions with ``|w| <= threshold`` in ascending
    ``(|w|, flat index)`` order.  With ``keep_neurons`` a candidate whose
    removal would leave a unit without inputs or outputs is skipped.
    """
    report = PhaseReport("prune")
    for li, layer in enumerate(model.layers):
        mask = layer.mask.reshape(-1)
        weight = layer.weight.reshape(-1)
        active = np.flatnonzero(mask)
        if active.size <= 1:
            report.warnings.append(f"layer {li}: {active.size} active connection(s), not pruned")
            report.pruned.append(0)
            report.thresholds.append(float("nan"))
            continue
        mags = np.abs(weight[active])
        quota = nearest_rank(active.size, cfg.beta)
        thr = percentile_threshold(mags, cfg.beta)
        below = mags <= thr
        cand, cmag = active[below], mags[below]
        order = cand[np.lexsort((cand, cmag))]
        if keep_neurons:
            outs, ins = unit_counts(layer)
            in_units = layer.in_units
            taps = layer.mask.size // (layer.out_units * in_units)
            removed = []
            for pos in order:
                if len(removed) == quota:
                    break
                o, rest = divmod(int(pos), in_units * taps)
                i = rest // taps
                if outs[o] <= 1 or ins[i] <= 1:
                    continue
                outs[o] -= 1
                ins[i] -= 1
                removed.append(pos)
            removed = np.asarray(removed, dtype=np.int64)
        else:
            removed = order[:quota]
        mask[removed] = 0
        weight[removed] = 0
        report.pruned.append(int(removed.size))
        report.thresholds.append(float(thr))
    return report


def check_recoverable(model):
    """True iff every unit keeps one active input and one active output.

    Output units of each layer need an incoming connection; input units of
    each layer (pixels, hidden neurons, conv channels) need an outgoing one.
    Returns ``(ok, violations)``.
    """
    violations = []
    for li, layer in enumerate(model.layers):
        outs, ins = unit_counts(layer)
        for o in np.flatnonzero(outs == 0):
            violations.append(f"layer {li} output unit {int(o)} has no active input connection")
        for i in np.flatnonzero(ins == 0):
            violations.append(f"layer {li} input unit {int(i)} has no active output connection")
    return not violations, violations


def _dead_units(model):
    """Units whose signal cannot reach the output, per layer input side."""
    dead = []
    reach = None  # bool over output units of the current layer that matter downstream
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        view = layer.unit_view(layer.mask).any(axis=2)
        if reach is None:
            reach = np.ones(layer.out_units, dtype=bool)
        live_in = view[reach].any(axis=0)
        dead.append((li, np.flatnonzero(~live_in)))
        # feed the liveness of this layer's inputs to the previous layer's outputs
        prev = model.layers[li - 1] if li else None
        if prev is not None:
            if prev.out_units == live_in.size:
                reach = live_in
            else:
                # conv -> affine flatten: a filter is live if any of its positions is
                reach = live_in.reshape(prev.out_units, -1).any(axis=1)
    return list(reversed(dead))


def drop_unreachable(model):
    """Clear incoming connections of hidden units with no path to the output.

    Such units cannot influence the logits, so this never changes predictions.
    Returns the list of ``(layer, unit)`` pairs that were removed.
    """
    removed = []
    for li, units in _dead_units(model):
        if li == 0 or units.size == 0:
            continue
        prev = model.layers[li - 1]
        if prev.out_units == model.layers[li].in_units:
            filters = units
        else:
            per = model.layers[li].in_units // prev.out_units
            live = np.ones(model.layers[li].in_units, dtype=bool)
            live[units] = False
            filters = np.flatnonzero(~live.reshape(prev.out_units, per).any(axis=1))
        if filters.size:
            prev.unit_view(prev.mask)[filters] = 0
            prev.unit_view(prev.weight)[filters] = 0
            removed.extend((li - 1, int(f)) for f in filters)
    return removed


def _pruning_loop(model, train, val, cfg, trainer, keep_neurons, slack):
    if len(val) == 0:
        raise InputError("pruning needs a non-empty validation set")
    trainer = trainer or Trainer()
    n_val = len(val)
    ref = correct_count(model, val)
    bar = math.ceil(ref - slack * n_val - 1e-9)
    reports = []
    for _ in range(cfg.max_iterations):
        saved_model = model.copy()
        saved_trainer = trainer.snapshot()
        report = prune_step(model, cfg, keep_neurons=keep_neurons)
        report.accuracy_before = ref / n_val
        if report.total_pruned == 0:
            model.load_state(saved_model)
            report.warnings.append("nothing left to prune")
            reports.append(report)
            break
        correct = correct_count(model, val) if cfg.min_retrain_epochs == 0 else -1
        epochs = 0
        while epochs < cfg.min_retrain_epochs or (correct < bar and epochs < cfg.recovery_epochs):
            trainer.train_epoch(model, train)
            epochs += 1
            correct = correct_count(model, val)
        report.retrain_epochs = epochs
        report.accuracy_after = correct / n_val
        if correct < bar:
            model.load_state(saved_model)
            trainer.restore(saved_trainer)
            report.rolled_back = True
            reports.append(report)
            log.debug("prune iteration rolled back at %d active weights", sparsity_report(model).active_weights)
            break
        reports.append(report)
    return model, reports


def recoverable_prune(model, train, val, cfg: PruneConfig | None = None, trainer=None):
    """Iterative prune/retrain keeping every neuron connected and val accuracy >= its start.

    Each iteration checkpoints the model, prunes beta% per layer and retrains
    for at most ``recovery_epochs`` epochs (stopping once the reference
    accuracy is met).  The first iteration that cannot recover is rolled back
    and ends the loop.
    """
    cfg = cfg or PruneConfig()
    return _pruning_loop(model, train, val, cfg, trainer, keep_neurons=True, slack=0.0)


def nonrecoverable_prune(model, train, val, cfg: PruneConfig, trainer=None, keep_neurons=False):
    """Pruning loop accepting ``accuracy_slack`` loss, without the no-orphan rule.

    Hidden units left without a path to the output are stripped afterwards;
    units left without inputs are listed in the final report's ``orphans``.
    """
    model, reports = _pruning_loop(model, train, val, cfg, trainer, keep_neurons=keep_neurons,
                                   slack=cfg.accuracy_slack)
    dropped = drop_unreachable(model)
    _, violations = check_recoverable(model)
    if reports:
        reports[-1].orphans = violations
        if dropped:
            reports[-1].warnings.append(f"stripped {len(dropped)} unreachable hidden units")
    model.meta["recoverable"] = False
    model.meta["deploy_only"] = True
    return model, reports
