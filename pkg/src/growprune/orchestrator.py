"""Incremental-update driver and the two conventional baselines.

Three ways to keep a model current as data partitions arrive:

* ``grow_prune`` keeps one sparse model.  Each update grows and trains it on
  the new partition, then on all data, then prunes it recoverably.
* ``tfs`` retrains a dense model from scratch on all data and prunes it.
* ``nft`` fine-tunes a persistent dense model on all data and prunes a copy.

Training cost is counted in normalized epochs: one epoch over a fraction
``f`` of the data available at that update counts as ``f`` epochs.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import (GrowthConfig, PruneConfig, accumulate_gradients, check_recoverable,
                     grow_connections, recoverable_prune)
from .errors import InputError, PreconditionError
from .network import build_model, sparsity_report
from .tensor import SgdConfig
from .training import Trainer, correct_count, evaluate

log = logging.getLogger(__name__)


class MethodKind(str, enum.Enum):
    GROW_PRUNE = "grow_prune"
    TFS = "tfs"
    NFT = "nft"


@dataclass
class UpdateSchedule:
    partition_count: int = 5
    initial_parts: int = 1
    parts_per_update: int = 1
    epochs_new_data: int = 10
    epochs_all_data: int = 15
    baseline_epochs: int = 40
    initial_epochs: int | None = None  # grow_prune's first model; defaults to baseline_epochs
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.initial_parts < 1 or self.parts_per_update < 1:
            raise InputError("initial_parts and parts_per_update must be positive")
        if self.initial_parts > self.partition_count:
            raise InputError("initial_parts exceeds partition_count")

    @property
    def updates(self):
        """Number of data stages, the initial one included."""
        return 1 + (self.partition_count - self.initial_parts) // self.parts_per_update

    def parts_at(self, update):
        """Partition ids available at 1-based ``update``."""
        return list(range(self.initial_parts + (update - 1) * self.parts_per_update))

    def new_parts_at(self, update):
        if update == 1:
            return self.parts_at(1)
        before = len(self.parts_at(update - 1))
        return list(range(before, before + self.parts_per_update))


METRIC_COLUMNS = (
    "method", "update", "parts", "data_fraction", "n_train", "val_error", "test_error",
    "active_params", "total_params", "norm_epochs", "grad_eval_passes", "prune_iterations",
    "rollbacks", "recoverable", "data_digest", "note",
)


@dataclass
class MetricsRow:
    method: str
    update: int
    parts: int
    data_fraction: float
    n_train: int
    val_error: float
    test_error: float
    active_params: int
    total_params: int
    norm_epochs: float
    grad_eval_passes: int
    prune_iterations: int
    rollbacks: int
    recoverable: bool
    data_digest: str
    note: str = ""

    def as_dict(self):
        return {c: getattr(self, c) for c in METRIC_COLUMNS}


@dataclass
class UpdateResult:
    model: object
    norm_epochs: float
    epoch_log: list = field(default_factory=list)
    prune_reports: list = field(default_factory=list)
    grad_eval_passes: int = 0
    note: str = ""


def data_digest(indices):
    arr = np.sort(np.asarray(indices, dtype=np.int64))
    return hashlib.sha1(arr.tobytes()).hexdigest()[:12]


# -- training phases ------------------------------------------------------------

def train_with_growth(model, data, epochs, growth: GrowthConfig | None, trainer: Trainer,
                      val=None, fraction=1.0, phase="train", epoch_log=None):
    """Train for ``epochs``, growing after every ``growth.interval``-th epoch.

    Growth never follows the final epoch, so every grown connection gets
    trained.  Returns ``(model, epoch_log)``.
    """
    if epochs < 1:
        raise InputError(f"epochs must be >= 1, got {epochs}")
    epoch_log = [] if epoch_log is None else epoch_log
    for e in range(1, epochs + 1):
        loss = trainer.train_epoch(model, data)
        val_acc = None
        if val is not None and len(val):
            val_acc = correct_count(model, val) / len(val)
            trainer.observe(val_acc)
        grown = None
        if growth is not None and e % growth.interval == 0 and e < epochs:
            stats = accumulate_gradients(model, data, trainer.batch_size)
            grown = grow_connections(model, stats, growth, trainer.learning_rate).total_grown
        epoch_log.append({
            "phase": phase, "epoch": e, "fraction": fraction, "loss": loss, "val_acc": val_acc,
            "lr": trainer.learning_rate, "active": sparsity_report(model).active_weights,
            "grown": grown,
        })
    return model, epoch_log


def _prune_cost(reports):
    return sum(r.retrain_epochs for r in reports)


def _finish(model, train, val, prune, trainer, result, after_growth=None):
    if after_growth is not None:
        after_growth(model)
    trainer.reset_schedule()
    model, reports = recoverable_prune(model, train, val, prune, trainer)
    result.model = model
    result.prune_reports = reports
    result.norm_epochs += _prune_cost(reports)
    ok, _ = check_recoverable(model)
    model.meta["recoverable"] = ok
    return result


def grow_prune_cycle(model, train, val, growth, prune, trainer, epochs=0):
    """One grow, optional retrain, recoverable prune round trip on fixed data.

    Validation accuracy before growth is the reference.  Recoverable pruning
    only protects the accuracy it starts from, so a growth step that costs a
    sample would otherwise be locked in; when the pruned result falls below
    the reference, model and trainer are restored to their pre-growth state.
    Returns ``(model, reports, rolled_back)``.
    """
    if len(val) == 0:
        raise InputError("grow_prune_cycle needs validation data")
    reference = correct_count(model, val)
    saved_model, saved_trainer = model.copy(), trainer.snapshot()
    stats = accumulate_gradients(model, train, trainer.batch_size)
    grow_connections(model, stats, growth, trainer.learning_rate)
    for _ in range(epochs):
        trainer.train_epoch(model, train)
    model, reports = recoverable_prune(model, train, val, prune, trainer)
    if correct_count(model, val) < reference:
        trainer.restore(saved_trainer)
        return saved_model, reports, True
    return model, reports, False


def initial_grow_prune(train, val, schedule, growth, prune, trainer, arch="lenet300100",
                       density=0.3, seed=0, widths=None, input_shape=None, class_count=10,
                       after_growth=None):
    """First grow_prune model: sparse init, growth-interleaved training, pruning.

    ``after_growth(model)``, if given, sees the post-growth model before pruning.
    """
    shape = input_shape or tuple(train.images.shape[1:])
    model = build_model(arch, "sparse", density, seed, widths, shape, class_count)
    epochs = schedule.initial_epochs or schedule.baseline_epochs
    trainer.reset_schedule()
    result = UpdateResult(model, float(epochs))
    train_with_growth(model, train, epochs, growth, trainer, val, 1.0, "initial", result.epoch_log)
    result.grad_eval_passes = sum(1 for r in result.epoch_log if r["grown"] is not None)
    return _finish(model, train, val, prune, trainer, result, after_growth)


def incremental_update(model, new_data, all_data, val, schedule, growth, prune, trainer,
                       after_growth=None):
    """Grow on new data, then on all data, then prune recoverably.

    ``new_data`` may be empty, which reduces the update to merged training on
    ``all_data``.  ``after_growth`` is as in :func:`initial_grow_prune`.
    """
    ok, violations = check_recoverable(model)
    if not ok:
        raise PreconditionError("model is not recoverable; cannot update it", violations)
    if len(all_data) == 0:
        raise InputError("all_data is empty")
    result = UpdateResult(model, 0.0)
    if len(new_data):
        fraction = len(new_data) / len(all_data)
        trainer.reset_schedule()
        train_with_growth(model, new_data, schedule.epochs_new_data, growth, trainer, val,
                          fraction, "new", result.epoch_log)
        result.norm_epochs += schedule.epochs_new_data * fraction
    else:
        result.note = "merged (no new data)"
    trainer.reset_schedule()
    train_with_growth(model, all_data, schedule.epochs_all_data, growth, trainer, val, 1.0, "all",
                      result.epoch_log)
    result.norm_epochs += schedule.epochs_all_data
    result.grad_eval_passes = sum(1 for r in result.epoch_log if r["grown"] is not None)
    return _finish(model, all_data, val, prune, trainer, result, after_growth)


def run_tfs(all_data, val, schedule, prune, sgd, seed=0, arch="lenet300100", widths=None,
            batch_size=64, augment_shift=0):
    """Dense model from scratch, ``baseline_epochs`` of training, then pruning."""
    model = build_model(arch, "dense", seed=seed, widths=widths,
                        input_shape=tuple(all_data.images.shape[1:]), class_count=all_data.class_count)
    trainer = Trainer(sgd, batch_size, seed, augment_shift=augment_shift)
    result = UpdateResult(model, float(schedule.baseline_epochs))
    train_with_growth(model, all_data, schedule.baseline_epochs, None, trainer, val, 1.0, "tfs",
                      result.epoch_log)
    return _finish(model, all_data, val, prune, trainer, result)


def run_nft(dense_model, trainer, all_data, val, schedule, prune):
    """Fine-tune the persistent dense model, then prune a copy of it.

    Returns ``(dense_model, result)`` where ``result.model`` is the pruned
    copy; the dense model is what the next update starts from.
    """
    if not dense_model.is_dense():
        raise PreconditionError("NFT needs a fully dense persistent model")
    result = UpdateResult(None, float(schedule.baseline_epochs))
    trainer.reset_schedule()
    train_with_growth(dense_model, all_data, schedule.baseline_epochs, None, trainer, val, 1.0, "nft",
                      result.epoch_log)
    pruned, prune_trainer = dense_model.copy(), trainer.clone()
    return dense_model, _finish(pruned, all_data, val, prune, prune_trainer, result)


# -- experiment ------------------------------------------------------------------

@dataclass
class ExperimentSetup:
    """Everything ``run_experiment`` needs besides the data."""

    schedule: UpdateSchedule = field(default_factory=UpdateSchedule)
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    arch: str = "lenet300100"
    widths: list | None = None
    density: float = 0.3
    batch_size: int = 64
    augment_shift: int = 0
    seed: int = 0

    def trainer(self):
        return Trainer(self.sgd, self.batch_size, self.seed, augment_shift=self.augment_shift)


def _row(method, update, parts, train_idx, n_total, result, val, test):
    model = result.model
    rep = sparsity_report(model)
    return MetricsRow(
        method=method, update=update, parts=len(parts),
        data_fraction=round(len(train_idx) / n_total, 6), n_train=len(train_idx),
        val_error=round(evaluate(model, val), 6), test_error=round(evaluate(model, test), 6),
        active_params=rep.active_params, total_params=rep.total_params,
        norm_epochs=round(result.norm_epochs, 6), grad_eval_passes=result.grad_eval_passes,
        prune_iterations=len(result.prune_reports),
        rollbacks=sum(1 for r in result.prune_reports if r.rolled_back),
        recoverable=bool(check_recoverable(model)[0]), data_digest=data_digest(train_idx),
        note=result.note,
    )


def run_experiment(train, val, test, setup: ExperimentSetup, methods=tuple(MethodKind), sink=None,
                   on_update=None):
    """Run every requested method over all updates with shared partitions.

    ``sink`` (if given) receives each :class:`MetricsRow` as soon as it is
    produced; ``on_update(method, update, model)`` sees each deployed model.
    Returns the list of rows ordered by update, then method.
    """
    from .data import partition

    methods = [MethodKind(m) for m in methods]
    sch = setup.schedule
    plan = partition(train, sch.partition_count, sch.shuffle_seed)
    rows = []
    gp_model = gp_trainer = None
    nft_model = nft_trainer = None
    for update in range(1, sch.updates + 1):
        parts = sch.parts_at(update)
        idx = plan.indices(parts)
        all_data = train.subset(idx, f"parts{parts}")
        new_data = train.subset(plan.indices(sch.new_parts_at(update)), "new")
        for method in methods:
            log.info("update %d/%d: %s on %d samples", update, sch.updates, method.value, len(idx))
            if method is MethodKind.GROW_PRUNE:
                if gp_model is None:
                    gp_trainer = setup.trainer()
                    result = initial_grow_prune(all_data, val, sch, setup.growth, setup.prune, gp_trainer,
                                                setup.arch, setup.density, setup.seed, setup.widths,
                                                class_count=train.class_count)
                else:
                    result = incremental_update(gp_model, new_data, all_data, val, sch, setup.growth,
                                                setup.prune, gp_trainer)
                gp_model = result.model
            elif method is MethodKind.TFS:
                result = run_tfs(all_data, val, sch, setup.prune, setup.sgd, setup.seed, setup.arch,
                                 setup.widths, setup.batch_size, setup.augment_shift)
            else:
                if nft_model is None:
                    nft_model = build_model(setup.arch, "dense", seed=setup.seed, widths=setup.widths,
                                            input_shape=tuple(train.images.shape[1:]),
                                            class_count=train.class_count)
                    nft_trainer = setup.trainer()
                nft_model, result = run_nft(nft_model, nft_trainer, all_data, val, sch, setup.prune)
            row = _row(method.value, update, parts, idx, len(train), result, val, test)
            rows.append(row)
            if sink is not None:
                sink(row)
            if on_update is not None:
                on_update(method.value, update, result.model)
    return rows


# -- growth-schedule comparison -------------------------------------------------

def _first_hit(accs, target):
    for i, a in enumerate(accs, 1):
        if a >= target:
            return i
    return None


def compare_growth_schedules(model, trainer, new_data, all_data, val, growth, merged_epochs=30,
                             new_epochs=10, max_all_epochs=None):
    """Merged training versus "new data first" from the same starting model.

    The merged arm grows and trains on all data for ``merged_epochs``; its
    final validation accuracy is the target and its cost is the first epoch
    reaching that target.  The other arm runs ``new_epochs`` on the new data
    alone, then trains on all data until it meets the target (or runs out of
    ``max_all_epochs``).  Costs are in normalized epochs.
    """
    max_all_epochs = max_all_epochs or merged_epochs
    fraction = len(new_data) / len(all_data)

    merged, m_tr = model.copy(), trainer.clone()
    m_tr.reset_schedule()
    _, merged_log = train_with_growth(merged, all_data, merged_epochs, growth, m_tr, val, 1.0, "merged")
    merged_acc = [r["val_acc"] for r in merged_log]
    target = merged_acc[-1]
    merged_cost = float(_first_hit(merged_acc, target))

    first, f_tr = model.copy(), trainer.clone()
    f_tr.reset_schedule()
    _, new_log = train_with_growth(first, new_data, new_epochs, growth, f_tr, val, fraction, "new")
    f_tr.reset_schedule()
    all_log = []
    hit = None
    for e in range(1, max_all_epochs + 1):
        # one epoch at a time so the arm can stop at the target; growth keeps its cadence
        f_tr.train_epoch(first, all_data)
        acc = correct_count(first, val) / len(val)
        f_tr.observe(acc)
        grown = None
        if growth is not None and e % growth.interval == 0 and e < max_all_epochs:
            stats = accumulate_gradients(first, all_data, f_tr.batch_size)
            grown = grow_connections(first, stats, growth, f_tr.learning_rate).total_grown
        all_log.append({"phase": "all", "epoch": e, "val_acc": acc, "grown": grown})
        if acc >= target:
            hit = e
            break
    new_first_cost = new_epochs * fraction + hit if hit is not None else float("inf")
    return {
        "target_accuracy": target,
        "merged_cost": merged_cost,
        "new_first_cost": new_first_cost,
        "ratio": new_first_cost / merged_cost,
        "new_fraction": fraction,
        "merged_log": merged_log,
        "new_first_log": new_log + all_log,
    }
