"""Desk-scale experiments that go beyond the per-update metrics table."""

from __future__ import annotations

import numpy as np

from .data import mnist_subset
from .errors import ConfigError, InputError
from .orchestrator import compare_growth_schedules, incremental_update, initial_grow_prune
from .report import active_region, bounding_box, density_grid, mass_ratio, mean_image
from .training import correct_count


def _by_class(dataset, classes, tag):
    return dataset.subset(np.flatnonzero(np.isin(dataset.labels, classes)), tag)


def class_addition_density(cfg, initial_classes=(1, 2), added_class=0):
    """First-layer density of the post-growth model before and after adding a digit.

    A grow_prune model is grown, trained and pruned on ``initial_classes``,
    then updated with ``added_class`` as the new data.  The maps compared are
    the two post-growth ones, taken just before each pruning phase; the
    pruned maps are returned as well.  The region of interest is the set of
    pixels where the added class's mean image reaches 0.2, and the reported
    ratios are the share of first-layer connections leaving that region.
    """
    if added_class in initial_classes:
        raise ConfigError("added_class", "the added class must not be among the initial classes")
    setup = cfg.setup()
    if setup.arch not in ("lenet300100", "mlp"):
        raise ConfigError("arch", "density maps need a fully-connected first layer")
    train, val, _ = mnist_subset(cfg.data_dir, cfg.n_train, cfg.val_size, cfg.n_test, cfg.data_seed)
    classes = sorted(set(initial_classes) | {added_class})
    old = _by_class(train, list(initial_classes), "initial-classes")
    new = _by_class(train, [added_class], "added-class")
    if len(old) == 0 or len(new) == 0:
        raise InputError("no training samples for the requested classes")
    all_data = old.concat(new, "all-classes")
    val_old = _by_class(val, list(initial_classes), "val-initial")
    val_all = _by_class(val, classes, "val-all")

    grown = []
    trainer = setup.trainer()
    first = initial_grow_prune(old, val_old, setup.schedule, setup.growth, setup.prune, trainer,
                               setup.arch, setup.density, setup.seed, setup.widths,
                               class_count=train.class_count,
                               after_growth=lambda m: grown.append(density_grid(m)))
    pruned_before = density_grid(first.model)
    second = incremental_update(first.model, new, all_data, val_all, setup.schedule, setup.growth,
                                setup.prune, trainer, after_growth=lambda m: grown.append(density_grid(m)))
    pruned_after = density_grid(second.model)
    before, after = grown

    region = active_region(mean_image(new, added_class), 0.2)
    old_box = bounding_box(active_region(mean_image(old, initial_classes[0]), 0.2))
    for c in initial_classes[1:]:
        old_box |= bounding_box(active_region(mean_image(old, c), 0.2))
    ratio_before = mass_ratio(before, region)
    ratio_after = mass_ratio(after, region)
    return {
        "initial_classes": list(initial_classes),
        "added_class": added_class,
        "region_pixels": int(region.sum()),
        "ratio_before": ratio_before,
        "ratio_after": ratio_after,
        "shift": ratio_after - ratio_before,
        "pruned_ratio_before": mass_ratio(pruned_before, region),
        "pruned_ratio_after": mass_ratio(pruned_after, region),
        "initial_box_mass": mass_ratio(before, old_box),
        "active_before": int(before.sum()),
        "active_after": int(after.sum()),
        "grid_before": before,
        "grid_after": after,
        "grid_pruned_before": pruned_before,
        "grid_pruned_after": pruned_after,
        "region": region,
    }


def new_data_first_experiment(cfg, new_fraction=0.1, warm_epochs=None, merged_epochs=30,
                              new_epochs=None):
    """Merged training against "new data first" on a 90%/10% split.

    A grow_prune model is trained and recoverably pruned on the old 90%; both
    arms then start from copies of it (see
    :func:`~growprune.orchestrator.compare_growth_schedules`).
    """
    setup = cfg.setup()
    train, val, _ = mnist_subset(cfg.data_dir, cfg.n_train, cfg.val_size, cfg.n_test, cfg.data_seed)
    rng = np.random.default_rng(cfg.shuffle_seed)
    order = rng.permutation(len(train))
    n_new = int(round(new_fraction * len(train)))
    new = train.subset(np.sort(order[:n_new]), "new")
    old = train.subset(np.sort(order[n_new:]), "old")
    sch = setup.schedule
    if warm_epochs is not None:
        sch.initial_epochs = warm_epochs
    trainer = setup.trainer()
    start = initial_grow_prune(old, val, sch, setup.growth, setup.prune, trainer, setup.arch,
                               setup.density, setup.seed, setup.widths, class_count=train.class_count)
    out = compare_growth_schedules(start.model, trainer, new, train, val, setup.growth,
                                   merged_epochs=merged_epochs,
                                   new_epochs=new_epochs or sch.epochs_new_data)
    out["start_val_accuracy"] = correct_count(start.model, val) / len(val)
    return out
