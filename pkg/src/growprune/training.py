"""Mini-batch training loop shared by the engine and the orchestrator."""

from __future__ import annotations

import numpy as np

from .data import shift_batch
from .errors import InputError
from .network import SgdState, apply_update, model_backward, model_forward, predict
from .tensor import SgdConfig, softmax_cross_entropy


def evaluate(model, dataset, batch_size=1000):
    """Top-1 error rate of ``model`` on ``dataset``."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return 1.0 - correct_count(model, dataset, batch_size) / len(dataset)


def correct_count(model, dataset, batch_size=1000):
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    return int(np.count_nonzero(predict(model, dataset.images, batch_size) == dataset.labels))


class Trainer:
    """SGD state, shuffling RNG and the plateau learning-rate schedule.

    The plateau schedule halves the rate after ``patience`` epochs without a
    new best validation accuracy; :meth:`reset_schedule` restores the base
    rate at the start of a training phase.
    """

    def __init__(self, sgd: SgdConfig | None = None, batch_size=64, seed=0,
                 patience=5, decay=0.5, augment_shift=0):
        self.sgd = sgd or SgdConfig()
        self.batch_size = batch_size
        self.patience = patience
        self.decay = decay
        self.augment_shift = augment_shift
        self.rng = np.random.default_rng(seed)
        self.opt = SgdState(cfg=self.sgd)
        self.best = -1.0
        self.stale = 0
        self.epochs = 0

    @property
    def learning_rate(self):
        return self.opt.learning_rate

    def reset_schedule(self):
        self.opt.learning_rate = self.sgd.learning_rate
        self.best = -1.0
        self.stale = 0

    def observe(self, val_accuracy):
        """Feed one epoch's validation accuracy to the plateau schedule."""
        if val_accuracy > self.best:
            self.best = val_accuracy
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.opt.learning_rate *= self.decay
                self.stale = 0

    def train_epoch(self, model, dataset):
        """One shuffled pass of SGD; returns the mean batch loss."""
        n = len(dataset)
        if n == 0:
            raise InputError("cannot train on an empty dataset")
        if self.opt.velocity is None and self.sgd.momentum:
            self.opt.reset(model)
        order = self.rng.permutation(n)
        images = dataset.images
        if self.augment_shift:
            images = shift_batch(images, self.augment_shift, self.rng)
        total = 0.0
        batches = 0
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            logits = model_forward(model, images[idx])
            loss, grad = softmax_cross_entropy(logits, dataset.labels[idx])
            grads, _ = model_backward(model, grad)
            apply_update(model, grads, self.sgd, self.opt)
            total += loss
            batches += 1
        self.epochs += 1
        return total / batches

    # state capture for rollback and checkpoints

    def snapshot(self):
        return {
            "opt": self.opt.copy(),
            "rng": self.rng.bit_generator.state,
            "best": self.best,
            "stale": self.stale,
            "epochs": self.epochs,
        }

    def clone(self):
        """Independent trainer with the same settings and current state."""
        other = Trainer(self.sgd, self.batch_size, 0, self.patience, self.decay, self.augment_shift)
        other.restore(self.snapshot())
        return other

    def restore(self, snap):
        self.opt = snap["opt"].copy()
        self.rng.bit_generator.state = snap["rng"]
        self.best = snap["best"]
        self.stale = snap["stale"]
        self.epochs = snap["epochs"]
