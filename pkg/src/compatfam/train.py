"""Adam and the mini-batch training loop for the compatibility model."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .compat import batch_loss, loss_and_grads
from .data import DataError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 100
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def tensors(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array(float(self.t))
        return out

    @classmethod
    def from_tensors(cls, tensors):
        state = cls()
        for key, value in tensors.items():
            if key.startswith("adam.m."):
                state.m[key[7:]] = value.copy()
            elif key.startswith("adam.v."):
                state.v[key[7:]] = value.copy()
        state.t = int(tensors.get("adam.t", 0))
        return state


def adam_step(state, params, grads, config):
    """One bias-corrected Adam update; ``params`` and ``state`` are updated in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] = params[name] - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return state, params


@dataclass
class PairData:
    """Pairs resolved to flat input rows, ready for batching."""

    xq: np.ndarray
    xc: np.ndarray
    labels: np.ndarray
    weights: np.ndarray = None

    @classmethod
    def from_pairs(cls, items, pairs, weights=None):
        flat = items.flat()
        return cls(flat[items.lookup(pairs.query_ids)], flat[items.lookup(pairs.candidate_ids)],
                   pairs.labels.copy(), weights)

    def __len__(self):
        return len(self.labels)


def evaluate_pairs(model, data):
    """(loss, auc, error_rate) of ``model`` on a PairData set."""
    from .evaluate import auc, error_rate

    loss, _ = batch_loss(model, data.xq, data.xc, data.labels, data.weights)
    d = model.distance(data.xq, data.xc)
    probs = model.probability(data.xq, data.xc)
    try:
        a = auc(-d, data.labels)
    except ValueError:
        a = float("nan")
    return loss, a, error_rate(probs, data.labels)


def check_disjoint(*pair_sets):
    for i, a in enumerate(pair_sets):
        for b in pair_sets[i + 1:]:
            shared = a.item_ids() & b.item_ids()
            if shared:
                raise DataError(f"{len(shared)} item ids shared between {a.split} and {b.split} pairs")


@dataclass
class TrainResult:
    best_model: object
    last_model: object
    history: list
    best_epoch: int
    adam: AdamState
    diverged: bool = False


def train_compat(model, train, val, config, start_epoch=0, adam=None, progress=None):
    """Mini-batch Adam with best-epoch selection on validation loss.

    ``train`` and ``val`` are PairData. Returns a TrainResult whose
    best_model is a copy taken at the earliest epoch with minimal val loss.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("train and val pairs must be nonempty")
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    adam = adam or AdamState()
    history = []
    best, best_loss, best_epoch = model.copy(), np.inf, start_epoch
    last_good = model.copy()
    diverged = False
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        try:
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo:lo + config.batch_size]
                w = None if train.weights is None else train.weights[idx]
                info, grads = loss_and_grads(model, train.xq[idx], train.xc[idx], train.labels[idx], w)
                adam_step(adam, model.params, grads, config)
                total += info["total"] * len(idx)
                seen += len(idx)
            val_loss, val_auc, _ = evaluate_pairs(model, val)
        except ad.NonFiniteError as exc:
            log.warning("training diverged in epoch %d: %s", epoch, exc)
            val_loss = float("nan")
            val_auc = float("nan")
        if not np.isfinite(val_loss):
            diverged = True
            model = last_good
            break
        row = {"epoch": epoch, "train_loss": total / seen, "val_loss": float(val_loss), "val_auc": float(val_auc)}
        history.append(row)
        if progress:
            progress(row)
        last_good = model.copy()
        if val_loss < best_loss:
            best, best_loss, best_epoch = model.copy(), val_loss, epoch
    return TrainResult(best, model, history, best_epoch, adam, diverged)


HISTORY_FIELDS = ["epoch", "train_loss", "val_loss", "val_auc"]


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history_csv(path):
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_FIELDS[1:]}}
                for r in csv.DictReader(fh)]
