"""Data splitting, optimizers, learning-rate schedule and the training loop."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, StratificationError, TrainingDivergence
from .sigsynth import SignalDataset

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd", "adagrad", "adadelta")


# -- splitting -----------------------------------------------------------------


@dataclass
class SplitSpec:
    ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def normalized(self):
        r = np.asarray(self.ratios, dtype=np.float64)
        if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
            raise ConfigError(f"split ratios must be three non-negative numbers, got {self.ratios}")
        return r / r.sum()


def _cell_rng(seed, label, snr, salt):
    return np.random.default_rng([seed & (2**63 - 1), salt, int(label), int(snr) & 0xFFFFFFFF])


def split_dataset(ds: SignalDataset, spec: SplitSpec = SplitSpec()):
    """Split every (class, SNR) cell independently into train/val/test.

    Train and validation get ``floor(ratio * cell_size)`` samples; test gets
    the remainder. Returned datasets keep the original sample order.
    """
    r = spec.normalized()
    parts = ([], [], [])
    for (label, snr), idx in ds.cells().items():
        n = len(idx)
        n_train = math.floor(r[0] * n + 1e-9)
        n_val = math.floor(r[1] * n + 1e-9)
        sizes = (n_train, n_val, n - n_train - n_val)
        if any(s < 1 for s, ratio in zip(sizes, r) if ratio > 0):
            raise StratificationError(f"cell (label={label}, snr={snr}) with {n} samples is too small for {tuple(r)}")
        perm = idx[_cell_rng(spec.seed, label, snr, 0).permutation(n)]
        parts[0].append(perm[:n_train])
        parts[1].append(perm[n_train : n_train + n_val])
        parts[2].append(perm[n_train + n_val :])
    return tuple(ds.subset(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64)) for p in parts)


def subsample_training(train: SignalDataset, fraction: float | None = None, per_cell: int | None = None, seed: int = 0):
    """Keep ``round(fraction * cell_size)`` (or ``per_cell``) samples of every
    (class, SNR) cell, drawn uniformly without replacement."""
    if (fraction is None) == (per_cell is None):
        raise ConfigError("give exactly one of fraction or per_cell")
    keep = []
    for (label, snr), idx in train.cells().items():
        n = len(idx)
        count = per_cell if per_cell is not None else int(round(fraction * n))
        if count < 1:
            raise ConfigError(f"training fraction leaves no sample in cell (label={label}, snr={snr})")
        if count > n:
            raise ConfigError(f"cell (label={label}, snr={snr}) has only {n} samples, {count} requested")
        keep.append(idx[np.sort(_cell_rng(seed, label, snr, 1).choice(n, size=count, replace=False))])
    return train.subset(np.sort(np.concatenate(keep)))


# -- schedule ------------------------------------------------------------------


def lr_at(step: int, initial_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up to ``initial_lr`` then cosine annealing to zero at ``total_steps``."""
    if step < warmup_steps:
        return initial_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0
    t = min(step - warmup_steps, span) / span
    return initial_lr * 0.5 * (1 + math.cos(math.pi * t))


# -- optimizers ----------------------------------------------------------------


class Optimizer:
    """Stateful update rule over a ``{name: array}`` parameter dict (updated in place)."""

    def __init__(self, weight_decay=0.0):
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, params: dict, grads: dict, lr: float):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient for parameter {name!r}")
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            st = self.state.setdefault(name, {})
            p -= self._delta(st, g, lr)

    def _delta(self, st, g, lr):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, momentum=0.0, weight_decay=0.0):
        super().__init__(weight_decay)
        self.momentum = momentum

    def _delta(self, st, g, lr):
        if not self.momentum:
            return lr * g
        v = st.get("v")
        v = g.copy() if v is None else self.momentum * v + g
        st["v"] = v
        return lr * v


class Adam(Optimizer):
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        super().__init__(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _delta(self, st, g, lr):
        if not st:
            st.update(m=np.zeros_like(g), v=np.zeros_like(g), t=0)
        st["t"] += 1
        st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
        st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
        m_hat = st["m"] / (1 - self.beta1 ** st["t"])
        v_hat = st["v"] / (1 - self.beta2 ** st["t"])
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Adagrad(Optimizer):
    def __init__(self, eps=1e-10, weight_decay=0.0):
        super().__init__(weight_decay)
        self.eps = eps

    def _delta(self, st, g, lr):
        st["s"] = st.get("s", 0.0) + g * g
        return lr * g / (np.sqrt(st["s"]) + self.eps)


class Adadelta(Optimizer):
    def __init__(self, rho=0.9, eps=1e-6, weight_decay=0.0):
        super().__init__(weight_decay)
        self.rho, self.eps = rho, eps

    def _delta(self, st, g, lr):
        if not st:
            st.update(eg=np.zeros_like(g), ed=np.zeros_like(g))
        st["eg"] = self.rho * st["eg"] + (1 - self.rho) * g * g
        d = np.sqrt(st["ed"] + self.eps) / np.sqrt(st["eg"] + self.eps) * g
        st["ed"] = self.rho * st["ed"] + (1 - self.rho) * d * d
        return lr * d


def make_optimizer(kind: str, weight_decay=0.0, momentum=0.9) -> Optimizer:
    if kind == "adam":
        return Adam(weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(momentum=momentum, weight_decay=weight_decay)
    if kind == "adagrad":
        return Adagrad(weight_decay=weight_decay)
    if kind == "adadelta":
        return Adadelta(weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r}; choose from {OPTIMIZERS}")


def optimizer_step(params, grads, state, kind, lr, weight_decay=0.0, momentum=0.9):
    """Functional form: ``state`` is an :class:`Optimizer` or None (a fresh one is made)."""
    opt = state if state is not None else make_optimizer(kind, weight_decay, momentum)
    opt.step(params, grads, lr)
    return params, opt


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "adam"
    initial_lr: float = 1e-3
    warmup_fraction: float = 0.05
    weight_decay: float = 0.0
    momentum: float = 0.9
    grad_clip: float = 0.0
    train_fraction: float = 1.0
    train_per_cell: int = 0
    augment_phase: bool = False
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.train_per_cell < 0:
            raise ConfigError("train_per_cell must be >= 0")
        return self

    def steps(self, n_train: int):
        """``(warmup_steps, total_steps)`` for a training set of ``n_train`` samples."""
        total = self.epochs * math.ceil(n_train / self.batch_size)
        warm = int(round(self.warmup_fraction * total))
        return min(warm, total - 1), total


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 until an epoch completes

    @property
    def best_val_acc(self):
        return self.val_acc[self.best_epoch - 1] if self.best_epoch else float("nan")

    def rows(self):
        for e in range(len(self.train_loss)):
            yield e + 1, self.train_loss[e], self.train_acc[e], self.val_acc[e], self.lr[e], self.seconds[e]


def best_epoch(val_accs) -> int:
    """1-based index of the highest validation accuracy; earliest wins ties."""
    return int(np.argmax(np.asarray(val_accs))) + 1


def _xy(data):
    if isinstance(data, SignalDataset):
        return data.X, data.labels
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def rotate_phase(X, theta):
    """Multiply each complex sample ``I + jQ`` by ``exp(j theta)`` (one angle per sample)."""
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    i, q = X[:, 0], X[:, 1]
    return np.stack([i * c - q * s, i * s + q * c], axis=1)


def accuracy_of(model, X, y, batch_size=128) -> float:
    pred = np.argmax(model.logits(X, batch_size), axis=1)
    return float(np.mean(pred == y)) if len(y) else float("nan")


def train(model, train_set, val_set, cfg: TrainConfig, callback=None):
    """Fit ``model`` in place, keeping the parameters of the best validation epoch.

    Returns ``(best_state, history)``; on return the model holds ``best_state``.
    ``callback(epoch, history)`` runs after every epoch.
    """
    cfg.validate()
    X, y = _xy(train_set)
    Xv, yv = _xy(val_set)
    if not len(X) or not len(Xv):
        raise ConfigError("training and validation sets must be non-empty")
    warm, total = cfg.steps(len(X))
    opt = make_optimizer(cfg.optimizer, cfg.weight_decay, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    best_state, best_acc = None, -1.0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(X))
        loss_sum, correct = 0.0, 0
        lr = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            step += 1
            lr = lr_at(step, cfg.initial_lr, warm, total)
            xb = X[idx]
            if cfg.augment_phase:
                # the carrier phase is uniform in the data, so a random rotation keeps the label
                xb = rotate_phase(xb, rng.uniform(-np.pi, np.pi, len(idx)))
            try:
                tape = nx.Tape()
                logits = model.forward(xb, mode="train", tape=tape)
                loss = nx.softmax_cross_entropy(logits, y[idx])
                grads = tape.backward(loss)
                if cfg.grad_clip > 0:
                    _clip(grads, cfg.grad_clip)
                opt.step(model.params, grads, lr)
            except (nx.NonFiniteError, TrainingDivergence) as exc:
                state = best_state if best_state is not None else model.state_dict()
                model.load_state_dict(state)
                raise TrainingDivergence(f"epoch {epoch}, step {step}: {exc}", checkpoint=state, history=hist) from exc
            loss_sum += float(loss.value) * len(idx)
            correct += int(np.sum(np.argmax(logits.value, axis=1) == y[idx]))
        val_acc = accuracy_of(model, Xv, yv)
        hist.train_loss.append(loss_sum / len(X))
        hist.train_acc.append(correct / len(X))
        hist.val_acc.append(val_acc)
        hist.lr.append(lr)
        hist.seconds.append(time.perf_counter() - t0)
        if val_acc > best_acc:
            best_acc, best_state = val_acc, copy.deepcopy(model.state_dict())
        hist.best_epoch = best_epoch(hist.val_acc)
        log.info(
            "epoch %d/%d loss=%.4f train_acc=%.4f val_acc=%.4f lr=%.2e (%.1fs)",
            epoch, cfg.epochs, hist.train_loss[-1], hist.train_acc[-1], val_acc, lr, hist.seconds[-1],
        )
        if callback is not None:
            callback(epoch, hist)
    model.load_state_dict(best_state)
    return best_state, hist


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
