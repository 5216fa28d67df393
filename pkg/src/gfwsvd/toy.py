"""Softmax-regression testbed: synthetic data, SGD training, gradient capture
and the compress-and-evaluate sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_io
from .compress import (
    METHODS,
    CholeskyPair,
    compress,
    exact_quadratic_increase,
    weighted_error,
)
from .errors import TrainingDivergedError, ValidationError
from .fisher import (
    DEFAULT_ALPHA,
    EXPLICIT_FIM_CAP,
    GradientAccumulator,
    diagonal_fisher,
    explicit_fim,
    extract_kronecker_factors,
)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class ToyTask:
    """Gaussian classes sharing one covariance ``C C^T``.

    ``means`` is ``n x m`` with rows summing to zero and a geometric singular
    spectrum ``separation * mean_decay**k``; ``C`` is a random rotation with
    standard deviations from 1 down to ``exp(-anisotropy)``.
    """

    seed: int
    n_classes: int
    feature_dim: int
    n_train: int
    n_eval: int
    separation: float
    mean_decay: float
    anisotropy: float
    means: np.ndarray = field(repr=False)
    noise_factor: np.ndarray = field(repr=False)
    train: Dataset = field(repr=False)
    eval: Dataset = field(repr=False)


def make_task(
    seed: int,
    n: int,
    m: int,
    n_train: int,
    n_eval: int,
    separation: float = 2.0,
    mean_decay: float = 0.6,
    anisotropy: float = 2.0,
) -> ToyTask:
    """Draw ``n_train + n_eval`` labelled points in ``m`` dims from ``n`` classes.

    Labels are balanced up to rounding and shuffled; the first ``n_train``
    draws form the training set. Features are standardized per coordinate
    with training-set statistics.
    """
    if n < 2 or m < 2:
        raise ValidationError("need at least 2 classes and 2 features")
    if n_train < 1 or n_eval < 1:
        raise ValidationError("sample counts must be positive")
    if separation < 0 or mean_decay <= 0 or anisotropy < 0:
        raise ValidationError("separation >= 0, mean_decay > 0, anisotropy >= 0 required")
    rng = np.random.default_rng(seed)
    k = min(n - 1, m)
    Z = rng.standard_normal((n, n))
    left, _, _ = np.linalg.svd(Z - Z.mean(axis=0))  # leading n-1 columns are orthogonal to ones
    right, _ = np.linalg.qr(rng.standard_normal((m, k)))
    means = (left[:, :k] * (separation * mean_decay ** np.arange(k))) @ right.T
    rot, _ = np.linalg.qr(rng.standard_normal((m, m)))
    factor = rot * np.exp(-anisotropy * np.arange(m) / (m - 1))
    total = n_train + n_eval
    y = rng.permutation(np.arange(total) % n)
    X = means[y] + rng.standard_normal((total, m)) @ factor.T
    mu = X[:n_train].mean(axis=0)
    sd = X[:n_train].std(axis=0)
    sd[sd == 0] = 1.0
    X = (X - mu) / sd
    return ToyTask(
        seed=seed,
        n_classes=n,
        feature_dim=m,
        n_train=n_train,
        n_eval=n_eval,
        separation=separation,
        mean_decay=mean_decay,
        anisotropy=anisotropy,
        means=means,
        noise_factor=factor,
        train=Dataset(X[:n_train], y[:n_train]),
        eval=Dataset(X[n_train:], y[n_train:]),
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class ToyModel:
    """Bias-free linear classifier with logits ``W x``."""

    W: np.ndarray

    def logits(self, X) -> np.ndarray:
        return np.asarray(X) @ self.W.T

    def loss(self, X, y) -> float:
        lp = _log_softmax(self.logits(X))
        return float(-np.mean(lp[np.arange(len(y)), y]))

    def gradient(self, X, y) -> np.ndarray:
        """Gradient of the mean cross-entropy with respect to ``W``."""
        P = _softmax(self.logits(X))
        P[np.arange(len(y)), y] -= 1.0
        return P.T @ X / len(y)


def eval_loss(model, dataset: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy; ``model`` may be a weight matrix."""
    if not isinstance(model, ToyModel):
        model = ToyModel(np.asarray(model, dtype=np.float64))
    logits = model.logits(dataset.X)
    lp = _log_softmax(logits)
    loss = float(-np.mean(lp[np.arange(len(dataset)), dataset.y]))
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.y))
    return loss, acc


def _batches(count: int, batch_size: int):
    for start in range(0, count, batch_size):
        yield slice(start, min(start + batch_size, count))


def train_and_collect(task: ToyTask, epochs: int, batch_size: int, lr: float, seed: int, init_scale: float = 0.01) -> tuple[ToyModel, GradientAccumulator]:
    """Minibatch SGD, then one ordered pass recording each batch's mean gradient.

    The recorded gradients are evaluated at the final weights, so the
    accumulator holds ``ceil(n_train / batch_size)`` batches.
    """
    if epochs < 0 or batch_size < 1 or not 0 <= lr < math.inf:
        raise ValidationError("epochs >= 0, batch_size >= 1 and finite lr >= 0 required")
    rng = np.random.default_rng(seed)
    n, m = task.n_classes, task.feature_dim
    model = ToyModel(init_scale * rng.standard_normal((n, m)))
    X, y = task.train.X, task.train.y
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for sl in _batches(len(y), batch_size):
            idx = order[sl]
            model.W -= lr * model.gradient(X[idx], y[idx])
        if not np.all(np.isfinite(model.W)) or not math.isfinite(model.loss(X, y)):
            raise TrainingDivergedError(f"training diverged in epoch {epoch}")
    acc = GradientAccumulator(n, m)
    for sl in _batches(len(y), batch_size):
        acc.add(model.gradient(X[sl], y[sl]))
    return model, acc


@dataclass
class SweepConfig:
    seed: int = 0
    n_classes: int = 8
    n_features: int = 16
    n_train: int = 16384
    n_eval: int = 4096
    separation: float = 2.0
    mean_decay: float = 0.6
    anisotropy: float = 2.0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.5
    tol: float = 1e-8
    max_iter: int = 200
    alpha: float = DEFAULT_ALPHA


@dataclass
class SweepReport:
    config: dict
    cells: list[dict]
    factors: dict
    base_loss: float
    base_accuracy: float

    def cell(self, method: str, rank: int) -> dict:
        for c in self.cells:
            if c["method"] == method and c["rank"] == rank:
                return c
        raise KeyError((method, rank))

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "cells": self.cells,
            "factors": self.factors,
            "base_loss": self.base_loss,
            "base_accuracy": self.base_accuracy,
        }

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensor_io.write_report(self.to_dict(), directory / "report.json", "json")
        tensor_io.write_report(self.cells, directory / "report.csv", "csv")


def evaluate_layers(W, layers, pair: CholeskyPair, fim=None, task: ToyTask | None = None) -> list[dict]:
    """Surrogate and empirical metrics for compressed versions of ``W``."""
    n, m = W.shape
    base = eval_loss(W, task.eval) if task is not None else None
    rows = []
    for layer in layers:
        rec = {
            "method": layer.method,
            "rank": layer.rank,
            "retention": layer.rank * (n + m) / (n * m),
            "weighted_error": weighted_error(W, layer, pair),
            "exact_increase": None,
            "delta_loss": None,
            "accuracy": None,
        }
        if fim is not None:
            rec["exact_increase"] = exact_quadratic_increase(W, layer, fim)
            rec["surrogate_ratio"] = (
                rec["weighted_error"] / rec["exact_increase"] if rec["exact_increase"] > 0 else None
            )
        if task is not None:
            loss, accuracy = eval_loss(layer.reconstruct(), task.eval)
            rec["delta_loss"] = loss - base[0]
            rec["accuracy"] = accuracy
        rows.append(rec)
    return rows


def task_from_config(config: SweepConfig) -> ToyTask:
    return make_task(
        config.seed,
        config.n_classes,
        config.n_features,
        config.n_train,
        config.n_eval,
        config.separation,
        config.mean_decay,
        config.anisotropy,
    )


def run_sweep(config: SweepConfig, methods: Sequence[str] = METHODS, ranks: Sequence[int] = (1, 2, 4, 8), out_dir=None) -> SweepReport:
    """Train, factorize, compress with every (method, rank) pair and evaluate."""
    for meth in methods:
        if meth not in METHODS:
            raise ValidationError(f"unknown method {meth!r}")
    top = min(config.n_classes, config.n_features)
    if not ranks or any(not 1 <= r <= top for r in ranks):
        raise ValidationError(f"ranks must lie in [1, {top}]")
    task = task_from_config(config)
    model, acc = train_and_collect(task, config.epochs, config.batch_size, config.lr, config.seed)
    factors = extract_kronecker_factors(acc, config.tol, config.max_iter, config.seed, config.alpha)
    weights = diagonal_fisher(acc)
    pair = CholeskyPair.from_factors(factors)
    W = model.W
    fim = explicit_fim(acc) if acc.n * acc.m <= EXPLICIT_FIM_CAP else None
    layers = [compress(meth, W, r, factors=pair, weights=weights) for meth in methods for r in ranks]
    cells = evaluate_layers(W, layers, pair, fim, task)
    base_loss, base_acc = eval_loss(model, task.eval)
    report = SweepReport(asdict(config), cells, factors.diagnostics(), base_loss, base_acc)
    if out_dir is not None:
        report.save(out_dir)
    return report
