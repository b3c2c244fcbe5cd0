"""EASE item-item model: closed-form solver and weighted momentum SGD.

The SGD objective on a batch ``X`` of users, with per-item weights ``w``, is

    (1 / (|B| |I|)) * sum_ij w_j (X W - X)_ij^2 + lam * ||W||_F^2

with ``diag(W)`` clamped to zero after every update.  Over the whole training
matrix ``D`` its minimiser is the closed-form EASE solution for the penalty
``lam * |U| * |I|`` (see :func:`closed_form_lambda`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import blas

from .exceptions import DivergenceError, ShapeError, SingularityError

CHECKPOINT_VERSION = 1


def _as_csr(x):
    if hasattr(x, "data") and sp.issparse(getattr(x, "data")):
        return x.data  # InteractionMatrix
    if sp.issparse(x):
        return x.tocsr()
    return sp.csr_matrix(np.atleast_2d(np.asarray(x, dtype=np.float64)))


@dataclass(eq=False)
class EaseModel:
    W: np.ndarray
    lam: float = 0.0

    @classmethod
    def zeros(cls, n_items: int, lam: float = 0.0) -> "EaseModel":
        return cls(np.zeros((n_items, n_items)), lam)

    @property
    def n_items(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "EaseModel":
        return EaseModel(self.W.copy(), self.lam)

    def score(self, history) -> np.ndarray:
        return score(self, history)


@dataclass
class TrainConfig:
    lr: float = 2.0
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 1024
    lr_schedule: str = "exponential"
    lr_decay: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("constant", "exponential"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


def closed_form_lambda(lam: float, n_users: int, n_items: int) -> float:
    """Closed-form penalty whose solution minimises the full-data SGD objective."""
    return lam * n_users * n_items


def solve_closed_form(train, lam: float) -> EaseModel:
    """Minimise ``||DW - D||^2 + lam ||W||^2`` subject to ``diag(W) = 0``."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    X = _as_csr(train)
    G = (X.T @ X).toarray()
    G[np.diag_indices_from(G)] += lam
    if lam == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
        raise SingularityError("Gram matrix is singular; use lam > 0")
    try:
        P = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(str(exc)) from None
    W = -P / np.diag(P)[None, :]
    np.fill_diagonal(W, 0.0)
    return EaseModel(W, lam)


def score(model: EaseModel, history) -> np.ndarray:
    """``history @ W`` for one history vector or a matrix of histories."""
    n = model.n_items
    if sp.issparse(history):
        if history.shape[-1] != n:
            raise ShapeError(f"history has {history.shape[-1]} items, model has {n}")
        return np.asarray(history @ model.W)
    h = np.asarray(history, dtype=np.float64)
    if h.shape[-1] != n or h.ndim > 2:
        raise ShapeError(f"history shape {h.shape} incompatible with {n} items")
    return h @ model.W


def weighted_loss_and_grad(W, X, weights, lam):
    """Batch objective, its data term, and the gradient w.r.t. ``W``."""
    X = _as_csr(X)
    b, n = X.shape
    weights = np.asarray(weights, dtype=np.float64)
    resid = np.asarray(X @ W)
    resid -= X.toarray()
    scale = 1.0 / (b * n)
    wr = resid * weights[None, :]
    data = scale * float(np.vdot(wr, resid))
    grad = np.asarray(X.T @ wr)
    grad *= 2.0 * scale
    if lam:
        _axpy(2.0 * lam, W, grad)
        return data + lam * float(np.vdot(W, W)), data, grad
    return data, data, grad


def _axpy(a, x, y):
    """In place ``y += a * x`` without a temporary."""
    if x.flags.c_contiguous and y.flags.c_contiguous and x.dtype == y.dtype == np.float64:
        blas.daxpy(x.ravel(), y.ravel(), a=a)
    else:
        y += a * x


class SGDMomentum:
    """Heavy-ball SGD: ``v = mu * v + g``; ``p -= lr * v`` (``+=`` for ascent)."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params, grads, ascent: bool = False):
        sign = 1.0 if ascent else -1.0
        for key, (p, g) in enumerate(zip(params, grads)):
            v = self._velocity.get(key)
            if v is None:
                v = np.zeros_like(p)
                self._velocity[key] = v
            v *= self.momentum
            v += g
            _axpy(sign * self.lr, v, p)
        return params

    def velocity(self, key: int):
        return self._velocity.get(key)


class EaseTrainer:
    """Stateful weighted SGD for an :class:`EaseModel` (momentum persists)."""

    def __init__(self, model: EaseModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = SGDMomentum(cfg.lr, cfg.momentum)
        self.n_steps = 0

    @property
    def lr(self) -> float:
        return self.opt.lr

    def batches(self, n_users: int):
        perm = self.rng.permutation(n_users)
        bs = self.cfg.batch_size
        return [perm[s:s + bs] for s in range(0, n_users, bs)]

    def step(self, X_batch, item_weights, batch: Optional[int] = None) -> float:
        """One update on a batch of user rows; returns the weighted data loss."""
        W = self.model.W
        _, data, grad = weighted_loss_and_grad(W, X_batch, item_weights, self.model.lam)
        if not np.isfinite(data) or not np.all(np.isfinite(grad)):
            label = self.n_steps if batch is None else batch
            raise DivergenceError(f"non-finite loss at batch {label}", batch=label)
        self.opt.step([W], [grad])
        np.fill_diagonal(W, 0.0)
        np.fill_diagonal(self.opt.velocity(0), 0.0)
        self.n_steps += 1
        return data

    def end_epoch(self) -> None:
        if self.cfg.lr_schedule == "exponential":
            self.opt.lr *= self.cfg.lr_decay

    def sgd_epoch(self, train, item_weights=None) -> float:
        """One shuffled pass over the training users; returns the mean batch loss."""
        X = _as_csr(train)
        if item_weights is None:
            item_weights = np.ones(X.shape[1])
        item_weights = np.asarray(item_weights, dtype=np.float64)
        if item_weights.shape != (X.shape[1],) or np.any(item_weights < 0):
            raise ValueError("item_weights must be a non-negative vector of length |I|")
        losses = [self.step(X[idx], item_weights, batch=b)
                  for b, idx in enumerate(self.batches(X.shape[0]))]
        self.end_epoch()
        return float(np.mean(losses))


@dataclass
class TrainResult:
    model: EaseModel
    best_epoch: int
    history: list = field(default_factory=list)


def train_sgd(train, lam: float, cfg: TrainConfig, item_weights=None,
              on_epoch: Optional[Callable[[EaseModel, int], float]] = None) -> TrainResult:
    """Train from ``W = 0`` for ``cfg.epochs`` epochs.

    ``on_epoch(model, epoch)`` returns a validation score; the best-scoring
    epoch's weights are returned.  Without a callback the last epoch wins.
    """
    X = _as_csr(train)
    model = EaseModel.zeros(X.shape[1], lam)
    trainer = EaseTrainer(model, cfg)
    best, best_score, best_epoch = model.copy(), -np.inf, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        loss = trainer.sgd_epoch(X, item_weights)
        val = on_epoch(model, epoch) if on_epoch is not None else float(epoch)
        history.append({"epoch": epoch, "loss": loss, "val": val})
        if val > best_score:
            best, best_score, best_epoch = model.copy(), val, epoch
    return TrainResult(best, best_epoch, history)
