"""Comparison methods: IPW reweighting, CVaR training, Rerank, Most-Popular."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .ease import EaseModel, EaseTrainer, TrainConfig, TrainResult, _as_csr
from .exceptions import DivergenceError


@dataclass
class IpwConfig:
    beta: float = -0.5


@dataclass
class CvarConfig:
    alpha: float = 0.5
    beta1_init: float = 0.0
    beta1_lr: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


@dataclass
class RerankConfig:
    t_high: float = 0.5
    t_low: float = 0.1

    def __post_init__(self):
        if self.t_high < self.t_low:
            raise ValueError("t_high must be >= t_low")


def ipw_weights(item_freq, n_users: int, beta: float) -> np.ndarray:
    """``w_j = (freq_j / |U|) ** beta`` rescaled to sum to ``|I|``."""
    freq = np.asarray(item_freq, dtype=np.float64)
    if beta < 0 and np.any(freq <= 0):
        raise ValueError("items with zero frequency have undefined weight for beta < 0")
    w = np.power(freq / n_users, beta)
    return freq.size * w / w.sum()


def cvar_objective(losses, beta1: float, alpha: float) -> float:
    """``sum_j {beta1 + [loss_j - beta1]_+ / alpha}``."""
    losses = np.asarray(losses, dtype=np.float64)
    return float(np.sum(beta1 + np.maximum(losses - beta1, 0.0) / alpha))


def cvar_subgradient(losses, beta1: float, alpha: float):
    """Per-item loss multipliers and d/d beta1 of the item-averaged objective.

    The subgradient of ``[x]_+`` at ``x = 0`` is taken as 0.
    """
    losses = np.asarray(losses, dtype=np.float64)
    active = (losses > beta1).astype(np.float64)
    return active / alpha, 1.0 - active.mean() / alpha


def per_item_losses(W, X) -> np.ndarray:
    """Mean squared reconstruction error of every item column over the batch."""
    resid = np.asarray(X @ W) - X.toarray()
    return np.mean(resid * resid, axis=0)


def train_cvar(train, lam: float, cfg: TrainConfig, cvar: CvarConfig,
               on_epoch: Optional[Callable[[EaseModel, int], float]] = None) -> TrainResult:
    """Joint subgradient descent on ``(W, beta1)``.

    The batch objective is the item average of ``beta1 + [l_j - beta1]_+ / alpha``
    with ``l_j`` the per-user mean squared error of item j, plus ``lam ||W||^2``.
    For ``alpha = 1`` and ``beta1`` below every loss this equals the plain
    EASE batch objective, so the ``W`` updates coincide.
    """
    X = _as_csr(train)
    n_items = X.shape[1]
    model = EaseModel.zeros(n_items, lam)
    trainer = EaseTrainer(model, cfg)
    beta1 = np.array([cvar.beta1_init], dtype=np.float64)
    beta_opt = type(trainer.opt)(cvar.beta1_lr, cfg.momentum)
    best, best_score, best_epoch = model.copy(), -np.inf, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        values = []
        for b, idx in enumerate(trainer.batches(X.shape[0])):
            Xb = X[idx]
            losses = per_item_losses(model.W, Xb)
            mult, dbeta = cvar_subgradient(losses, beta1[0], cvar.alpha)
            values.append(cvar_objective(losses, beta1[0], cvar.alpha) / n_items)
            if not np.isfinite(values[-1]):
                raise DivergenceError(f"non-finite CVaR objective at batch {b}", batch=b)
            # the weighted EASE gradient with weights mult is exactly d/dW here
            trainer.step(Xb, mult, batch=b)
            beta_opt.step([beta1], [np.array([dbeta])])
        trainer.end_epoch()
        beta_opt.lr *= cfg.lr_decay if cfg.lr_schedule == "exponential" else 1.0
        val = on_epoch(model, epoch) if on_epoch is not None else float(epoch)
        history.append({"epoch": epoch, "loss": float(np.mean(values)), "val": val,
                        "beta1": float(beta1[0])})
        if val > best_score:
            best, best_score, best_epoch = model.copy(), val, epoch
    return TrainResult(best, best_epoch, history)


def rerank(scores, item_freq, cfg: RerankConfig, k: int) -> np.ndarray:
    """Keep the confident head in score order, sort the middle band by rarity.

    Items scoring at least ``t_high`` keep their order; items in
    ``[t_low, t_high)`` follow in ascending frequency (ties by index); the
    rest are dropped.  May return fewer than ``k`` items.
    """
    scores = np.asarray(scores, dtype=np.float64)
    freq = np.asarray(item_freq)
    idx = np.arange(scores.size)
    head = idx[scores >= cfg.t_high]
    head = head[np.argsort(-scores[head], kind="stable")]
    band = idx[(scores < cfg.t_high) & (scores >= cfg.t_low)]
    band = band[np.lexsort((band, freq[band]))]
    return np.concatenate([head, band])[:k].astype(np.int64)


def rerank_lists(scores, item_freq, cfg: RerankConfig, k: int) -> np.ndarray:
    """Row-wise :func:`rerank`, padded with -1 to width ``k``."""
    scores = np.atleast_2d(scores)
    out = np.full((scores.shape[0], k), -1, dtype=np.int64)
    for i, row in enumerate(scores):
        items = rerank(row, item_freq, cfg, k)
        out[i, :len(items)] = items
    return out


def most_popular(item_freq) -> np.ndarray:
    freq = np.asarray(item_freq)
    return np.lexsort((np.arange(freq.size), -freq)).astype(np.int64)


def most_popular_lists(item_freq, n_users: int, k: int) -> np.ndarray:
    """The same popularity list for every user (fold-in items are not masked)."""
    order = most_popular(item_freq)[:k]
    out = np.full((n_users, k), -1, dtype=np.int64)
    out[:, :order.size] = order
    return out
