"""Per-item advantage scores derived from top-k recall.

Training-time ranks run over every item, the user's own positives included
(those positives are the targets).  Evaluation ranks mask the fold-in items
first.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import ranking
from .ease import EaseModel, _as_csr, score

WITH_POPULARITY = "with_popularity"
WITHOUT_POPULARITY = "without_popularity"
VARIANTS = (WITH_POPULARITY, WITHOUT_POPULARITY)


@dataclass(frozen=True, eq=False)
class AdvantageState:
    ema: np.ndarray
    momentum: float = 0.9
    k: int = 100
    variant: str = WITH_POPULARITY

    @classmethod
    def initial(cls, n_items: int, momentum: float = 0.9, k: int = 100,
                variant: str = WITH_POPULARITY) -> "AdvantageState":
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        if variant not in VARIANTS:
            raise ValueError(f"unknown advantage variant {variant!r}")
        return cls(np.zeros(n_items), momentum, int(k), variant)


def hit_matrix(model: EaseModel, batch, k: int) -> sp.csr_matrix:
    """``R_ij = 1`` iff user i interacted with j and j ranks within the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    X = _as_csr(batch)
    scores = score(model, X)
    top = ranking.indicator(ranking.top_k(scores, min(k, X.shape[1])), X.shape[1])
    return X.multiply(top).tocsr()


def advantage_scores(R, batch, variant: str = WITH_POPULARITY) -> np.ndarray:
    R = _as_csr(R)
    X = _as_csr(batch)
    if R.shape != X.shape:
        raise ValueError(f"R shape {R.shape} != batch shape {X.shape}")
    hits = np.asarray(R.sum(axis=0)).ravel()
    if variant == WITH_POPULARITY:
        return hits / X.shape[0]
    if variant == WITHOUT_POPULARITY:
        pos = np.asarray(X.sum(axis=0)).ravel()
        out = np.zeros_like(hits)
        np.divide(hits, pos, out=out, where=pos > 0)
        return out
    raise ValueError(f"unknown advantage variant {variant!r}")


def ema_update(state: AdvantageState, S) -> AdvantageState:
    m = state.momentum
    return replace(state, ema=(1.0 - m) * state.ema + m * np.asarray(S, dtype=np.float64))


def per_item_recall(ranked, heldout, k: int):
    """Per-item hit counts and held-out positive counts at cutoff k."""
    H = _as_csr(heldout)
    top = ranking.indicator(ranked, H.shape[1], k)
    hits = np.asarray(H.multiply(top).sum(axis=0)).ravel()
    pos = np.asarray(H.sum(axis=0)).ravel()
    return hits, pos


def item_recall_from_ranked(ranked, heldout, k: int) -> float:
    """Mean over all items of hits / held-out positives (0 for items without positives)."""
    hits, pos = per_item_recall(ranked, heldout, k)
    if pos.sum() == 0:
        raise ValueError("held-out matrix is empty")
    ratio = np.zeros_like(hits, dtype=np.float64)
    np.divide(hits, pos, out=ratio, where=pos > 0)
    return float(ratio.mean())


def eval_ranked(model: EaseModel, split, k: int, chunk: int = 2048) -> np.ndarray:
    """Top-k lists for the evaluation users with fold-in items masked."""
    F = _as_csr(split.foldin)
    parts = []
    for start in range(0, F.shape[0], chunk):
        block = F[start:start + chunk]
        parts.append(ranking.top_k(ranking.mask_items(score(model, block), block), k))
    if not parts:
        return np.empty((0, k), dtype=np.int64)
    return np.vstack(parts)


def item_recall_at_k(model: EaseModel, split, k: int) -> float:
    return item_recall_from_ranked(eval_ranked(model, split, k), split.heldout, k)
