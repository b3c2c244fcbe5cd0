"""Top-k selection with a deterministic tie-break.

Items are ordered by descending score; equal scores are ordered by ascending
item index.  Masked items (score ``-inf``) never appear in a ranked list,
whose unused slots are padded with ``-1``.
"""

import numpy as np
import scipy.sparse as sp

PAD = -1

_CHUNK = 2048


def _dense(x):
    if sp.issparse(x):
        return x.toarray()
    return np.asarray(x)


def mask_items(scores, mask) -> np.ndarray:
    """Copy of ``scores`` with the nonzero entries of ``mask`` set to -inf."""
    scores = np.array(scores, dtype=np.float64, copy=True)
    if mask is not None:
        coo = sp.coo_matrix(mask)
        scores[coo.row, coo.col] = -np.inf
    return scores


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` best items per row, shape ``(n_rows, k)``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    n, n_items = scores.shape
    k = int(k)
    out = np.full((n, k), PAD, dtype=np.int64)
    width = min(k, n_items)
    for start in range(0, n, _CHUNK):
        block = scores[start:start + _CHUNK]
        # stable sort on the negated scores keeps ties in index order
        order = np.argsort(-block, axis=1, kind="stable")[:, :width]
        valid = np.take_along_axis(block, order, axis=1) > -np.inf
        out[start:start + _CHUNK, :width] = np.where(valid, order, PAD)
    return out


def ranks(scores) -> np.ndarray:
    """1-based rank of every item in every row (same tie-break as top_k)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    order = np.argsort(-scores, axis=1, kind="stable")
    r = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    r[rows, order] = np.arange(1, scores.shape[1] + 1)[None, :]
    return r


def indicator(ranked: np.ndarray, n_items: int, k: int = None) -> sp.csr_matrix:
    """Binary (n_rows x n_items) matrix marking the first ``k`` listed items."""
    ranked = np.asarray(ranked)
    if k is not None:
        ranked = ranked[:, :k]
    rows, cols = np.nonzero(ranked != PAD)
    items = ranked[rows, cols]
    return sp.csr_matrix(
        (np.ones(len(items)), (rows, items)), shape=(ranked.shape[0], n_items)
    )
