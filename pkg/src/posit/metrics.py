"""Ranking, coverage and popularity-dispersion metrics over ranked lists.

A ranked-list array has one row per evaluation user holding item indices in
rank order, padded with -1.
"""

from __future__ import annotations

import csv
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import ranking
from .advantage import item_recall_from_ranked, per_item_recall
from .ease import _as_csr
from .exceptions import MetricError

log = logging.getLogger(__name__)


def _hits(ranked, heldout, k):
    H = _as_csr(heldout)
    top = ranking.indicator(ranked, H.shape[1], k)
    return np.asarray(H.multiply(top).sum(axis=1)).ravel(), np.diff(H.indptr)


def _relevance(ranked, H):
    """0/1 matrix shaped like ``ranked``: is the listed item held out?"""
    n_items = H.shape[1]
    coo = H.tocoo()
    truth = np.sort(coo.row.astype(np.int64) * n_items + coo.col)
    keys = np.arange(ranked.shape[0], dtype=np.int64)[:, None] * n_items + ranked
    return np.where(ranked >= 0, np.isin(keys, truth), False).astype(np.float64)


def recall_at_k(ranked, heldout, k: int) -> float:
    hits, n_pos = _hits(ranked, heldout, k)
    keep = n_pos > 0
    if not keep.any():
        raise MetricError("no user has held-out items")
    return float(np.mean(hits[keep] / np.minimum(k, n_pos[keep])))


def ndcg_at_k(ranked, heldout, k: int) -> float:
    H = _as_csr(heldout)
    ranked = np.asarray(ranked)[:, :k]
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    n_pos = np.diff(H.indptr)
    keep = n_pos > 0
    if not keep.any():
        raise MetricError("no user has held-out items")
    rel = _relevance(ranked, H)
    dcg = rel @ discount[:ranked.shape[1]]
    ideal_cum = np.concatenate([[0.0], np.cumsum(discount)])
    idcg = ideal_cum[np.minimum(k, n_pos)]
    return float(np.mean(dcg[keep] / idcg[keep]))


def coverage_at_k(ranked, k: int, batch_size: int = 100):
    """Mean and population std of unique top-k items per consecutive user chunk."""
    ranked = np.asarray(ranked)[:, :k]
    n_chunks = ranked.shape[0] // batch_size
    if n_chunks == 0:
        raise MetricError(f"{ranked.shape[0]} users cannot fill one chunk of {batch_size}")
    counts = []
    for c in range(n_chunks):
        block = ranked[c * batch_size:(c + 1) * batch_size]
        counts.append(np.unique(block[block >= 0]).size)
    counts = np.asarray(counts, dtype=np.float64)
    return float(counts.mean()), float(counts.std())


def coverage_ratio(coverage_mean: float, k: int, batch_size: int, n_items: int) -> float:
    return float(coverage_mean / min(k * batch_size, n_items))


def gini(x) -> float:
    """``sum_ij |x_i - x_j| / (2 n sum x)`` via the sorted-order identity."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n, total = x.size, x.sum()
    if n == 0 or total <= 0:
        raise MetricError("Gini index undefined for all-zero counts")
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * x) / (n * total))


def occurrence_counts(ranked, n_items: int, k: int) -> np.ndarray:
    r = np.asarray(ranked)[:, :k]
    return np.bincount(r[r >= 0], minlength=n_items)


def gini_ratio(ranked, train_freq, k: int = 100) -> float:
    train_freq = np.asarray(train_freq)
    base = gini(train_freq)
    if base == 0:
        raise MetricError("training counts are uniform; Gini ratio undefined")
    return gini(occurrence_counts(ranked, train_freq.size, k)) / base


# -- per-category breakdown ------------------------------------------------

@dataclass
class ItemMeta:
    year: dict = field(default_factory=dict)
    genres: dict = field(default_factory=dict)


def load_item_meta(path) -> ItemMeta:
    """Read ``item_id,year,genres`` or MovieLens ``movieId,title,genres``.

    Genres are pipe-separated.  With a ``title`` column the year is taken from
    a trailing ``(YYYY)`` in the title.
    """
    meta = ItemMeta()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        first = next(rows, None)
        if first is None:
            return meta
        header = [c.strip().lower() for c in first]
        has_header = header[0] in ("item_id", "item", "movieid", "itemid")
        title_year = has_header and len(header) > 1 and header[1] == "title"
        body = rows if has_header else iter([first, *rows])
        for row in body:
            if not row:
                continue
            item = row[0].strip()
            second = row[1].strip() if len(row) > 1 else ""
            genres = row[-1].strip() if len(row) > 2 else ""
            if title_year:
                found = _TITLE_YEAR.search(second)
                year = int(found.group(1)) if found else None
            else:
                year = int(float(second)) if second else None
            meta.year[item] = year
            meta.genres[item] = [g for g in genres.split("|") if g and g != "(no genres listed)"]
    return meta


_TITLE_YEAR = re.compile(r"\((\d{4})\)\s*$")


def decade(year: Optional[int]) -> str:
    return "unknown" if year is None else f"{(year // 10) * 10}s"


def item_categories(item_ids, meta: ItemMeta):
    """``{"year": [[cat, ...] per item], "genre": [...]}`` with "unknown" fallback."""
    covered = sum(1 for i in item_ids if i in meta.year or i in meta.genres)
    if covered < 0.9 * len(item_ids):
        raise MetricError(f"metadata covers {covered} of {len(item_ids)} items (< 90%)")
    years = [[decade(meta.year.get(i))] for i in item_ids]
    genres = [meta.genres.get(i) or ["unknown"] for i in item_ids]
    return {"year": years, "genre": genres}


def per_category_report(ranked, heldout, categories, k: int = 100) -> list:
    """Item Recall@k within each category, ascending per facet.

    ``categories`` maps a facet name to one list of category labels per item;
    an item with several labels counts in each of them.
    """
    hits, pos = per_item_recall(ranked, heldout, k)
    ratio = np.zeros(hits.shape, dtype=np.float64)
    np.divide(hits, pos, out=ratio, where=pos > 0)
    rows = []
    for facet, labels in categories.items():
        groups = {}
        for j, cats in enumerate(labels):
            for c in cats:
                groups.setdefault(c, []).append(j)
        facet_rows = []
        for cat, members in groups.items():
            members = np.asarray(members)
            facet_rows.append({
                "facet": facet,
                "category": cat,
                "n_items": int(members.size),
                "n_heldout": int(pos[members].sum()),
                "item_recall": float(ratio[members].mean()),
            })
        facet_rows.sort(key=lambda r: (r["item_recall"], r["category"]))
        rows.extend(facet_rows)
    return rows


# -- PCA of item interaction columns --------------------------------------

def _power_iteration(matvec, n, rng, tol=1e-12, max_iter=20000):
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return 0.0, v
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return float(v @ matvec(v)), v


def pca_project(train, n_components: int = 2, seed: int = 0):
    """Coordinates of every item on the leading principal components.

    Items are points with feature vector ``D[:, j]``.  Eigenpairs of the
    centred item-item Gram matrix come from power iteration with deflation;
    each component's sign makes its largest-magnitude loading positive.
    Returns ``(coords, explained_variance)``.
    """
    X = _as_csr(train)
    n_users, n_items = X.shape
    if n_items < 2:
        raise MetricError("need at least two items")
    mu = np.asarray(X.sum(axis=1)).ravel() / n_items  # mean item vector

    def gram(v):
        # C = D^T - 1 mu^T ; returns C C^T v
        u = np.asarray(X @ v).ravel() - mu * v.sum()
        return np.asarray(X.T @ u).ravel() - float(mu @ u)

    rng = np.random.default_rng(seed)
    vecs, vals = [], []
    for c in range(n_components):
        def deflated(v, vecs=tuple(vecs), vals=tuple(vals)):
            out = gram(v)
            for lv, vv in zip(vals, vecs):
                out -= lv * vv * (vv @ v)
            return out
        lam, v = _power_iteration(deflated, n_items, rng)
        if vals and lam <= 1e-10 * max(vals[0], 1e-300):
            warnings.warn(f"principal component {c + 1} is degenerate; zeroed")
            lam, v = 0.0, np.zeros(n_items)
        else:
            j = int(np.argmax(np.abs(v)))
            if v[j] < 0:
                v = -v
        vecs.append(v)
        vals.append(max(lam, 0.0))
    coords = np.column_stack([v * np.sqrt(l) for v, l in zip(vecs, vals)])
    return coords, np.asarray(vals) / n_items


# -- full report -------------------------------------------------------------

@dataclass
class EvalReport:
    recall: dict
    ndcg: dict
    coverage: dict
    coverage_ratio: dict
    item_recall: dict
    gini_ratio: float
    n_users: int
    per_category: Optional[list] = None

    def to_dict(self) -> dict:
        out = {
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "coverage": {str(k): {str(b): {"mean": m, "std": s} for b, (m, s) in d.items()}
                         for k, d in self.coverage.items()},
            "coverage_ratio": {str(k): {str(b): r for b, r in d.items()}
                               for k, d in self.coverage_ratio.items()},
            "item_recall": {str(k): v for k, v in self.item_recall.items()},
            "gini_ratio": self.gini_ratio,
            "n_users": self.n_users,
        }
        if self.per_category is not None:
            out["per_category"] = self.per_category
        return out


def evaluate_ranked(ranked, heldout, train_freq, ks=(20, 50, 100),
                    coverage_batches=(100,), categories=None, gini_k: int = 100) -> EvalReport:
    """Every metric of an :class:`EvalReport` from precomputed ranked lists."""
    n_items = len(train_freq)
    ks = sorted(int(k) for k in ks)
    report = EvalReport(
        recall={k: recall_at_k(ranked, heldout, k) for k in ks},
        ndcg={k: ndcg_at_k(ranked, heldout, k) for k in ks},
        coverage={}, coverage_ratio={},
        item_recall={},
        gini_ratio=gini_ratio(ranked, train_freq, gini_k),
        n_users=int(np.asarray(ranked).shape[0]),
    )
    for k in ks:
        report.item_recall[k] = item_recall_from_ranked(ranked, heldout, k)
        report.coverage[k] = {}
        report.coverage_ratio[k] = {}
        for b in coverage_batches:
            try:
                mean, std = coverage_at_k(ranked, k, b)
            except MetricError as exc:
                log.warning("coverage@%d with batch %d skipped: %s", k, b, exc)
                continue
            report.coverage[k][b] = (mean, std)
            report.coverage_ratio[k][b] = coverage_ratio(mean, k, b, n_items)
    if categories is not None:
        report.per_category = per_category_report(ranked, heldout, categories, max(ks))
    return report
