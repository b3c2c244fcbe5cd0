"""Interaction logs -> sparse binary user x item matrix -> user splits.

Evaluation users follow the strong-generalization protocol: they are removed
from training entirely and each of their rows is divided into a fold-in part
(fed to the model) and a held-out part (ground truth).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import EmptyDatasetError, ParseError, SplitError
from .io import write_npz

MATRIX_FORMAT = "posit-interactions"
MATRIX_VERSION = 1

_HEADER_NAMES = {"user", "userid", "user_id", "uid", "users"}


@dataclass(frozen=True)
class RawEvent:
    user_id: str
    item_id: str
    rating: Optional[float] = None
    timestamp: Optional[int] = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ParseError("user_id and item_id must be non-empty")


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Binary interaction matrix D with the original id of every row/column.

    ``data`` is a CSR matrix with sorted, duplicate-free column indices and
    all stored values equal to 1.
    """

    data: sp.csr_matrix
    user_ids: tuple
    item_ids: tuple

    def __post_init__(self):
        d = self.data
        if d.shape != (len(self.user_ids), len(self.item_ids)):
            raise ValueError("id maps do not match matrix shape")

    @classmethod
    def from_rows(cls, rows: Sequence[Iterable[int]], n_items: int,
                  user_ids=None, item_ids=None) -> "InteractionMatrix":
        indptr = [0]
        indices = []
        for row in rows:
            cols = sorted(set(int(c) for c in row))
            if cols and (cols[0] < 0 or cols[-1] >= n_items):
                raise ValueError("item index out of range")
            indices.extend(cols)
            indptr.append(len(indices))
        data = sp.csr_matrix(
            (np.ones(len(indices)), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
            shape=(len(rows), n_items),
        )
        if user_ids is None:
            user_ids = tuple(str(i) for i in range(len(rows)))
        if item_ids is None:
            item_ids = tuple(str(j) for j in range(n_items))
        return cls(data, tuple(user_ids), tuple(item_ids))

    @property
    def n_users(self) -> int:
        return self.data.shape[0]

    @property
    def n_items(self) -> int:
        return self.data.shape[1]

    @property
    def nnz(self) -> int:
        return self.data.nnz

    @property
    def item_freq(self) -> np.ndarray:
        return np.bincount(self.data.indices, minlength=self.n_items).astype(np.int64)

    def row(self, i: int) -> np.ndarray:
        d = self.data
        return d.indices[d.indptr[i]:d.indptr[i + 1]]

    def rows(self) -> list:
        return [self.row(i) for i in range(self.n_users)]

    def subset_users(self, users: Sequence[int]) -> "InteractionMatrix":
        users = np.asarray(users, dtype=np.int64)
        return InteractionMatrix(
            self.data[users].tocsr(), tuple(self.user_ids[u] for u in users), self.item_ids
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.data.shape, dtype=np.int64).tobytes())
        h.update(self.data.indptr.astype(np.int64).tobytes())
        h.update(self.data.indices.astype(np.int64).tobytes())
        h.update(json.dumps([list(self.user_ids), list(self.item_ids)]).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    n_val_users: int
    n_test_users: int
    heldout_fraction: float = 0.2
    seed: int = 0

    def validate(self, n_users: int) -> None:
        if self.n_val_users < 0 or self.n_test_users < 0:
            raise SplitError("user counts must be non-negative")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise SplitError("heldout_fraction must lie in (0, 1)")
        if self.n_val_users + self.n_test_users >= n_users:
            raise SplitError(
                f"{self.n_val_users} val + {self.n_test_users} test users leave no "
                f"training users out of {n_users}"
            )


@dataclass(frozen=True, eq=False)
class EvalSplit:
    """Fold-in / held-out halves for a set of evaluation users.

    Row ``r`` of both matrices belongs to ``users[r]`` (an index into the
    matrix the split was drawn from).  Row order is the fixed, seeded user
    order used for chunked coverage.
    """

    foldin: sp.csr_matrix
    heldout: sp.csr_matrix
    users: np.ndarray

    @property
    def n_users(self) -> int:
        return self.foldin.shape[0]

    @property
    def n_items(self) -> int:
        return self.foldin.shape[1]


def heldout_size(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n)))


def _looks_like_header(fields: list) -> bool:
    if fields[0].strip().lower() in _HEADER_NAMES:
        return True
    for value in fields[2:4]:
        try:
            float(value)
        except ValueError:
            return True
    return False


def ingest_csv(path, rating_threshold: float = 3.5) -> list:
    """Read ``user,item[,rating[,timestamp]]`` rows, keeping positive feedback.

    Rows with a rating below ``rating_threshold`` are dropped; rows without a
    rating are always kept.
    """
    path = Path(path)
    events = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, fields in enumerate(csv.reader(fh), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if lineno == 1 and _looks_like_header(fields):
                continue
            if len(fields) < 2 or len(fields) > 4:
                raise ParseError(f"{path}:{lineno}: expected 2-4 columns, got {len(fields)}")
            user, item = fields[0].strip(), fields[1].strip()
            if not user or not item:
                raise ParseError(f"{path}:{lineno}: empty user or item id")
            rating = timestamp = None
            try:
                if len(fields) >= 3 and fields[2].strip():
                    rating = float(fields[2])
                if len(fields) == 4 and fields[3].strip():
                    timestamp = int(float(fields[3]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if rating is not None and (math.isnan(rating) or rating < rating_threshold):
                continue
            events.append(RawEvent(user, item, rating, timestamp))
    if not events:
        raise EmptyDatasetError(f"{path}: no events left after applying threshold {rating_threshold}")
    return events


def build_matrix(events: Sequence[RawEvent], min_user_interactions: int = 5,
                 min_item_interactions: int = 1) -> InteractionMatrix:
    """Deduplicate, filter sparse users/items until stable, and reindex.

    Users keep their order of first appearance.  Items are ordered by
    descending frequency (ties: ascending original id), so index 0 is the most
    popular item.
    """
    if not events:
        raise EmptyDatasetError("no events")
    pairs = {}
    for ev in events:
        pairs.setdefault((ev.user_id, ev.item_id), None)
    pairs = list(pairs)

    while True:
        ucount = Counter(u for u, _ in pairs)
        icount = Counter(i for _, i in pairs)
        kept = [(u, i) for u, i in pairs
                if ucount[u] >= min_user_interactions and icount[i] >= min_item_interactions]
        if len(kept) == len(pairs):
            break
        pairs = kept
    if not pairs:
        raise EmptyDatasetError("every user or item was removed by the minimum-count filters")

    user_order = {}
    for u, _ in pairs:
        user_order.setdefault(u, len(user_order))
    icount = Counter(i for _, i in pairs)
    items = sorted(icount, key=lambda i: (-icount[i], i))
    item_index = {i: j for j, i in enumerate(items)}

    rows = [[] for _ in user_order]
    for u, i in pairs:
        rows[user_order[u]].append(item_index[i])
    return InteractionMatrix.from_rows(rows, len(items), tuple(user_order), tuple(items))


def _split_rows(m: InteractionMatrix, users, fraction, rng):
    foldin_rows, heldout_rows, kept = [], [], []
    for u in users:
        row = m.row(int(u))
        n = len(row)
        n_out = heldout_size(n, fraction)
        if n < 2 or n_out >= n:
            continue
        chosen = np.zeros(n, dtype=bool)
        chosen[rng.choice(n, size=n_out, replace=False)] = True
        heldout_rows.append(row[chosen])
        foldin_rows.append(row[~chosen])
        kept.append(int(u))
    n_items = m.n_items
    foldin = InteractionMatrix.from_rows(foldin_rows, n_items).data
    heldout = InteractionMatrix.from_rows(heldout_rows, n_items).data
    return EvalSplit(foldin, heldout, np.asarray(kept, dtype=np.int64))


def split_users(m: InteractionMatrix, spec: SplitSpec):
    """Return ``(train, val, test)``; evaluation users never appear in train.

    Evaluation users with fewer than two interactions cannot be split into a
    non-empty fold-in and held-out part and are dropped from the split.
    """
    spec.validate(m.n_users)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(m.n_users)
    val_users = perm[:spec.n_val_users]
    test_users = perm[spec.n_val_users:spec.n_val_users + spec.n_test_users]
    train_users = np.sort(perm[spec.n_val_users + spec.n_test_users:])
    train = m.subset_users(train_users)
    if train.nnz == 0:
        raise SplitError("training partition has no interactions")
    val = _split_rows(m, val_users, spec.heldout_fraction, rng)
    test = _split_rows(m, test_users, spec.heldout_fraction, rng)
    return train, val, test


def save_matrix(path, m: InteractionMatrix) -> None:
    """Write ``<path>`` (npz arrays, versioned) and ``<path>.ids.json``."""
    path = Path(path)
    write_npz(
        path,
        format=np.array(MATRIX_FORMAT),
        version=np.array(MATRIX_VERSION),
        shape=np.asarray(m.data.shape, dtype=np.int64),
        indptr=m.data.indptr.astype(np.int64),
        indices=m.data.indices.astype(np.int64),
    )
    ids_path(path).write_text(
        json.dumps({"users": list(m.user_ids), "items": list(m.item_ids)}, indent=1) + "\n",
        encoding="utf-8",
    )


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids.json")


def load_matrix(path) -> InteractionMatrix:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != MATRIX_FORMAT:
            raise ParseError(f"{path}: not an interaction matrix file")
        version = int(z["version"])
        if version != MATRIX_VERSION:
            raise ParseError(f"{path}: unsupported format version {version}")
        shape = tuple(int(s) for s in z["shape"])
        indptr, indices = z["indptr"], z["indices"]
    data = sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=shape)
    ids = json.loads(ids_path(path).read_text(encoding="utf-8"))
    return InteractionMatrix(data, tuple(ids["users"]), tuple(ids["items"]))
