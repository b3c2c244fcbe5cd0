"""Synthetic MovieLens-like rating logs for desk-scale experiments.

Items carry a popularity drawn from a power law, one to three genres, a
release year and membership in one fine-grained taste cluster.  Each user
prefers a few genres and a few clusters; the items a user rates are drawn
without replacement (Gumbel top-k) from a softmax over

    log popularity + genre affinity + cluster affinity.

About a fifth of the ratings fall below 3.5 so that thresholding removes
them, as with explicit MovieLens ratings.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GENRES = (
    "Action", "Adventure", "Animation", "Children", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


@dataclass
class SynthConfig:
    n_users: int = 1500
    n_items: int = 1500
    n_clusters: int = 60
    mean_activity: float = 70.0
    popularity_exponent: float = 1.6
    genre_strength: float = 1.5
    cluster_strength: float = 3.0
    negative_fraction: float = 0.2
    seed: int = 7


def generate(cfg: SynthConfig = SynthConfig()):
    """Return ``(ratings, items)``: rows of (user, item, rating, ts) and (item, year, genres)."""
    rng = np.random.default_rng(cfg.seed)
    n_u, n_i, n_g = cfg.n_users, cfg.n_items, len(GENRES)

    pop_rank = rng.permutation(n_i) + 1
    log_pop = -cfg.popularity_exponent * np.log(pop_rank)

    item_genres = np.zeros((n_i, n_g))
    n_item_genres = rng.choice([1, 2, 3], size=n_i, p=[0.5, 0.35, 0.15])
    genre_pop = rng.dirichlet(np.full(n_g, 1.0))
    for j in range(n_i):
        item_genres[j, rng.choice(n_g, size=n_item_genres[j], replace=False, p=genre_pop)] = 1.0
    cluster = rng.integers(0, cfg.n_clusters, size=n_i)
    years = np.clip(np.round(2000 - rng.gamma(2.0, 9.0, size=n_i)), 1915, 2015).astype(int)

    taste = rng.dirichlet(np.full(n_g, 0.3), size=n_u)
    genre_aff = np.log(taste @ item_genres.T / np.maximum(item_genres.sum(1), 1) + 1e-3)
    user_clusters = np.zeros((n_u, cfg.n_clusters))
    for u in range(n_u):
        user_clusters[u, rng.choice(cfg.n_clusters, size=3, replace=False)] = 1.0
    logits = (log_pop[None, :] + cfg.genre_strength * genre_aff
              + cfg.cluster_strength * user_clusters[:, cluster])

    activity = np.clip(rng.lognormal(np.log(cfg.mean_activity) - 0.5, 1.0, size=n_u), 15, n_i // 3)
    ratings = []
    for u in range(n_u):
        n = int(activity[u])
        keys = logits[u] + rng.gumbel(size=n_i)
        chosen = np.argpartition(-keys, n)[:n]
        negative = rng.random(n) < cfg.negative_fraction
        values = np.where(negative, rng.choice([1.0, 2.0, 3.0], size=n),
                          rng.choice([4.0, 4.5, 5.0], size=n))
        stamps = 9 * 10 ** 8 + rng.integers(0, 10 ** 8, size=n)
        for j, r, t in zip(chosen, values, stamps):
            ratings.append((u + 1, int(j) + 1, float(r), int(t)))

    items = [(j + 1, int(years[j]), "|".join(GENRES[g] for g in np.flatnonzero(item_genres[j])))
             for j in range(n_i)]
    return ratings, items


def write(out_dir, cfg: SynthConfig = SynthConfig()):
    """Write ``ratings.csv`` and ``items.csv`` into ``out_dir``; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ratings, items = generate(cfg)
    rpath, ipath = out / "ratings.csv", out / "items.csv"
    with rpath.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["userId", "movieId", "rating", "timestamp"])
        w.writerows(ratings)
    with ipath.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "year", "genres"])
        w.writerows(items)
    return rpath, ipath
