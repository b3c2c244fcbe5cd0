"""Training, evaluation, sweeps and exports for a single experiment config.

Every run selects its best epoch on the validation users and touches the test
users exactly once.  Output files are written deterministically: the same
config and data give byte-identical reports, checkpoints and CSV exports.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import __version__, advantage as adv, adversary as advm, baselines, dataset, ease, metrics
from .config import ExperimentConfig, SweepSpec, build_config
from .exceptions import MetricError, PositError
from .io import write_csv, write_json, write_npz
from .ranking import mask_items

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "posit-checkpoint"
CHECKPOINT_VERSION = 1
SWEEP_FRONTIER_METHODS = ("cvar", "rerank")


# -- data --------------------------------------------------------------------

@dataclass
class Data:
    matrix: dataset.InteractionMatrix
    train: dataset.InteractionMatrix
    val: dataset.EvalSplit
    test: dataset.EvalSplit
    data_hash: str

    @property
    def train_freq(self) -> np.ndarray:
        return self.train.item_freq


_DATA_CACHE = {}


def _data_key(cfg: ExperimentConfig):
    p = Path(cfg.data)
    st = p.stat()
    return (str(p.resolve()), st.st_mtime_ns, st.st_size, cfg.rating_threshold,
            cfg.min_user_interactions, cfg.min_item_interactions, cfg.n_val_users,
            cfg.n_test_users, cfg.heldout_fraction, cfg.seed)


def load_interactions(cfg: ExperimentConfig) -> dataset.InteractionMatrix:
    path = Path(cfg.data)
    if path.suffix == ".npz":
        return dataset.load_matrix(path)
    events = dataset.ingest_csv(path, cfg.rating_threshold)
    return dataset.build_matrix(events, cfg.min_user_interactions, cfg.min_item_interactions)


def prepare_data(cfg: ExperimentConfig) -> Data:
    """Load and split the interactions (memoised per file state and split spec)."""
    try:
        key = _data_key(cfg)
    except OSError as exc:
        raise dataset.ParseError(f"{cfg.data}: {exc.strerror}") from None
    if key not in _DATA_CACHE:
        m = load_interactions(cfg)
        spec = dataset.SplitSpec(cfg.n_val_users, cfg.n_test_users, cfg.heldout_fraction, cfg.seed)
        train, val, test = dataset.split_users(m, spec)
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = Data(m, train, val, test, m.content_hash())
    return _DATA_CACHE[key]


# -- fitted models -------------------------------------------------------------

@dataclass
class Fitted:
    """A trained method plus everything needed to rank items for new users."""

    cfg: ExperimentConfig
    train_freq: np.ndarray
    model: Optional[ease.EaseModel] = None
    net: Optional[advm.AdversaryNet] = None
    ema: Optional[np.ndarray] = None
    best_epoch: int = 0
    history: list = field(default_factory=list)
    val_score: float = float("nan")
    data_hash: str = ""

    def ranked(self, split: dataset.EvalSplit, k: int) -> np.ndarray:
        method = self.cfg.method
        if method == "mp":
            return baselines.most_popular_lists(self.train_freq, split.n_users, k)
        if method == "rerank":
            out = []
            F = sp.csr_matrix(split.foldin)
            for start in range(0, F.shape[0], 2048):
                block = F[start:start + 2048]
                scores = mask_items(self.model.score(block), block)
                out.append(baselines.rerank_lists(scores, self.train_freq, self.cfg.rerank_config(), k))
            return np.vstack(out) if out else np.empty((0, k), dtype=np.int64)
        return adv.eval_ranked(self.model, split, k)


def select_score(ranked, split, train_freq, cfg: ExperimentConfig) -> float:
    k = cfg.select_k
    name = cfg.select_metric
    if name == "recall":
        return metrics.recall_at_k(ranked, split.heldout, k)
    if name == "ndcg":
        return metrics.ndcg_at_k(ranked, split.heldout, k)
    if name == "item_recall":
        return adv.item_recall_from_ranked(ranked, split.heldout, k)
    batch = min(cfg.coverage_batches)
    return metrics.coverage_at_k(ranked, k, batch)[0]


_BASE_CACHE = {}


def _base_ease(cfg: ExperimentConfig, data: Data) -> Fitted:
    """Plain EASE used by ``ease`` and as the scorer under ``rerank``."""
    key = (data.data_hash, cfg.seed, cfg.closed_form, cfg.lam, cfg.lr, cfg.momentum, cfg.epochs,
           cfg.batch_size, cfg.lr_schedule, cfg.lr_decay, cfg.select_metric, cfg.select_k,
           cfg.n_val_users, cfg.n_test_users, cfg.heldout_fraction)
    if key in _BASE_CACHE:
        return _BASE_CACHE[key]
    base_cfg = cfg.replace(method="ease")
    fitted = Fitted(base_cfg, data.train_freq)
    if cfg.closed_form:
        n_users, n_items = data.train.n_users, data.train.n_items
        lam_cf = ease.closed_form_lambda(cfg.lam, n_users, n_items)
        fitted.model = ease.solve_closed_form(data.train, lam_cf)
    else:
        res = ease.train_sgd(data.train, cfg.lam, cfg.train_config(),
                             on_epoch=_epoch_scorer(base_cfg, data))
        fitted.model, fitted.best_epoch, fitted.history = res.model, res.best_epoch, res.history
    fitted.val_score = select_score(fitted.ranked(data.val, cfg.select_k), data.val,
                                    data.train_freq, base_cfg)
    _BASE_CACHE.clear()
    _BASE_CACHE[key] = fitted
    return fitted


def _epoch_scorer(cfg, data):
    probe = Fitted(cfg, data.train_freq)

    def score(model, epoch=None):
        probe.model = model
        return select_score(probe.ranked(data.val, cfg.select_k), data.val, data.train_freq, cfg)
    return score


def fit(cfg: ExperimentConfig, data: Data) -> Fitted:
    """Train ``cfg.method`` and keep the epoch that scores best on validation."""
    method = cfg.method
    log.info("fitting %s on %d users x %d items", method, data.train.n_users, data.train.n_items)
    if method == "mp":
        fitted = Fitted(cfg, data.train_freq)
    elif method == "ease":
        return dataclasses.replace(_base_ease(cfg, data), cfg=cfg)
    elif method == "rerank":
        base = _base_ease(cfg, data)
        fitted = Fitted(cfg, data.train_freq, model=base.model, best_epoch=base.best_epoch,
                        history=base.history)
    elif method == "ipw":
        freq = data.train_freq
        if np.any(freq == 0):
            log.warning("%d items have zero training frequency; flooring at 1", int((freq == 0).sum()))
        w = baselines.ipw_weights(np.maximum(freq, 1), data.train.n_users, cfg.beta)
        res = ease.train_sgd(data.train, cfg.lam, cfg.train_config(), item_weights=w,
                             on_epoch=_epoch_scorer(cfg, data))
        fitted = Fitted(cfg, data.train_freq, res.model, best_epoch=res.best_epoch, history=res.history)
    elif method == "cvar":
        res = baselines.train_cvar(data.train, cfg.lam, cfg.train_config(), cfg.cvar_config(),
                                   on_epoch=_epoch_scorer(cfg, data))
        fitted = Fitted(cfg, data.train_freq, res.model, best_epoch=res.best_epoch, history=res.history)
    elif method == "posit":
        scorer = _epoch_scorer(cfg, data)
        res = advm.train_posit(data.train, data.val, cfg.posit_config(),
                               evaluate=lambda model, split: scorer(model))
        fitted = Fitted(cfg, data.train_freq, res.model, res.net, res.state.ema,
                        res.best_epoch, res.history)
    else:  # pragma: no cover - validated earlier
        raise ValueError(method)
    fitted.val_score = select_score(fitted.ranked(data.val, cfg.select_k), data.val,
                                    data.train_freq, cfg)
    return fitted


# -- evaluation and outputs ----------------------------------------------------

def _categories(cfg: ExperimentConfig, data: Data):
    if not cfg.items:
        return None
    try:
        meta = metrics.load_item_meta(cfg.items)
        return metrics.item_categories(data.train.item_ids, meta)
    except (OSError, MetricError) as exc:
        log.warning("per-category report skipped: %s", exc)
        return None


def evaluate(fitted: Fitted, split: dataset.EvalSplit, data: Data, cfg: Optional[ExperimentConfig] = None,
             categories=None) -> metrics.EvalReport:
    cfg = cfg or fitted.cfg
    ranked = fitted.ranked(split, cfg.max_k)
    return metrics.evaluate_ranked(ranked, split.heldout, data.train_freq, ks=cfg.ks,
                                   coverage_batches=cfg.coverage_batches,
                                   categories=categories, gini_k=cfg.gini_k)


def report_dict(fitted: Fitted, test_report: metrics.EvalReport) -> dict:
    cfg = fitted.cfg
    return {
        "method": cfg.method,
        "best_epoch": fitted.best_epoch,
        "validation": {"metric": f"{cfg.select_metric}@{cfg.select_k}", "value": fitted.val_score},
        "test": test_report.to_dict(),
    }


def manifest_dict(cfg: ExperimentConfig, data: Data) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "data": {
            "path": cfg.data,
            "content_hash": data.data_hash,
            "n_users": data.matrix.n_users,
            "n_items": data.matrix.n_items,
            "n_interactions": data.matrix.nnz,
            "train_hash": data.train.content_hash(),
        },
        "version": {"posit": __version__, "numpy": np.__version__,
                    "python": platform.python_version()},
    }


def history_rows(fitted: Fitted):
    keys = []
    for row in fitted.history:
        keys.extend(k for k in row if k not in keys)
    return fitted.history, keys or ["epoch"]


def _portable(cfg: ExperimentConfig) -> dict:
    """Config without the output location, so checkpoints compare across directories."""
    d = cfg.to_dict()
    d.pop("out_dir")
    return d


def save_checkpoint(path, fitted: Fitted, data: Data) -> None:
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "version": np.array(CHECKPOINT_VERSION),
        "method": np.array(fitted.cfg.method),
        "config": np.array(json.dumps(_portable(fitted.cfg), sort_keys=True)),
        "data_hash": np.array(data.data_hash),
        "best_epoch": np.array(fitted.best_epoch),
        "item_freq": np.asarray(fitted.train_freq, dtype=np.int64),
    }
    if fitted.model is not None:
        arrays["W"] = fitted.model.W
        arrays["lam"] = np.array(fitted.model.lam)
    if fitted.net is not None:
        arrays["adv_W1"] = fitted.net.W1
        arrays["adv_w2"] = fitted.net.w2
        arrays["adv_tau"] = np.array(fitted.net.tau)
        arrays["adv_arch"] = np.array(fitted.net.arch)
    if fitted.ema is not None:
        arrays["ema"] = fitted.ema
    write_npz(path, **arrays)


def load_checkpoint(path, cfg: Optional[ExperimentConfig] = None) -> Fitted:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CHECKPOINT_FORMAT:
            raise dataset.ParseError(f"{path}: not a checkpoint")
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise dataset.ParseError(f"{path}: unsupported checkpoint version {int(z['version'])}")
        stored = build_config(json.loads(str(z["config"])))
        fitted = Fitted(cfg or stored, z["item_freq"].copy(), best_epoch=int(z["best_epoch"]))
        if "W" in z:
            fitted.model = ease.EaseModel(z["W"].copy(), float(z["lam"]))
        if "adv_W1" in z:
            fitted.net = advm.AdversaryNet(z["adv_W1"].copy(), z["adv_w2"].copy(),
                                           float(z["adv_tau"]), str(z["adv_arch"]))
        if "ema" in z:
            fitted.ema = z["ema"].copy()
        fitted.data_hash = str(z["data_hash"])
    return fitted


def write_run(out_dir, fitted: Fitted, data: Data, test_report: metrics.EvalReport) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = report_dict(fitted, test_report)
    write_json(out / "report.json", report)
    write_json(out / "manifest.json", manifest_dict(fitted.cfg, data))
    save_checkpoint(out / "checkpoint.npz", fitted, data)
    rows, keys = history_rows(fitted)
    write_csv(out / "history.csv", rows, keys)
    return report


class _RunLog:
    """Mirror log records into ``<out_dir>/run.log`` for the duration of a run."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / "run.log"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.handler = logging.FileHandler(self.path, mode="w", encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger("posit")
        root.addHandler(self.handler)
        self._level = root.level
        if root.level == logging.NOTSET or root.level > logging.INFO:
            root.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        root = logging.getLogger("posit")
        root.removeHandler(self.handler)
        root.setLevel(self._level)
        self.handler.close()
        return False


def run(cfg: ExperimentConfig) -> dict:
    """Train, select on validation, evaluate once on test, write outputs."""
    with _RunLog(cfg.out_dir):
        data = prepare_data(cfg)
        fitted = fit(cfg, data)
        report = evaluate(fitted, data.test, data, categories=_categories(cfg, data))
        return write_run(cfg.out_dir, fitted, data, report)


def evaluate_checkpoint(run_dir, overrides=None, split: str = "test") -> dict:
    """Recompute metrics for a saved run (e.g. other coverage batch sizes)."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    cfg = build_config(manifest["config"], overrides or {})
    data = prepare_data(cfg)
    fitted = load_checkpoint(run_dir / "checkpoint.npz", cfg)
    if fitted.data_hash != data.data_hash:
        raise dataset.ParseError(f"{cfg.data}: content hash differs from the checkpoint's data")
    target = data.test if split == "test" else data.val
    rep = evaluate(fitted, target, data, cfg, categories=_categories(cfg, data))
    return {"method": cfg.method, "split": split, "metrics": rep.to_dict()}


# -- sweeps ------------------------------------------------------------------------

def _slug(point: dict) -> str:
    return "_".join(f"{k}={v}" for k, v in point.items()).replace("/", "-")


def _pareto(points):
    """Flags for points not dominated in (coverage, recall), both maximised."""
    flags = []
    for i, (c, r) in enumerate(points):
        dominated = any((c2 >= c and r2 >= r) and (c2 > c or r2 > r)
                        for j, (c2, r2) in enumerate(points) if j != i)
        flags.append(not dominated)
    return flags


def sweep(base: ExperimentConfig, spec: SweepSpec) -> dict:
    """Grid search on validation; only the winner is evaluated on test.

    CVaR and Rerank sweeps additionally write a test-metric frontier over
    every grid point, flagged as such in ``frontier.csv``.
    """
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(spec.grid)
    leaderboard, frontier = [], []
    best = None
    with _RunLog(out):
        for index, point in enumerate(spec.points()):
            row = {"index": index, **{k: point[k] for k in keys}}
            try:
                cfg = base.replace(select_metric=spec.select_metric, select_k=spec.select_k,
                                   out_dir=str(out / "best"), **point)
                data = prepare_data(cfg)
                fitted = fit(cfg, data)
            except PositError as exc:
                log.warning("grid point %d (%s) failed: %s", index, _slug(point), exc)
                row.update(status="failed", error=str(exc), val_score="", best_epoch="")
                leaderboard.append(row)
                continue
            row.update(status="ok", error="", val_score=fitted.val_score, best_epoch=fitted.best_epoch)
            leaderboard.append(row)
            if cfg.method in SWEEP_FRONTIER_METHODS:
                k = 100 if 100 in cfg.ks else max(cfg.ks)
                b = 100 if 100 in cfg.coverage_batches else min(cfg.coverage_batches)
                ranked = fitted.ranked(data.test, k)
                try:
                    cov = metrics.coverage_at_k(ranked, k, b)[0]
                except MetricError:
                    cov = float("nan")
                frontier.append({"index": index, **{kk: point[kk] for kk in keys},
                                 "split": "test", f"coverage@{k}": cov,
                                 f"recall@{k}": metrics.recall_at_k(ranked, data.test.heldout, k)})
            if best is None or fitted.val_score > best[0].val_score:
                best = (fitted, data, index)

        metric = f"val_{spec.select_metric}@{spec.select_k}"
        ok = [r for r in leaderboard if r["status"] == "ok"]
        ok.sort(key=lambda r: (-r["val_score"], r["index"]))
        ranked_rows = ok + [r for r in leaderboard if r["status"] != "ok"]
        for rank, r in enumerate(ranked_rows, start=1):
            r["rank"] = rank if r["status"] == "ok" else ""
        write_csv(out / "leaderboard.csv", ranked_rows,
                  ["rank", "index", *keys, "status", "val_score", "best_epoch", "error"])
        summary = {"metric": metric, "n_points": len(leaderboard), "n_failed": len(leaderboard) - len(ok)}
        if frontier:
            cov_key = next(k for k in frontier[0] if k.startswith("coverage@"))
            rec_key = next(k for k in frontier[0] if k.startswith("recall@"))
            flags = _pareto([(f[cov_key], f[rec_key]) for f in frontier])
            for f, flag in zip(frontier, flags):
                f["pareto"] = int(flag)
            write_csv(out / "frontier.csv", frontier,
                      ["index", *keys, "split", cov_key, rec_key, "pareto"])
            summary["frontier"] = str(out / "frontier.csv")
        if best is None:
            summary["best"] = None
            return summary
        fitted, data, index = best
        report = evaluate(fitted, data.test, data, categories=_categories(fitted.cfg, data))
        write_run(out / "best", fitted, data, report)
        summary["best"] = {"index": index, "point": spec.points()[index],
                           "val_score": fitted.val_score, "test": report.to_dict()}
        return summary


# -- exports -------------------------------------------------------------------------

def _advantage_columns(model: ease.EaseModel, train, k: int, chunk: int = 2048):
    X = sp.csr_matrix(train.data)
    hits = np.zeros(X.shape[1])
    for start in range(0, X.shape[0], chunk):
        R = adv.hit_matrix(model, X[start:start + chunk], k)
        hits += np.asarray(R.sum(axis=0)).ravel()
    pos = np.asarray(X.sum(axis=0)).ravel()
    s_with = hits / X.shape[0]
    s_without = np.zeros_like(hits)
    np.divide(hits, pos, out=s_without, where=pos > 0)
    return s_with, s_without


def export(run_dir, out_dir=None) -> dict:
    """Per-item advantage, per-category recall and (POSIT only) PCA + weights."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "export"
    out.mkdir(parents=True, exist_ok=True)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    cfg = build_config(manifest["config"])
    data = prepare_data(cfg)
    fitted = load_checkpoint(run_dir / "checkpoint.npz", cfg)
    if fitted.data_hash != data.data_hash:
        raise dataset.ParseError(f"{cfg.data}: content hash differs from the checkpoint's data")
    item_ids = data.train.item_ids
    freq = data.train_freq
    written = {}

    if fitted.model is not None:
        s_with, s_without = _advantage_columns(fitted.model, data.train, cfg.adv_k)
    else:
        s_with = s_without = None
    rows = []
    for j, item in enumerate(item_ids):
        rows.append({
            "item_id": item,
            "S_with": "" if s_with is None else s_with[j],
            "S_without": "" if s_without is None else s_without[j],
            "ema": "" if fitted.ema is None else fitted.ema[j],
            "frequency": int(freq[j]),
        })
    write_csv(out / "advantage.csv", rows, ["item_id", "S_with", "S_without", "ema", "frequency"])
    written["advantage"] = str(out / "advantage.csv")

    cats = _categories(cfg, data)
    if cats is not None:
        ranked = fitted.ranked(data.test, cfg.max_k)
        k = 100 if 100 in cfg.ks else max(cfg.ks)
        table = metrics.per_category_report(ranked, data.test.heldout, cats, k)
        write_csv(out / "per_category.csv", table,
                  ["facet", "category", "n_items", "n_heldout", "item_recall"])
        written["per_category"] = str(out / "per_category.csv")

    if fitted.net is None:
        log.warning("checkpoint has no adversary; weight export skipped")
    else:
        features = advm.item_features(data.train)
        weights = advm.normalized_weights(advm.forward(fitted.net, features))
        coords, var = metrics.pca_project(data.train, 2, seed=cfg.seed)
        rows = [{"item_id": item, "weight": weights[j], "ema": fitted.ema[j],
                 "pca_x": coords[j, 0], "pca_y": coords[j, 1]}
                for j, item in enumerate(item_ids)]
        write_csv(out / "pca_weights.csv", rows, ["item_id", "weight", "ema", "pca_x", "pca_y"])
        written["pca_weights"] = str(out / "pca_weights.csv")
    return written
