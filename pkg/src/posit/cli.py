"""Command-line entry point: ``posit {ingest,synth,run,sweep,evaluate,export}``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 data error
(unreadable, empty or unsplittable input), 4 training divergence, 1 any
other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, dataset, experiment, synth
from .config import SweepSpec, load_config, parse_grid, parse_overrides
from .exceptions import (ConfigError, DegenerateAdversaryError, DivergenceError, EmptyDatasetError,
                         ParseError, PositError, SplitError)
from .io import dumps

log = logging.getLogger("posit")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _config_args(p):
    p.add_argument("-c", "--config", help="flat YAML key-value file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--method", help="ease, posit, ipw, cvar, rerank or mp")
    p.add_argument("--data", help="ratings CSV or ingested .npz")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir", help="output directory")


def _cli_overrides(args) -> dict:
    values = parse_overrides(args.overrides)
    for key in ("method", "data", "seed", "out_dir"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--json", action="store_true", help="print a JSON result on stdout")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ratings CSV -> binary interaction matrix (.npz)")
    p.add_argument("ratings")
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--threshold", type=float, default=3.5, help="keep ratings >= this")
    p.add_argument("--min-user", type=int, default=5)
    p.add_argument("--min-item", type=int, default=1)

    p = sub.add_parser("synth", help="write a synthetic ratings.csv and items.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("run", help="train one method, select on validation, report test")
    _config_args(p)

    p = sub.add_parser("sweep", help="grid search with validation selection")
    _config_args(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="grid axis (repeatable); adds to the config file's 'grid' mapping")
    p.add_argument("--select", default="recall@100", help="validation metric, e.g. recall@100")

    p = sub.add_parser("evaluate", help="recompute metrics for a saved run")
    p.add_argument("run_dir")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="evaluation overrides such as coverage_batches=10,50,100,500,1000")
    p.add_argument("--out", help="also write the result to this JSON file")

    p = sub.add_parser("export", help="advantage, per-category and PCA/weight CSVs")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default <run_dir>/export)")
    return parser


def _parse_select(text):
    name, _, k = text.partition("@")
    try:
        return name, int(k or 100)
    except ValueError:
        raise ConfigError("select", f"cannot parse {text!r}; expected e.g. recall@100") from None


def cmd_ingest(args):
    events = dataset.ingest_csv(args.ratings, args.threshold)
    m = dataset.build_matrix(events, args.min_user, args.min_item)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dataset.save_matrix(args.out, m)
    return {"path": args.out, "n_users": m.n_users, "n_items": m.n_items,
            "n_interactions": m.nnz, "content_hash": m.content_hash()}


def cmd_synth(args):
    known = {f for f in synth.SynthConfig.__dataclass_fields__}
    values = {}
    for key, value in parse_overrides(args.overrides).items():
        if key not in known:
            raise ConfigError(key, "unknown synthetic-data parameter")
        default = getattr(synth.SynthConfig, key)
        try:
            values[key] = type(default)(value)
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None
    cfg = synth.SynthConfig(**values)
    ratings, items = synth.write(args.out, cfg)
    return {"ratings": str(ratings), "items": str(items)}


def cmd_run(args):
    cfg = load_config(args.config, _cli_overrides(args))
    report = experiment.run(cfg)
    return {"out_dir": cfg.out_dir, **report}


def cmd_sweep(args):
    base = load_config(args.config, _cli_overrides(args))
    grid = parse_grid(args.config, args.grid)
    name, k = _parse_select(args.select)
    spec = SweepSpec(grid, name, k)
    return {"out_dir": base.out_dir, **experiment.sweep(base, spec)}


def cmd_evaluate(args):
    result = experiment.evaluate_checkpoint(args.run_dir, parse_overrides(args.overrides), args.split)
    if args.out:
        Path(args.out).write_text(dumps(result), encoding="utf-8")
    return result


def cmd_export(args):
    return experiment.export(args.run_dir, args.out)


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "run": cmd_run, "sweep": cmd_sweep,
            "evaluate": cmd_evaluate, "export": cmd_export}


def _summary(result) -> str:
    if "test" in result and isinstance(result["test"], dict) and "recall" in result["test"]:
        t = result["test"]
        parts = [f"{result.get('method', '')} best_epoch={result.get('best_epoch')}"]
        for k, v in t["recall"].items():
            parts.append(f"recall@{k}={v:.4f}")
        for k, v in t["item_recall"].items():
            parts.append(f"item_recall@{k}={v:.4f}")
        for k, d in t["coverage"].items():
            for b, c in d.items():
                parts.append(f"coverage@{k}/b{b}={c['mean']:.1f}")
        parts.append(f"gini_ratio={t['gini_ratio']:.3f}")
        return "\n".join(parts)
    return "\n".join(f"{k}: {v}" for k, v in result.items() if not isinstance(v, dict))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    for handler in logging.getLogger().handlers:
        handler.setLevel(level)
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, EmptyDatasetError, SplitError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, DegenerateAdversaryError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PositError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.json:
        sys.stdout.write(dumps(result))
    else:
        print(_summary(result))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
