"""``gdiffuser`` command line: gen, train, eval, dump, selftest.

Exit codes: 0 ok, 2 usage or config error, 3 runtime failure (NaN), 4 selftest failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import selftest
from .autograd import checkpoint
from .autograd.tensor import ShapeError, no_grad
from .graph import GraphError, read_jsonl, row_normalize, write_jsonl
from .grid import RNG_NAME, DatasetSpec, make_dataset
from .train import TrainConfig, TrainingDiverged, build_model, evaluate, train
from .virtual_edges import raw_walk_stack

log = logging.getLogger("gdiffuser")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 2, 3, 4
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


def _globals(parser, suppress=False):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=d, metavar="K=V",
                        help="config override, applied after --config (repeatable)")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--seed", type=int, default=d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdiffuser", description="Graph Diffuser training and tooling")
    _globals(p)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a grid histogram-counting dataset")
    _globals(g, True)
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", help="comma-separated column counts, one drawn per grid")
    g.add_argument("--colors", type=int)
    g.add_argument("--n", type=int, help="number of grids")
    g.add_argument("--split", help="train,val,test fractions")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    _globals(t, True)
    t.add_argument("--data", required=True, help="dataset directory from `gen`")
    t.add_argument("--baseline", choices=["vanilla"], help="train the plain transformer baseline")

    e = sub.add_parser("eval", help="evaluate a run's best checkpoint")
    _globals(e, True)
    e.add_argument("run", help="run directory from `train`")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=SPLITS)

    d = sub.add_parser("dump", help="export attention, virtual edges or positional encodings as CSV")
    _globals(d, True)
    d.add_argument("what", choices=["attention", "virtual_edges", "pe"])
    d.add_argument("--graph", required=True, help="JSONL file holding the graph")
    d.add_argument("--index", type=int, default=0, help="line of --graph to use")
    d.add_argument("--run", help="run directory; without it a fresh model is built from the config")
    d.add_argument("--raw", action="store_true", help="virtual_edges: dump the walk stack before the edge FFN")

    s = sub.add_parser("selftest", help="gradient, oracle and invariant checks")
    _globals(s, True)
    s.add_argument("--only", action="append", help="run only the named check (repeatable)")
    return p


def _overrides(args):
    try:
        return [cfgmod.parse_override(o) for o in (args.overrides or [])]
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- gen ----------------------------------------------------------------------

GEN_KEYS = {"rows": int, "cols": str, "colors": int, "n": int, "split": str, "seed": int}


def _gen_settings(args) -> dict:
    vals = {"rows": 6, "cols": "6", "colors": 8, "n": 2000, "split": "0.8,0.1,0.1", "seed": 0}
    pairs = []
    if args.config:
        pairs += cfgmod.parse_lines(Path(args.config).read_text(encoding="utf-8"))
    for k in GEN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            pairs.append((k, str(v)))
    pairs += _overrides(args)
    for k, v in pairs:
        if k not in GEN_KEYS:
            raise cfgmod.ConfigError(f"unknown gen key {k!r}; expected one of {sorted(GEN_KEYS)}")
        try:
            vals[k] = GEN_KEYS[k](v)
        except ValueError:
            raise cfgmod.ConfigError(f"{k}: cannot parse {v!r}") from None
    return vals


def cmd_gen(args) -> int:
    v = _gen_settings(args)
    try:
        spec = DatasetSpec(num_graphs=v["n"], rows=v["rows"], col_choices=[int(c) for c in v["cols"].split(",")],
                           num_colors=v["colors"], split=[float(f) for f in v["split"].split(",")], seed=v["seed"])
    except ValueError as exc:
        raise cfgmod.ConfigError(f"invalid dataset spec: {exc}") from None
    out = Path(args.out or "data")
    ds = make_dataset(spec)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        write_jsonl(out / f"{split}.jsonl", ds.graphs(split))
    manifest = {
        "format_version": FORMAT_VERSION,
        "rng": RNG_NAME,
        "seed": spec.seed,
        "spec": asdict(spec),
        "num_classes": spec.num_classes,
        "num_features": spec.num_colors,
        "counts": {s: len(getattr(ds, s)) for s in SPLITS},
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps(manifest["counts"]))
    return EXIT_OK


# -- train / eval -------------------------------------------------------------

class _Splits:
    def __init__(self, train, val, test):
        self.train, self.val, self.test = train, val, test


def load_dataset(path) -> tuple:
    """``(splits, manifest)`` from a ``gen`` directory; raises FileNotFoundError."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {str(root)!r} not found")
    parts = {}
    for s in SPLITS:
        f = root / f"{s}.jsonl"
        if not f.exists():
            raise FileNotFoundError(f"missing {f}")
        parts[s] = read_jsonl(f)
    mpath = root / "manifest.json"
    manifest = json.loads(mpath.read_text(encoding="utf-8")) if mpath.exists() else {}
    return _Splits(parts["train"], parts["val"], parts["test"]), manifest


def _infer_shapes(pairs, graphs, manifest):
    """Fill model.in_dim / model.num_classes from the data unless set explicitly."""
    keys = {k for k, _ in pairs}
    extra = []
    if "model.in_dim" not in keys:
        extra.append(("model.in_dim", str(graphs[0].num_features)))
    if "model.num_classes" not in keys:
        nc = manifest.get("num_classes")
        labelled = [g.labels for g in graphs if g.labels is not None and g.labels.size]
        if nc is None and labelled:
            nc = 1 + max(int(y.max()) for y in labelled)
        if nc is not None:
            extra.append(("model.num_classes", str(nc)))
    if "model.edge_dim" not in keys and graphs[0].edge_features is not None:
        extra.append(("model.edge_dim", str(graphs[0].num_edge_features)))
    return extra


def resolve_train_config(args, graphs=None, manifest=None) -> TrainConfig:
    """Defaults, then --config, then --set, then --baseline/--seed; shapes
    not set explicitly are inferred from ``graphs``."""
    pairs = []
    if args.config:
        pairs += cfgmod.parse_lines(Path(args.config).read_text(encoding="utf-8"))
    pairs += _overrides(args)
    if getattr(args, "baseline", None) == "vanilla":
        pairs.append(("baseline_mode", "vanilla_transformer"))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    if graphs:
        pairs = _infer_shapes(pairs, graphs, manifest or {}) + pairs
    return cfgmod.apply_overrides(TrainConfig(), pairs)


def run_dir_name(cfg: TrainConfig) -> str:
    return f"{cfgmod.config_hash(cfg)}-s{cfg.seed}"


def cmd_train(args) -> int:
    splits, manifest = load_dataset(args.data)
    cfg = resolve_train_config(args, splits.train + splits.val + splits.test, manifest)
    run = Path(args.out or "runs") / run_dir_name(cfg)

    def progress(epoch, rep):
        log.info("epoch %d loss %.5f val_acc %s", epoch, rep.train_loss[-1], rep.val_acc[-1])

    report, model = train(cfg, splits, progress=progress)
    run.mkdir(parents=True, exist_ok=True)
    _write(run / "config.txt", cfgmod.dumps(cfg))
    _write(run / "metrics.csv", report.metrics_csv())
    if model is not None:
        checkpoint.save(run / "best.ckpt", model.params.state_dict())
    _write(run / "report.json", report.to_json() + "\n")
    print(json.dumps({"run": str(run), "test_acc": report.test_acc, "best_epoch": report.best_epoch}))
    return EXIT_OK


def load_run(run):
    """``(config, model)`` for a run directory written by ``train``."""
    run = Path(run)
    if not (run / "config.txt").exists() or not (run / "best.ckpt").exists():
        raise FileNotFoundError(f"{run} is not a run directory (needs config.txt and best.ckpt)")
    cfg = cfgmod.loads((run / "config.txt").read_text(encoding="utf-8"))
    model = build_model(cfg)
    model.params.load_state_dict(checkpoint.load(run / "best.ckpt"))
    return cfg, model


def cmd_eval(args) -> int:
    _, model = load_run(args.run)
    splits, _ = load_dataset(args.data)
    acc, loss = evaluate(model, getattr(splits, args.split))
    result = {"split": args.split, "accuracy": acc, "loss": loss}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        _write(Path(args.out) / "eval.json", text + "\n")
    print(text)
    return EXIT_OK


# -- dump ---------------------------------------------------------------------

def _csv(path: Path, header: str, rows):
    lines = [header]
    lines += [",".join(repr(v) if isinstance(v, float) else str(v) for v in r) for r in rows]
    _write(path, "\n".join(lines) + "\n")


def _dense_rows(arr: np.ndarray):
    """Yield ``(*index, value)`` over every entry of ``arr`` in C order."""
    for idx in np.ndindex(arr.shape):
        yield (*idx, float(arr[idx]))


def cmd_dump(args) -> int:
    graphs = read_jsonl(args.graph)
    if not 0 <= args.index < len(graphs):
        raise UsageError(f"--index {args.index} out of range for {len(graphs)} graphs")
    g = graphs[args.index]
    if args.run:
        cfg, model = load_run(args.run)
    else:
        cfg = resolve_train_config(args, [g])
        model = build_model(cfg)
    out = Path(args.out or "dump")
    n = g.num_nodes
    if args.what == "virtual_edges" and args.raw:
        E = raw_walk_stack(row_normalize(g.adjacency()), cfg.model.k)
        _csv(out / "virtual_edges_raw.csv", "i,j,channel,value", _dense_rows(E))
        return EXIT_OK
    if args.what != "attention" and not model.is_diffuser:
        raise UsageError(f"{args.what} is undefined for the vanilla baseline (use --raw for the walk stack)")
    with no_grad():
        tr = model.trace([g], training=False, keep=True)
    if args.what == "attention":
        for l, att in enumerate(tr.attention):
            for h in range(att.shape[1]):
                _csv(out / f"attention_l{l}_h{h}.csv", "i,j,weight", _dense_rows(att[0, h, :n, :n]))
    elif args.what == "virtual_edges":
        _csv(out / "virtual_edges.csv", "i,j,channel,value", _dense_rows(tr.virtual_edges[0, :n, :n]))
    else:
        _csv(out / "pe.csv", "node,dim,value", _dense_rows(tr.positional_encoding[0, :n]))
    return EXIT_OK


# -- selftest -----------------------------------------------------------------

def cmd_selftest(args) -> int:
    results = selftest.run(args.only)
    text = selftest.format_report(results)
    sys.stdout.write(text)
    if args.out:
        _write(Path(args.out) / "selftest.txt", text)
    if not results or not all(ok for _, ok, _ in results):
        return EXIT_SELFTEST
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "dump": cmd_dump, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, cfgmod.ConfigError, GraphError, ShapeError, checkpoint.CheckpointError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
