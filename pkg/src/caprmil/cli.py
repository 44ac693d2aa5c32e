"""Command-line entry point: ``caprmil {gen,train,eval,cost,heatmap}``.

Every failure prints exactly one line ``error:<kind>: <message>`` on stderr and
exits with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import contextlib
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load, save
from .data import SPLITS, open_split, preset, read_bag, split_indices, summarize, SyntheticBags, write_dataset
from .efficiency import bench_scaling, cost_report, derive_width_depth
from .errors import ConfigError, DataError, DimensionError
from .experiments import ablation_grid, parse_axis, run_ablation, subsample
from .heatmap import DEFAULT_TOP_K, export_heatmaps
from .metrics import evaluate
from .model import Aggregator, CaprmilConfig, init_model
from .numerics.rng import Rng
from .training import TrainConfig, train

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "dimension": 5, "io": 6, "runtime": 1}

MODEL_KEYS = {f.name for f in fields(CaprmilConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# -- config files ---------------------------------------------------------------------

def _coerce(key: str, raw: str, default):
    if isinstance(default, Aggregator):
        return Aggregator.parse(raw)
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """``key = value`` lines -> (model overrides, training overrides)."""
    defaults = {**{f.name: f.default for f in fields(TrainConfig)},
                **{f.name: f.default for f in fields(CaprmilConfig)}}
    model, training = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        target = model if key in MODEL_KEYS else training
        if key in target:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        target[key] = _coerce(key, value, defaults[key])
    return model, training


def _configs(args) -> tuple[CaprmilConfig, TrainConfig]:
    model, training = {}, {}
    if args.config:
        path = Path(args.config)
        model, training = parse_config(path.read_text(), str(path))
    if args.seed is not None:
        training["seed"] = args.seed
    if getattr(args, "aggregator", None):
        model["aggregator"] = args.aggregator
    return CaprmilConfig(**model), TrainConfig(**training)


def _seed(args) -> int:
    return args.seed if args.seed is not None else 0


# -- verbs --------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    overrides = {"seed": _seed(args)}
    for key, attr in (("n_bags", "n_bags"), ("witness_rate", "witness_rate"), ("d_in", "d_in"),
                      ("n_morphologies", "morphologies"), ("separation", "separation"),
                      ("noise", "noise"), ("composition_alpha", "alpha")):
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    if args.bag_size is not None:
        overrides["bag_size"] = tuple(args.bag_size)
    spec = preset(args.preset, **overrides)
    bags = SyntheticBags(spec)
    total = len(bags)
    if args.n_val + args.n_test >= total:
        raise ConfigError(f"n_val + n_test must leave training bags (total {total})")
    splits = split_indices(total, args.n_test, args.n_val, bags.labels, spec.seed)
    write_dataset(bags, args.out, splits)
    info = summarize(bags)
    print(f"wrote {total} bags to {args.out}")
    for name in SPLITS:
        print(f"split_{name}={len(splits[name])}")
    for key, value in info.items():
        print(f"{key}={value}")
    return 0


def _check_dims(config: CaprmilConfig, bags, what: str) -> None:
    d = bags[0].d
    if d != config.d_in:
        raise DimensionError(f"{what} expects d_in={config.d_in} but data bags have D={d}")


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    train_set = open_split(args.data, "train")
    val_set = open_split(args.data, "val")
    _check_dims(model_cfg, train_set, "model config")
    if args.ablate:
        axes = dict(parse_axis(a) for a in args.ablate)
        cells = subsample(ablation_grid(model_cfg, axes), args.ablate_sample, train_cfg.seed)
        test_split = "test" if args.eval_split is None else args.eval_split
        run_ablation(cells, train_set, val_set, open_split(args.data, test_split), train_cfg, args.out,
                     emit=lambda line: print(line, flush=True))
        return 0
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    state = init_model(model_cfg, Rng(train_cfg.seed).spawn("init"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log:
        best, history = train(state, train_set, val_set, train_cfg, log=log)
    save(best, out)
    last = history.records[-1]
    print(f"checkpoint={out} log={log_path} epochs={len(history.records)} best_epoch={history.best_epoch} "
          f"stopped_early={history.stopped_early} final_train_loss={last.train_loss:.6f}")
    return 0


def cmd_eval(args) -> int:
    state = load(args.checkpoint)
    bags = open_split(args.data, args.split)
    _check_dims(state.config, bags, f"checkpoint {args.checkpoint}")
    result = evaluate(state, bags)
    print(result.table())
    print(result.record())
    return 0


def _parse_sweep(text: str) -> list[int]:
    """``1000..16000`` (doubling) or an explicit ``1000,2000,4000`` list."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            if lo < 1 or hi < lo:
                raise ValueError
            out = [lo]
            while out[-1] * 2 <= hi:
                out.append(out[-1] * 2)
            return out
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad sweep {text!r}; use LO..HI or a comma list") from None


def cmd_cost(args) -> int:
    model_cfg, _ = _configs(args)
    if args.derive:
        d, t, log = derive_width_depth()
        print("\n".join(log))
        print(f"derived d_model={d} n_blocks={t}")
    if args.sweep:
        threads = args.threads if args.threads is not None else 1
        report = bench_scaling(model_cfg, _parse_sweep(args.sweep), args.repeats, threads, _seed(args))
    else:
        report = cost_report(model_cfg)
    print(report.table(args.n))
    if args.sweep:
        dump = report.csv()
        if args.csv:
            Path(args.csv).write_text(dump)
        else:
            print(dump, end="")
    return 0


def cmd_heatmap(args) -> int:
    state = load(args.checkpoint)
    bag = read_bag(args.bag)
    _check_dims(state.config, [bag], f"checkpoint {args.checkpoint}")
    result = export_heatmaps(state, bag, args.out, args.head, args.block, args.k)
    for path in result.paths:
        print(path)
    return 0


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="caprmil", description="Context-aware MIL on pre-extracted patch features.")
    p.add_argument("--version", action="version", version=f"caprmil {__version__}")
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("--config", default=None, help="key = value file of model/training fields")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--preset", default="hard", choices=["hard", "easy"])
    g.add_argument("--out", required=True)
    g.add_argument("--n-bags", type=int, help="bags per class")
    g.add_argument("--bag-size", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--witness-rate", type=float)
    g.add_argument("--d-in", type=int)
    g.add_argument("--morphologies", type=int)
    g.add_argument("--separation", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--alpha", type=float, help="Dirichlet concentration of bag composition")
    g.add_argument("--n-val", type=int, default=20)
    g.add_argument("--n-test", type=int, default=50)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (directory with --ablate)")
    t.add_argument("--log", help="epoch log path (default: checkpoint with .log suffix)")
    t.add_argument("--aggregator", choices=["mean", "attn", "gattn"])
    t.add_argument("--ablate", action="append", metavar="AXIS=V1,V2",
                   help="grid axis over clusters, heads or ratio; repeat for more axes")
    t.add_argument("--ablate-sample", type=int, metavar="K", help="train only K seeded grid cells")
    t.add_argument("--eval-split", choices=SPLITS, help="split scored per ablation cell (default test)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cost", help="parameter/FLOP counts and optional timing sweep")
    c.add_argument("--aggregator", choices=["mean", "attn", "gattn"])
    c.add_argument("--n", type=int, default=1000, help="bag size for the FLOP line")
    c.add_argument("--sweep", help="bag sizes to time, e.g. 1000..16000")
    c.add_argument("--repeats", type=int, default=3)
    c.add_argument("--csv", help="write the timing dump here instead of stdout")
    c.add_argument("--derive", action="store_true", help="log the width/depth derivation")
    c.set_defaults(func=cmd_cost)

    h = sub.add_parser("heatmap", help="export token assignment maps for one bag")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--bag", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--head", type=int, default=0)
    h.add_argument("--block", type=int, default=0)
    h.add_argument("-k", type=int, default=DEFAULT_TOP_K)
    h.set_defaults(func=cmd_heatmap)
    return p


def _kind(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, DimensionError):
        return "dimension"
    if isinstance(exc, DataError):
        return "data"
    if isinstance(exc, OSError):
        return "io"
    return "runtime"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        limit = threadpool_limits(limits=args.threads) if args.threads is not None else contextlib.nullcontext()
        with limit:
            return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        kind = _kind(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error:{kind}: {message}", file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
