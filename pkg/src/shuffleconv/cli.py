"""Command-line entry point: ``shuffleconv <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 at least one sweep row failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import tensor as T
from .data import DATA_DIR_ENV, SyntheticSpatialTask, gen_synthetic, save_dataset
from .experiments import (
    ConfigError, ExperimentConfig, check_writable, load_config, load_data, rows_to_csv, run_experiment,
)
from .model import Model, load_checkpoint, save_checkpoint
from .shuffle import parse_mechanism
from .train import SchemeMatrixCell, eval_seed_for, evaluate, train
from .zoo import SurgeryPlan, apply_surgery, percent_to_k

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3
SWEEP_KINDS = ("layer-sweep", "single-vs-multi", "patch-sweep", "aug-ablation", "param-table")

log = logging.getLogger("shuffleconv")


def _number_list(text: str, cast=float) -> list:
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON experiment config (flags override its values)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--jobs", type=int, help="parallel training processes")
    p.add_argument("--out", help="output path")
    p.add_argument("--mechanism", choices=["spatial", "patch", "channel", "gapfc"])
    p.add_argument("--percent", type=_number_list, metavar="LIST", help="e.g. 0,30,60,100")
    p.add_argument("--patch", type=lambda s: _number_list(s, int), metavar="LIST", help="e.g. 1,2,4")
    p.add_argument("--no-aug", action="store_true", help="disable flip/crop augmentation")
    p.add_argument("--eval-passes", type=int, metavar="R", help="average logits over R shuffled passes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="shuffleconv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one model and save a checkpoint")
    t.add_argument("--model", help="zoo model name")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint under a test scheme")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--test-scheme", default=None, help="none, spatial, channel or patch:N")

    s = sub.add_parser("sweep", parents=[common], help="run a sweep experiment and write CSV rows")
    s.add_argument("--kind", choices=SWEEP_KINDS)
    s.add_argument("--plot", action="store_true", help="also render a PNG next to the CSV")
    s.add_argument("--record-runtime", action="store_true", help="fill the runtime_s column")

    m = sub.add_parser("scheme-matrix", parents=[common], help="the seven train/test shuffle pairs")
    m.add_argument("--plot", action="store_true")
    m.add_argument("--record-runtime", action="store_true")

    sub.add_parser("params", parents=[common], help="parameter counts for every zoo model and GAP+FC point")

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset in CIFAR record layout")
    g.add_argument("--train-size", type=int, default=2000)
    g.add_argument("--test-size", type=int, default=1000)

    r = sub.add_parser("report", help="render figures for a results CSV")
    r.add_argument("csv", type=Path)
    r.add_argument("--out", type=Path, help="PNG path (default: next to the CSV)")
    return parser


def resolve_config(args, kind: str | None = None) -> ExperimentConfig:
    """File values first, then command-line flags on top."""
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    over = {"seed": args.seed, "jobs": args.jobs, "out": args.out, "eval_passes": args.eval_passes}
    if kind:
        over["kind"] = kind
    if args.no_aug:
        over["augment"] = False
    if args.percent is not None:
        over["percents"] = args.percent
        over["percent"] = args.percent[0] if args.percent else None
    if args.patch is not None:
        over["patches"] = args.patch
    if args.mechanism:
        mech = args.mechanism
        if mech == "patch":
            patches = args.patch or cfg.patches
            mech = f"patch:{patches[0]}"
        over["mechanism"] = mech
        over["mechanisms"] = [mech]
    if getattr(args, "record_runtime", False):
        over["record_runtime"] = True
    return cfg.with_overrides(**over)


def _finish(result, args) -> int:
    cfg = result.config
    if not cfg.out:
        sys.stdout.write(rows_to_csv(result.rows))
    else:
        print(f"wrote {len(result.rows)} rows to {cfg.out}", file=sys.stderr)
        if getattr(args, "plot", False):
            from .plotting import render_csv
            for path in render_csv(cfg.out):
                print(f"wrote {path}", file=sys.stderr)
    for p in result.problems:
        print(f"warning: {p}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_PARTIAL


def cmd_sweep(args) -> int:
    cfg = resolve_config(args, args.kind)
    if cfg.kind == "scheme-matrix":
        raise ConfigError("use the scheme-matrix subcommand for the train/test scheme matrix")
    return _finish(run_experiment(cfg), args)


def cmd_scheme_matrix(args) -> int:
    return _finish(run_experiment(resolve_config(args, "scheme-matrix")), args)


def cmd_params(args) -> int:
    cfg = resolve_config(args, "param-table")
    result = run_experiment(cfg)
    if cfg.out:
        print(f"wrote {len(result.rows)} rows to {cfg.out}", file=sys.stderr)
        return EXIT_OK
    print(f"{'model':<14}{'mechanism':<10}{'coordinate':<22}{'params':>14}")
    for row in result.rows:
        print(f"{row.model:<14}{row.mechanism:<10}{row.coordinate:<22}{row.params:>14,}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.model:
        cfg = cfg.with_overrides(model=args.model)
    optim = dict(cfg.optim)
    if args.epochs is not None:
        optim["epochs"] = args.epochs
    if args.lr is not None:
        optim["lr"] = args.lr
    cfg = cfg.with_overrides(optim=optim)
    out = Path(cfg.out or "model.npz")
    check_writable(out)
    # without a flag or a config file there is nothing to shuffle: train the plain baseline
    name, _ = parse_mechanism(cfg.mechanism) if (args.mechanism or args.config) else ("none", None)
    with T.default_dtype(cfg.dtype):
        spec = cfg.build_spec()
        k = percent_to_k(spec, cfg.percent)
        scheme = SchemeMatrixCell()
        if name == "gapfc":
            spec = apply_surgery(spec, SurgeryPlan("gapfc", k))
        elif name != "none":
            scheme = SchemeMatrixCell(cfg.mechanism, cfg.mechanism, k, share_skip=cfg.share_skip)
        train_data, test_data = load_data(cfg)
        model = Model(spec, seed=cfg.seed)
        report = train(model, train_data, cfg.optim_config(), scheme, cfg.seed, test_data,
                       augment=cfg.augment, passes=cfg.eval_passes)
    save_checkpoint(model, out)
    text = report.to_json()
    Path(str(out) + ".report.json").write_text(text + "\n")
    print(text)
    return EXIT_OK if report.status == "ok" else EXIT_PARTIAL


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint.exists():
        raise ConfigError(f"checkpoint {args.checkpoint} not found")
    model = load_checkpoint(args.checkpoint)
    scheme = args.test_scheme or (cfg.mechanism if args.mechanism else "none")
    parse_mechanism(scheme)
    k = percent_to_k(model.spec, cfg.percent)
    _, test_data = load_data(cfg)
    acc = evaluate(model, test_data, scheme, eval_seed_for(cfg.seed), cfg.eval_passes, k,
                   share_skip=cfg.share_skip)
    print(json.dumps({"checkpoint": str(args.checkpoint), "test_scheme": scheme, "k_last": k,
                      "passes": cfg.eval_passes, "top1": acc}))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out or os.environ.get(DATA_DIR_ENV) or "data")
    out.mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset
    if ds.get("kind") != "synthetic":
        raise ConfigError("gen-data needs a synthetic dataset section")
    task = SyntheticSpatialTask(**{**ds.get("task", {}), **({"seed": args.seed} if args.seed is not None else {})})
    for split, n in (("train", args.train_size), ("test", args.test_size)):
        path = out / f"{split}.bin"
        save_dataset(gen_synthetic(task, n, split), path, task)
        print(f"wrote {n} records to {path}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import render_csv
    if not args.csv.exists():
        raise ConfigError(f"{args.csv} not found")
    paths = render_csv(args.csv, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "scheme-matrix": cmd_scheme_matrix,
    "params": cmd_params,
    "gen-data": cmd_gen_data,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
