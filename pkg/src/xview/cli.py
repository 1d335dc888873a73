"""Command-line entry point: generate, train, eval, gradcheck, ablate, version.

Exit codes: 0 success, 1 validation error (bad config, bad file), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .data import generate_dataset, load_dataset, save_dataset
from .io import FormatError, read_checkpoint, write_checkpoint, write_predictions

_log = logging.getLogger("xview")


def _config(args):
    return load_config(args.config, args.set)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def cmd_generate(args) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else (cfg.train.n_train if args.split == "train" else cfg.train.n_eval)
    pairs = generate_dataset(cfg.data, n, args.split)
    save_dataset(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _pairs(path: str | None, cfg, split: str):
    if path:
        return load_dataset(path)
    n = cfg.train.n_train if split == "train" else cfg.train.n_eval
    return generate_dataset(cfg.data, n, split)


def cmd_train(args) -> int:
    from .train import checkpoint_payload, restore, train

    cfg = _config(args)
    data = _pairs(args.data, cfg, "train")
    state = None
    if args.resume:
        tensors, chash, ctext = read_checkpoint(args.resume)
        state = restore(tensors, chash, ctext, cfg)
    steps = None if args.steps is None else args.steps
    if state is not None and steps is None:
        steps = max(0, cfg.train.steps - state.step)
    state = train(cfg, data, state, steps)
    write_checkpoint(args.out, *checkpoint_payload(state))
    last = state.history[-1].line() if state.history else "no steps run"
    print(f"step {state.step} {last}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .train import cosine_csv, cosine_probe, evaluate, restore

    tensors, chash, ctext = read_checkpoint(args.checkpoint)
    cfg = _config(args) if (args.config or args.set) else None
    state = restore(tensors, chash, ctext, cfg)
    model = state.model
    pairs = _pairs(args.data, model.cfg, "eval")
    report, records = evaluate(model, pairs)
    if args.predictions:
        write_predictions(args.predictions, records)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if args.cosine_csv:
        Path(args.cosine_csv).write_text(cosine_csv(cosine_probe(model, pairs)), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    worst = run_all(args.seeds)
    ok = True
    for name, err in worst.items():
        passed = err <= args.tol
        ok &= passed
        print(f"{name:20s} max_rel_error={err:.3e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 2


def cmd_ablate(args) -> int:
    from .train import ablate, ablation_csv

    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(name, seed, report):
        _log.info("%s seed=%d mean_auprc=%.4f avg_tiou=%s", name, seed, report.mean_auprc("error"), report.avg_tiou)

    rows = ablate(cfg, args.axis, seeds, progress)
    text = ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_version(args) -> int:
    print(f"xview {__version__}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xview", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and write a checkpoint")
    _add_config_args(p)
    p.add_argument("--data", help="dataset directory (default: generate in memory)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="run this many steps instead of train.steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: generate the eval split)")
    p.add_argument("--predictions")
    p.add_argument("--csv")
    p.add_argument("--cosine-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate a grid of variants")
    _add_config_args(p)
    p.add_argument("--axis", choices=("modules", "fusion", "k_ratio", "M", "input"), default="modules")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("version")
    p.set_defaults(func=cmd_version)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - top-level boundary
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
