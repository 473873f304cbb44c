"""Command-line entry point.

Subcommands: gen-data, stats, paste-demo, train, eval, ablate, sweep,
report.  Exit codes: 0 success, 1 usage error, 2 data or config error,
3 numerical failure.  Heavy imports happen after argument parsing so that
--threads can pin the BLAS thread pools through the environment first.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, DataError, NumericalError, UsageError

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; remap onto our usage code
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker thread budget (default 1)")

    parser = _Parser(prog="dspseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="write the paired toy dataset to a directory")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-source", type=int, default=400)
    p.add_argument("--n-target", type=int, default=400)
    p.add_argument("--n-eval", type=int, default=120)

    p = sub.add_parser("stats", parents=[common], help="print source class frequencies and the tail set")
    p.add_argument("--data", default=None, help="dataset directory (default: built-in toy data)")
    p.add_argument("--seed", type=int, default=0, help="seed for built-in data")
    p.add_argument("--K", type=int, default=3, help="long-tail class count")

    p = sub.add_parser("paste-demo", parents=[common], help="write one paste composition as images")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=0.8)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--K", type=int, default=3)

    for name, needs_resume in (("train", True), ("eval", False)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--config", default=None, help="JSON config file (defaults otherwise)")
        p.add_argument("--data", default=None)
        p.add_argument("--out", required=(name == "train"), default=None)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--mode", default=None, help="override the config mode")
        p.add_argument("--iters", type=int, default=None, help="override the config iteration count")
        if needs_resume:
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
        else:
            p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
            p.add_argument("--params", choices=("teacher", "student"), default="teacher")

    p = sub.add_parser("ablate", parents=[common], help="train every (mode, seed) and summarize")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default="source_only,mt,single_paste,dsp_full")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--fresh", action="store_true", help="ignore existing run directories")

    p = sub.add_parser("sweep", parents=[common], help="sweep beta or k and summarize")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--param", choices=("beta", "k"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--fresh", action="store_true")

    p = sub.add_parser("report", parents=[common], help="render figures for a finished run directory")
    p.add_argument("--out", required=True, help="run directory holding loss.csv / miou.csv")

    return parser


def _load_datasets(data_dir, seed: int):
    from .domains import default_datasets, read_dataset, split_items

    if data_dir is None:
        return default_datasets(seed=seed)
    items = read_dataset(data_dir)
    return (
        split_items(items, "source"),
        split_items(items, "target_train"),
        split_items(items, "target_eval"),
    )


def _load_config(args):
    from .trainer import load_config, RunConfig

    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    if getattr(args, "iters", None) is not None:
        cfg.iterations = args.iters
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    from .domains import default_datasets, write_dataset

    source, target_train, target_eval = default_datasets(
        seed=args.seed, n_source=args.n_source, n_target=args.n_target, n_eval=args.n_eval
    )
    write_dataset(source + target_train + target_eval, args.out)
    print(f"wrote {len(source)} source, {len(target_train)} target_train, "
          f"{len(target_eval)} target_eval items to {args.out}")
    return 0


def _cmd_stats(args) -> int:
    from .sampling import build_index, compute_stats, stats_table

    source, _, _ = _load_datasets(args.data, args.seed)
    stats = compute_stats([it.label for it in source])
    index = build_index(stats, args.K)
    print(stats_table(stats, index))
    return 0


def _cmd_paste_demo(args) -> int:
    from pathlib import Path

    import numpy as np
    from matplotlib import image as mpimg

    from .paste import build_mask, mix
    from .sampling import build_index, compute_stats, draw_iteration
    from .trainer import STREAM_SAMPLE, stream_rng

    source, target_train, _ = _load_datasets(args.data, 0)
    stats = compute_stats([it.label for it in source])
    index = build_index(stats, args.K)
    rng = stream_rng(args.seed, STREAM_SAMPLE, 0, 0, 2)
    sample = draw_iteration(index, source, args.k, rng)
    mask, comp = build_mask(sample, args.beta)

    rng_pair = stream_rng(args.seed, STREAM_SAMPLE, 0, 0, 0)
    x_s = source[int(rng_pair.integers(len(source)))]
    x_t = target_train[int(rng_pair.integers(len(target_train)))]
    mixed = mix(x_s.image, x_t.image, mask, comp, x_s.label, np.zeros(mask.m.shape, dtype=np.uint8))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mpimg.imsave(out / "composite.png", np.clip(comp.image, 0.0, 1.0))
    rendered = np.zeros(mask.m.shape, dtype=np.uint8)
    rendered[mask.m > 0.0] = 255
    mpimg.imsave(out / "mask.png", rendered, vmin=0, vmax=255, cmap="gray")
    mpimg.imsave(out / "x_ps.png", np.clip(mixed.x_ps, 0.0, 1.0))
    mpimg.imsave(out / "x_pt.png", np.clip(mixed.x_pt, 0.0, 1.0))
    print(f"wrote composite.png, mask.png, x_ps.png, x_pt.png to {out}")
    return 0


def _cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args)
    source, target_train, target_eval = _load_datasets(args.data, seed=0)
    result = train(cfg, source, target_train, target_eval, args.out, resume=args.resume)
    print(f"mode {cfg.mode} seed {cfg.seed}: miou {result.report.miou:.4f} (files in {args.out})")
    return 0


def _cmd_eval(args) -> int:
    from . import metrics, model
    from .tensor import Tensor

    cfg = _load_config(args)
    _, _, target_eval = _load_datasets(args.data, seed=0)
    class_count, feature_width, entries = model.load_checkpoint(args.checkpoint)
    net = model.SegNet(class_count=class_count, feature_width=feature_width)
    prefix = args.params + "/"
    params = {k[len(prefix):]: Tensor(v) for k, v in entries.items() if k.startswith(prefix)}
    if not params:
        raise DataError(f"checkpoint {args.checkpoint} has no {args.params} parameters")
    report = metrics.evaluate(net, params, target_eval, cfg)
    print(metrics.format_report(report), end="")
    if args.out:
        metrics.write_report(report, args.out)
    return 0


def _parse_list(text: str, cast):
    try:
        return [cast(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list value: {exc}") from exc


def _cmd_ablate(args) -> int:
    from . import metrics

    cfg = _load_config(args)
    modes = _parse_list(args.modes, str)
    seeds = _parse_list(args.seeds, int)
    source, target_train, target_eval = _load_datasets(args.data, seed=0)
    summaries = metrics.ablate(
        cfg, modes, seeds, source, target_train, target_eval, args.out, reuse=not args.fresh
    )
    for mode in modes:
        print(f"{mode:>14}: median miou {metrics.median_miou(summaries, mode=mode):.4f}")
    print(f"table in {args.out}/ablation.csv, figure in {args.out}/ablation.svg")
    return 0


def _cmd_sweep(args) -> int:
    from . import metrics

    cfg = _load_config(args)
    cast = float if args.param == "beta" else int
    values = _parse_list(args.values, cast)
    seeds = _parse_list(args.seeds, int)
    source, target_train, target_eval = _load_datasets(args.data, seed=0)
    summaries = metrics.sweep(
        cfg, args.param, values, seeds, source, target_train, target_eval, args.out,
        reuse=not args.fresh,
    )
    for value in values:
        print(f"{args.param}={value}: median miou {metrics.median_miou(summaries, value=value):.4f}")
    print(f"table in {args.out}/sweep_{args.param}.csv, figure in {args.out}/sweep_{args.param}.svg")
    return 0


def _cmd_report(args) -> int:
    from . import metrics

    written = metrics.render_run(args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "stats": _cmd_stats,
    "paste-demo": _cmd_paste_demo,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        for var in _THREAD_ENV_VARS:
            os.environ.setdefault(var, str(args.threads))
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
