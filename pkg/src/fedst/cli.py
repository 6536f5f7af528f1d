"""Command line entry point: ``fedst gen|run|eval|ablate``.

Exit codes: 0 ok, 2 config error, 3 protocol error, 4 data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as X
from .config import load_config
from .errors import ConfigError, DataError, ProtocolError

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("fedst")


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    paths = X.generate(cfg, force=args.force)
    for name, path in paths.items():
        print(f"{name.lstrip('@'):>8}  {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg.train.workers = args.workers
        cfg.validate()
    summary = X.execute(cfg, args.method, force=args.force)
    print(X.format_table([summary.row()]))
    print(f"run directory: {summary.directory}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        name = "global.npz" if args.global_model else f"site_{args.site}.npz"
        ckpt = ckpt / "checkpoints" / name
    report = X.eval_checkpoint(ckpt, args.dataset, split=args.split, indicator_text=args.text)
    rows = []
    for site, per_class in report.sites.items():
        for cls, s in per_class.items():
            rows.append({"site": site, "class": cls, "dice": s.dice, "iou": s.iou,
                         "hd95": s.hd95, "assd": s.assd})
        rows.append({"site": site, "class": "mean", "dice": report.site_mean(site, "dice"),
                     "iou": report.site_mean(site, "iou"), "hd95": report.site_mean(site, "hd95"),
                     "assd": report.site_mean(site, "assd")})
    print(X.format_table(rows))
    if args.csv:
        from .metrics import write_csv
        write_csv(args.csv, report.rows(str(ckpt)))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    toggles = args.toggle or list(X.TOGGLES)
    summaries = X.ablate(cfg, toggles, force=args.force)
    rows = [s.row() for s in summaries]
    out = X.write_table(cfg.output_dir / cfg.run_name / "ablation.csv", rows)
    print(X.format_table(rows))
    print(f"table: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedst", description="Personalized federated video segmentation simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log round progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate site, synthetic and out-of-fed dataset files")
    g.add_argument("config")
    g.add_argument("--force", action="store_true", help="overwrite existing dataset files")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="train one method and write a run directory")
    r.add_argument("config")
    r.add_argument("--method", choices=X.METHODS, default="fedst")
    r.add_argument("--workers", type=int, default=None, help="site threads (default from config)")
    r.add_argument("--force", action="store_true", help="replace an existing run directory")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    e.add_argument("checkpoint", help="a .npz checkpoint or a run directory")
    e.add_argument("dataset", help="a .fstd dataset file")
    which = e.add_mutually_exclusive_group(required=True)
    which.add_argument("--global", dest="global_model", action="store_true",
                       help="use the averaged global model")
    which.add_argument("--site", help="use this site's personalized model")
    e.add_argument("--split", choices=("auto", "test", "all"), default="auto")
    e.add_argument("--text", default=None, help="site description for the indicator of a global model")
    e.add_argument("--csv", default=None, help="also write the report as CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="full model against single components switched off")
    a.add_argument("config")
    a.add_argument("--toggle", action="append", choices=X.TOGGLES,
                   help="component to switch off; repeat for several (default: all)")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
