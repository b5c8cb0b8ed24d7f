"""Command line entry point: train, evaluate, extract, gradcheck, synth.

Exit status: 0 success, 1 validation or data error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import ValidationError, load_config, parse_value
from .data import ConfigError as DataConfigError
from .data import scan_dataset, synth_generate
from .engine import (
    NumericError,
    evaluate_model,
    extract_paths,
    gradcheck_report,
    load_checkpoint,
    load_split,
    train,
)
from .losses import LossError
from .model import ConfigError, DataError

log = logging.getLogger("partformer")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_LIMIT = 1e-4
_USER_ERRORS = (ValidationError, ConfigError, DataConfigError, DataError, LossError,
                ckpt.CheckpointError, FileNotFoundError)


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    return out


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")


def cmd_train(args, cfg) -> int:
    out_dir = args.out or cfg.run.output_dir
    res = train(cfg, out_dir=out_dir)
    summary = {"steps": res.steps, "final_loss": res.losses[-1] if res.losses else None,
               "best_mAP": res.best_map, "output_dir": str(out_dir)}
    if res.report is not None:
        summary["eval"] = res.report.to_dict()
    _emit(summary, None)
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    tr, step = load_checkpoint(args.ckpt, cfg)
    index = scan_dataset(cfg.run.data_root)
    query, gallery = load_split(index, "query"), load_split(index, "gallery")
    if not query.samples or not gallery.samples:
        raise FileNotFoundError(f"no query/gallery images under {cfg.run.data_root}")
    rep = evaluate_model(tr, query, gallery)
    _emit({"checkpoint": str(args.ckpt), "step": step, **rep.to_dict()}, args.out)
    return EXIT_OK


def cmd_extract(args, cfg) -> int:
    if not args.list or not args.out:
        raise ValidationError("extract needs --list and --out")
    tr, _ = load_checkpoint(args.ckpt, cfg)
    try:
        lines = Path(args.list).read_text().splitlines()
    except OSError as e:
        raise FileNotFoundError(f"cannot read image list {args.list}: {e}") from e
    paths = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    feats, ids, cams, failed = extract_paths(tr, paths)
    ckpt.save_features(args.out, feats, ids, cams, cfg.to_text())
    for msg in failed:
        print(f"skipped {msg}", file=sys.stderr)
    print(json.dumps({"written": int(len(ids)), "skipped": len(failed), "out": str(args.out)}))
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    errs = gradcheck_report(cfg, max_coords=args.coords)
    width = max(map(len, errs))
    for name, err in errs.items():
        print(f"{name:<{width}}  {err:.3e}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e} (limit {GRADCHECK_LIMIT:g})")
    return EXIT_OK if worst <= GRADCHECK_LIMIT else EXIT_NUMERIC


def cmd_synth(args, cfg) -> int:
    root = args.out or cfg.run.data_root
    idx = synth_generate(cfg.synth, root)
    counts = {s: len(idx.split(s)) for s in ("train", "query", "gallery")}
    print(json.dumps({"root": str(root), **counts}))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "extract": cmd_extract,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file (dotted keys, TOML syntax)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        if name in ("evaluate", "extract"):
            p.add_argument("--ckpt", required=True, help="checkpoint file")
        if name == "extract":
            p.add_argument("--list", help="text file with one image path per line")
        if name == "gradcheck":
            p.add_argument("--coords", type=int, default=6, help="coordinates probed per parameter")
        if name != "gradcheck":
            p.add_argument("--out", help="output file or directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args.set))
        return COMMANDS[args.command](args, cfg)
    except NumericError as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except _USER_ERRORS as e:
        log.error("%s", e)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
