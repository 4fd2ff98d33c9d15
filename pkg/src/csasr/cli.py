"""Command-line entry point: ``csasr <stage> --config FILE``."""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import load_config
from .errors import CsasrError, FormatError
from .pipeline import STAGES, run_pipeline

COMMANDS = {
    "prepare": ["prepare"], "bpe-train": ["bpe"], "lm-train": ["lm"], "pretrain": ["pretrain"],
    "finetune": ["finetune"], "decode": ["decode"], "score": ["score"], "run": list(STAGES),
}


def build_parser():
    p = argparse.ArgumentParser(prog="csasr", description="Code-switching ASR experiment runner.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common],
                            help=f"run the {name} stage" if name != "run" else "run every stage")
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--stage-dir", type=Path, help="experiment directory (default exp/<name>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="redo stages even if complete")
        if name == "run":
            sp.add_argument("--stages", default=",".join(STAGES))
    toy = sub.add_parser("toy-data", parents=[common],
                         help="write the synthetic toy corpus and its config")
    toy.add_argument("--stage-dir", type=Path, required=True, help="output directory")
    toy.add_argument("--seed", type=int, default=7)
    toy.add_argument("--size", type=int, default=32)
    toy.add_argument("--dev-size", type=int, default=16)
    toy.add_argument("--force", action="store_true")
    return p


def _error_record(exc, command):
    rec = {"error": type(exc).__name__, "message": str(exc), "command": command}
    for attr in ("offset", "unit", "step", "batch_id", "dim"):
        if hasattr(exc, attr):
            rec[attr] = getattr(exc, attr)
    return json.dumps(rec, ensure_ascii=False, default=str)


def _toy(args):
    from .toy import make_toy_dataset, write_toy_config

    out = args.stage_dir
    if out.exists() and any(out.iterdir()) and not args.force:
        if (out / "toy.conf").exists():
            print(f"toy data already present in {out}")
            return 0
    ms = make_toy_dataset(out, args.seed, args.size, args.dev_size)
    conf = write_toy_config(out, seed=args.seed)
    for name, m in ms.items():
        print(f"{name}: {m.summary()}")
    print(f"config: {conf}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "toy-data":
            return _toy(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        cfg.validate()
        stages = COMMANDS[args.command]
        if args.command == "run":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        status = run_pipeline(cfg, stages, args.stage_dir, args.force)
        for stage, state in status.items():
            print(f"{stage}\t{state}")
        return 0
    except (CsasrError, OSError) as exc:
        print(_error_record(exc, args.command), file=sys.stderr)
        return 2 if isinstance(exc, (FormatError,)) else 1


if __name__ == "__main__":
    sys.exit(main())
