"""Command-line entry point: ``marshnet <subcommand> [options]``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.  Progress
is logged to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, load as load_config

CLASS_NAMES = ("I", "IIIa", "IIIb", "IIIc")
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class JsonLog:
    def __init__(self, command: str, stream=None):
        self.command = command
        self.stream = stream if stream is not None else sys.stderr

    def __call__(self, event: str, **fields) -> None:
        rec = {"ts": round(time.time(), 3), "cmd": self.command, "event": event, **fields}
        self.stream.write(json.dumps(rec, default=str, sort_keys=True) + "\n")
        self.stream.flush()


def _probability(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marshnet", description="Desk-scale biopsy severity pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    sub = p.add_subparsers(dest="command", metavar="<command>")

    def add(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", type=Path, help="key = value configuration file")
        sp.add_argument("--seed", type=int, help="seed for every random stream (default 0)")
        return sp

    sp = add("synth", "render a balanced synthetic slide corpus")
    sp.add_argument("--per-class", type=int, required=True)
    sp.add_argument("--size", type=int, required=True, help="slide width in pixels")
    sp.add_argument("--height", type=int, help="slide height (default: same as --size)")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("patch", "cut slides into overlapping patches")
    sp.add_argument("--input", type=Path, nargs="*", default=[], help="slide image(s)")
    sp.add_argument("--corpus", type=Path, help="corpus.csv listing slides and labels")
    sp.add_argument("--label", choices=CLASS_NAMES, help="label for --input slides")
    sp.add_argument("--size", type=int, dest="patch_size")
    sp.add_argument("--overlap", type=_probability)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("ae-train", "train the filtering autoencoder")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--epochs", type=int, dest="ae_epochs")
    sp.add_argument("--embed-dim", type=int)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("filter", "mark useful patches via embeddings and 2-means")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("stain-fit", "fit a target stain profile from a reference image")
    sp.add_argument("--ref", type=Path, required=True)
    sp.add_argument("--lambda", type=float, dest="stain_lambda")
    sp.add_argument("--beta", type=float, dest="stain_beta")
    sp.add_argument("--iters", type=int, dest="stain_iters")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("stain-normalize", "map images onto a target stain profile")
    sp.add_argument("--profile", type=Path, required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", type=Path, dest="in_dir", help="directory of PNGs")
    src.add_argument("--manifest", type=Path, help="filtered manifest; kept patches only")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("train", "train the patch classifier")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--history", type=Path, help="default: history.csv beside --out")

    sp = add("predict", "patch class probabilities")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("infer-slide", "aggregate patch probabilities into slide labels")
    sp.add_argument("--probs", type=Path, required=True)
    sp.add_argument("--labels", type=Path, help="manifest or corpus CSV with true labels")
    sp.add_argument("--out", type=Path, default=Path("slides.json"))

    sp = add("evaluate", "patch metrics with 95%% intervals, ROC/AUC, slide accuracy")
    sp.add_argument("--probs", type=Path, required=True)
    sp.add_argument("--labels", type=Path, required=True, help="manifest with patch labels")
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--no-plot", action="store_true")
    sp.add_argument("--precision-ci", choices=("predicted", "support"), default="predicted",
                    help="n used for the precision interval")

    sp = add("gradcam", "class heatmap overlay for one patch")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--patch", type=Path, required=True)
    sp.add_argument("--class", dest="target", choices=CLASS_NAMES, required=True)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--out", type=Path, required=True)
    return p


_CONFIG_KEYS = ("seed", "patch_size", "overlap", "ae_epochs", "embed_dim", "stain_lambda", "stain_beta",
                "stain_iters", "epochs", "batch_size", "lr")


def _limit_threads(n: int) -> None:
    # Only effective before numpy loads its BLAS, which the console entry
    # point guarantees by importing the numeric modules lazily.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _run(args: argparse.Namespace, cfg, log: JsonLog) -> None:
    from . import commands as c

    cmd = args.command
    if cmd == "synth":
        if args.per_class < 1 or args.size < 1 or (args.height is not None and args.height < 1):
            raise ConfigError("--per-class, --size and --height must be >= 1")
        c.cmd_synth(cfg, args.per_class, args.size, args.height, args.out, log)
    elif cmd == "patch":
        c.cmd_patch(cfg, args.input, args.corpus, args.label, args.out, log)
    elif cmd == "ae-train":
        c.cmd_ae_train(cfg, args.manifest, args.out, log)
    elif cmd == "filter":
        c.cmd_filter(cfg, args.manifest, args.model, args.out, log)
    elif cmd == "stain-fit":
        c.cmd_stain_fit(cfg, args.ref, args.out, log)
    elif cmd == "stain-normalize":
        c.cmd_stain_normalize(cfg, args.profile, args.in_dir, args.manifest, args.out, log)
    elif cmd == "train":
        c.cmd_train(cfg, args.manifest, args.out, args.history, log)
    elif cmd == "predict":
        c.cmd_predict(cfg, args.model, args.manifest, args.out, log)
    elif cmd == "infer-slide":
        c.cmd_infer_slide(cfg, args.probs, args.labels, args.out, log)
    elif cmd == "evaluate":
        c.cmd_evaluate(cfg, args.probs, args.labels, args.out, not args.no_plot, args.precision_ci, log)
    elif cmd == "gradcam":
        if not 0.0 <= args.alpha <= 1.0:
            raise ConfigError("--alpha must lie in [0, 1]")
        c.cmd_gradcam(cfg, args.model, args.patch, args.target, args.out, args.alpha, log)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    log = JsonLog(args.command)
    if args.threads is not None:
        if args.threads < 1:
            parser.print_usage(sys.stderr)
            sys.stderr.write("marshnet: error: --threads must be >= 1\n")
            return EXIT_USAGE
        _limit_threads(args.threads)
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    try:
        cfg = load_config(args.config, overrides)
        log("config.seed", seed=cfg.seed, explicit=args.seed is not None or args.config is not None)
        _run(args, cfg, log)
    except ConfigError as exc:
        log("error", kind="usage", message=str(exc))
        sys.stderr.write(f"marshnet {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError) as exc:
        message = str(exc) if not isinstance(exc, KeyError) else f"missing field {exc}"
        log("error", kind=type(exc).__name__, message=message)
        sys.stderr.write(f"marshnet {args.command}: {message}\n")
        return EXIT_RUNTIME
    return EXIT_OK


def console() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console()
