"""Command-line entry point: ``qres <subcommand> ...``.

Exit codes: 0 success, 1 usage or contract error, 2 malformed file or
stream, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from . import codec, metrics
from .container import CodedImage
from .data import SyntheticDataset
from .errors import ContractError, FormatError, ShapeError, TrainingDivergence
from .fileutil import atomic_write_bytes, atomic_write_text
from .imageio import read_image, write_image
from .model import ModelConfig, QResVAE
from .train import (
    RD_HEADER,
    TrainConfig,
    evaluate,
    finetune_lossless,
    rate_distribution,
    train,
    write_rate_csv,
    write_rd_csv,
)

JSON_SCHEMA_VERSION = 1
IMAGE_EXTENSIONS = (".ppm", ".png")
PRESETS = {"small": ModelConfig.small, "tiny": ModelConfig.tiny, "large": ModelConfig.large}

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _list_images(directory: str) -> List[str]:
    if not os.path.isdir(directory):
        raise UsageError(f"{directory} is not a directory")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS))
    if not names:
        raise UsageError(f"no .ppm/.png images in {directory}")
    return [os.path.join(directory, n) for n in names]


def _images_for(args) -> tuple:
    if args.dir:
        paths = _list_images(args.dir)
        return [read_image(p) for p in paths], [os.path.basename(p) for p in paths]
    ds = SyntheticDataset(args.kind, args.size, args.count, _seed(args))
    return ds.images(), [f"synthetic_{i:04d}" for i in range(len(ds))]


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


# -- subcommands ----------------------------------------------------------------

def cmd_train(args) -> dict:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {"lmbda": args.lmbda, "steps": args.steps, "seed": args.seed,
                 "batch_size": args.batch_size, "learning_rate": args.lr}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    if args.lossless_from:
        result = finetune_lossless(QResVAE.load(args.lossless_from), cfg, out_dir=args.out)
    else:
        result = train(cfg, model_config=PRESETS[args.preset](), out_dir=args.out)
    atomic_write_text(os.path.join(args.out, "train_config.json"), cfg.to_json() + "\n")
    return {"out": args.out, "steps": cfg.steps, "lambda": cfg.lmbda,
            "initial_loss": result.initial_loss, "final_loss": result.final_loss,
            "model_id": result.model.model_id()}


def _compress_one(model: QResVAE, src: str, dst: str, lossless: bool) -> dict:
    img = read_image(src)
    if lossless:
        coded = codec.compress_lossless(img, model, threads=1)
    else:
        coded = codec.compress(img, model, lambda_code=0, threads=1)
    data = coded.to_bytes()
    atomic_write_bytes(dst, data)
    return {"in": src, "out": dst, "bytes": len(data), "bpp": coded.bpp(),
            "width": coded.width, "height": coded.height}


def _compress(args, lossless: bool) -> dict:
    model = QResVAE.load(args.model)
    if args.dir:
        if not args.out_dir:
            raise UsageError("--dir needs --out-dir")
        os.makedirs(args.out_dir, exist_ok=True)
        srcs = _list_images(args.dir)
        dsts = [os.path.join(args.out_dir, os.path.splitext(os.path.basename(s))[0] + ".qres") for s in srcs]
        with ThreadPoolExecutor(max_workers=codec.resolve_threads(args.jobs)) as ex:
            files = list(ex.map(lambda p: _compress_one(model, *p, lossless), zip(srcs, dsts)))
        return {"files": files}
    if not (args.input and args.out):
        raise UsageError("need --in and --out (or --dir and --out-dir)")
    return _compress_one(model, args.input, args.out, lossless)


def cmd_compress(args) -> dict:
    return _compress(args, lossless=False)


def cmd_lossless_compress(args) -> dict:
    return _compress(args, lossless=True)


def _decompress(args, lossless: bool) -> dict:
    model = QResVAE.load(args.model)
    coded = CodedImage.from_bytes(_read_bytes(args.input))
    img = codec.decompress_lossless(coded, model) if lossless else codec.decompress(coded, model)
    write_image(args.out, img)
    return {"in": args.input, "out": args.out, "width": coded.width, "height": coded.height}


def cmd_decompress(args) -> dict:
    return _decompress(args, lossless=False)


def cmd_lossless_decompress(args) -> dict:
    return _decompress(args, lossless=True)


def cmd_progressive(args) -> dict:
    model = QResVAE.load(args.model)
    coded = CodedImage.from_bytes(_read_bytes(args.input))
    n = model.config.num_blocks
    if not 0 <= args.k <= n:
        raise UsageError(f"--k {args.k} is outside 0..{n} for this model")
    img = codec.progressive_decode(coded, args.k, model, args.t, np.random.default_rng(_seed(args)))
    write_image(args.out, img)
    used = sum(4 + len(s) for s in coded.streams[:args.k])
    return {"out": args.out, "k": args.k, "t": args.t, "bpp_used": 8.0 * used / coded.pixels}


def cmd_sample(args) -> dict:
    model = QResVAE.load(args.model)
    img = codec.sample_unconditional(model, args.t, np.random.default_rng(_seed(args)),
                                     args.height, args.width)
    write_image(args.out, img)
    return {"out": args.out, "t": args.t, "seed": _seed(args), "height": img.shape[0], "width": img.shape[1]}


def cmd_eval(args) -> dict:
    model = QResVAE.load(args.model)
    images, names = _images_for(args)
    ev = evaluate(model, images, jobs=args.jobs, names=names)
    if args.csv:
        write_rd_csv(args.csv, ev)
    m = ev.mean
    return {"images": len(images), "lambda": m.lmbda, "bpp_est": m.bpp_estimated,
            "bpp_actual": m.bpp_actual, "psnr": m.psnr, "ms_ssim": m.ms_ssim}


def cmd_rate_dist(args) -> dict:
    model = QResVAE.load(args.model)
    images, _ = _images_for(args)
    dist = rate_distribution(model, images)
    if args.csv:
        write_rate_csv(args.csv, dist)
    return {"blocks": [{"block": f"Z_{i + 1}", "bpp": b} for i, b in enumerate(dist.block_bpp)],
            "total_payload_bpp": dist.total_payload_bpp,
            "collapsed": [f"Z_{i + 1}" for i in dist.collapsed]}


def read_rd_points(paths: Sequence[str]) -> List[tuple]:
    """(bpp_actual, psnr) pairs: the ``mean`` row of eval CSVs, or every row of a plain RD table."""
    points = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"bpp_actual", "psnr"} <= set(rows[0]):
            raise FormatError(f"{path}: expected columns {RD_HEADER}")
        if "image" in rows[0]:
            rows = [r for r in rows if r["image"] == "mean"]
        try:
            points.extend((float(r["bpp_actual"]), float(r["psnr"])) for r in rows)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return points


def cmd_bdrate(args) -> dict:
    a = read_rd_points(args.a)
    b = read_rd_points(args.b)
    return {"bd_rate_percent": metrics.bd_rate(a, b), "points_a": len(a), "points_b": len(b)}


# -- parser ---------------------------------------------------------------------

def _add_image_source(p) -> None:
    p.add_argument("--dir", help="directory of .ppm/.png images")
    p.add_argument("--kind", default="mixed", help="synthetic generator when --dir is absent")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--count", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qres", description="Hierarchical-VAE image codec")
    parser.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=1, help="worker threads (capped by QRES_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model for one lambda")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default="small")
    p.add_argument("--lambda", dest="lmbda", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lossless-from", help="fine-tune a lossless head on this checkpoint")
    p.set_defaults(func=cmd_train)

    for name, func in (("compress", cmd_compress), ("lossless-compress", cmd_lossless_compress)):
        p = sub.add_parser(name)
        p.add_argument("--model", required=True)
        p.add_argument("--in", dest="input")
        p.add_argument("--out")
        p.add_argument("--dir")
        p.add_argument("--out-dir")
        p.set_defaults(func=func)

    for name, func in (("decompress", cmd_decompress), ("lossless-decompress", cmd_lossless_decompress)):
        p = sub.add_parser(name)
        p.add_argument("--model", required=True)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("progressive", help="decode the first k streams, sample the rest")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--t", type=float, default=0.0)
    p.set_defaults(func=cmd_progressive)

    p = sub.add_parser("sample", help="unconditional sample")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="per-image and mean R-D metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--csv")
    _add_image_source(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rate-dist", help="mean coded bpp per latent block")
    p.add_argument("--model", required=True)
    p.add_argument("--csv")
    _add_image_source(p)
    p.set_defaults(func=cmd_rate_dist)

    p = sub.add_parser("bdrate", help="BD-rate of curve B relative to curve A")
    p.add_argument("--a", nargs="+", required=True, help="RD CSV files of the anchor")
    p.add_argument("--b", nargs="+", required=True, help="RD CSV files of the test curve")
    p.set_defaults(func=cmd_bdrate)
    return parser


def run(argv: Optional[Sequence[str]] = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"qres: {exc}", file=stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=stderr)
    try:
        summary = args.func(args)
    except (UsageError, ContractError, ShapeError) as exc:
        print(f"qres: {exc}", file=stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"qres: training diverged at step {exc.step}; last good checkpoint: {exc.last_good}",
              file=stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"qres: {exc}", file=stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"qres: {exc}", file=stderr)
        return EXIT_USAGE
    if args.json:
        stdout.write(json.dumps({"schema": JSON_SCHEMA_VERSION, "command": args.command, **summary},
                                sort_keys=True) + "\n")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
