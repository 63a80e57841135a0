"""Command-line interface.

Machine-readable results go to stdout (``key=value`` lines or CSV); progress
and error messages go to stderr.  Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bitstream import Bitstream
from .compression import compress, decompress
from .data import (
    MAX_PROXY_LEVEL,
    ManifestEntry,
    PatchSpec,
    SamplePair,
    Source,
    build_patch_set,
    load_image,
    load_pair,
    make_toy_images,
    mix_sources,
    read_manifest,
    save_image,
    synth_jnd_proxy,
    toy_pairs,
    write_manifest,
)
from .errors import ConfigurationError, NumericError, OutOfRangeError
from .losses import LossConfig
from .metrics import METRICS, JNDQuality, bd_rate, bs_jnd, psnr
from .results import atomic_write, load_results, rows_for_plot, rows_to_csv, write_results
from .training import Checkpoint, TrainConfig, evaluate_sweep, sweep, train

log = logging.getLogger("jndlc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _Once(logging.Filter):
    """Drop repeats of a message already shown (per-epoch warnings say the same thing)."""

    def __init__(self):
        super().__init__()
        self.seen: set[str] = set()

    def filter(self, record: logging.LogRecord) -> bool:
        msg = record.getMessage()
        if msg in self.seen:
            return False
        self.seen.add(msg)
        return True


def _emit(**kv) -> None:
    for k, v in kv.items():
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")


# ------------------------------------------------------------------ configs


def _loss_from_args(args, base: LossConfig) -> LossConfig:
    d = base.to_dict()
    for key, attr in (("variant", "variant"), ("family", "family"), ("omega", "omega"), ("feature_extractor_id", "extractor")):
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    if getattr(args, "iwl_clamp", False):
        d["iwl_clamp"] = True
    if d["variant"] == "fwl" and not d["feature_extractor_id"]:
        d["feature_extractor_id"] = "auto"
    if d["variant"] != "fwl":
        d["feature_extractor_id"] = ""
    return LossConfig.from_dict(d)


def _train_config(args) -> TrainConfig:
    loss = _loss_from_args(args, LossConfig())
    cfg = TrainConfig.preset(args.preset, loss)
    if args.config:
        # precedence: preset < config file < command-line flags
        cfg = TrainConfig.from_text(Path(args.config).read_text(), base=cfg)
        cfg = replace(cfg, loss=_loss_from_args(args, cfg.loss))
    overrides = {}
    if args.lambdas:
        overrides["lambdas"] = tuple(float(v) for v in args.lambdas.split(","))
    for name in ("epochs", "max_steps", "batch_size", "learning_rate", "seed", "prior_lr_scale"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    if args.patch_size is not None or args.patches_per_image is not None:
        overrides["patch"] = PatchSpec(
            args.patch_size or cfg.patch.size, args.patches_per_image or cfg.patch.patches_per_image, cfg.patch.seed
        )
    if args.warm_start:
        overrides["warm_start"] = True
    cfg = replace(cfg, **overrides)
    cfg.__post_init__()
    return cfg


# --------------------------------------------------------------------- data


def _training_data(args, cfg: TrainConfig):
    """A callable epoch -> patch list, following the per-epoch mixing schedule."""
    if args.toy:
        pairs = toy_pairs(args.toy, args.toy_size, seed=args.data_seed, level=args.proxy_level)
        return lambda epoch: build_patch_set(pairs, replace(cfg.patch, seed=cfg.seed), epoch)
    if not args.manifest:
        raise UsageError("training needs --manifest or --toy")
    entries = [e for m in args.manifest for e in read_manifest(m)]
    labeled = [e for e in entries if e.source is Source.JND_LABELED]
    unlabeled = [e for e in entries if e.source is Source.UNLABELED_PROXY]
    if args.unlabeled:
        unlabeled += [e for m in args.unlabeled for e in read_manifest(m)]
    if labeled and not unlabeled:
        log.warning("no unlabeled images; training on %d labeled pairs only", len(labeled))
    cache: dict[tuple[str, str], SamplePair] = {}

    def load(e: ManifestEntry) -> SamplePair:
        key = (e.image_id, e.source.value)
        if key not in cache:
            cache[key] = load_pair(e)
        return cache[key]

    def epoch_data(epoch: int):
        if labeled and unlabeled:
            schedule = mix_sources(labeled, unlabeled, seed=cfg.seed, epoch=epoch)
        else:
            schedule = labeled or unlabeled
        pairs = [load(e) for e in schedule]
        # repeated draws of one unlabeled image get distinct crop streams
        pairs = [replace(p, image_id=f"{p.image_id}@{i}") for i, p in enumerate(pairs)]
        patches = build_patch_set(pairs, replace(cfg.patch, seed=cfg.seed), epoch)
        if not patches:
            raise ValueError("no image is large enough for the configured patch size")
        return patches

    return epoch_data


def _eval_pairs(args) -> list[SamplePair]:
    if args.toy:
        return toy_pairs(args.toy, args.toy_size, seed=args.data_seed, level=args.proxy_level)
    if not args.manifest:
        raise UsageError("evaluation needs --manifest or --toy")
    return [load_pair(e) for m in args.manifest for e in read_manifest(m)]


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _train_config(args)
    lam = args.lam if args.lam is not None else cfg.lambdas[0]
    init = Checkpoint.load(args.init) if args.init else None
    ckpt, tlog = train(cfg, _training_data(args, cfg), lam=lam, init=init)
    ckpt.save(args.output)
    if args.log:
        atomic_write(args.log, tlog.to_jsonl())
    s = tlog.smoothed()
    log.info("trained %s at lambda=%g for %d steps", cfg.loss.method_id, lam, ckpt.step)
    _emit(checkpoint=args.output, method=cfg.loss.method_id, lam=float(lam), steps=ckpt.step,
          final_loss=float(s[-1]) if s.size else math.nan)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _train_config(args)
    out = Path(args.output_dir)
    runs = sweep(cfg, _training_data(args, cfg), checkpoint_dir=out)
    for ckpt, tlog in runs:
        name = f"{cfg.loss.method_id}_lambda{ckpt.lam:g}"
        atomic_write(out / f"{name}.log.jsonl", tlog.to_jsonl())
        _emit(checkpoint=str(out / f"{name}.ckpt"), lam=float(ckpt.lam), steps=ckpt.step)
    if args.results:
        if not (args.eval_toy or args.eval_manifest):
            raise UsageError("--results needs --eval-toy or --eval-manifest")
        ev_args = argparse.Namespace(
            toy=args.eval_toy, toy_size=args.toy_size, data_seed=args.data_seed + 1,
            proxy_level=args.proxy_level, manifest=args.eval_manifest,
        )
        res = evaluate_sweep([c for c, _ in runs], _eval_pairs(ev_args), args.dataset)
        write_results(args.results, res)
        _emit(results=args.results)
    return EXIT_OK


def cmd_compress(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    x = load_image(args.input)
    comp = compress(ckpt.codec, x)
    raw = comp.bitstream.to_bytes()
    atomic_write(args.output, raw)
    _emit(bpp=comp.bpp, bytes=len(raw), payload_bytes=len(comp.bitstream.payload),
          height=comp.bitstream.height, width=comp.bitstream.width)
    return EXIT_OK


def cmd_decompress(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    x_hat = decompress(ckpt.codec, bs)
    save_image(x_hat, args.output)
    _emit(height=bs.height, width=bs.width, bpp=bs.payload_bits / (bs.height * bs.width))
    if args.reference:
        ref = load_image(args.reference)
        _emit(psnr=psnr(ref, load_image(args.output)))
    return EXIT_OK


def cmd_eval(args) -> int:
    paths = list(args.checkpoint)
    for d in args.checkpoint_dir or []:
        paths += sorted(str(p) for p in Path(d).glob("*.ckpt") if "_epoch" not in p.name)
    if not paths:
        raise UsageError("no checkpoints given")
    ckpts = sorted((Checkpoint.load(p) for p in paths), key=lambda c: c.lam)
    res = evaluate_sweep(ckpts, _eval_pairs(args), args.dataset, args.method)
    write_results(args.output, res)
    for p in res.points:
        _emit(lam=float(p.lam), bpp=p.bpp, psnr=p.psnr, msssim=p.msssim)
    return EXIT_OK


def _metrics_arg(metric: str) -> list[str]:
    return list(METRICS) if metric == "both" else [metric]


def _write_or_print(text: str, output: str | None) -> None:
    if output:
        atomic_write(output, text)
    else:
        sys.stdout.write(text)


def cmd_bdrate(args) -> int:
    anchor = load_results(args.anchor)
    lines = ["method,metric,bdrate_percent"]
    for path in args.test:
        test = load_results(path)
        for metric in _metrics_arg(args.metric):
            value = bd_rate(anchor.curve(), test.curve(), metric)
            lines.append(f"{test.method_id},{metric},{value:.6f}")
    _write_or_print("\n".join(lines) + "\n", args.output)
    return EXIT_OK


def _jnd_labels(args, baseline, proposed) -> list[JNDQuality]:
    if args.jnd:
        src = load_results(args.jnd).jnd
    else:
        src = baseline.jnd or proposed.jnd
    labels = [j for j in src if j.metric == args.metric]
    if not labels:
        raise ValueError(f"no {args.metric} JND labels found")
    return labels


def cmd_bsjnd(args) -> int:
    baseline = load_results(args.baseline)
    proposed = load_results(args.proposed)
    labels = _jnd_labels(args, baseline, proposed)
    bl_img, pr_img = baseline.image_curves(), proposed.image_curves()
    rows, skipped = [], 0
    for j in labels:
        if args.per_image and j.image_id in bl_img and j.image_id in pr_img:
            bl, pr = bl_img[j.image_id], pr_img[j.image_id]
        else:
            bl, pr = baseline.curve(), proposed.curve()
        try:
            rows.append((j.image_id, bs_jnd(bl, pr, j)))
        except (OutOfRangeError, ValueError) as e:
            log.warning("skipping %s: %s", j.image_id, e)
            skipped += 1
    if not rows:
        raise OutOfRangeError(f"all {len(labels)} JND thresholds fall outside the RD curves")
    lines = ["image_id,bs_jnd_percent"] + [f"{i},{v:.6f}" for i, v in rows]
    mean = float(np.mean([v for _, v in rows]))
    lines.append(f"mean[n={len(rows)};skipped={skipped}],{mean:.6f}")
    _write_or_print("\n".join(lines) + "\n", args.output)
    return EXIT_OK


def cmd_plotdata(args) -> int:
    results = [load_results(p) for p in args.results]
    rows = rows_for_plot(results)
    bad = [r for r in rows if any(isinstance(v, float) and not math.isfinite(v) for v in r.values())]
    if bad:
        log.warning("dropping %d rows with non-finite cells", len(bad))
        rows = [r for r in rows if r not in bad]
    _write_or_print(rows_to_csv(rows), args.output)
    return EXIT_OK


def cmd_synth_jnd(args) -> int:
    out = Path(args.output_dir)
    entries = []
    if args.toy:
        sources = [(f"toy{i:03d}", x) for i, x in enumerate(make_toy_images(args.toy, args.toy_size, args.data_seed))]
    else:
        if not args.inputs:
            raise UsageError("synth-jnd needs input images or --toy")
        sources = [(Path(p).stem, load_image(p)) for p in args.inputs]
    for image_id, x in sources:
        save_image(x, out / f"{image_id}.png")
        save_image(synth_jnd_proxy(x, args.level), out / f"{image_id}_jnd.png")
        entries.append(ManifestEntry(image_id, f"{image_id}.png", f"{image_id}_jnd.png"))
    write_manifest(out / "manifest.jsonl", entries)
    _emit(manifest=str(out / "manifest.jsonl"), images=len(entries), level=args.level)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _add_data_args(p, eval_only: bool = False) -> None:
    p.add_argument("--manifest", action="append", help="JSON-lines manifest (repeatable)")
    if not eval_only:
        p.add_argument("--unlabeled", action="append", help="extra manifest of unlabeled images (repeatable)")
    p.add_argument("--toy", type=int, default=0, metavar="N", help="use N synthetic toy images instead of a manifest")
    p.add_argument("--toy-size", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--proxy-level", type=int, default=3, help="synthetic JND level for toy labeled pairs")


def _add_train_args(p) -> None:
    p.add_argument("--config", help="INI file with [loss] and [train] sections")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--variant", choices=("baseline", "pwl", "iwl", "fwl"))
    p.add_argument("--family", choices=("mse", "one_minus_msssim"))
    p.add_argument("--omega", type=float)
    p.add_argument("--extractor", help="feature extractor id for fwl: auto, vgg16 or random-vgg:SEED")
    p.add_argument("--iwl-clamp", action="store_true")
    p.add_argument("--lambdas", help="comma-separated, strictly increasing")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--prior-lr-scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--patches-per-image", type=int)
    p.add_argument("--warm-start", action="store_true")
    _add_data_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jndlc", description="Learned image compression with JND-aware losses.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model for one lambda")
    _add_train_args(p)
    p.add_argument("--lambda", dest="lam", type=float, help="defaults to the first grid value")
    p.add_argument("--init", help="warm-start checkpoint")
    p.add_argument("--log", help="write the training log (JSON lines) here")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train one model per lambda")
    _add_train_args(p)
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--results", help="also evaluate and write an RD results JSON here")
    p.add_argument("--eval-toy", type=int, default=0)
    p.add_argument("--eval-manifest", action="append")
    p.add_argument("--dataset", default="eval")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compress", help="encode an image to a .jlc bitstream")
    p.add_argument("input")
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a .jlc bitstream to PNG/PPM")
    p.add_argument("input")
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--reference", help="original image; prints psnr=")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="evaluate checkpoints into an RD results JSON")
    p.add_argument("-c", "--checkpoint", action="append", default=[])
    p.add_argument("--checkpoint-dir", action="append")
    p.add_argument("--dataset", default="eval")
    p.add_argument("--method", help="override the method id")
    p.add_argument("-o", "--output", required=True)
    _add_data_args(p, eval_only=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate of test results against an anchor")
    p.add_argument("anchor")
    p.add_argument("test", nargs="+")
    p.add_argument("--metric", choices=("psnr", "msssim", "both"), default="both")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("bsjnd", help="bitrate saving at the JND quality")
    p.add_argument("baseline")
    p.add_argument("proposed")
    p.add_argument("--jnd", help="results file whose jnd entries are the thresholds (default: from the inputs)")
    p.add_argument("--metric", choices=METRICS, default="psnr")
    p.add_argument("--per-image", action=argparse.BooleanOptionalAction, default=True,
                   help="use per-image RD curves when both files carry them")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bsjnd)

    p = sub.add_parser("plotdata", help="long-format CSV of RD points")
    p.add_argument("results", nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("synth-jnd", help="fabricate JND-labeled pairs and a manifest")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--level", type=int, default=3, choices=range(1, MAX_PROXY_LEVEL + 1), metavar="1..10")
    p.add_argument("--toy", type=int, default=0)
    p.add_argument("--toy-size", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("-o", "--output-dir", required=True)
    p.set_defaults(func=cmd_synth_jnd)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"jndlc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler.addFilter(_Once())
    saved = (log.handlers[:], log.level, log.propagate)
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    log.propagate = False
    torch.set_num_threads(1)
    try:
        return _run(args)
    finally:
        log.handlers[:], log.level, log.propagate = saved


def _run(args) -> int:
    try:
        return args.func(args)
    except UsageError as e:
        print(f"jndlc {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as e:
        print(f"jndlc {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, OutOfRangeError) as e:
        print(f"jndlc {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"jndlc {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
