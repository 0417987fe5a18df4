"""``jdc`` command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 decode error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import __version__
from .bench import (
    EXTERNAL_CODECS,
    Bucket,
    Codec,
    ModelMismatch,
    compress_file,
    decompress_file,
    evaluate,
    evaluate_external,
    external_available,
    rd_points,
    write_dat,
)
from .checkpoint import CheckpointError
from .codec import CodecConfig
from .dataset import ConfigError, DataSources, SupervisionMode, UnscoredManifest, filter_by_threshold, make_synthetic_scene_set, score_pairs
from .imaging import ImageIOError
from .kvconfig import ConfigSyntaxError, load_kv
from .metrics import mac_report, write_rd_csv
from .rangecoder import DecodeError
from .trainer import TrainConfig, TrainingAborted, train

EXIT_USAGE, EXIT_DATA, EXIT_DECODE = 2, 3, 4
PUBLISHED_GMAC_PER_MP = {"encoder": 92.8, "reference": 812.0}

log = logging.getLogger("jdcodec")


def shipped_config(name: str) -> Path:
    """Path of a config file bundled with the package (``codec_full.cfg`` etc.)."""
    return Path(str(resources.files("jdcodec") / "configs" / name))


def _resolve_config(path: str) -> Path:
    p = Path(path)
    return p if p.exists() else shipped_config(path)


def _bucket(text: str) -> Bucket | None:
    return None if text in ("all", "") else Bucket.parse(text)


def _noise_level(text: str) -> tuple[float, float]:
    a, b = (float(v) for v in text.split(","))
    return a, b


# ---------------------------------------------------------------- subcommands


def cmd_score_pairs(args) -> int:
    m = score_pairs(args.manifest, args.crop_size, args.out, args.workers)
    n = sum(len(r.crop_scores) for r in m.pairs)
    print(f"scored {len(m.pairs)} pairs ({n} crops) -> {args.out or args.manifest}")
    return 0


def cmd_filter(args) -> int:
    kept = filter_by_threshold(args.manifest, args.tau)
    print(f"tau={args.tau:g}: {len(kept)} crops from {len({e.record.scene_id for e in kept})} scenes")
    if args.out:
        with open(args.out, "w") as fh:
            for e in kept:
                row = {"scene": e.record.scene_id, "noisy": e.record.noisy_path, "clean": e.record.clean_path, "x0": e.crop.x0, "y0": e.crop.y0, "size": e.crop.size, "msssim": e.crop.ms_ssim}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return 0


def cmd_make_synthetic(args) -> int:
    levels = [] if args.clean_only else [_noise_level(t) for t in args.noise]
    m = make_synthetic_scene_set(args.out, args.scenes, args.size, levels, seed=args.seed, iso=args.iso, prefix=args.prefix)
    print(f"wrote {len(m.records)} records to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.load(_resolve_config(args.config))
    overrides = {k: v for k, v in (("seed", args.seed), ("lr", args.lr), ("codec_id", args.codec_id)) if v is not None}
    if args.mode:
        overrides["mode"] = SupervisionMode.parse(args.mode)
    if overrides:
        cfg = replace(cfg, **overrides)
        if "mode" in overrides and args.codec_id is None:
            cfg.codec_id = str(cfg.mode)
    stats: Counter = Counter()
    sources = DataSources.from_manifests(args.pairs, args.clean or (), args.ud, max_iso=args.max_iso, stats=stats)
    if stats:
        print("clean-pool skips: " + ", ".join(f"{k}={v}" for k, v in sorted(stats.items())))
    res = train(cfg, sources, args.out, resume_from=args.resume)
    for p in res.checkpoints:
        print(p)
    return 0


def cmd_compress(args) -> int:
    codec = Codec.load(args.model)
    rate = compress_file(codec, args.input, args.output)
    print(f"{args.output}: {rate:.6g} bpp")
    return 0


def cmd_decompress(args) -> int:
    codec = Codec.load(args.model)
    img = decompress_file(codec, args.input, args.output, bits=args.bits)
    print(f"{args.output}: {img.width}x{img.height}")
    return 0


def _print_points(rows) -> None:
    print("codec,lambda,bpp,msssim,psnr,bucket,input_msssim")
    for b, p, mu in rows:
        print(",".join(p.row() + [b.label() if b else "all", f"{mu:.6g}"]))


def cmd_eval(args) -> int:
    codec = Codec.load(args.model)
    bucket = _bucket(args.bucket)
    res = evaluate(codec, args.manifest, bucket, args.workers, args.model)
    pt = res.point()
    rows = [(bucket, pt, res.mean_input_score)] if pt else []
    if not rows:
        print(f"warning: bucket {args.bucket} is empty", file=sys.stderr)
    _print_points(rows)
    if args.csv:
        write_rd_csv([r[1] for r in rows], args.csv)
    return 0


def cmd_rd_curve(args) -> int:
    buckets = [_bucket(b) for b in args.bucket] or [None]
    rows = rd_points(args.models, args.manifest, buckets, args.workers)
    points = [p for _, p, _ in rows]
    if args.external:
        for name in args.external:
            if not external_available(name):
                print(f"{name}: not available on this system, skipped", file=sys.stderr)
                continue
            for b in buckets:
                points += evaluate_external(name, args.qualities, args.manifest, b)
    points.sort(key=lambda p: (p.codec, p.bpp))
    _print_points(rows)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_rd_csv(points, prefix.with_suffix(".csv"))
    write_dat(points, prefix.with_suffix(".dat"))
    written = [prefix.with_suffix(".csv"), prefix.with_suffix(".dat")]
    if not args.no_plot and points:
        from .plotting import plot_rd

        plot_rd(points, prefix.with_suffix(".png"), title=args.title)
        written.append(prefix.with_suffix(".png"))
    for p in written:
        print(f"wrote {p}")
    return 0


def mac_table(codec_cfg: CodecConfig, reference: dict | None) -> str:
    rep = mac_report(codec_cfg, reference)
    lines = [f"{'layer':<18}{'kind':<7}{'GMac/MP':>12}"]
    for layer in rep.encoder + rep.decoder:
        lines.append(f"{layer.name:<18}{layer.kind:<7}{rep.gmac_per_mp(layer.macs):>12.4f}")
    enc, dec = rep.gmac_per_mp(rep.encoder_total), rep.gmac_per_mp(rep.decoder_total)
    lines.append(f"{'encoder total':<25}{enc:>12.4f}")
    lines.append(f"{'decoder total':<25}{dec:>12.4f}")
    if rep.reference is not None:
        ref = rep.gmac_per_mp(rep.reference_total)
        published = PUBLISHED_GMAC_PER_MP["encoder"] / PUBLISHED_GMAC_PER_MP["reference"]
        lines.append(f"{'reference denoiser':<25}{ref:>12.4f}")
        lines.append(f"encoder / denoiser ratio: {enc / ref:.4f} (published figures {PUBLISHED_GMAC_PER_MP['encoder']:g}/{PUBLISHED_GMAC_PER_MP['reference']:g} = {published:.4f})")
        lines.append("note: approximate; the published denoiser configuration is reconstructed, not known")
    return "\n".join(lines)


def cmd_count_macs(args) -> int:
    raw = load_kv(_resolve_config(args.config))
    codec_cfg = CodecConfig.from_dict(raw)
    reference = load_kv(_resolve_config(args.reference)) if args.reference else None
    print(mac_table(codec_cfg, reference))
    return 0


def cmd_external(args) -> int:
    if not external_available(args.codec):
        print(f"{args.codec}: required programs not found; external codec skipped")
        return 0
    points = evaluate_external(args.codec, args.qualities, args.manifest, _bucket(args.bucket))
    print(",".join(("codec", "lambda", "bpp", "msssim", "psnr")))
    for p in points:
        print(",".join(p.row()))
    if args.csv:
        write_rd_csv(points, args.csv)
    return 0


# -------------------------------------------------------------------- parser


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jdc", description="Joint denoising and compression codec.", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("score-pairs", help="score noisy/clean pairs with crop MS-SSIM", formatter_class=fmt)
    s.add_argument("manifest")
    s.add_argument("--crop-size", type=int, default=256)
    s.add_argument("--out", default=None, help="scored manifest path (default: overwrite input)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_score_pairs)

    s = sub.add_parser("filter", help="list crops whose score is at least tau", formatter_class=fmt)
    s.add_argument("manifest")
    s.add_argument("--tau", type=float, required=True)
    s.add_argument("--out", default=None, help="write eligible crops as JSON lines")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("make-synthetic", help="generate a synthetic noisy/clean scene set", formatter_class=fmt)
    s.add_argument("out")
    s.add_argument("--scenes", type=int, default=16)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--noise", action="append", default=None, metavar="A,B", help="Poisson-Gaussian level, repeatable")
    s.add_argument("--clean-only", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iso", type=int, default=100)
    s.add_argument("--prefix", default="scene")
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("train", help="train a codec over a lambda schedule", formatter_class=fmt)
    s.add_argument("--config", default="desk_train.cfg", help="training config file (or a shipped config name)")
    s.add_argument("--mode", default=None, help="override the supervision mode, e.g. 'JDC-Cn(0.8)'")
    s.add_argument("--pairs", default=None, help="scored noisy/clean manifest")
    s.add_argument("--clean", action="append", default=None, help="clean-image manifest, repeatable")
    s.add_argument("--ud", default=None, help="input/denoised manifest")
    s.add_argument("--max-iso", type=int, default=200)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--codec-id", default=None)
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compress", help="image -> .jdc", formatter_class=fmt)
    s.add_argument("--model", required=True)
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("decompress", help=".jdc -> image", formatter_class=fmt)
    s.add_argument("--model", required=True)
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--bits", type=int, choices=(8, 16), default=8)
    s.set_defaults(func=cmd_decompress)

    s = sub.add_parser("eval", help="rate and distortion against clean ground truth", formatter_class=fmt)
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--bucket", default="all", help="'lo,hi' MS-SSIM interval on the noisy input, or 'all'")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--csv", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rd-curve", help="RD points for several checkpoints: CSV, .dat and PNG", formatter_class=fmt)
    s.add_argument("models", nargs="+")
    s.add_argument("--manifest", required=True)
    s.add_argument("--bucket", action="append", default=[], help="repeatable; default evaluates everything")
    s.add_argument("--external", action="append", default=[], choices=sorted(EXTERNAL_CODECS))
    s.add_argument("--qualities", type=_int_list, default=[10, 30, 50, 70, 90])
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="output prefix; .csv/.dat/.png are appended")
    s.add_argument("--title", default="")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_rd_curve)

    s = sub.add_parser("count-macs", help="per-layer multiply-accumulate table", formatter_class=fmt)
    s.add_argument("--config", default="codec_full.cfg")
    s.add_argument("--reference", default=None, help="U-Net config, e.g. unet_reference.cfg")
    s.set_defaults(func=cmd_count_macs)

    s = sub.add_parser("external", help="RD points for an external codec", formatter_class=fmt)
    s.add_argument("--codec", required=True, choices=sorted(EXTERNAL_CODECS))
    s.add_argument("--qualities", type=_int_list, default=[10, 30, 50, 70, 90])
    s.add_argument("--manifest", required=True)
    s.add_argument("--bucket", default="all")
    s.add_argument("--csv", default=None)
    s.set_defaults(func=cmd_external)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DecodeError, ModelMismatch) as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except ConfigSyntaxError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ImageIOError, ConfigError, UnscoredManifest, CheckpointError, TrainingAborted, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
