"""``holoslide`` command line: import, mask, sample, train, infer, eval, export-overlay, synth."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from . import __version__
from .errors import DegenerateHistogram, DegenerateSample, HoloslideError, InvalidInput, IoError

log = logging.getLogger("holoslide")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n\n{self.format_help()}")


def _dims(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return w, h


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise InvalidInput(f"{path}: not valid JSON ({exc})") from exc


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_import(args) -> None:
    from .imageio import read_image
    from .pyramid import import_image

    img = import_image(read_image(args.input), args.output, args.tile_size)
    log.info("wrote %s: %d levels", args.output, img.level_count)
    img.close()


def _foreground(path, level: int):
    from .foreground import compute_foreground
    from .pyramid import open_pyramid

    with open_pyramid(path) as img:
        try:
            return compute_foreground(img, level)
        except DegenerateHistogram as exc:
            log.warning("%s: %s", path, exc)
            return exc.mask


def cmd_mask(args) -> None:
    fg = _foreground(args.input, args.level)
    fg.save(args.output)
    log.info("threshold %d, foreground fraction %.4f", fg.threshold_used, fg.foreground_fraction())


def cmd_sample(args) -> None:
    from .foreground import ForegroundMask, RoiSampler, SamplerConfig

    if (args.mask is None) == (args.input is None):
        raise UsageError("sample needs exactly one of --mask or --input")
    fg = ForegroundMask.load(args.mask) if args.mask else _foreground(args.input, args.level)
    sampler = RoiSampler(fg, SamplerConfig(args.roi[0], args.roi[1], args.min_fg, args.seed))
    _write_json(args.out, [sampler.draw(i).to_dict() for i in range(args.count)])


def _dataset(data_dir, classes: int):
    """Pairs ``<stem>.hhpy`` with ``<stem>.mask`` (one class) or ``<stem>.c<k>.mask``."""
    from .masks import load_wsi_mask
    from .pyramid import open_pyramid

    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise IoError(f"{data_dir}: not a directory")
    images, masks = [], []
    for path in sorted(data_dir.glob("*.hhpy")):
        if classes == 1:
            names = [path.with_suffix(".mask")]
        else:
            names = [path.with_suffix(f".c{k}.mask") for k in range(classes)]
        missing = [n for n in names if not n.exists()]
        if missing:
            log.warning("skipping %s: missing %s", path, missing[0])
            continue
        images.append(open_pyramid(path))
        gts = [load_wsi_mask(n) for n in names]
        masks.append(gts[0] if classes == 1 else gts)
    if not images:
        raise InvalidInput(f"{data_dir}: no .hhpy slides with ground-truth masks")
    return images, masks


def cmd_train(args) -> None:
    from .foreground import SamplerConfig
    from .model import ModelConfig, TrainConfig, save_checkpoint, train

    images, masks = _dataset(args.data, args.classes)
    w, h = args.roi
    model_cfg = ModelConfig.for_roi(
        w, h, patch=args.patch, codebook_size=args.codebook_size, code_dim=args.code_dim,
        d_model=args.d_model, heads=args.heads, scales=args.scales, blocks=args.blocks,
        classes=args.classes, tokenizer=args.tokenizer, attention=args.attention, seed=args.seed)
    train_cfg = TrainConfig(lr=args.lr, steps=args.steps, seed=args.seed, loss_mix=args.loss_mix,
                            freeze_tokenizer=args.freeze_tokenizer, sampler=args.sampler, level=args.level,
                            tokenizer_warmup=args.tokenizer_warmup, tokenizer_lr=args.tokenizer_lr)
    sampler = SamplerConfig(w, h, args.min_fg, args.seed)
    params = train(images, masks, train_cfg, sampler, model_cfg, log_every=args.log_every)
    save_checkpoint(params, args.out, extra={"train": {"level": args.level, "sampler": args.sampler,
                                                       "roi": [w, h], "steps": args.steps}})
    log.info("wrote %s after %d steps", args.out, params.step_count)


def cmd_infer(args) -> None:
    from .inference import TileConfig, infer_wsi, model_predictor
    from .masks import save_wsi_mask
    from .model import forward, load_checkpoint
    from .pyramid import open_pyramid

    params = load_checkpoint(args.model)
    if not 0 <= args.class_index < params.config.classes:
        raise InvalidInput(f"--class-index {args.class_index} outside 0..{params.config.classes - 1}")
    if params.config.classes == 1:
        predict = model_predictor(params)
    else:
        def predict(pixels, tile):
            return forward(pixels, params)[..., args.class_index]
    with open_pyramid(args.input) as img:
        tw, th = args.tile or (params.config.grid[1] * params.config.patch,
                               params.config.grid[0] * params.config.patch)
        cfg = TileConfig(tw, th, args.overlap, args.min_fg)
        mask = infer_wsi(img, args.level, predict, cfg, threshold=args.threshold, workers=args.workers)
    save_wsi_mask(mask, args.out)
    log.info("wrote %s: %d foreground pixels", args.out, mask.popcount())


def _mask_pairs(pred, gt):
    from .masks import load_wsi_mask

    pred, gt = Path(pred), Path(gt)
    if pred.is_dir() != gt.is_dir():
        raise InvalidInput("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.stem, load_wsi_mask(pred), load_wsi_mask(gt))]
    pairs = []
    for p in sorted(pred.glob("*.mask")):
        g = gt / p.name
        if not g.exists():
            raise IoError(f"{g}: no ground truth for {p}")
        pairs.append((p.stem, load_wsi_mask(p), load_wsi_mask(g)))
    if not pairs:
        raise InvalidInput(f"{pred}: no .mask files")
    return pairs


def patch_items(name, pred, gt, patch_w: int, patch_h: int):
    """Per-patch Dice over a non-overlapping grid; patches empty in both masks are skipped."""
    from .foreground import tile_plan
    from .metrics import dice_counts, dice_from_counts

    if (pred.level, pred.width, pred.height) != (gt.level, gt.width, gt.height):
        raise InvalidInput(f"{name}: prediction and ground truth differ in level or size")
    tw, th = min(patch_w, gt.width), min(patch_h, gt.height)
    items = []
    for t in tile_plan(gt.width, gt.height, tw, th, 0, level=gt.level):
        inter, np_, ng = dice_counts(pred.crop(t.x, t.y, t.width, t.height),
                                     gt.crop(t.x, t.y, t.width, t.height))
        if np_ or ng:
            items.append((f"{name}@{t.x},{t.y}", dice_from_counts(inter, np_, ng)))
    return items


def cmd_eval(args) -> None:
    from .metrics import DiceReport, wilcoxon_signed_rank, wsi_dice

    items = []
    for name, pred, gt in _mask_pairs(args.pred, args.gt):
        if args.mode == "wsi":
            items.append((name, wsi_dice(pred, gt)))
        else:
            items.extend(patch_items(name, pred, gt, *args.patch))
    report = DiceReport(args.mode, items).to_dict()
    report["wilcoxon"] = None
    if args.vs:
        other = {it["id"]: it["dice"] for it in _read_json(args.vs)["items"]}
        pairs = [(d, other[i]) for i, d in items if i in other]
        if not pairs:
            raise InvalidInput(f"{args.vs}: no item ids in common")
        try:
            p = wilcoxon_signed_rank(pairs).p_value
        except DegenerateSample as exc:
            log.warning("%s", exc)
            p = exc.result.p_value
        report["wilcoxon"] = {"vs": str(args.vs), "p": p}
    _write_json(args.out, report)
    log.info("%s mean dice %.4f over %d items", args.mode, report["mean"], len(items))


def cmd_export_overlay(args) -> None:
    from .imageio import write_ppm
    from .inference import export_overlay
    from .masks import load_wsi_mask
    from .pyramid import open_pyramid

    mask = load_wsi_mask(args.mask)
    with open_pyramid(args.input) as img:
        raster = export_overlay(img, mask, args.level)
    write_ppm(args.out, raster)


def cmd_synth(args) -> None:
    from .synth import SynthSlideSpec, write_synth_dataset

    spec = SynthSlideSpec(width=args.width, height=args.height, disk_count=args.disks,
                          disk_radius=(args.radius_min, args.radius_max), background=args.background,
                          tissue=args.tissue, target=args.target, seed=args.seed)
    write_synth_dataset(args.out_dir, args.count, spec, args.tile_size, args.prefix)
    log.info("wrote %d slides to %s", args.count, args.out_dir)


def cmd_version(args) -> None:
    print(__version__)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="holoslide", description="Whole-slide image segmentation at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub_add = sub.add_parser
    sub.add_parser = lambda name, **kw: sub_add(name, parents=[common], **kw)

    p = sub.add_parser("import", help="convert a PPM/PNG image into an HHPY pyramid")
    p.add_argument("--input", required=True, help="source image (binary PPM P6 or non-interlaced PNG)")
    p.add_argument("--output", required=True, help="pyramid file to write (.hhpy)")
    p.add_argument("--tile-size", type=int, default=512, help="square tile edge in pixels (default 512)")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("mask", help="compute an Otsu foreground mask of one pyramid level")
    p.add_argument("--input", required=True, help="pyramid file (.hhpy)")
    p.add_argument("--level", type=int, default=0, help="pyramid level to threshold (default 0)")
    p.add_argument("--output", required=True, help="foreground mask to write (HHFG run-length file)")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("sample", help="draw foreground-rich random ROIs as a JSON list of tiles")
    p.add_argument("--mask", help="precomputed foreground mask (HHFG)")
    p.add_argument("--input", help="pyramid to compute the foreground mask from instead of --mask")
    p.add_argument("--level", type=int, default=0, help="level used with --input (default 0)")
    p.add_argument("--count", type=int, required=True, help="number of ROIs to draw")
    p.add_argument("--roi", type=_dims, default=(3840, 2160), help="ROI size WxH (default 3840x2160)")
    p.add_argument("--seed", type=int, default=0, help="sampler seed (default 0)")
    p.add_argument("--min-fg", type=float, default=0.5, help="minimum foreground fraction (default 0.5)")
    p.add_argument("--out", required=True, help="JSON file for the tile list")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a segmentation model on a directory of slides")
    p.add_argument("--data", required=True,
                   help="directory of <stem>.hhpy slides with <stem>.mask (or <stem>.c<k>.mask) ground truth")
    p.add_argument("--roi", type=_dims, default=(3840, 2160), help="training ROI size WxH (default 3840x2160)")
    p.add_argument("--steps", type=int, required=True, help="number of segmentation steps")
    p.add_argument("--seed", type=int, default=0, help="seed for sampling and initialisation (default 0)")
    p.add_argument("--out", required=True, help="checkpoint to write (.hhck)")
    p.add_argument("--freeze-tokenizer", action="store_true", help="keep the VQ tokenizer at its initial weights")
    p.add_argument("--sampler", choices=("rand", "tile"), default="rand",
                   help="rand: fresh random ROI per step; tile: fixed foreground tile grid")
    p.add_argument("--attention", choices=("relu", "mhsa"), default="relu",
                   help="linear ReLU multi-scale attention or softmax attention")
    p.add_argument("--tokenizer", choices=("vq", "linear"), default="vq",
                   help="vector-quantised tokens or a linear patch projection")
    p.add_argument("--classes", type=int, default=1, help="independent binary heads (default 1)")
    p.add_argument("--level", type=int, default=0, help="pyramid level ROIs are read from (default 0)")
    p.add_argument("--min-fg", type=float, default=0.5, help="minimum ROI foreground fraction (default 0.5)")
    p.add_argument("--lr", type=float, default=3e-4, help="Adam learning rate (default 3e-4)")
    p.add_argument("--loss-mix", type=float, default=0.5, help="Dice weight in the Dice+BCE loss (default 0.5)")
    p.add_argument("--patch", type=int, default=16, help="tokenizer patch size (default 16)")
    p.add_argument("--codebook-size", type=int, default=1024, help="codebook entries (default 1024)")
    p.add_argument("--code-dim", type=int, default=256, help="code vector length (default 256)")
    p.add_argument("--d-model", type=int, default=256, help="backbone width (default 256)")
    p.add_argument("--heads", type=int, default=4, help="attention heads (default 4)")
    p.add_argument("--scales", type=_int_list, default=(1, 2, 4), help="pooling scales (default 1,2,4)")
    p.add_argument("--blocks", type=_int_list, default=(2, 2), help="blocks per stage (default 2,2)")
    p.add_argument("--tokenizer-warmup", type=int, default=0,
                   help="tokenizer-only draws before segmentation training (default 0)")
    p.add_argument("--tokenizer-lr", type=float, default=1e-3, help="tokenizer learning rate (default 1e-3)")
    p.add_argument("--log-every", type=int, default=0, help="log the loss every N steps (0: never)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a pyramid level with a trained model")
    p.add_argument("--input", required=True, help="pyramid file (.hhpy)")
    p.add_argument("--level", type=int, default=0, help="level to segment (default 0)")
    p.add_argument("--model", required=True, help="checkpoint (.hhck)")
    p.add_argument("--tile", type=_dims, default=None,
                   help="inference tile WxH, at most the training ROI (default: the model's input size)")
    p.add_argument("--overlap", type=int, default=0, help="tile overlap in pixels (default 0)")
    p.add_argument("--min-fg", type=float, default=0.0,
                   help="skip tiles below this foreground fraction (default 0: run every tile)")
    p.add_argument("--threshold", type=float, default=0.5, help="probability threshold (default 0.5)")
    p.add_argument("--class-index", type=int, default=0, help="head to export for multi-class models (default 0)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="prediction threads (default: available CPUs)")
    p.add_argument("--out", required=True, help="mask to write (HHSM run-length file)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice report of predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="predicted mask file or directory of .mask files")
    p.add_argument("--gt", required=True, help="ground-truth mask file or directory with matching names")
    p.add_argument("--mode", choices=("patch", "wsi"), default="wsi", help="per-patch or whole-slide Dice")
    p.add_argument("--patch", type=_dims, default=(3840, 2160), help="patch size WxH for --mode patch")
    p.add_argument("--vs", help="other JSON report to compare with a Wilcoxon signed-rank test")
    p.add_argument("--out", required=True, help="JSON report to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-overlay", help="write a PPM of a pyramid level with the mask drawn on it")
    p.add_argument("--mask", required=True, help="mask file (HHSM)")
    p.add_argument("--input", required=True, help="pyramid file (.hhpy)")
    p.add_argument("--level", type=int, default=0, help="output level, not finer than the mask (default 0)")
    p.add_argument("--out", required=True, help="PPM file to write")
    p.set_defaults(func=cmd_export_overlay)

    p = sub.add_parser("synth", help="generate synthetic slides with exact ground truth")
    p.add_argument("--out-dir", required=True, help="directory for .hhpy/.mask pairs")
    p.add_argument("--count", type=int, default=1, help="number of slides (default 1)")
    p.add_argument("--width", type=int, default=4096, help="slide width (default 4096)")
    p.add_argument("--height", type=int, default=4096, help="slide height (default 4096)")
    p.add_argument("--disks", type=int, default=16, help="target disks per slide (default 16)")
    p.add_argument("--radius-min", type=int, default=64, help="smallest disk radius (default 64)")
    p.add_argument("--radius-max", type=int, default=128, help="largest disk radius (default 128)")
    p.add_argument("--background", type=int, default=245, help="background luminance (default 245)")
    p.add_argument("--tissue", type=int, default=140, help="tissue luminance (default 140)")
    p.add_argument("--target", type=int, default=90, help="target luminance (default 90)")
    p.add_argument("--seed", type=int, default=0, help="seed of the first slide; slide i uses seed+i")
    p.add_argument("--tile-size", type=int, default=512, help="pyramid tile size (default 512)")
    p.add_argument("--prefix", default="slide", help="file name prefix (default slide)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("version", help="print the version")
    p.set_defaults(func=cmd_version)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (HoloslideError, OSError, MemoryError) as exc:
        print(f"holoslide: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
