"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (``key = value`` lines, ``#``
comments, keys named like the long flags with ``-`` or ``_``) and
``--dump-config`` (print the resolved configuration and exit). Flags given
on the command line override the file. Randomized commands default to
``--seed 0``. ``FISSURA_THREADS`` caps BLAS threads; unset means one.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .exceptions import FissuraError, ParameterError

log = logging.getLogger("fissura")

DEFAULT_SEED = 0
EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
_META_KEYS = {"help", "config", "dump_config", "command", "log_level"}


# --------------------------------------------------------------------------- stress utility


@dataclass(frozen=True)
class BendingTestGeometry:
    """Three-point bending setup; lengths share one unit, force in N."""

    force: float
    span: float
    width: float
    height: float

    def __post_init__(self):
        for name in ("span", "width", "height"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not self.force >= 0:
            raise ParameterError(f"force must be non-negative, got {self.force!r}")


def flexural_stress(g: BendingTestGeometry) -> float:
    """Flexural stress ``3 F l / (2 b h^2)`` in force per squared length unit."""
    return 3.0 * g.force * g.span / (2.0 * g.width * g.height ** 2)


# --------------------------------------------------------------------------- config plumbing


class UsageError(Exception):
    pass


def _dims(text: str) -> tuple:
    parts = [p for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N or X,Y,Z, got {text!r}")
    return tuple(int(p) for p in parts)


def _width(text: str):
    return text if text == "varying" else int(text)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(path) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().split("\n"), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _config_actions(sub: argparse.ArgumentParser) -> dict:
    return {a.dest: a for a in sub._actions if a.dest not in _META_KEYS}


def _convert(action: argparse.Action, text: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
        return _bool(text)
    if text == "None" and action.default is None:
        return None
    value = action.type(text) if action.type is not None else text
    if action.choices is not None and value not in action.choices:
        raise ValueError(f"{value!r} not in {list(action.choices)}")
    return value


def dump_config(args: argparse.Namespace, sub: argparse.ArgumentParser) -> str:
    lines = [f"# fissura {args.command}"]
    for dest in _config_actions(sub):
        value = getattr(args, dest)
        if value is not None:
            lines.append(f"{dest} = {_format(value)}")
    return "\n".join(lines) + "\n"


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required key(s) {', '.join(missing)}")


# --------------------------------------------------------------------------- parser


def _add_common(p, seeded=False):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--dump-config", action="store_true", help="print resolved config and exit")
    if seeded:
        p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help=f"random seed (default {DEFAULT_SEED})")


def _add_patch_args(p, size=32, filter_default=None):
    p.add_argument("--patch-size", "--size", type=int, default=size, help="patch edge in voxels")
    p.add_argument("--overlap", type=int, default=14, help="overlap between patches in voxels")
    p.add_argument("--min-fraction", type=float, default=5e-5,
                   help="crack-voxel fraction a kept patch must reach")
    p.add_argument("--filter", action=argparse.BooleanOptionalAction, default=filter_default,
                   help="drop patches below the crack fraction (default: on for size 32 only)")


def _add_train_args(p, epochs):
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    p.add_argument("--halving-period", type=int, default=5, help="epochs per lr halving")


def _add_post_args(p):
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.add_argument("--boundary-crop", type=int, default=0, help="voxels cleared at every face")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fissura", description="Crack segmentation in concrete CT volumes.")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    subs = parser.add_subparsers(dest="command", metavar="command")
    subs.required = True

    p = subs.add_parser("simulate", help="generate a crack scene mask")
    _add_common(p, seeded=True)
    p.add_argument("--out", help="output mask (VVOL1)")
    p.add_argument("--dims", type=_dims, default=(64, 64, 64), help="N or X,Y,Z")
    p.add_argument("--count", type=int, choices=(1, 2), default=1)
    p.add_argument("--width", type=_width, default=3, help="odd integer or 'varying'")
    p.add_argument("--coplanar", action="store_true", help="double crack in parallel planes")
    p.add_argument("--hurst", type=float, default=0.5)
    p.add_argument("--amplitude", type=float, default=None, help="roughness std in voxels")
    p.add_argument("--grid-n", type=int, default=128, help="fBm grid side")
    p.add_argument("--max-tilt", type=float, default=15.0, help="max tilt in degrees")

    p = subs.add_parser("synthesize", help="build the labeled dataset or one pair")
    _add_common(p, seeded=True)
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--size", type=int, default=256, help="cube edge of dataset volumes")
    p.add_argument("--backgrounds", default=None,
                   help="comma list of NC,HPC,PPFRC,SFRC scans (default: procedural)")
    p.add_argument("--pore-masks", default=None, help="comma list of pore masks for --backgrounds")
    p.add_argument("--background", default=None, help="single-pair mode: background scan")
    p.add_argument("--crack", default=None, help="single-pair mode: crack mask")
    p.add_argument("--pore-mask", default=None, help="single-pair mode: pore mask")
    p.add_argument("--kind", default="NC", choices=("NC", "HPC", "PPFRC", "SFRC"))
    p.add_argument("--hurst", type=float, default=0.5)
    p.add_argument("--amplitude", type=float, default=None)

    p = subs.add_parser("patch", help="extract and filter patches, print counts")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", default=None, help="directory for kept patches")
    _add_patch_args(p, size=64)

    p = subs.add_parser("train", help="train a network from scratch")
    _add_common(p, seeded=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--base-filters", type=int, default=16)
    p.add_argument("--levels", type=int, default=3)
    _add_patch_args(p)
    _add_train_args(p, epochs=20)

    p = subs.add_parser("finetune", help="continue training a checkpoint")
    _add_common(p, seeded=True)
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output checkpoint")
    _add_patch_args(p)
    _add_train_args(p, epochs=10)

    p = subs.add_parser("predict", help="volume in, crack mask out")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="gray volume (VVOL1)")
    p.add_argument("--out", help="output mask")
    p.add_argument("--prob-out", default=None, help="also write fused probabilities")
    p.add_argument("--scales", default="base", help="'base', 'finetuned' or a comma list")
    p.add_argument("--tile", type=int, default=64, help="inference tile edge")
    _add_post_args(p)

    p = subs.add_parser("postprocess", help="threshold, crop and keep the largest component")
    _add_common(p)
    p.add_argument("--input", help="probability volume (f32) or mask")
    p.add_argument("--out", help="output mask")
    _add_post_args(p)

    p = subs.add_parser("eval", help="compare a predicted mask with the truth")
    _add_common(p)
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--out", default=None, help="metrics file (default: stdout only)")

    p = subs.add_parser("slice", help="export one slice as PGM")
    _add_common(p)
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, default=None, help="default: middle slice")
    p.add_argument("--mask", action="store_true", help="input is a mask (scaled to 255)")

    p = subs.add_parser("stress", help="flexural stress of a bending test")
    _add_common(p)
    p.add_argument("--force", type=float, help="cylinder force F")
    p.add_argument("--span", type=float, help="support distance l")
    p.add_argument("--width", type=float, help="specimen width b")
    p.add_argument("--height", type=float, help="specimen height h")
    return parser


def _subparser(parser, command) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv: Optional[Sequence[str]] = None):
    """Parse flags, merging an optional config file underneath them."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    if args.config:
        actions = _config_actions(sub)
        defaults = {}
        for key, text in read_config(args.config).items():
            if key not in actions:
                raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
            try:
                defaults[key] = _convert(actions[key], text)
            except (ValueError, TypeError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args, sub


# --------------------------------------------------------------------------- commands


def _patch_spec(args):
    from .synth import PatchSpec

    return PatchSpec(args.patch_size, args.overlap, args.min_fraction, args.filter)


def _train_config(args):
    from .nn.optim import LrSchedule
    from .training import TrainConfig

    return TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                       schedule=LrSchedule(args.lr, args.halving_period),
                       patch_spec=_patch_spec(args), seed=args.seed)


def cmd_simulate(args):
    from .cracks import compose_scene, default_spec
    from .volume import save_volume

    _require(args, "out")
    spec = default_spec(args.count, args.width, args.coplanar, args.dims, args.seed, args.hurst,
                        args.amplitude, args.max_tilt)
    spec = replace(spec, grid_n=args.grid_n)
    mask = compose_scene(spec, args.dims)
    save_volume(mask, args.out)
    log.info("wrote %s (%d crack voxels)", args.out, mask.count)


def cmd_synthesize(args):
    from .synth import (KINDS, TrainingSet, build_dataset, single_pair, surrogate_background)
    from .volume import load_mask, load_volume

    _require(args, "out")
    if args.background or args.crack:
        _require(args, "background", "crack")
        pores = load_mask(args.pore_mask) if args.pore_mask else None
        lv = single_pair(load_volume(args.background), load_mask(args.crack), args.seed, pores,
                         args.kind)
        data = TrainingSet([lv])
    elif args.backgrounds:
        paths = args.backgrounds.split(",")
        masks = [load_mask(p) for p in args.pore_masks.split(",")] if args.pore_masks else None
        data = build_dataset([load_volume(p) for p in paths], args.seed, args.size, masks,
                             args.hurst, args.amplitude)
    else:
        pairs = [surrogate_background((args.size,) * 3, k, args.seed) for k in KINDS]
        data = build_dataset([p[0] for p in pairs], args.seed, args.size, [p[1] for p in pairs],
                             args.hurst, args.amplitude, surrogate=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    data.save(args.out)
    log.info("wrote %d labeled volumes to %s", len(data), args.out)


def cmd_patch(args):
    from .synth import TrainingSet, extract_patches, filter_patches
    from .volume import Mask, Volume, save_volume

    _require(args, "data")
    spec = _patch_spec(args)
    data = TrainingSet.load(args.data)
    total = with_crack = 0
    kept = []
    for i, lv in enumerate(data.volumes):
        patches = extract_patches(lv, spec, i)
        total += len(patches)
        with_crack += sum(1 for p in patches if p.crack_voxels > 0)
        kept += filter_patches(patches, spec)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for n, p in enumerate(kept):
            save_volume(Volume(p.gray), out / f"p{n:05d}_img.vvol")
            save_volume(Mask(p.truth), out / f"p{n:05d}_gt.vvol")
    print("patch_size\twith_crack\twithout_crack\ttraining")
    print(f"{spec.patch_size}\t{with_crack}\t{total - with_crack}\t{len(kept)}")


def cmd_train(args):
    from .synth import TrainingSet
    from .training import save_checkpoint, train
    from .unet import UnetConfig, build_unet

    _require(args, "data", "out")
    net = build_unet(UnetConfig(base_filters=args.base_filters, levels=args.levels), seed=args.seed)
    ckpt = train(net, TrainingSet.load(args.data), _train_config(args))
    save_checkpoint(ckpt, args.out)
    log.info("wrote %s after %d epochs", args.out, ckpt.epoch)


def cmd_finetune(args):
    from .synth import TrainingSet
    from .training import finetune, load_checkpoint, save_checkpoint

    _require(args, "checkpoint", "data", "out")
    ckpt = finetune(load_checkpoint(args.checkpoint), TrainingSet.load(args.data), _train_config(args))
    save_checkpoint(ckpt, args.out)
    log.info("wrote %s at epoch %d", args.out, ckpt.epoch)


def _post_config(args):
    from .segment import PostprocessConfig

    return PostprocessConfig(args.threshold, args.connectivity, args.boundary_crop)


def cmd_predict(args):
    from .segment import ScaleSet, binarize, multiscale_predict, postprocess
    from .synth import PatchSpec
    from .training import load_checkpoint
    from .volume import Volume, load_volume, save_volume

    _require(args, "checkpoint", "input", "out")
    cfg = _post_config(args)
    scales = ScaleSet.parse(args.scales)
    net = load_checkpoint(args.checkpoint).to_network()
    vol = load_volume(args.input)
    prob = multiscale_predict(net, vol, scales, PatchSpec(args.tile))
    if args.prob_out:
        save_volume(Volume(prob, vol.voxel_size_um), args.prob_out)
    mask = postprocess(binarize(prob, cfg), cfg)
    save_volume(mask, args.out)
    log.info("wrote %s (%d crack voxels, scales %s)", args.out, mask.count, scales.scales)


def cmd_postprocess(args):
    from .segment import binarize, postprocess
    from .volume import Mask, load_volume, save_volume

    _require(args, "input", "out")
    cfg = _post_config(args)
    vol = load_volume(args.input)
    m = binarize(vol.values, cfg) if vol.dtype_tag == "f32" else Mask(vol.values > 0)
    save_volume(postprocess(m, cfg), args.out)


def cmd_eval(args):
    from .segment import evaluate
    from .volume import load_mask

    _require(args, "pred", "truth")
    text = evaluate(load_mask(args.pred), load_mask(args.truth)).to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_slice(args):
    from .volume import export_slice, load_mask, load_volume

    _require(args, "input", "out")
    v = load_mask(args.input) if args.mask else load_volume(args.input)
    ax = "xyz".index(args.axis)
    index = v.dims[ax] // 2 if args.index is None else args.index
    export_slice(v, args.axis, index, args.out)


def cmd_stress(args):
    _require(args, "force", "span", "width", "height")
    print(repr(flexural_stress(BendingTestGeometry(args.force, args.span, args.width, args.height))))


COMMANDS = {
    "simulate": cmd_simulate, "synthesize": cmd_synthesize, "patch": cmd_patch,
    "train": cmd_train, "finetune": cmd_finetune, "predict": cmd_predict,
    "postprocess": cmd_postprocess, "eval": cmd_eval, "slice": cmd_slice, "stress": cmd_stress,
}


def _thread_limit() -> int:
    raw = os.environ.get("FISSURA_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"FISSURA_THREADS must be a positive integer, got {raw!r}")
    return n


def _origin_module(exc: BaseException) -> str:
    """Module of the innermost package frame that raised ``exc``."""
    pkg = Path(__file__).resolve().parent
    name = "fissura"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename).resolve()
        if pkg in path.parents:
            rel = path.relative_to(pkg).with_suffix("")
            name = ".".join(("fissura",) + rel.parts)
    return name


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args, sub = parse_args(argv)
        threads = _thread_limit()
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"fissura: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.dump_config:
        sys.stdout.write(dump_config(args, sub))
        return EXIT_OK
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fissura: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FissuraError, ValueError, OSError, ArithmeticError, IndexError) as exc:
        print(f"fissura {args.command}: {_origin_module(exc)}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
