"""
Command-line entry point: ``ffnseg {synth,train,infer,eval,seeds}``.

Exit codes: 0 success, 2 usage, 3 configuration error, 4 I/O error,
5 validation error (malformed files, inconsistent inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ffnseg import convnet, training
from ffnseg.config import RunConfig
from ffnseg.errors import ConfigError, FFNError
from ffnseg.inference import (
    FFNPredictor,
    GroundTruthOracle,
    SeedList,
    seed_points,
    segment_volume,
)
from ffnseg.metrics import evaluate, load_skeletons, save_skeletons
from ffnseg.synth import generate_world
from ffnseg.volume import ImageVolume, SegmentationVolume, load_volume, save_volume

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_VALIDATION = 5

logger = logging.getLogger("ffnseg")

# --- helpers ---

def resolve_config(args) -> RunConfig:
    """Config file (if any) overlaid with command-line overrides."""
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    for key in ("seed", "fov", "delta", "t_move", "max_steps", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = list(val) if isinstance(val, tuple) else val
    if getattr(args, "fov", None) or getattr(args, "delta", None):
        # an explicit example size still has to agree with the new geometry
        data.setdefault("example_dims", None)
    return RunConfig.from_dict(data)

def _announce(config: RunConfig, out_dir: Path | None = None):
    text = config.to_json()
    print("# resolved config")
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(text + "\n")

def _load_image(path) -> ImageVolume:
    vol = load_volume(path)
    if not isinstance(vol, ImageVolume):
        raise ConfigError(f"{path}: expected an image volume, found {type(vol).__name__}")
    return vol

def _load_segmentation(path) -> SegmentationVolume:
    vol = load_volume(path)
    if not isinstance(vol, SegmentationVolume):
        raise ConfigError(f"{path}: expected a segmentation volume, found {type(vol).__name__}")
    return vol

def world_dirs(data_dir: Path, split: str) -> list[Path]:
    return sorted(p for p in (data_dir / split).glob("world_*") if p.is_dir())

def load_world(path: Path):
    return (
        _load_image(path / "image"),
        _load_segmentation(path / "segmentation"),
        load_skeletons(path / "skeletons.txt"),
    )

# --- commands ---

def cmd_synth(config: RunConfig, out_dir: Path) -> list[Path]:
    """Write ``n_train`` + ``n_eval`` worlds under ``out_dir/{train,eval}``."""
    written = []
    for index in range(config.n_train + config.n_eval):
        split, k = ("train", index) if index < config.n_train else ("eval", index - config.n_train)
        world = generate_world(config.synth_config(index))
        d = out_dir / split / f"world_{k:03d}"
        save_volume(world.image, d / "image")
        save_volume(world.segmentation, d / "segmentation")
        save_skeletons(world.skeletons, d / "skeletons.txt")
        written.append(d)
        print(f"{d}: {len(world.skeletons)} objects")
    return written

def cmd_train(config: RunConfig, data_dir: Path, out_dir: Path) -> training.TrainingResult:
    train = [load_world(p) for p in world_dirs(data_dir, "train")]
    held = [load_world(p) for p in world_dirs(data_dir, "eval")]
    if not train:
        raise FileNotFoundError(f"no training worlds under {data_dir / 'train'}")
    tc = config.train_config()
    model = tc.build_model()
    evaluator = None
    if held:
        evaluator = training.heldout_evaluator(held, config.policy, config.seed_config,
                                               config.min_object_size, config.connected_objects)
    result = training.training_loop(model, [(w[0], w[1]) for w in train], tc, out_dir,
                                    evaluator=evaluator)
    for step, path in result.checkpoints:
        print(f"checkpoint {step} {path}")
    for step, rep in result.reports:
        print(f"eval {step} " + " ".join(f"{v:.2f}" for v in rep.row()))
    best = result.best()
    if best is not None:
        print(f"best {best[0]} {best[1]}")
    return result

def cmd_infer(config: RunConfig, image_path, out, checkpoint=None, oracle=None,
              canvases: bool = False):
    image = _load_image(image_path)
    if (checkpoint is None) == (oracle is None):
        raise ConfigError("infer needs exactly one of --checkpoint or --oracle")
    if checkpoint is not None:
        model = convnet.load_checkpoint(checkpoint, fov=config.fov)
        predictor = FFNPredictor(model)
    else:
        predictor = GroundTruthOracle(_load_segmentation(oracle), fov=config.fov)
    run = segment_volume(image, predictor, config.policy, config.seed_config,
                         min_object_size=config.min_object_size, keep_canvases=canvases,
                         connected=config.connected_objects)
    out = Path(out)
    save_volume(run.segmentation, out)
    if canvases:
        for oid, canvas in sorted(run.canvases.items()):
            save_volume(canvas, out.with_name(f"{out.name}_canvas_{oid:04d}"))
    log = out.with_name(out.name + ".log")
    log.write_text("\n".join(["# resolved config", config.to_json(), *run.log_lines()]) + "\n")
    n_obj = sum(o["status"] == "committed" for o in run.objects)
    print(f"{n_obj} objects from {len(run.seeds)} seeds, {run.evaluations} evaluations")
    print(f"segmentation {out}.hdr, log {log}")
    return run

def cmd_eval(segmentation_path, skeletons_path, out=None):
    seg = _load_segmentation(segmentation_path)
    report = evaluate(load_skeletons(skeletons_path), seg)
    print(report.to_table(Path(segmentation_path).name))
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(report.to_kv())
    return report

def cmd_seeds(config: RunConfig, image_path) -> SeedList:
    seeds = seed_points(_load_image(image_path), config.seed_config)
    for i, (pos, score) in enumerate(seeds):
        print(f"{i}\t{pos[0]}\t{pos[1]}\t{pos[2]}\t{score:.4f}")
    return seeds

# --- argument parsing ---

def _triple(text: str) -> tuple[int, int, int]:
    parts = text.replace("x", ",").split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its fields")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--fov", type=_triple, help="field of view X,Y,Z")
    common.add_argument("--delta", type=_triple, help="movement step X,Y,Z")
    common.add_argument("--t-move", dest="t_move", type=float, help="movement threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ffnseg", description="Flood-filling segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic worlds")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train on synthetic worlds")
    p.add_argument("--data", required=True, help="directory written by 'synth'")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("infer", parents=[common], help="segment a volume")
    p.add_argument("image", help="image volume (path without .hdr)")
    p.add_argument("--out", required=True, help="segmentation output path")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="trained model")
    g.add_argument("--oracle", nargs="?", const="", metavar="GT",
                   help="use the ground-truth oracle; GT defaults to a 'segmentation' "
                        "volume next to the image")
    p.add_argument("--canvases", action="store_true", help="also save per-object canvases")

    p = sub.add_parser("eval", parents=[common], help="score a segmentation against skeletons")
    p.add_argument("segmentation")
    p.add_argument("skeletons")
    p.add_argument("--out", help="write the report as key = value lines")

    p = sub.add_parser("seeds", parents=[common], help="list seed points of an image")
    p.add_argument("image")
    return parser

def _dispatch(args) -> None:
    config = resolve_config(args)
    if args.command == "synth":
        out = Path(args.out)
        _announce(config, out)
        cmd_synth(config, out)
    elif args.command == "train":
        out = Path(args.out)
        _announce(config, out)
        cmd_train(config, Path(args.data), out)
    elif args.command == "infer":
        _announce(config)
        oracle = args.oracle
        if oracle == "":
            oracle = Path(args.image).parent / "segmentation"
        cmd_infer(config, args.image, args.out, checkpoint=args.checkpoint, oracle=oracle,
                  canvases=args.canvases)
    elif args.command == "eval":
        cmd_eval(args.segmentation, args.skeletons, args.out)
    elif args.command == "seeds":
        _announce(config)
        cmd_seeds(config, args.image)

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FFNError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
