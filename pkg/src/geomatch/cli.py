"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .datakit import (
    FAMILIES,
    Manifest,
    attach_images,
    load_manifest,
    random_image,
    save_image,
    save_manifest,
    synth_pair,
    write_images,
)
from .errors import ConfigError, GeomatchError
from .evaluate import DEFAULT_ALPHA, evaluate_dataset, format_table
from .geometry import warp_image
from .matchnet import ModelConfig, estimate_transform, init_params
from .optimize import MODES, REFERENCE_LR_SELF_UNSUP, REFERENCE_LR_SUP_SEMI, TrainConfig, train

log = logging.getLogger("geomatch")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _env_threads() -> int:
    try:
        return max(1, int(os.environ.get("GEOMATCH_THREADS", "1")))
    except ValueError:
        return 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="geomatch", description="Semi-supervised geometric matching at desk scale.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.add_argument("--config", help="JSON file (or checkpoint) whose settings override defaults; flags win")
        return sp

    s = add("synth", "Generate synthetic pairs with known transforms.")
    s.add_argument("--out", required=True, help="output directory (manifest.json + images)")
    s.add_argument("--num-pairs", type=int, default=100, help="number of pairs")
    s.add_argument("--image-size", type=int, default=64, help="square image side in pixels")
    s.add_argument("--family", choices=FAMILIES, default="composite", help="transform family")
    s.add_argument("--strength", type=float, default=0.2, help="half-width of the uniform parameter draw")
    s.add_argument("--keypoints", type=int, default=20, help="keypoints per pair")
    s.add_argument("--seed", type=int, default=0, help="random seed")

    b = add("benchmark", "Generate the procedural semantic-matching benchmark (labeled/unlabeled/test/synth).")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--seed", type=int, default=0, help="random seed")
    b.add_argument("--image-size", type=int, default=64, help="square image side in pixels")

    t = add("train", "Train a model in one of the four supervision modes.")
    t.add_argument("--mode", choices=MODES, default="semi",
                   help="self: synthetic grid loss; sup: keypoint loss; unsup: cycle loss; semi: both")
    t.add_argument("--labeled", help="manifest of labeled pairs (sup, semi)")
    t.add_argument("--unlabeled", help="manifest of unlabeled pairs (unsup, semi)")
    t.add_argument("--synth-dir", help="directory written by `synth` (self)")
    t.add_argument("--init", help="checkpoint to start from (e.g. a self-supervised model)")
    t.add_argument("--beta", type=float, default=1.0, help="weight of the cycle loss")
    t.add_argument("--lr", type=float, default=1e-3,
                   help=f"Adam learning rate; published values for a pretrained backbone are "
                        f"{REFERENCE_LR_SUP_SEMI:g} (sup/semi) and {REFERENCE_LR_SELF_UNSUP:g} (self/unsup)")
    t.add_argument("--batch-size", type=int, default=16, help="pairs per Adam step")
    t.add_argument("--epochs", type=int, default=10, help="passes over the training pairs")
    t.add_argument("--max-steps", type=int, default=None, help="optional cap on optimizer steps")
    t.add_argument("--seed", type=int, default=0, help="seed for initialization and batch order")
    t.add_argument("--freeze-features", type=_bool, default=True, help="train only the regression heads")
    t.add_argument("--symmetric-cycle", type=_bool, default=False, help="average both cycle directions")
    t.add_argument("--grid", type=_grid, default=(20, 20), help="loss grid as HxW")
    t.add_argument("--fc-init-scale", type=float, default=0.0, help="FC weight init scale (0 = exact identity)")
    t.add_argument("--threads", type=int, default=None, help="intra-batch threads (default $GEOMATCH_THREADS or 1)")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also write OUT.epochN every N epochs")
    t.add_argument("--log", help="write the training log as JSON lines")
    t.add_argument("--out", required=True, help="checkpoint path")

    e = add("eval", "PCK evaluation of a checkpoint on a labeled manifest.")
    e.add_argument("--model", required=True, help="checkpoint")
    e.add_argument("--data", required=True, help="labeled manifest")
    e.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="PCK threshold in [0,1] image units")
    e.add_argument("--report", help="write the JSON report here")
    e.add_argument("--dump-distances", type=_bool, default=False, help="include raw transfer distances")

    w = add("warp", "Write a source | target | warped-source triptych.")
    w.add_argument("--model", required=True, help="checkpoint")
    w.add_argument("--source", required=True, help="source image")
    w.add_argument("--target", required=True, help="target image")
    w.add_argument("--out", required=True, help="output PNG")

    g = add("gradcheck", "Finite-difference check of every analytic gradient.")
    g.add_argument("--seed", type=int, default=0, help="seed for the random draws")
    g.add_argument("--tol", type=float, default=None,
                   help="override both tolerances (defaults 1e-5 transforms, 1e-4 network)")

    x = add("pipeline", "Benchmark -> self -> sup and semi -> eval for one seed; prints the PCK table.")
    x.add_argument("--seed", type=int, default=1, help="benchmark and training seed")
    x.add_argument("--out", help="directory for checkpoints and reports")
    return p


def _read_overlay(path: str) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] == MAGIC:
        meta = load_checkpoint(path)[1]
        if "cli_config" not in meta:
            raise UsageError(f"{path}: checkpoint carries no CLI configuration")
        return meta["cli_config"]
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON config: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        overlay = _read_overlay(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(k for k in overlay if k not in known and k not in ("command", "config"))
        if unknown:
            raise UsageError(f"{args.config}: unknown settings {unknown}")
        converted = {}
        for a in sp._actions:
            if a.dest in overlay:
                v = overlay[a.dest]
                converted[a.dest] = tuple(v) if a.dest == "grid" else v
        sp.set_defaults(**converted)
        args = parser.parse_args(argv)
    return args


# output locations are not part of an experiment's identity
_NOT_ECHOED = ("config", "verbose", "out", "log", "report")


def resolved_config(args) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k not in _NOT_ECHOED}


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.num_pairs < 0 or args.image_size < 1 or args.keypoints < 1:
        raise UsageError("--num-pairs must be >= 0, --image-size and --keypoints >= 1")
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    pairs = []
    for k in range(args.num_pairs):
        base = random_image(args.image_size, rng)
        pairs.append(synth_pair(base, args.family, args.strength, int(rng.integers(2 ** 31)), args.keypoints,
                                source_ref=f"img/{k:05d}_src.png", target_ref=f"img/{k:05d}_tgt.png"))
    m = Manifest(pairs, image_root=".", metadata={"config": resolved_config(args), "seed": args.seed})
    write_images(m, out)
    save_manifest(m, out / "manifest.json")
    print(f"wrote {len(pairs)} pairs to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .benchmark import BenchmarkConfig, make_benchmark

    out = Path(args.out)
    sets = make_benchmark(BenchmarkConfig(image_size=args.image_size, seed=args.seed))
    for name, m in sets.items():
        m.image_root = "."
        m.metadata["config"] = resolved_config(args)
        write_images(m, out)
        save_manifest(m, out / f"{name}.json")
        print(f"{name}: {len(m.pairs)} pairs -> {out / (name + '.json')}")
    return EXIT_OK


def _load_data(path):
    m = load_manifest(path)
    return attach_images(m, path)


def cmd_train(args) -> int:
    need = {"self": ["synth_dir"], "sup": ["labeled"], "unsup": ["unlabeled"], "semi": ["labeled", "unlabeled"]}
    missing = [f"--{n.replace('_', '-')}" for n in need[args.mode] if not getattr(args, n)]
    if missing:
        raise UsageError(f"--mode {args.mode} requires {', '.join(missing)}")
    threads = args.threads if args.threads is not None else _env_threads()
    try:
        cfg = TrainConfig(mode=args.mode, learning_rate=args.lr, batch_size=args.batch_size, beta=args.beta,
                          epochs=args.epochs, max_steps=args.max_steps, seed=args.seed,
                          freeze_features=args.freeze_features, symmetric_cycle=args.symmetric_cycle,
                          grid=args.grid, threads=threads)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc

    labeled = _load_data(args.labeled).pairs if args.labeled else []
    unlabeled = _load_data(args.unlabeled).pairs if args.unlabeled else []
    synth = _load_data(Path(args.synth_dir) / "manifest.json").pairs if args.synth_dir else []
    if args.init:
        model, _ = load_checkpoint(args.init)
    else:
        sample = (labeled or unlabeled or synth)[0].images[0]
        model = init_params(ModelConfig(image_size=sample.shape[0], fc_init_scale=args.fc_init_scale), args.seed)

    meta = {"cli_config": resolved_config(args), "seed": args.seed, "train_config": cfg.to_dict()}

    def on_epoch(epoch, params):
        if args.checkpoint_every and (epoch + 1) % args.checkpoint_every == 0:
            save_checkpoint(f"{args.out}.epoch{epoch + 1}", params, {**meta, "epoch": epoch + 1})
        return None

    params, tlog = train(model, labeled, unlabeled, synth, cfg, on_epoch=on_epoch, log_every=50)
    save_checkpoint(args.out, params, meta)
    if args.log:
        tlog.config = meta["cli_config"]
        tlog.write_jsonl(args.log)
    losses = tlog.losses()
    print(f"trained {len(losses)} steps; final loss {losses[-1]:.6f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not 0 <= args.alpha:
        raise UsageError("--alpha must be >= 0")
    model, meta = load_checkpoint(args.model)
    rep = evaluate_dataset(model, _load_data(args.data), args.alpha, keep_distances=args.dump_distances)
    print(format_table({Path(args.model).name: rep}))
    if args.report:
        doc = rep.to_dict()
        doc["config"] = resolved_config(args)
        doc["model_meta"] = meta
        Path(args.report).write_text(json.dumps(doc, indent=1))
    return EXIT_OK


def _load_rgb(path, size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def cmd_warp(args) -> int:
    model, _ = load_checkpoint(args.model)
    size = model.config.image_size
    src, tgt = _load_rgb(args.source, size), _load_rgb(args.target, size)
    t = estimate_transform(src, tgt, model)
    warped = warp_image(src, t)
    save_image(args.out, np.concatenate([src, tgt, warped], axis=1))
    print(json.dumps({"out": args.out, "transform": t.to_dict()}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import NETWORK_TOL, TRANSFORM_TOL, run_suite

    tt = TRANSFORM_TOL if args.tol is None else args.tol
    nt = NETWORK_TOL if args.tol is None else args.tol
    results = run_suite(args.seed, tt, nt)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_pipeline(args) -> int:
    from .experiment import PipelineConfig, run_pipeline

    res = run_pipeline(PipelineConfig(seed=args.seed), out_dir=args.out)
    print(format_table(res.reports))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "benchmark": cmd_benchmark, "train": cmd_train, "eval": cmd_eval,
            "warp": cmd_warp, "gradcheck": cmd_gradcheck, "pipeline": cmd_pipeline}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GeomatchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
