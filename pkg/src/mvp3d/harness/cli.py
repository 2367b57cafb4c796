"""Command-line interface.

Exit codes: 0 success, 1 check or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import __version__
from ..model.checkpoint import CheckpointError
from ..model.config import ConfigError, ModelConfig
from ..model.network import SceneMismatchError
from ..scenegen import TEMPLATES, DatasetFormatError, GenerationError, SceneConfig, generate_scenes, read_dataset, write_dataset
from .parallel import ThreadSettingError, limit_blas

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mvp3d")


class UsageError(Exception):
    pass


def _positive(kind=int):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def _nonneg_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# ---------------------------------------------------------------- run config


def geometry_of(scene) -> dict:
    """Model-config fields implied by a dataset."""
    V, C, H, W = scene.features.shape
    return {"V": V, "C_in": C, "H": H, "W": W, "J": int(scene.gt_poses.shape[1]),
            "workspace": [list(map(float, r)) for r in scene.workspace], "stride": int(round(scene.stride))}


def build_run_config(args, scenes=None):
    from .config import RunConfig

    run = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if scenes and not args.config:
        # without an explicit config the model adopts the dataset's geometry
        overrides.update({f"model.{k}": v for k, v in geometry_of(scenes[0]).items()})
    for flag, key in (("lr", "lr"), ("epochs", "epochs"), ("max_steps", "max_steps"), ("seed", "seed"),
                      ("out", "output_dir"), ("data", "train_data")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    overrides.update(_parse_set(getattr(args, "set", None)))
    return run.with_overrides(overrides) if overrides else run


def _load_scenes(path):
    if path is None:
        raise UsageError("no dataset given (use --data or set train_data in the config)")
    return read_dataset(path)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.joints not in TEMPLATES:
        raise UsageError(f"--joints must be one of {sorted(TEMPLATES)}")
    cfg = SceneConfig(V=args.views, N_max=args.max_persons, J=args.joints, H=args.size, W=args.size,
                      heatmap_sigma_px=args.sigma, noise_std=args.noise, distractor_rate=args.distractors)
    scenes = generate_scenes(args.scenes, args.seed, cfg)
    write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Trainer, TrainingDivergedError

    pre = build_run_config(args)
    scenes = _load_scenes(args.data or pre.train_data)
    run = build_run_config(args, scenes)
    trainer = Trainer(run, scenes)
    if args.resume:
        trainer.resume(args.resume)
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")

    def report(tr, step, loss):
        if step % args.log_every == 0:
            print(f"step {step} epoch {tr.scene_at((step - 1) * run.grad_accum)[0]} loss {loss:.6f} lr {tr.opt.lr:g}",
                  flush=True)

    try:
        state = trainer.train(callback=report)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(f"trained {state.step} steps; final checkpoint {out / 'final.mvpc'}")
    return EXIT_OK


def _load_for_eval(args):
    from .train import load_network

    run, net, _, _ = load_network(args.checkpoint)
    scenes = _load_scenes(args.data)
    conf = run.confidence_threshold if args.conf_threshold is None else args.conf_threshold
    return run, net, scenes, conf


def cmd_eval(args) -> int:
    from .evaluate import evaluate, write_eval
    from ..metrics import format_value

    _, net, scenes, conf = _load_for_eval(args)
    rows, records = evaluate(net, scenes, thresholds=args.thresholds, confidence_threshold=conf)
    write_eval(rows, records, args.out, args.predictions)
    for metric, thr, val in rows:
        print(f"{metric:<7} {thr:>5g} {format_value(val)}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .evaluate import infer_scenes, write_inference_jsonl

    _, net, scenes, conf = _load_for_eval(args)
    preds = infer_scenes(net, scenes)
    kept = [(p[c >= conf], c[c >= conf]) for p, c in preds]
    write_inference_jsonl(kept, args.out)
    print(f"wrote predictions for {len(kept)} scenes to {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import format_report, grad_check

    status = EXIT_OK
    for seed in args.seed:
        results = grad_check(seed)
        print(f"seed {seed}")
        print(format_report(results))
        if not all(r.ok for r in results):
            status = EXIT_FAIL
    return status


def cmd_ablate(args) -> int:
    from .ablate import BudgetError, ablate

    scenes = _load_scenes(args.data)
    base = build_run_config(args, scenes)
    if args.steps is not None:
        base = base.with_overrides({"max_steps": args.steps})
    grid = {"pos_encoding": args.pos_encodings, "query_mode": args.query_modes, "K": args.K, "L": args.L}

    def progress(i, cell, row):
        print(f"cell {i}: {cell} AP@250={row['AP@250']:.3f} MPJPE={row['MPJPE']:.1f}", flush=True)

    try:
        ablate(base, grid, scenes, args.out, max_cells=args.max_cells, progress=progress)
    except BudgetError as e:
        raise UsageError(str(e)) from None
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench

    cfg = ModelConfig(N=args.slots, J=args.joints, C=args.channels, L=args.layers, V=args.views)
    scfg = SceneConfig(V=args.views, J=args.joints, N_max=args.max_persons)
    res = bench(cfg, scfg, repeats=args.repeats)
    print(f"forward 1 person: {res.seconds_one * 1000:.2f} ms")
    print(f"forward {res.n_many} persons: {res.seconds_many * 1000:.2f} ms")
    print(f"ratio: {res.ratio:.3f} (limit {args.limit})")
    return EXIT_OK if res.ratio < args.limit else EXIT_FAIL


# ---------------------------------------------------------------- parser


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--lr", type=_positive(float))
    p.add_argument("--epochs", type=_positive())
    p.add_argument("--max-steps", type=_positive())
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. model.L=2 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvp3d", description="Multi-view 3D pose transformer toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic MVPD dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=_positive(), default=100)
    p.add_argument("--views", type=_positive(), default=5)
    p.add_argument("--max-persons", type=_positive(), default=3)
    p.add_argument("--joints", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=_nonneg_float, default=0.0)
    p.add_argument("--distractors", type=_nonneg_float, default=0.0)
    p.add_argument("--size", type=_positive(), default=64, help="feature map height and width")
    p.add_argument("--sigma", type=_positive(float), default=2.0, help="heatmap sigma in pixels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=_positive(), default=100)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("infer", cmd_infer, "write predictions as JSONL")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="metrics CSV" if name == "eval" else "predictions JSONL")
        p.add_argument("--conf-threshold", type=_nonneg_float)
        if name == "eval":
            p.add_argument("--thresholds", type=_csv_list(float), default=[25, 50, 75, 100, 125, 150, 250, 500])
            p.add_argument("--predictions", help="also dump per-scene predictions as JSONL")
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter block")
    p.add_argument("--seed", type=int, nargs="+", default=[0])
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train and evaluate a config grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="comparison CSV")
    p.add_argument("--pos-encodings", type=_csv_list(str), default=["rays", "none"])
    p.add_argument("--query-modes", type=_csv_list(str), default=["hierarchical_adaptive", "per_joint"])
    p.add_argument("--K", type=_csv_list(int), default=[4])
    p.add_argument("--L", type=_csv_list(int), default=[6])
    p.add_argument("--steps", type=_positive(), help="optimizer steps per cell")
    p.add_argument("--max-cells", type=_positive(), default=16)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="forward-time ratio for 1 vs N_max persons")
    p.add_argument("--views", type=_positive(), default=5)
    p.add_argument("--joints", type=int, default=15)
    p.add_argument("--slots", type=_positive(), default=10, help="person slots N of the model")
    p.add_argument("--max-persons", type=_positive(), default=3)
    p.add_argument("--channels", type=_positive(), default=64)
    p.add_argument("--layers", type=_positive(), default=6)
    p.add_argument("--repeats", type=_positive(), default=5)
    p.add_argument("--limit", type=_positive(float), default=1.2)
    p.set_defaults(func=cmd_bench)
    return ap


def _make_parents(args) -> None:
    # file outputs may point into directories that do not exist yet; train makes its own
    if args.command == "train":
        return
    for name in ("out", "predictions"):
        path = getattr(args, name, None)
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _make_parents(args)
        with limit_blas():
            return args.func(args)
    except (UsageError, ThreadSettingError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneMismatchError, CheckpointError, DatasetFormatError, GenerationError, FileNotFoundError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
