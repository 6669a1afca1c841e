"""Command-line front end: data generation, staged training, growth, label
inference, evaluation, sample dumps and the route-comparison grid.

Every run records its resolved configuration, seed and format versions into
a manifest in the output directory so results can be reproduced bit for bit.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import growth as GR
from . import layers as L
from . import netspec as NS
from . import train as TR

FORMAT_VERSIONS = {"sgds": D.SGDS_VERSION, "sgck": D.SGCK_VERSION}


def _write_manifest(out_dir: Path, command: str, config: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "format_versions": FORMAT_VERSIONS,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_config_file(path):
    """Plain key=value lines; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _merge_config(args, parser_defaults, file_keys):
    """Config-file values fill in only where the command line used a default."""
    if not args.config:
        return
    values = _load_config_file(args.config)
    for key, raw in values.items():
        if key not in file_keys:
            raise ValueError(f"unknown config key {key!r}")
        if getattr(args, key) == parser_defaults[key]:
            default = parser_defaults[key]
            if isinstance(default, bool):
                parsed = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                parsed = int(raw)
            elif isinstance(default, float):
                parsed = float(raw)
            else:
                parsed = raw
            setattr(args, key, parsed)


def _train_config(args, route=None) -> TR.TrainConfig:
    return TR.TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        epochs_per_stage=args.epochs,
        threshold=args.threshold,
        metric=args.metric,
        route=route or tuple(args.route.split(",")),
        seed=args.seed,
        scale=args.scale,
        image=args.image,
        latent=args.latent,
        labels_per_class=args.labels_per_class,
        test_per_class=args.test_per_class,
        per_class_cap=args.per_class_cap,
        dtype=args.dtype,
    )


def _add_train_options(p):
    p.add_argument("--data", required=True, help="SGDS dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--route", default="baby", help="comma-separated stage route")
    p.add_argument("--metric", default="mmd", choices=("mmd", "l1"))
    p.add_argument("--threshold", type=float, default=0.98)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=NS.DESK_SCALE)
    p.add_argument("--image", type=int, default=NS.DESK_IMAGE)
    p.add_argument("--latent", default="uniform", choices=("uniform", "gaussian"))
    p.add_argument("--labels-per-class", type=int, default=10)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--per-class-cap", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=("f64", "f32"))
    p.add_argument("--config", default=None, help="key=value config file; flags override")


def _build_parser():
    parser = argparse.ArgumentParser(prog="growgan", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    subparsers = {}

    p = subparsers["gen-data"] = sub.add_parser("gen-data", help="generate a synthetic SGDS dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--noise-std", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = subparsers["train"] = sub.add_parser("train", help="train along a growth route")
    _add_train_options(p)

    p = subparsers["routes"] = sub.add_parser("routes", help="route-comparison grid over all stage subsets")
    _add_train_options(p)

    p = subparsers["grow"] = sub.add_parser("grow", help="grow a checkpointed pair to a deeper stage")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True, choices=NS.STAGES)
    p.add_argument("--out", required=True)

    p = subparsers["infer-labels"] = sub.add_parser("infer-labels", help="re-run label inference on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.98)
    p.add_argument("--out", required=True)

    p = subparsers["eval"] = sub.add_parser("eval", help="evaluate a checkpointed discriminator")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = subparsers["sample"] = sub.add_parser("sample", help="dump generated images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser, subparsers


def _cmd_gen_data(args):
    spec = D.SyntheticSpec(
        classes=args.classes,
        size=args.size,
        per_class=args.per_class,
        noise_std=args.noise_std,
    )
    ds = D.generate_synthetic(spec, seed=args.seed)
    D.save_dataset(ds, args.out)
    print(f"wrote {args.out}: n={len(ds)} {ds.image_shape[0]}x{ds.image_shape[1]}x{ds.image_shape[2]} k={ds.num_classes}")
    return 0


def _cmd_train(args):
    ds = D.load_dataset(args.data)
    cfg = _train_config(args)
    out = Path(args.out)
    _write_manifest(out, "train", vars(args) | {"resolved": cfg.__dict__ | {"route": list(cfg.route)}})
    result = TR.run_route(cfg, ds, out_dir=out)
    print(f"final accuracy={result.final_accuracy!r}")
    for stage, acc in result.stage_accuracy.items():
        print(f"stage {stage}: accuracy={acc!r}")
    return 0


ROUTE_GRID = (
    ("baby",),
    ("junior",),
    ("senior",),
    ("baby", "junior"),
    ("baby", "senior"),
    ("junior", "senior"),
    ("baby", "junior", "senior"),
)


def _cmd_routes(args):
    ds = D.load_dataset(args.data)
    out = Path(args.out)
    _write_manifest(out, "routes", vars(args))
    lines = ["route,final_acc"]
    print(f"{'route':24s} final_acc")
    for route in ROUTE_GRID:
        cfg = _train_config(args, route=route)
        result = TR.run_route(cfg, ds, out_dir=out / "+".join(route))
        name = "+".join(route)
        lines.append(f"{name},{result.final_accuracy!r}")
        print(f"{name:24s} {result.final_accuracy!r}")
    (out / "routes.csv").write_text("\n".join(lines) + "\n")
    return 0


def _cmd_grow(args):
    ds = D.load_dataset(args.data)
    run = TR.TrainRun.resume(args.ckpt, ds)
    if args.target not in run.cfg.route:
        run.cfg = TR.TrainConfig(**{**run.cfg.__dict__, "route": run.cfg.route + (args.target,), "stage_epochs": ()})
    run.advance_stage()
    run.save(args.out)
    print(f"grew to stage {run.cell.stage}; wrote {args.out}")
    return 0


def _cmd_infer_labels(args):
    ds = D.load_dataset(args.data)
    run = TR.TrainRun.resume(args.ckpt, ds)
    before = run.pools.counts()
    run.pools = TR.infer_labels(
        run.cell, run.pools, ds, args.threshold, run.cfg.per_class_cap, dtype=run.cfg.np_dtype
    )
    after = run.pools.counts()
    run.save(args.out)
    print(f"latent-labeled {before['n_latent']} -> {after['n_latent']}; wrote {args.out}")
    return 0


def _cmd_eval(args):
    ds = D.load_dataset(args.data)
    ck = D.load_checkpoint(args.ckpt)
    dtype = np.float32 if ck.meta.get("config", {}).get("dtype") == "f32" else np.float64
    indices = np.flatnonzero(ds.labels >= 0)
    acc = TR.evaluate(ck.d_model, ds, indices, dtype=dtype)
    print(f"accuracy={acc!r}")
    return 0


def _cmd_sample(args):
    ck = D.load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = ck.g_model
    rng = np.random.default_rng(args.seed)
    dtype = np.float32 if ck.meta.get("config", {}).get("dtype") == "f32" else np.float64
    z = NS.sample_latent(g.latent_prior, args.n, rng, dtype)
    images = g.forward(z, L.Context(L.EVAL)).data
    for i in range(args.n):
        D.write_image(images[i], out / f"sample_{i:03d}.ppm")
    print(f"wrote {args.n} samples to {out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "routes": _cmd_routes,
    "grow": _cmd_grow,
    "infer-labels": _cmd_infer_labels,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
}


def main(argv=None) -> int:
    parser, subparsers = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "config", None):
        sub = subparsers[args.verb]
        defaults = {k: sub.get_default(k) for k in vars(args) if k not in ("verb", "config")}
        try:
            _merge_config(args, defaults, set(defaults))
        except (OSError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
    try:
        return _COMMANDS[args.verb](args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
