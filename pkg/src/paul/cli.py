"""Command-line entry point.

Subcommands: ``synth`` (dataset generation), ``train``, ``eval``,
``infer`` (feed-forward prediction), ``export-latent``, and ``gradcheck``.
Every run is reproducible from its config file, seed, and inputs; the
effective configuration is echoed as ``config.resolved.json`` into the
output directory. Exit codes: 0 success, 2 configuration or parse error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluation, gradcheck, networks, trainer
from .errors import ConfigError, NumericalAbort, PaulError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="paul",
        description="Unsupervised 2D-to-3D keypoint lifting with a "
        "Procrustean shape auto-encoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", type=Path, help="JSON configuration file")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", type=Path, required=needs_out, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (single worker is used; 1 keeps runs bit-reproducible)")

    p = sub.add_parser("synth", help="generate a synthetic KPT dataset")
    common(p)

    p = sub.add_parser("train", help="train a model on a KPT dataset")
    common(p)
    p.add_argument("data", type=Path, help="input dataset (KPT)")
    p.add_argument("--mode", choices=trainer.MODES, help="training mode override")
    p.add_argument("--code-mode", choices=trainer.CODE_MODES, help="code mode override")
    p.add_argument("--bottleneck", type=int, help="latent dimension override")
    p.add_argument("--checkpoint-interval", type=int, default=0,
                   help="write a checkpoint every N steps (0: final only)")

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground truth")
    common(p)
    p.add_argument("data", type=Path)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--units", choices=("normalized", "original"), default="normalized")
    p.add_argument("--flip-policy", choices=("per-frame-best", "none"),
                   default="per-frame-best")

    p = sub.add_parser("infer", help="predict 3D keypoints for a KPT dataset")
    common(p)
    p.add_argument("data", type=Path)
    p.add_argument("checkpoint", type=Path)

    p = sub.add_parser("export-latent", help="write per-frame latent codes as CSV")
    common(p)
    p.add_argument("data", type=Path)
    p.add_argument("checkpoint", type=Path)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    common(p, needs_out=False)
    p.add_argument("--op-seeds", type=int, default=100)
    p.add_argument("--step-seeds", type=int, default=100)
    return parser


def _load_json(path):
    if path is None:
        raise ConfigError("missing --config")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _require_input(path):
    if not path.exists():
        raise ConfigError(f"input file not found: {path}")
    return path


def _echo_config(out_dir, payload):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.resolved.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_synth(args):
    spec_dict = _load_json(args.config)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = data_mod.SynthSpec.from_dict(spec_dict)
    dataset = data_mod.generate_synthetic(spec)
    _echo_config(args.out, {k: getattr(spec, a) for k, a in data_mod.SynthSpec.FIELD_KEYS.items()})
    data_mod.write_dataset(args.out / "dataset.kpt", dataset)
    print(f"wrote {dataset.n_frames} frames x {dataset.n_points} points to "
          f"{args.out / 'dataset.kpt'}")
    return EXIT_OK


def _cmd_train(args):
    config_dict = _load_json(args.config) if args.config else {}
    config = trainer.TrainConfig.from_dict(config_dict)
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "code_mode": args.code_mode,
        "bottleneck": args.bottleneck,
    }
    fields = {k: v for k, v in vars(config).items()}
    for attr, value in overrides.items():
        if value is not None:
            fields[attr] = value
    config = trainer.TrainConfig(**fields)

    dataset = data_mod.read_dataset(_require_input(args.data))
    _echo_config(args.out, config.to_dict())
    with open(args.out / "train.log.jsonl", "w") as log_stream:
        result = trainer.fit(
            dataset.without_ground_truth(),
            config,
            out_dir=str(args.out),
            checkpoint_interval=args.checkpoint_interval,
            log_stream=log_stream,
        )
    if result.reports:
        last = result.reports[-1]
        print(f"step {last.step}: total loss {last.losses.total:.6f}, "
              f"mean reprojection {last.mean_reproj:.6f}")
    print(f"final checkpoint: {args.out / 'ckpt-final.paulckpt'}")
    return EXIT_OK


def _cmd_eval(args):
    dataset = data_mod.read_dataset(_require_input(args.data))
    params, _ = networks.load_checkpoint(_require_input(args.checkpoint))
    cfg = evaluation.MetricConfig(units=args.units, flip_policy=args.flip_policy)
    _echo_config(args.out, {
        "data": str(args.data), "checkpoint": str(args.checkpoint),
        "units": cfg.units, "flip-policy": cfg.flip_policy,
        "depth-offset": cfg.depth_offset,
    })
    report = evaluation.evaluate(dataset, params, cfg)
    with open(args.out / "eval.report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"mean NE {report['mean-ne']:.6f}, mean MPJPE {report['mean-mpjpe']:.6f} "
          f"over {report['n-evaluated']} frames")
    return EXIT_OK


def _cmd_infer(args):
    dataset = data_mod.read_dataset(_require_input(args.data))
    params, _ = networks.load_checkpoint(_require_input(args.checkpoint))
    predictions = []
    for frame in dataset.frames:
        shape, _ = trainer.predict(frame, params)
        predictions.append(shape.points)
    _echo_config(args.out, {"data": str(args.data), "checkpoint": str(args.checkpoint)})
    out_path = args.out / "predictions.kpt"
    data_mod.write_dataset(out_path, data_mod.Dataset(frames=dataset.frames,
                                                      ground_truth=predictions))
    print(f"wrote predictions for {len(predictions)} frames to {out_path}")
    return EXIT_OK


def _cmd_export_latent(args):
    dataset = data_mod.read_dataset(_require_input(args.data))
    params, _ = networks.load_checkpoint(_require_input(args.checkpoint))
    _echo_config(args.out, {"data": str(args.data), "checkpoint": str(args.checkpoint)})
    codes = evaluation.export_latents(dataset, params, args.out / "latents.csv")
    print(f"wrote {codes.shape[0]} codes of dimension {codes.shape[1]} to "
          f"{args.out / 'latents.csv'}")
    return EXIT_OK


def _cmd_gradcheck(args):
    report = gradcheck.run_full_suite(
        op_seeds=args.op_seeds, step_seeds=args.step_seeds, verbose=True
    )
    print(f"max op error {report['max_op_err']:.3e} (tolerance {gradcheck.OP_TOLERANCE:.0e}), "
          f"full step {report['full_step']:.3e} (tolerance {gradcheck.FULL_STEP_TOLERANCE:.0e})")
    if not report["passed"]:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    print("gradient check passed")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "export-latent": _cmd_export_latent,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which matches the config-error code.
        return int(exc.code) if exc.code else EXIT_OK
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        for key, value in exc.diagnostics.items():
            print(f"  {key}: {value}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PaulError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
