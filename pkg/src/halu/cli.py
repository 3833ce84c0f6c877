"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numerical failure.
Every run prints its fully resolved configuration as JSON before doing work;
the same JSON (minus "command") can be fed back via --config, whose entries
override the command-line flags.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import data as datamod
from . import model as modelmod
from . import simulator as sim
from . import svgplot
from . import training as trainmod
from .errors import ConfigError, DomainError, FormatError, HaluError, ShapeError, TrainingDiverged
from .layers import LAYER_KINDS, gradient_check_all

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the documented usage code is 1
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="halu", description="Obstacle-distance inference from 2D laser scans")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file whose entries override flags")
        return p

    p = command("gen-data", "generate a synthetic scan-pair dataset")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--kinds", default="room,corridor,glass_room,table_room,mixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-rays", type=int, default=128)
    p.add_argument("--fov-deg", type=float, default=90.0)
    p.add_argument("--max-range", type=float, default=30.0)
    p.add_argument("--poses-per-scene", type=int, default=4)
    p.add_argument("--sensor-noise", type=float, default=0.0,
                   help="std (m) of range-finder noise applied before fusion")
    p.add_argument("--note", default="synthetic scenes")
    p.add_argument("--format", choices=["bin", "csv"], default="bin")

    p = command("train", "train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--sigma-noise", type=float, default=0.02)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--no-skip", action="store_true")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--loss", choices=["rmsle", "mse"], default="rmsle")
    p.add_argument("--log")

    p = command("eval", "mean rmsle of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = command("infer", "run inference on scan CSV rows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan-csv", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--chunked", action="store_true")

    p = command("ablate", "run the hyperparameter ablation grid")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--grid", default="default", help="'default' or a JSON grid file")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--report-format", choices=["markdown", "csv", "json"], default="markdown")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)

    p = command("gradcheck", "finite-difference checks for all layer kinds")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)

    p = command("plot", "polar SVG overlay of scan and prediction")
    p.add_argument("--scan-csv", required=True)
    p.add_argument("--pred-csv")
    p.add_argument("--out-svg", required=True)
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--fov-deg", type=float, default=90.0)
    p.add_argument("--max-range", type=float, default=30.0)

    return parser


def _apply_config_file(args):
    path = getattr(args, "config", None)
    if not path:
        return args
    with open(path, "r", encoding="utf-8") as fh:
        try:
            overrides = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file is not valid JSON: {exc}") from exc
    known = set(vars(args))
    for key, value in overrides.items():
        if key == "command":
            continue
        if key not in known:
            raise _UsageError(f"unknown config key {key!r}")
        setattr(args, key, value)
    return args


def _print_resolved(args):
    resolved = {k: v for k, v in vars(args).items() if k != "config"}
    print(json.dumps(resolved, sort_keys=True))


def _read_scan_rows(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(np.array([float(v) for v in line.split(",")]))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no scan rows found")
    return rows


def _write_scan_rows(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _load_any_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == datamod.DATASET_MAGIC:
        return datamod.load_dataset(path)
    return datamod.import_csv(path)


def _cmd_gen_data(args):
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    spec = sim.LaserSpec(
        n_rays=args.n_rays, fov=math.radians(args.fov_deg), max_range=args.max_range
    )
    pairs = sim.generate_dataset(
        args.pairs,
        kinds,
        spec,
        args.seed,
        poses_per_scene=args.poses_per_scene,
        sensor_noise=args.sensor_noise,
    )
    dataset = datamod.Dataset(
        pairs=pairs, n_points=args.n_rays, max_range=args.max_range, note=args.note
    )
    if args.format == "bin":
        datamod.save_dataset(dataset, args.out)
    else:
        datamod.export_csv(dataset, args.out)
    print(f"wrote {len(dataset)} pairs to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    train_set = _load_any_dataset(args.data)
    model_cfg = modelmod.AutoencoderConfig(
        n_points=train_set.n_points,
        skip_connections=not args.no_skip,
        gamma=args.gamma,
        max_range=train_set.max_range,
    )
    model = modelmod.build(model_cfg, seed=args.seed)
    cfg = trainmod.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        lr=args.lr,
        sigma_noise=args.sigma_noise,
        flip=not args.no_flip,
        shuffle=not args.no_shuffle,
        loss=args.loss,
        log_path=args.log,
    )
    _, history = trainmod.train(model, train_set, cfg)
    meta = {
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "loss_digest": modelmod.loss_history_digest(history.losses),
        "final_loss": history.losses[-1],
    }
    modelmod.save(model, args.out_checkpoint, meta=meta)
    print(f"final train loss {history.losses[-1]:.6f}; checkpoint written to {args.out_checkpoint}")
    if args.test:
        test_set = _load_any_dataset(args.test)
        print(f"test rmsle {trainmod.evaluate(model, test_set):.6f}")
    return EXIT_OK


def _cmd_eval(args):
    model = modelmod.load(args.checkpoint)
    test_set = _load_any_dataset(args.data)
    print(f"{trainmod.evaluate(model, test_set):.6f}")
    return EXIT_OK


def _cmd_infer(args):
    model = modelmod.load(args.checkpoint)
    rows = _read_scan_rows(args.scan_csv)
    out_rows = []
    for i, row in enumerate(rows):
        if args.chunked:
            out_rows.append(model.infer_chunked(row))
        else:
            if row.size != model.config.n_points:
                raise ShapeError(
                    f"{args.scan_csv}: row {i} has {row.size} values, model expects "
                    f"{model.config.n_points} (use --chunked for other widths)"
                )
            out_rows.append(model.predict(row))
    _write_scan_rows(args.out_csv, out_rows)
    print(f"wrote {len(out_rows)} predictions to {args.out_csv}")
    return EXIT_OK


def _load_grid(grid_arg, repeats):
    if grid_arg == "default":
        return trainmod.default_grid(repeats=repeats)
    with open(grid_arg, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"grid file is not valid JSON: {exc}") from exc
    try:
        rows = [
            trainmod.AblationVariant(
                name=str(row["name"]),
                skip_connections=bool(row["skip_connections"]),
                gamma=float(row["gamma"]),
                sigma_noise=float(row["sigma_noise"]),
            )
            for row in payload["configs"]
        ]
        return trainmod.AblationGrid(
            configs=rows, repeats=repeats, baseline=int(payload.get("baseline", 0))
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed grid file: {exc}") from exc


def _cmd_ablate(args):
    train_set = _load_any_dataset(args.train_data)
    test_set = _load_any_dataset(args.test_data)
    grid = _load_grid(args.grid, args.repeats)
    train_cfg = trainmod.TrainConfig(epochs=args.epochs)
    model_cfg = modelmod.AutoencoderConfig(
        n_points=train_set.n_points, max_range=train_set.max_range
    )
    report = trainmod.run_ablation(
        grid,
        train_set,
        test_set,
        base_seed=args.seed,
        model_config=model_cfg,
        train_config=train_cfg,
        workers=args.workers,
    )
    text = trainmod.emit_report(report, args.report_format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"report written to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def _cmd_gradcheck(args):
    reports = gradient_check_all(
        trials=args.trials, step=args.step, tolerance=args.tolerance, seed=args.seed
    )
    failed = False
    for kind in LAYER_KINDS:
        rep = reports[kind]
        status = "ok" if rep["passed"] else "FAIL"
        worst = max(rep["errors"].values())
        print(f"{kind:12s} {status:4s} max relative error {worst:.3e}")
        failed = failed or not rep["passed"]
    if failed:
        print("halu:numerical-error: gradient check failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_plot(args):
    rows = _read_scan_rows(args.scan_csv)
    if not 0 <= args.row < len(rows):
        raise FormatError(f"--row {args.row} out of range; file has {len(rows)} rows")
    scan = rows[args.row]
    predicted = None
    if args.pred_csv:
        pred_rows = _read_scan_rows(args.pred_csv)
        if not 0 <= args.row < len(pred_rows):
            raise FormatError(f"--row {args.row} out of range; {args.pred_csv} has {len(pred_rows)} rows")
        predicted = pred_rows[args.row]
    svg = svgplot.polar_overlay_svg(
        scan,
        predicted=predicted,
        fov=math.radians(args.fov_deg),
        max_range=args.max_range,
    )
    with open(args.out_svg, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"wrote {args.out_svg}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "plot": _cmd_plot,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args)
    except SystemExit as exc:  # --help and friends
        return exc.code or EXIT_OK
    except _UsageError as exc:
        print(f"halu:usage-error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"halu:data-error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except FormatError as exc:
        print(f"halu:data-error: {exc}", file=sys.stderr)
        return EXIT_DATA

    _print_resolved(args)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"halu:usage-error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"halu:data-error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, ShapeError, DomainError, ConfigError) as exc:
        print(f"halu:data-error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"halu:numerical-error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HaluError as exc:
        print(f"halu:numerical-error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
