"""Command-line entry point: ``rdunet <subcommand> [flags]``.

Every run writes its outputs and a ``resolved_config.json`` under
``--out-dir``. Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric
failure, 5 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import connectivity, data, gradcheck, metrics
from .engine import ShapeError, Tensor
from .network import CheckpointError, NetworkConfig, build_network, load_checkpoint, predict_mask, save_checkpoint
from .training import NonFiniteLoss, TrainingConfig, train

logger = logging.getLogger("rdunet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

DEFAULTS = {
    "seed": 0,
    "model": {"height": 64, "width": 64, "in_channels": 1, "base_width": 16, "growth_base": 4,
              "num_classes": 2, "growth_cap": None},
    "train": {"batch_size": 16, "learning_rate": 1e-3, "decay_every": 15, "decay_factor": 10.0,
              "epochs": 300, "max_steps": None, "weight_decay": 1e-4, "augment": True, "shuffle": True,
              "checkpoint_every": 0, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "data": {"count": 16, "size": 64, "ship_probability": 0.3, "val_fraction": 0.125, "test_fraction": 0.125},
    "predict": {"batch_size": 8, "split": "test"},
    "gradcheck": {"step": 1e-6, "tolerance": 1e-4},
    "analyze": {"schemes": ["log-dense", "full-dense"], "L_min": 1, "L_max": 16},
}


class ConfigError(ValueError):
    pass


class IOFailure(OSError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def resolve_config(config_path: str | None, overrides: list[str], flag_values: dict) -> dict:
    """Defaults, then the JSON file, then --set overrides, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise IOFailure(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, loaded)
    for text in overrides:
        keys, value = _parse_override(text)
        nested = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested)
    for dotted, value in flag_values.items():
        if value is None:
            continue
        nested = value
        for k in reversed(dotted.split(".")):
            nested = {k: nested}
        _merge(cfg, nested)
    return cfg


def _model_config(cfg: dict) -> NetworkConfig:
    try:
        return NetworkConfig(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model config: {exc}") from exc


def _train_config(cfg: dict) -> TrainingConfig:
    try:
        return TrainingConfig(seed=int(cfg["seed"]), **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from exc


def _prepare_out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise IOFailure(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_snapshot(out: Path, command: str, cfg: dict) -> None:
    snapshot = {"command": command, "config": cfg}
    (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")


@contextmanager
def _thread_cap():
    """Honour RDUNET_THREADS (0 = serial) for BLAS pools."""
    raw = os.environ.get("RDUNET_THREADS")
    if raw is None:
        yield
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"RDUNET_THREADS must be an integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(1, n)):
        yield


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, out: Path, args) -> int:
    d = cfg["data"]
    try:
        samples = data.generate_synthetic(int(cfg["seed"]), int(d["count"]), int(d["size"]),
                                          float(d["ship_probability"]))
        splits = data.split_indices(len(samples), float(d["val_fraction"]), float(d["test_fraction"]),
                                    int(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        manifest = data.write_dataset(out, samples, splits)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    print(f"wrote {len(samples)} samples and {manifest}")
    return EXIT_OK


def _load_split(manifest: str, split: str) -> list[data.Sample]:
    try:
        return data.load_split(manifest, split)
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot load {split} split from {manifest}: {exc}") from exc


def cmd_train(cfg: dict, out: Path, args) -> int:
    model_cfg, train_cfg = _model_config(cfg), _train_config(cfg)
    samples = _load_split(args.manifest, "train")
    if not samples:
        raise IOFailure(f"{args.manifest} has no training samples")
    shape = samples[0].image.shape
    if shape != (model_cfg.height, model_cfg.width):
        raise ConfigError(f"images are {shape}, model expects {(model_cfg.height, model_cfg.width)}")
    model = build_network(model_cfg, train_cfg.seed)
    if train_cfg.epochs == 0 or train_cfg.max_steps == 0:
        save_checkpoint(out / "checkpoint_final.rdun", model.state_dict())
        (out / "train_log.csv").write_text("epoch,step,lr,loss,accuracy\n")
        print("no steps requested; wrote initial checkpoint")
        return EXIT_OK
    try:
        result = train(model, samples, train_cfg, out_dir=out, log_path=out / "train_log.csv")
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = result.log[-1]
    print(f"{result.steps} steps; final loss {last['loss']:.6f}, train accuracy {last['accuracy']:.4f}")
    return EXIT_OK


def _load_model(cfg: dict, checkpoint: str):
    model = build_network(_model_config(cfg), int(cfg["seed"]))
    try:
        state = load_checkpoint(checkpoint)
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {checkpoint}: {exc}") from exc
    except CheckpointError as exc:
        raise IOFailure(str(exc)) from exc
    try:
        model.load_state_dict(state)
    except ShapeError as exc:
        raise IOFailure(f"checkpoint does not fit the model: {exc}") from exc
    return model


def cmd_predict(cfg: dict, out: Path, args) -> int:
    model = _load_model(cfg, args.checkpoint)
    split = cfg["predict"]["split"]
    try:
        entries = data.read_manifest(args.manifest)[split]
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {args.manifest}: {exc}") from exc
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    bs = int(cfg["predict"]["batch_size"])
    for start in range(0, len(entries), bs):
        chunk = entries[start:start + bs]
        try:
            images = np.stack([data.read_pgm(img) for img, _ in chunk])[:, None]
        except (OSError, ValueError) as exc:
            raise IOFailure(str(exc)) from exc
        if images.shape[2:] != (model.config.height, model.config.width):
            raise IOFailure(f"image size {images.shape[2:]} does not match the model input")
        masks = predict_mask(model, Tensor(images))
        for (_, mask_path), mask in zip(chunk, masks):
            data.write_pgm(pred_dir / Path(mask_path).name, mask.astype(np.int64), mask=True)
    print(f"wrote {len(entries)} predicted masks to {pred_dir}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path, args) -> int:
    split = cfg["predict"]["split"]
    try:
        entries = data.read_manifest(args.manifest)[split]
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {args.manifest}: {exc}") from exc
    cm = metrics.ConfusionMatrix(int(cfg["model"]["num_classes"]))
    for _, mask_path in entries:
        pred_path = Path(args.pred_dir) / Path(mask_path).name
        try:
            truth = data.read_pgm(mask_path, mask=True)
            pred = data.read_pgm(pred_path, mask=True)
        except (OSError, ValueError) as exc:
            raise IOFailure(str(exc)) from exc
        cm.accumulate(pred, truth)
    if cm.total == 0:
        raise IOFailure(f"split {split!r} of {args.manifest} is empty")
    (out / "metrics.csv").write_text(metrics.report_csv(cm))
    print(f"overall accuracy {metrics.overall_accuracy(cm):.6f} over {cm.total} pixels")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path, args) -> int:
    g = cfg["gradcheck"]
    cases = gradcheck.run_suite(float(g["step"]), float(g["tolerance"]), int(cfg["seed"]))
    lines = ["case,max_rel_error,checked,worst,passed"]
    for c in cases:
        r = c.report
        lines.append(f"{c.name},{r.max_rel_error!r},{r.checked},{r.worst},{int(r.passed)}")
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    failed = [c for c in cases if not c.report.passed]
    if failed:
        worst = max(failed, key=lambda c: c.report.max_rel_error)
        print(f"gradcheck FAILED: worst {worst.name} at {worst.report.worst}, "
              f"relative error {worst.report.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradcheck passed: {len(cases)} cases, worst relative error "
          f"{max(c.report.max_rel_error for c in cases):.3e}")
    return EXIT_OK


def cmd_analyze(cfg: dict, out: Path, args) -> int:
    a = cfg["analyze"]
    schemes = a["schemes"]
    if isinstance(schemes, str):
        schemes = [schemes]
    lo, hi = int(a["L_min"]), int(a["L_max"])
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid L range {lo}..{hi}")
    try:
        rows = connectivity.analysis_rows(schemes, range(lo, hi + 1))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    (out / "connectivity.csv").write_text(connectivity.rows_to_csv(rows))
    table = connectivity.rows_to_table(rows)
    (out / "connectivity.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "analyze": cmd_analyze,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. train.max_steps=40")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rdunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic PGM pairs and a manifest")
    p.add_argument("--count", type=int, dest="data.count")
    p.add_argument("--size", type=int, dest="data.size")
    p.add_argument("--ship-probability", type=float, dest="data.ship_probability")

    p = sub.add_parser("train", parents=[common], help="train on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, dest="train.epochs")
    p.add_argument("--max-steps", type=int, dest="train.max_steps")
    p.add_argument("--batch-size", type=int, dest="train.batch_size")
    p.add_argument("--lr", type=float, dest="train.learning_rate")
    p.add_argument("--no-augment", action="store_const", const=False, dest="train.augment")

    p = sub.add_parser("predict", parents=[common], help="write argmax masks for a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", dest="predict.split", choices=data.SPLITS)

    p = sub.add_parser("eval", parents=[common], help="score predicted masks against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--split", dest="predict.split", choices=data.SPLITS)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification suite")
    p.add_argument("--tolerance", type=float, dest="gradcheck.tolerance")
    p.add_argument("--step", type=float, dest="gradcheck.step")

    p = sub.add_parser("analyze", parents=[common], help="connectivity analysis table")
    p.add_argument("--scheme", action="append", dest="analyze.schemes")
    p.add_argument("--L", type=int, dest="L")
    p.add_argument("--L-min", type=int, dest="analyze.L_min")
    p.add_argument("--L-max", type=int, dest="analyze.L_max")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if "." in k}
    flags["seed"] = args.seed
    if getattr(args, "L", None) is not None:
        flags["analyze.L_min"] = flags["analyze.L_max"] = args.L
    try:
        cfg = resolve_config(args.config, args.overrides, flags)
        out = _prepare_out_dir(args.out_dir)
        _write_snapshot(out, args.command, cfg)
        with _thread_cap():
            return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
