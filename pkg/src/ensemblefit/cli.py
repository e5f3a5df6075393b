"""Command-line entry point: ``ensemblefit <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure (the failing stage is named), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import ensemble as ens
from . import monitor
from .config import ConfigError, RunConfig, parse_config, write_resolved
from .data import read_manifest, to_arrays, write_dataset
from .tensor_net import load_model, save_model

log = logging.getLogger("ensemblefit")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", type=Path, help="output directory (overrides ENSEMBLEFIT_OUT and out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensemblefit", description="Transfer-learned CNN ensembles for surface-defect images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the standard synthetic defect dataset (images + manifest.csv)")
    _config_args(p)

    p = sub.add_parser("pretrain", help="pretrain backbones on the synthetic source task")
    _config_args(p)

    p = sub.add_parser("finetune", help="graft and fine-tune each pretrained backbone")
    _config_args(p)
    p.add_argument("--pretrained", type=Path, help="directory holding pretrained/<backbone>.json")
    p.add_argument("--data", type=Path, help="manifest.csv written by synth (default: generate)")

    p = sub.add_parser("ensemble", help="build an ensemble from fine-tuned member models")
    _config_args(p)
    p.add_argument("--models", type=Path, nargs="+", required=True, help="member model files, in admission order")
    p.add_argument("--data", type=Path, help="manifest.csv of the validation set (default: generate)")

    p = sub.add_parser("eval", help="metrics and confidence.csv for a model or ensemble on a dataset")
    _config_args(p)
    p.add_argument("--model", type=Path, required=True, help="model file, ensemble.json, or its directory")
    p.add_argument("--data", type=Path, help="manifest.csv (default: the generated test split)")

    p = sub.add_parser("monitor", help="consistency report for a history.csv")
    _config_args(p)
    p.add_argument("history", type=Path)

    p = sub.add_parser("report", help="correlation heatmap of a model on one image")
    _config_args(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, help="manifest.csv (default: the generated test split)")
    p.add_argument("--item", type=int, default=0, help="row of the dataset to analyse")
    p.add_argument("--layer", type=int, help="conv layer index (default: last conv layer)")

    for name, text in (("exp1", "augmented CNN baseline"), ("exp2", "per-backbone transfer fine-tuning"),
                       ("exp3", "ensemble of fine-tuned backbones")):
        p = sub.add_parser(name, help=text)
        _config_args(p)
        if name != "exp1":
            p.add_argument("--reuse", type=Path, help="reuse pretrained backbones from an earlier exp2/exp3 out_dir")
    return parser


def load_run_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = parse_config(args.config, overrides)
    return cfg if args.out is None else dataclasses.replace(cfg, out_dir=str(args.out))


def _stage(name: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _dataset(cfg: RunConfig, manifest: Path | None, part: int | None):
    """A manifest's items, or the configured dataset (one split part if ``part`` is given)."""
    from .experiments import SPLIT, derive_seed, resolve, target_dataset
    from .data import split

    if manifest is not None:
        return read_manifest(manifest)
    cfg = resolve(cfg, "exp3")
    ds = target_dataset(cfg)
    return ds if part is None else split(ds, cfg.data.ratios, seed=derive_seed(cfg.seed, SPLIT))[part]


def _write_json(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_synth(cfg: RunConfig, args) -> dict:
    from .experiments import resolve, target_dataset

    out = Path(cfg.out_dir)
    ds = _stage("synthesize", target_dataset, resolve(cfg, "exp3"))
    path = _stage("write dataset", write_dataset, ds, out)
    return {"manifest": str(path), "items": len(ds), "class_counts": ds.class_counts}


def cmd_pretrain(cfg: RunConfig, args) -> dict:
    from .experiments import pretrain_backbones, save_pretrained

    out = Path(cfg.out_dir)
    pretrained = _stage("pretrain", pretrain_backbones, cfg.train.backbones, cfg.seed, cfg.data.image_size,
                        cfg.data.source_n_per_class, cfg.train.pretrain_epochs, cfg.train.lr,
                        cfg.train.optimizer, cfg.train.batch_size)
    save_pretrained(pretrained, out)
    meta = {name: p.source_meta for name, p in pretrained.items()}
    _write_json(meta, out / "pretrained" / "source_meta.json")
    return meta


def cmd_finetune(cfg: RunConfig, args) -> dict:
    from .data import split
    from .experiments import (SPLIT, derive_seed, fine_tune_config, load_pretrained, pretrain_backbones,
                              resolve, train_members)

    cfg = resolve(cfg, "exp2")
    out = Path(cfg.out_dir)
    names = list(cfg.train.backbones)
    if args.pretrained is not None:
        pretrained = _stage("load pretrained", load_pretrained, names, args.pretrained)
    else:
        pretrained = _stage("pretrain", pretrain_backbones, names, cfg.seed, cfg.data.image_size,
                            cfg.data.source_n_per_class, cfg.train.pretrain_epochs, cfg.train.lr,
                            cfg.train.optimizer, cfg.train.batch_size)
    ds = _stage("load data", _dataset, cfg, args.data, None)
    train, val, _ = (to_arrays(p, tuple(cfg.data.image_size))
                     for p in split(ds, cfg.data.ratios, seed=derive_seed(cfg.seed, SPLIT)))
    models, histories = _stage("finetune", train_members, pretrained, names, train, val,
                               fine_tune_config(cfg, cfg.seed), cfg.seed)
    result = {}
    for name, model, history in zip(names, models, histories):
        save_model(model, out / "models" / f"{name}.json")
        monitor.export_curves(history, out / "members" / name / "history.csv")
        result[name] = {"final_val_loss": history.val_loss[-1], "final_val_acc": history.val_acc[-1]}
    return result


def cmd_ensemble(cfg: RunConfig, args) -> dict:
    out = Path(cfg.out_dir)
    models = [_stage("load models", load_model, p) for p in args.models]
    ids = [p.stem for p in args.models]
    shape = tuple(cfg.data.image_size)
    expected = (models[0].input_shape[0], *shape)
    e = _stage("build ensemble", ens.build_ensemble, models, expected, cfg.ensemble.n, ids,
               threshold=cfg.ensemble.threshold, combine=cfg.ensemble.combine)
    X, y = to_arrays(_stage("load data", _dataset, cfg, args.data, 1), shape)
    e = _stage("evaluate members", ens.evaluate_members, e, X, y)
    if cfg.ensemble.mode == ens.RECIPROCAL:
        e = ens.apply_reciprocal_weights(e)
    elif cfg.ensemble.mode == ens.CALIBRATED:
        e = _stage("calibrate", ens.calibrate_weights, e, X, y, cfg.ensemble.lam, cfg.ensemble.grid_step)
    ens.save_ensemble(e, out)
    return {"members": [m.model_id for m in e.members], "rejected": [list(r) for r in e.rejected],
            "val_losses": e.losses, "weights": None if e.weights is None else e.weights.tolist(), "mode": e.mode}


def _load_any(path: Path):
    if path.is_dir() or path.name == "ensemble.json":
        return ens.load_ensemble(path)
    return load_model(path)


def cmd_eval(cfg: RunConfig, args) -> dict:
    out = Path(cfg.out_dir)
    model = _stage("load model", _load_any, args.model)
    ds = _stage("load data", _dataset, cfg, args.data, 2)
    X, y = to_arrays(ds, tuple(cfg.data.image_size))
    ids = [Path(it.path).name if it.path else str(i) for i, it in enumerate(ds.items)]
    rows = _stage("predict", monitor.batch_confidence, model, X, y[:, 0], ids, cfg.ensemble.threshold)
    monitor.write_confidence_csv(rows, out / "confidence.csv")
    metrics = monitor.compute_metrics([r.probability for r in rows], y[:, 0], cfg.ensemble.threshold)
    doc = monitor.build_report(metrics, cfg.ensemble.threshold)
    monitor.write_report(doc, out / "report.json")
    return doc


def cmd_monitor(cfg: RunConfig, args) -> dict:
    history = _stage("read history", monitor.read_curves, args.history)
    criterion = monitor.ConsistencyCriterion(cfg.consistency.epsilon, cfg.consistency.window)
    report = _stage("consistency", monitor.consistency_report, history, criterion, cfg.consistency.tail)
    doc = {"consistency": report.to_json(), "deltas": report.deltas.tolist()}
    _write_json(doc, Path(cfg.out_dir) / "consistency.json")
    return doc


def cmd_report(cfg: RunConfig, args) -> dict:
    model = _stage("load model", load_model, args.model)
    ds = _stage("load data", _dataset, cfg, args.data, 2)
    if not 0 <= args.item < len(ds):
        raise StageError("report", IndexError(f"item {args.item} outside 0..{len(ds) - 1}"))
    X, _ = to_arrays(ds.subset([args.item]), model.input_shape[1:])
    corr = _stage("feature correlation", monitor.feature_correlation, model, X[0], args.layer)
    out = Path(cfg.out_dir)
    monitor.render_heatmap(corr.matrix, out / "heatmap.pgm")
    doc = {"item": args.item, "constant_channels": list(corr.constant_channels),
           "matrix": np.round(corr.matrix, 10).tolist()}
    _write_json(doc, out / "correlation.json")
    return doc


def cmd_experiment(cfg: RunConfig, args) -> dict:
    from .experiments import EXPERIMENTS

    runner = EXPERIMENTS[args.command]
    reuse = getattr(args, "reuse", None)
    return _stage(args.command, runner, cfg, reuse) if reuse is not None else _stage(args.command, runner, cfg)


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "ensemble": cmd_ensemble,
    "eval": cmd_eval, "monitor": cmd_monitor, "report": cmd_report,
    "exp1": cmd_experiment, "exp2": cmd_experiment, "exp3": cmd_experiment,
}


def _log_to(out: Path, verbose: bool) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None) and not isinstance(exc.code, int):
            print(exc.code, file=sys.stderr)
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        cfg = load_run_config(args)
    except ConfigError as exc:
        print(f"ensemblefit: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.out_dir)
    handler = _log_to(out, args.verbose)
    started = time.time()
    try:
        if args.command not in ("exp1", "exp2", "exp3"):
            write_resolved(cfg, out)
        result = COMMANDS[args.command](cfg, args)
    except StageError as exc:
        log.exception("failure")
        print(f"ensemblefit: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ConfigError as exc:
        print(f"ensemblefit: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.exception("failure")
        print(f"ensemblefit: stage {args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        log.info("%s finished in %.1f s", args.command, time.time() - started)
        logging.getLogger().removeHandler(handler)
        handler.close()
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
