"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or malformed
input, 4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .bench.experiment import ExperimentManifest, StageError, run_experiment, write_manifest
from .bench.methods import MethodConfig, measure_efficiency_many, predict_split
from .bench.tasks import DataFormatError, SyntheticTaskSpec, generate_task, read_split, write_splits
from .bench.train import TrainConfig, TrainingDivergedError, evaluate_loss, train_encoder
from .calibration import DEFAULT_BINS, PredictionRecord, apply_temperature, compute_ece, fit_temperature, shift_metrics
from .diagnostics import estimate_layer_variance
from .encoder import ConfigError, EncoderConfig, EncoderWeights, VocabularyError
from .linalg import ShapeError
from .mcinfer import DumpFormatError, read_dump, write_dump
from .selective import DEFAULT_THRESHOLDS, risk_coverage

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("uatlite")


class UsageError(Exception):
    pass


def _load_yaml(path) -> dict:
    if path is None:
        raise UsageError("a --config file is required")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a mapping at top level")
    return data


def cmd_generate(args) -> int:
    cfg = _load_yaml(args.config)
    spec = SyntheticTaskSpec.from_dict(cfg.get("task", cfg))
    splits = generate_task(spec)
    paths = write_splits(splits, args.out)
    write_manifest(args.out, "generate", {"task": spec.to_dict()}, args.config, [spec.seed])
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_yaml(args.config) if args.config else {}
    enc = EncoderConfig.from_dict(cfg.get("encoder", {}))
    tc = TrainConfig(**cfg.get("train", {}))
    train = read_split(Path(args.data) / "train.jsonl" if Path(args.data).is_dir() else args.data)
    hist: list = []
    w = train_encoder(train, enc, args.seed, tc, hist)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w.save(out / "checkpoint.npz")
    loss, acc = evaluate_loss(w, train.tokens, train.labels)
    with open(out / "train_log.json", "w") as fh:
        json.dump({"epoch_loss": hist, "final_train_loss": loss, "final_train_accuracy": acc}, fh, indent=2)
    write_manifest(out, "train", {"encoder": enc.to_dict(), "train": tc.to_dict(), "data": str(args.data)}, args.config, [args.seed])
    print(f"train accuracy {acc:.4f}, loss {loss:.4f}")
    return EXIT_OK


def _method_from_args(args, arch: EncoderConfig) -> MethodConfig:
    lam = 0.5 if args.lam is None else args.lam
    m = 5 if args.mc_samples is None else args.mc_samples
    rates = (
        0.1 if args.dropout_emb is None else args.dropout_emb,
        0.2 if args.dropout_att is None else args.dropout_att,
        0.3 if args.dropout_ffn is None else args.dropout_ffn,
    )
    if args.mode == "baseline":
        if args.mc_samples is not None:
            log.warning("--mode baseline runs one deterministic pass; ignoring --mc-samples %d", args.mc_samples)
        return MethodConfig("baseline_deterministic", name="baseline")
    if args.mode == "mc":
        return MethodConfig("mc_component", name="mc", rates=rates, mc_samples=m)
    return MethodConfig("uat_lite", name="uat", rates=rates, lam=lam, mc_samples=m)


def _check_data_fits(weights: EncoderWeights, split) -> None:
    c = weights.config
    if split.tokens.shape[1] > c.max_seq_len:
        raise VocabularyError(f"data sequences have length {split.tokens.shape[1]}, checkpoint max_seq_len is {c.max_seq_len}")
    if split.tokens.max() >= c.vocab_size:
        raise VocabularyError(f"data uses token id {int(split.tokens.max())}, checkpoint vocab_size is {c.vocab_size}")
    if split.labels.max() >= c.num_classes:
        raise VocabularyError(f"data uses label {int(split.labels.max())}, checkpoint has {c.num_classes} classes")


def cmd_infer(args) -> int:
    w = EncoderWeights.load(args.weights)
    split = read_split(args.data)
    _check_data_fits(w, split)
    method = _method_from_args(args, w.config)
    recs = predict_split(method, w, split, args.seed, include_passes=args.per_pass)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dump(out / "predictions.jsonl", recs)
    write_manifest(out, "infer", {"method": method.to_dict(), "weights": str(args.weights), "data": str(args.data)}, None, [args.seed])
    print(out / "predictions.jsonl")
    return EXIT_OK


def cmd_decompose(args) -> int:
    w = EncoderWeights.load(args.weights)
    split = read_split(args.data)
    _check_data_fits(w, split)
    method = _method_from_args(argparse.Namespace(**{**vars(args), "mode": "uat"}), w.config)
    regime = method.inference_config(w.config)
    layers = None if args.layers is None else [int(x) for x in args.layers.split(",")]
    rep = estimate_layer_variance(split.tokens[args.index], w, regime, args.seed, args.outer, args.inner, layers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "layer_variance.csv")
    with open(out / "layer_variance.json", "w") as fh:
        json.dump({
            "per_layer_variance": rep.per_layer_variance.tolist(),
            "normalized": rep.normalized.tolist(),
            "total_variance": rep.total_variance,
            "residual": rep.residual,
            "zero_total": rep.zero_total,
            "outer_samples": rep.outer_samples,
            "inner_samples": rep.inner_samples,
            "target_class": rep.target_class,
        }, fh, indent=2)
    write_manifest(out, "decompose", {"method": method.to_dict(), "index": args.index, "outer": args.outer,
                                      "inner": args.inner, "layers": layers}, None, [args.seed])
    print(out / "layer_variance.csv")
    return EXIT_OK


def _records(path) -> list:
    return [PredictionRecord.from_dump(r) for r in read_dump(path)]


def cmd_metrics(args) -> int:
    thresholds = tuple(float(t) for t in args.thresholds.split(",")) if args.thresholds else DEFAULT_THRESHOLDS
    recs = _records(args.predictions)
    ood = _records(args.ood_predictions) if args.ood_predictions else None
    temperature = None
    if args.fit_temperature:
        temperature = fit_temperature(_records(args.fit_temperature))
        recs = apply_temperature(recs, temperature)
        if ood is not None:
            ood = apply_temperature(ood, temperature)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = compute_ece(recs, args.bins)
    rep.temperature = temperature
    rep.write_json(out / "calibration.json")
    rep.write_bins_csv(out / "reliability_bins.csv")
    curve = risk_coverage(recs, thresholds)
    curve.write_csv(out / "risk_coverage.csv")
    curve.write_summary(out / "selective.json")
    summary = {"ece": rep.ece, "accuracy": rep.accuracy_overall, "num_bins": rep.num_bins, **curve.summary()}
    if ood is not None:
        ood_rep = compute_ece(ood, args.bins)
        ood_rep.temperature = temperature
        ood_rep.write_json(out / "calibration_ood.json")
        summary["ece_ood"] = ood_rep.ece
        summary.update(shift_metrics(rep, ood_rep))
    summary["temperature"] = temperature
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    write_manifest(out, "metrics", {"predictions": str(args.predictions), "ood_predictions": args.ood_predictions,
                                    "bins": args.bins, "thresholds": list(thresholds),
                                    "fit_temperature": args.fit_temperature}, None, None)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_experiment(args) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    summary = run_experiment(manifest, args.out, threads=args.threads, config_path=args.manifest)
    for row in summary["aggregate"]:
        print(f"{row['method']:<28} ece {row['ece_mean']:.4f} ± {row['ece_std']:.4f}  acc {row['accuracy_mean']:.4f}")
    return EXIT_OK


def cmd_bench_efficiency(args) -> int:
    w = EncoderWeights.load(args.weights)
    split = read_split(args.data)
    _check_data_fits(w, split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = [int(m) for m in args.mc_grid.split(",")] if args.mc_grid else [None]
    methods = [
        _method_from_args(argparse.Namespace(**{**vars(args), "mc_samples": m if m is not None else args.mc_samples}), w.config)
        for m in grid
    ]
    rows = measure_efficiency_many([(m, w) for m in methods], split.tokens[0], args.warmup, args.runs, args.seed)
    for method, res in zip(methods, rows):
        print(f"{method.name} M={method.nominal_passes}: {res['latency_median'] * 1e3:.3f} ms/example (median)")
    with open(out / "efficiency.json", "w") as fh:
        json.dump(rows, fh, indent=2)
    write_manifest(out, "bench-efficiency", {"mode": args.mode, "mc_grid": grid, "warmup": args.warmup, "runs": args.runs}, None, [args.seed])
    return EXIT_OK


def _add_method_flags(p):
    p.add_argument("--mode", choices=("baseline", "mc", "uat"), default="uat")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="uncertainty penalty (default 0.5)")
    p.add_argument("--mc-samples", type=int, default=None, help="stochastic passes M (default 5)")
    p.add_argument("--dropout-emb", type=float, default=None, help="embedding dropout (default 0.1)")
    p.add_argument("--dropout-att", type=float, default=None, help="attention dropout (default 0.2)")
    p.add_argument("--dropout-ffn", type=float, default=None, help="feed-forward dropout (default 0.3)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uatlite", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate synthetic task splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the toy encoder")
    p.add_argument("--data", required=True, help="directory with train.jsonl, or a split file")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write a prediction dump")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--per-pass", action="store_true", help="include per-pass logits")
    p.add_argument("--out", required=True)
    _add_method_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decompose", help="layer-wise variance decomposition for one example")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--outer", type=int, default=32)
    p.add_argument("--inner", type=int, default=32)
    p.add_argument("--layers", help="comma-separated live noise sources (0 = embedding)")
    p.add_argument("--out", required=True)
    _add_method_flags(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("metrics", help="calibration and selective-prediction reports")
    p.add_argument("--predictions", required=True)
    p.add_argument("--ood-predictions")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--thresholds", default="0.9,0.8,0.7")
    p.add_argument("--fit-temperature", metavar="VAL_DUMP")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("experiment", help="run a full experiment manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=int(os.environ.get("UATLITE_THREADS", "1")))
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("bench-efficiency", help="latency per example versus M")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mc-grid", help="comma-separated M values, e.g. 2,4,8")
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--runs", type=int, default=200)
    p.add_argument("--out", required=True)
    _add_method_flags(p)
    p.set_defaults(func=cmd_bench_efficiency)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(logging.DEBUG, level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc.cause)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc)


def _code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigError, TypeError)) or type(exc) is ValueError:
        return EXIT_USAGE
    if isinstance(exc, (OSError, DumpFormatError, DataFormatError, VocabularyError, ShapeError, yaml.YAMLError)):
        return EXIT_IO
    if isinstance(exc, (FloatingPointError, TrainingDivergedError)):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_USAGE
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
