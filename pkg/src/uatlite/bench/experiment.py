"""Experiment manifests and the resumable end-to-end run.

A run directory looks like::

    manifest.yaml                    resolved config echo (re-runnable as input)
    data/{split}.jsonl
    checkpoints/seed{S}_member{J}.npz
    predictions/{method}__seed{S}__{split}.jsonl
    reports/cells/{method}__seed{S}.json
    reports/summary.json
    tables/results_per_seed.csv, results_aggregate.csv, ablation.csv,
           sensitivity.csv, efficiency.csv, layer_variance.csv

Finished cells (one per seed and method) and checkpoints are reused on rerun.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .. import __version__
from ..calibration import DEFAULT_BINS
from ..diagnostics import estimate_layer_variance
from ..encoder import EncoderConfig, EncoderWeights
from ..mcinfer import write_dump
from . import methods as M
from .tasks import SPLITS, SyntheticTaskSpec, generate_task, read_split, write_splits
from .train import TrainConfig, train_encoder

log = logging.getLogger(__name__)

DEFAULT_ROSTER = (
    {"kind": "baseline_deterministic"},
    {"kind": "mc_uniform", "p": 0.1, "mc_samples": 5},
    {"kind": "mc_component", "rates": [0.1, 0.2, 0.3], "mc_samples": 5},
    {"kind": "uat_lite", "lambda": 0.5, "mc_samples": 5, "rates": [0.1, 0.2, 0.3]},
    {"kind": "temp_scaling", "base": "baseline_deterministic"},
    {"kind": "deep_ensemble", "k": 5},
)
# Metrics compared for reproducibility; wall-clock fields are excluded.
TIMING_FIELDS = ("wall_time",)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentManifest:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: list = field(default_factory=lambda: [M.MethodConfig.from_dict(d) for d in DEFAULT_ROSTER])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    shared_checkpoint: bool = True
    train_seed: int = 0
    bins: int = DEFAULT_BINS
    thresholds: object = "default"
    ablation: bool = True
    sensitivity: dict | None = field(default_factory=lambda: {"lambdas": [0.1, 0.5, 1.0], "mc_samples": [3, 5, 10]})
    efficiency: dict | None = field(default_factory=lambda: {"warmup": 50, "runs": 200})
    decomposition: dict | None = None
    label_collapse: list | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        d = dict(d or {})
        if "config" in d and "command" in d:  # a run directory's echo
            d = dict(d["config"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        kw = dict(d)
        if "task" in kw:
            kw["task"] = SyntheticTaskSpec.from_dict(kw["task"])
        if "encoder" in kw:
            kw["encoder"] = EncoderConfig.from_dict(kw["encoder"])
        if "train" in kw:
            kw["train"] = TrainConfig(**kw["train"])
        if "methods" in kw:
            kw["methods"] = [M.MethodConfig.from_dict(m) for m in kw["methods"]]
            names = [m.name for m in kw["methods"]]
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate method names in roster: {names}")
        if "seeds" in kw:
            kw["seeds"] = [int(s) for s in kw["seeds"]]
        man = cls(**kw)
        if man.task.vocab_size != man.encoder.vocab_size or man.task.seq_len > man.encoder.max_seq_len:
            raise ValueError("task vocabulary/length does not fit the encoder config")
        if man.task.num_classes != man.encoder.num_classes:
            raise ValueError("task num_classes differs from encoder num_classes")
        if man.label_collapse is not None and len(man.label_collapse) != man.task.num_classes:
            raise ValueError(f"label_collapse needs one entry per class ({man.task.num_classes})")
        return man

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "seeds": list(self.seeds),
            "shared_checkpoint": self.shared_checkpoint,
            "train_seed": self.train_seed,
            "bins": self.bins,
            "thresholds": self.thresholds,
            "ablation": self.ablation,
            "sensitivity": self.sensitivity,
            "efficiency": self.efficiency,
            "decomposition": self.decomposition,
            "label_collapse": self.label_collapse,
        }

    @property
    def ensemble_size(self) -> int:
        ks = [m.k for m in self.methods if m.kind == "deep_ensemble" or (m.kind == "temp_scaling" and m.base == "deep_ensemble")]
        return max(ks, default=1)


def write_manifest(out_dir, command: str, config: dict, config_path=None, seeds=None) -> Path:
    """Write the run manifest; exactly one per output directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "config": config,
        "seeds": seeds,
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "output_dir": str(out_dir),
    }
    path = out_dir / "manifest.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    return path


def write_rows_csv(path, rows: list, columns=None) -> None:
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])


def read_rows_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = v if v != "" else None
        out.append(conv)
    return out


def aggregate_rows(rows: list, key: str = "method") -> list:
    """Mean and sample std (ddof=1; 0 for a single seed) of every numeric column per group."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for name, rs in groups.items():
        agg = {key: name, "n_seeds": len(rs)}
        for col in rs[0]:
            if col in (key, "seed") or not all(isinstance(r.get(col), (int, float)) and not isinstance(r.get(col), bool) for r in rs):
                continue
            vals = np.array([r[col] for r in rs], dtype=np.float64)
            agg[f"{col}_mean"] = float(vals.mean())
            agg[f"{col}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(agg)
    return out


class ExperimentRunner:
    def __init__(self, manifest: ExperimentManifest, out_dir, threads: int = 1, config_path=None):
        self.manifest = manifest
        self.out = Path(out_dir)
        self.threads = max(1, int(threads))
        self.config_path = config_path
        self.splits: dict = {}
        self._weights: dict = {}

    # -- stages -----------------------------------------------------------
    def _stage(self, name, fn, *args):
        try:
            return fn(*args)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with stage tag
            raise StageError(name, exc) from exc

    def prepare_data(self):
        data_dir = self.out / "data"
        if all((data_dir / f"{s}.jsonl").exists() for s in SPLITS):
            self.splits = {s: read_split(data_dir / f"{s}.jsonl") for s in SPLITS}
        else:
            self.splits = generate_task(self.manifest.task)
            write_splits(self.splits, data_dir)

    def _train_seed_for(self, seed: int) -> int:
        return self.manifest.train_seed if self.manifest.shared_checkpoint else seed

    def members(self, seed: int) -> list:
        """Checkpoints for an experiment seed: member 0 is the single-model checkpoint."""
        ts = self._train_seed_for(seed)
        out = []
        for j in range(self.manifest.ensemble_size):
            key = (ts, j)
            if key not in self._weights:
                path = self.out / "checkpoints" / f"seed{ts}_member{j}.npz"
                if path.exists():
                    w = EncoderWeights.load(path)
                else:
                    log.info("training seed %d member %d", ts, j)
                    w = train_encoder(self.splits["train"], self.manifest.encoder, ts + 1000 * j, self.manifest.train)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    w.save(path)
                self._weights[key] = w
            out.append(self._weights[key])
        return out

    def run_cell(self, seed: int, method: M.MethodConfig) -> dict:
        cell_path = self.out / "reports" / "cells" / f"{method.name}__seed{seed}.json"
        if cell_path.exists():
            with open(cell_path) as fh:
                return json.load(fh)
        members = self.members(seed)
        model = members if method.kind == "deep_ensemble" or method.base == "deep_ensemble" else members[0]
        dumps: dict = {}
        row = M.run_method(method, model, self.splits, seed, self.manifest.bins, self.manifest.thresholds, dumps,
                           label_collapse=self.manifest.label_collapse)
        pred_dir = self.out / "predictions"
        pred_dir.mkdir(parents=True, exist_ok=True)
        for split, recs in dumps.items():
            write_dump(pred_dir / f"{method.name}__seed{seed}__{split}.jsonl", recs)
        cell_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = cell_path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(row, fh, sort_keys=True)
        tmp.replace(cell_path)
        return row

    def run_cells(self) -> list:
        cells = [(s, m) for s in self.manifest.seeds for m in self.manifest.methods]
        # train every needed checkpoint up front so worker threads only read them
        for s in self.manifest.seeds:
            self.members(s)
        if self.threads == 1:
            return [self.run_cell(s, m) for s, m in cells]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda c: self.run_cell(*c), cells))

    def run(self) -> dict:
        man = self.manifest
        self.out.mkdir(parents=True, exist_ok=True)
        write_manifest(self.out, "experiment", man.to_dict(), self.config_path, man.seeds)
        self._stage("generate", self.prepare_data)
        self._stage("train", lambda: [self.members(s) for s in man.seeds])
        rows = self._stage("evaluate", self.run_cells)
        tables = self.out / "tables"
        tables.mkdir(exist_ok=True)
        agg = aggregate_rows(rows)
        write_rows_csv(tables / "results_per_seed.csv", rows)
        write_rows_csv(tables / "results_aggregate.csv", agg)
        summary = {"per_seed": rows, "aggregate": agg}
        if man.ablation:
            summary["ablation"] = self._stage("ablation", self.run_ablation)
        if man.sensitivity:
            summary["sensitivity"] = self._stage("sensitivity", self.run_sensitivity)
        if man.decomposition:
            summary["layer_variance"] = self._stage("decomposition", self.run_decomposition)
        if man.efficiency:
            summary["efficiency"] = self._stage("efficiency", self.run_efficiency)
        with open(self.out / "reports" / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        return summary

    def _base_uat(self) -> M.MethodConfig:
        for m in self.manifest.methods:
            if m.kind == "uat_lite":
                return m
        return M.MethodConfig("uat_lite")

    def run_ablation(self) -> list:
        rows = []
        for s in self.manifest.seeds:
            rows += M.run_ablation(self.splits, self.members(s)[0], self._base_uat(), seeds=(s,), num_bins=self.manifest.bins)
        write_rows_csv(self.out / "tables" / "ablation.csv", rows)
        return rows

    def run_sensitivity(self) -> dict:
        cfg = self.manifest.sensitivity
        seed = self.manifest.seeds[0]
        res = M.run_sensitivity(self.splits, self.members(seed)[0], cfg.get("lambdas", (0.1, 0.5, 1.0)),
                                cfg.get("mc_samples", (3, 5, 10)), seed, self._base_uat(), self.manifest.bins)
        write_rows_csv(self.out / "tables" / "sensitivity.csv", res["cells"])
        with open(self.out / "reports" / "sensitivity.json", "w") as fh:
            json.dump(res, fh, indent=2, sort_keys=True)
        return res

    def run_decomposition(self) -> list:
        cfg = self.manifest.decomposition
        seed = self.manifest.seeds[0]
        w = self.members(seed)[0]
        regime = self._base_uat().inference_config(w.config)
        rows = []
        test = self.splits["test_id"]
        for i in range(min(int(cfg.get("examples", 1)), len(test))):
            rep = estimate_layer_variance(test.tokens[i], w, regime, seed, int(cfg.get("outer", 8)), int(cfg.get("inner", 8)))
            for l, (label, v, nv) in enumerate(zip(rep.labels, rep.per_layer_variance, rep.normalized)):
                rows.append({"example_id": f"test_id-{i}", "layer_index": l, "component_label": label,
                             "variance": float(v), "normalized": float(nv), "total_variance": rep.total_variance,
                             "residual": rep.residual})
        write_rows_csv(self.out / "tables" / "layer_variance.csv", rows)
        return rows

    def run_efficiency(self) -> list:
        cfg = self.manifest.efficiency
        seed = self.manifest.seeds[0]
        members = self.members(seed)
        tokens = self.splits["test_id"].tokens[0]
        entries = [
            (m, members if m.kind == "deep_ensemble" or m.base == "deep_ensemble" else members[0])
            for m in self.manifest.methods
        ]
        rows = M.measure_efficiency_many(entries, tokens, int(cfg.get("warmup", 50)), int(cfg.get("runs", 200)), seed)
        base = next((r["latency_mean"] for r in rows if r["passes"] == 1), None)
        for r in rows:
            r["slowdown"] = r["latency_mean"] / base if base else None
        write_rows_csv(self.out / "tables" / "efficiency.csv", rows)
        return rows


def run_experiment(manifest: ExperimentManifest, out_dir, threads: int = 1, config_path=None) -> dict:
    return ExperimentRunner(manifest, out_dir, threads, config_path).run()
