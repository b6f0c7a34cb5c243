"""Method roster, evaluation, ablation and sensitivity grids, latency measurement."""

from __future__ import annotations

import gc
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .. import encoder as enc
from ..calibration import (
    DEFAULT_BINS,
    PredictionRecord,
    apply_temperature,
    collapse_labels,
    compute_ece,
    fit_temperature,
    shift_metrics,
)
from ..encoder import EncoderConfig, EncoderWeights
from ..linalg import RngStream
from ..mcinfer import aggregate, run_deterministic, run_mc_inference
from ..selective import risk_coverage, select_thresholds

KINDS = ("baseline_deterministic", "mc_uniform", "mc_component", "uat_lite", "temp_scaling", "deep_ensemble")
_SPLIT_SALT = {"train": 0, "val": 1, "test_id": 2, "test_ood": 3}


class MissingMembersError(ValueError):
    pass


@dataclass(frozen=True)
class MethodConfig:
    """One roster entry. Unused fields are ignored by a given ``kind``.

    ``temp_scaling`` wraps the method named by ``base`` (a kind, with this
    entry's other fields) and rescales its mean logits.
    """

    kind: str
    name: str = ""
    p: float = 0.1
    rates: tuple = (0.1, 0.2, 0.3)
    lam: float = 0.5
    mc_samples: int = 5
    base: str = "baseline_deterministic"
    k: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "temp_scaling" and self.base in ("temp_scaling",):
            raise ValueError("temp_scaling cannot wrap itself")
        if not self.name:
            object.__setattr__(self, "name", self.kind)
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))

    @property
    def nominal_passes(self) -> int:
        kind = self.base if self.kind == "temp_scaling" else self.kind
        if kind == "baseline_deterministic":
            return 1
        if kind == "deep_ensemble":
            return self.k
        return self.mc_samples

    def inference_config(self, arch: EncoderConfig) -> EncoderConfig:
        kind = self.base if self.kind == "temp_scaling" else self.kind
        if kind == "mc_uniform":
            return replace(arch.with_rates(self.p, self.p, self.p), lam=0.0, mc_samples=self.mc_samples)
        if kind == "mc_component":
            return replace(arch.with_rates(*self.rates), lam=0.0, mc_samples=self.mc_samples)
        if kind == "uat_lite":
            return replace(arch.with_rates(*self.rates), lam=self.lam, mc_samples=self.mc_samples)
        return arch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rates"] = list(self.rates)
        return d

    @classmethod
    def from_dict(cls, d) -> "MethodConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "rates" in d:
            d["rates"] = tuple(d["rates"])
        return cls(**d)


def example_seed(seed: int, split: str, index: int) -> int:
    """Per-example MC seed; shared by every method so arms differ only in their regime."""
    return RngStream(seed).derive_seed(_SPLIT_SALT.get(split, 9), index)


def _ensemble_outcome(tokens, members):
    # member softmaxes are averaged exactly like MC passes
    logits = np.stack([enc.forward(tokens, w, w.config).logits for w in members])
    return aggregate(logits, np.zeros(len(tokens)))


def predict_one(method: MethodConfig, model, tokens, seed: int):
    """McOutcome for one example; ``model`` is weights, or a member list for ensembles."""
    kind = method.base if method.kind == "temp_scaling" else method.kind
    if kind == "deep_ensemble":
        members = list(model) if isinstance(model, (list, tuple)) else [model]
        if len(members) < method.k:
            raise MissingMembersError(f"deep_ensemble({method.k}) got {len(members)} member(s)")
        return _ensemble_outcome(tokens, members[: method.k])
    weights = model[0] if isinstance(model, (list, tuple)) else model
    if kind == "baseline_deterministic":
        return run_deterministic(tokens, weights)
    return run_mc_inference(tokens, weights, method.inference_config(weights.config), seed)


def predict_split(method: MethodConfig, model, split, seed: int, include_passes: bool = False) -> list:
    """Prediction-dump records for every example in ``split``."""
    recs = []
    for i in range(len(split)):
        out = predict_one(method, model, split.tokens[i], example_seed(seed, split.name, i))
        recs.append(out.to_record(f"{split.name}-{i}", split.labels[i], include_passes))
    return recs


def to_records(dump: list) -> list:
    return [PredictionRecord.from_dump(r) for r in dump]


def evaluate_records(records, num_bins: int = DEFAULT_BINS, thresholds=None) -> dict:
    rep = compute_ece(records, num_bins)
    curve = risk_coverage(records, thresholds or select_thresholds(records))
    row = {"ece": rep.ece, "accuracy": rep.accuracy_overall, "aurc": curve.aurc}
    for tau, cov in curve.coverage_at.items():
        row[f"coverage@{tau}"] = cov
    return row


def run_method(
    method: MethodConfig,
    model,
    splits: dict,
    seed: int = 0,
    num_bins: int = DEFAULT_BINS,
    threshold_policy="default",
    dumps: dict | None = None,
    label_collapse=None,
) -> dict:
    """Evaluate one method for one seed.

    Predicts on ``val`` (when a temperature or threshold policy needs it),
    ``test_id`` and, if present, ``test_ood``; all fitting uses ``val`` only.
    Dump records are stored into ``dumps`` by split name when a dict is given.
    ``label_collapse`` (class -> group list) scores every split on merged
    classes; dumps keep the original classes.
    Returns one per-seed result row.
    """
    dumps = {} if dumps is None else dumps
    need_val = method.kind == "temp_scaling" or threshold_policy not in (None, "default")
    t0 = time.perf_counter()
    dumps["test_id"] = predict_split(method, model, splits["test_id"], seed)
    wall = time.perf_counter() - t0
    if "test_ood" in splits:
        dumps["test_ood"] = predict_split(method, model, splits["test_ood"], seed)
    if need_val:
        dumps["val"] = predict_split(method, model, splits["val"], seed)
    recs = {k: to_records(v) for k, v in dumps.items()}
    if label_collapse is not None:
        recs = {k: collapse_labels(v, label_collapse) for k, v in recs.items()}
    temperature = None
    if method.kind == "temp_scaling":
        temperature = fit_temperature(recs["val"])
        recs = {k: apply_temperature(v, temperature) for k, v in recs.items()}
    thresholds = select_thresholds(recs.get("val", recs["test_id"]), threshold_policy)
    row = {"method": method.name, "seed": seed}
    row.update(evaluate_records(recs["test_id"], num_bins, thresholds))
    if "test_ood" in recs:
        id_rep = compute_ece(recs["test_id"], num_bins)
        ood_rep = compute_ece(recs["test_ood"], num_bins)
        row["ece_ood"] = ood_rep.ece
        row.update(shift_metrics(id_rep, ood_rep))
    row["temperature"] = temperature
    row["wall_time"] = wall
    return row


def ablation_arms(base: MethodConfig) -> list:
    """The four inference-time arms on one set of weights."""
    return [
        MethodConfig("baseline_deterministic", name="baseline"),
        replace(base, kind="mc_component", name="embedding_uncertainty_only"),
        replace(base, kind="uat_lite", name="attention_modulation_only"),
        replace(base, kind="temp_scaling", base="uat_lite", name="modulation_plus_temperature"),
    ]


def run_ablation(splits, weights, base: MethodConfig | None = None, seeds=(0,), num_bins: int = DEFAULT_BINS) -> list:
    base = base or MethodConfig("uat_lite")
    rows = []
    for seed in seeds:
        for arm in ablation_arms(base):
            r = run_method(arm, weights, {k: v for k, v in splits.items() if k != "test_ood"}, seed, num_bins)
            rows.append({"arm": arm.name, "seed": seed, "ece": r["ece"], "accuracy": r["accuracy"]})
    return rows


def run_sensitivity(splits, weights, lambdas=(0.1, 0.5, 1.0), mc_grid=(3, 5, 10), seed: int = 0,
                    base: MethodConfig | None = None, num_bins: int = DEFAULT_BINS) -> dict:
    base = base or MethodConfig("uat_lite")
    cells = []
    for lam in lambdas:
        for m in mc_grid:
            method = replace(base, kind="uat_lite", lam=float(lam), mc_samples=int(m), name=f"uat_lite(lam={lam},M={m})")
            recs = to_records(predict_split(method, weights, splits["test_id"], seed))
            rep = compute_ece(recs, num_bins)
            cells.append({"lambda": float(lam), "mc_samples": int(m), "ece": rep.ece, "accuracy": rep.accuracy_overall})
    eces = np.array([c["ece"] for c in cells])
    summary = {
        "mean": float(eces.mean()),
        "std": float(eces.std(ddof=1)) if len(eces) > 1 else 0.0,
        "min": float(eces.min()),
        "max": float(eces.max()),
        "range": float(eces.max() - eces.min()),
    }
    return {"cells": cells, "summary": summary}


def measure_efficiency(method: MethodConfig, model, tokens, warmup: int = 50, runs: int = 200, seed: int = 0) -> dict:
    """Per-example latency over ``runs`` timed single-example inferences after ``warmup``.

    ``passes`` counts full forward passes per inference and must equal the
    method's nominal budget.
    """
    return measure_efficiency_many([(method, model)], tokens, warmup, runs, seed)[0]


def measure_efficiency_many(entries, tokens, warmup: int = 50, runs: int = 200, seed: int = 0) -> list:
    """:func:`measure_efficiency` for several ``(method, model)`` pairs at once.

    Each method gets its own ``warmup`` untimed and ``runs`` timed inferences,
    but the timed runs are interleaved round-robin, so slow drift in machine
    speed affects every method alike and latency ratios stay comparable.
    """
    entries = list(entries)
    for method, model in entries:
        for i in range(warmup):
            predict_one(method, model, tokens, seed + i)
    times = np.empty((len(entries), runs))
    calls = np.zeros(len(entries), dtype=np.int64)
    # as in timeit: collector pauses scale with the caller's heap, not with the method
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(runs):
            for j, (method, model) in enumerate(entries):
                before = enc.call_counts["forward"]
                t0 = time.perf_counter()
                predict_one(method, model, tokens, seed + warmup + i)
                times[j, i] = time.perf_counter() - t0
                calls[j] += enc.call_counts["forward"] - before
    finally:
        if gc_was_enabled:
            gc.enable()
    rows = []
    for j, (method, _) in enumerate(entries):
        passes = calls[j] / runs
        if passes != method.nominal_passes:
            raise AssertionError(f"{method.name}: {passes} forward passes per example, expected {method.nominal_passes}")
        t = times[j]
        rows.append({
            "method": method.name,
            "latency_mean": float(t.mean()),
            "latency_std": float(t.std(ddof=1)) if runs > 1 else 0.0,
            "latency_median": float(np.median(t)),
            "passes": int(passes),
            "warmup": warmup,
            "runs": runs,
        })
    return rows
