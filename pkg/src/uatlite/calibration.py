"""Expected calibration error, temperature scaling and shift metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax, logsumexp

from .linalg import softmax_rows

DEFAULT_BINS = 15


@dataclass(frozen=True)
class PredictionRecord:
    example_id: object
    true_label: int
    confidence: float
    predicted_class: int
    mean_logits: tuple = ()
    probs: tuple = ()

    @classmethod
    def from_dump(cls, rec: dict) -> "PredictionRecord":
        probs = np.asarray(rec["mean_probs"], dtype=np.float64)
        return cls(
            example_id=rec["example_id"],
            true_label=int(rec["label"]),
            confidence=float(probs.max()),
            predicted_class=int(np.argmax(probs)),
            mean_logits=tuple(float(x) for x in rec["mean_logits"]),
            probs=tuple(float(x) for x in probs),
        )

    @property
    def correct(self) -> bool:
        return self.predicted_class == self.true_label


@dataclass
class CalibrationReport:
    ece: float
    num_bins: int
    bins: list = field(default_factory=list)
    accuracy_overall: float = 0.0
    num_records: int = 0
    temperature: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_bins_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "lo", "hi", "count", "mean_confidence", "accuracy"])
            for i, b in enumerate(self.bins):
                w.writerow([i, repr(b["lo"]), repr(b["hi"]), b["count"], repr(b["mean_confidence"]), repr(b["accuracy"])])


class EmptyInputError(ValueError):
    pass


def bin_indices(confidence, num_bins: int) -> np.ndarray:
    """Bin ``k`` owns ``(k/K, (k+1)/K]``; confidence 0 falls in bin 0.

    ``ceil(c*K)`` can land one bin off when ``c*K`` rounds across an integer
    (0.3 * 10 > 3 in floating point), so the estimate is corrected against the
    same edges ``k/K`` that the report prints.
    """
    c = np.asarray(confidence, dtype=np.float64)
    idx = np.clip(np.ceil(c * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    idx = np.where((idx > 0) & (c <= idx / num_bins), idx - 1, idx)
    idx = np.where((idx < num_bins - 1) & (c > (idx + 1) / num_bins), idx + 1, idx)
    return idx


def bin_index(confidence: float, num_bins: int) -> int:
    return int(bin_indices(confidence, num_bins))


def compute_ece(records, num_bins: int = DEFAULT_BINS) -> CalibrationReport:
    records = list(records)
    if not records:
        raise EmptyInputError("compute_ece needs at least one record")
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    n = len(records)
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    correct = np.array([r.correct for r in records], dtype=np.float64)
    idx = bin_indices(conf, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    bins = []
    ece = 0.0
    for k in range(num_bins):
        c = int(counts[k])
        mc = conf_sum[k] / c if c else 0.0
        acc = acc_sum[k] / c if c else 0.0
        bins.append({"lo": k / num_bins, "hi": (k + 1) / num_bins, "count": c, "mean_confidence": float(mc), "accuracy": float(acc)})
        if c:
            ece += (c / n) * abs(acc - mc)
    return CalibrationReport(ece=float(ece), num_bins=num_bins, bins=bins, accuracy_overall=float(correct.mean()), num_records=n)


def ece_from_bins(report: CalibrationReport) -> float:
    n = sum(b["count"] for b in report.bins)
    return float(sum(b["count"] / n * abs(b["accuracy"] - b["mean_confidence"]) for b in report.bins if b["count"]))


def _logits_labels(records):
    logits = np.array([r.mean_logits for r in records], dtype=np.float64)
    labels = np.array([r.true_label for r in records], dtype=np.int64)
    return logits, labels


def nll(records, temperature: float = 1.0) -> float:
    """Mean negative log-likelihood of ``softmax(mean_logits / T)``."""
    logits, labels = _logits_labels(records)
    return _nll(logits, labels, temperature)


def _nll(logits, labels, temperature):
    lp = log_softmax(logits / temperature, axis=1)
    return float(-lp[np.arange(len(labels)), labels].mean())


def fit_temperature(validation, bounds=(-3.0, 3.0), tol: float = 1e-6) -> float:
    """Scalar temperature minimising validation NLL, searched over ``log T`` in ``bounds``."""
    validation = list(validation)
    if len(validation) < 2:
        raise ValueError("temperature fitting needs at least two records")
    logits, labels = _logits_labels(validation)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("records must carry mean_logits with at least two classes")
    if len(np.unique(labels)) < 2:
        raise ValueError("temperature fitting needs at least two distinct labels")
    res = minimize_scalar(
        lambda s: _nll(logits, labels, math.exp(s)),
        bounds=bounds,
        method="bounded",
        options={"xatol": tol},
    )
    best = float(res.x)
    # bounded Brent never evaluates T = 1 exactly; never return something worse
    if _nll(logits, labels, math.exp(best)) > _nll(logits, labels, 1.0):
        best = 0.0
    return math.exp(best)


def apply_temperature(records, temperature: float) -> list:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    out = []
    for r in records:
        p = softmax_rows(np.asarray(r.mean_logits, dtype=np.float64)[None] / temperature)[0]
        # the prediction stays the MC-mean argmax; confidence is its rescaled probability
        out.append(replace(r, confidence=float(p[r.predicted_class]), probs=tuple(float(x) for x in p)))
    return out


def collapse_labels(records, mapping) -> list:
    """Merge classes into coarser groups, e.g. ``[0, 1, 1]`` for a binary reframing.

    ``mapping[c]`` is the group of original class ``c``. Group probabilities are
    sums of member probabilities; group logits are the log-sum-exp of member
    logits, so temperature scaling of the collapsed records stays consistent.
    """
    mapping = np.asarray(mapping, dtype=np.int64)
    groups = int(mapping.max()) + 1
    if mapping.min() < 0 or len(np.unique(mapping)) != groups:
        raise ValueError(f"label map must use every group index 0..{groups - 1}: {mapping.tolist()}")
    out = []
    for r in records:
        if len(r.probs) != len(mapping) or len(r.mean_logits) != len(mapping):
            raise ValueError(f"record {r.example_id!r} has {len(r.probs)} classes, label map has {len(mapping)}")
        p = np.bincount(mapping, weights=np.asarray(r.probs), minlength=groups)
        z = np.asarray(r.mean_logits)
        zg = np.array([logsumexp(z[mapping == g]) for g in range(groups)])
        out.append(replace(
            r,
            true_label=int(mapping[r.true_label]),
            predicted_class=int(np.argmax(p)),
            confidence=float(p.max()),
            probs=tuple(float(x) for x in p),
            mean_logits=tuple(float(x) for x in zg),
        ))
    return out


def shift_metrics(id_report: CalibrationReport, ood_report: CalibrationReport) -> dict:
    if id_report.num_bins != ood_report.num_bins:
        raise ValueError(f"bin counts differ: ID {id_report.num_bins} vs OOD {ood_report.num_bins}")
    return {
        "delta_ece": ood_report.ece - id_report.ece,
        "robustness": 0.5 * (id_report.ece + ood_report.ece),
    }
