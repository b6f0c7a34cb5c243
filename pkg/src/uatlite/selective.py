"""Selective prediction: confidence thresholds, risk-coverage curves, AURC."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLDS = (0.9, 0.8, 0.7)


class InfeasiblePolicyError(ValueError):
    pass


@dataclass
class RiskCoverageCurve:
    coverage: np.ndarray
    risk: np.ndarray
    aurc: float
    coverage_at: dict = field(default_factory=dict)

    @property
    def points(self) -> list:
        return [{"coverage": float(c), "risk": float(r)} for c, r in zip(self.coverage, self.risk)]

    def summary(self) -> dict:
        out = {"aurc": self.aurc}
        for tau, cov in self.coverage_at.items():
            out[f"coverage@{tau}"] = cov
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coverage", "risk"])
            for c, r in zip(self.coverage, self.risk):
                w.writerow([repr(float(c)), repr(float(r))])

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {tau}")
    return tau


def coverage_at_threshold(records, tau: float) -> dict:
    """Fraction of records with confidence >= tau, and accuracy among them.

    ``selective_accuracy`` is ``None`` when nothing is accepted.
    """
    tau = _check_tau(tau)
    records = list(records)
    if not records:
        raise ValueError("no records")
    accepted = [r for r in records if r.confidence >= tau]
    acc = None
    if accepted:
        acc = sum(r.correct for r in accepted) / len(accepted)
    return {"tau": tau, "coverage": len(accepted) / len(records), "selective_accuracy": acc}


def _sort_key(r):
    # descending confidence; ties by example_id so the order is platform-stable
    if isinstance(r.example_id, (int, np.integer)):
        return (-r.confidence, 0, int(r.example_id), "")
    return (-r.confidence, 1, 0, str(r.example_id))


def risk_coverage(records, thresholds=DEFAULT_THRESHOLDS) -> RiskCoverageCurve:
    """Sweep acceptance over the confidence-sorted records.

    Point ``k`` accepts the top ``k`` records: coverage ``k/N``, risk equal to
    the error rate among them. AURC is the mean risk over all N points.
    """
    records = list(records)
    if not records:
        raise ValueError("risk_coverage needs at least one record")
    ordered = sorted(records, key=_sort_key)
    errors = np.array([0.0 if r.correct else 1.0 for r in ordered])
    n = len(ordered)
    k = np.arange(1, n + 1, dtype=np.float64)
    risk = np.cumsum(errors) / k
    cov_at = {t: coverage_at_threshold(records, t)["coverage"] for t in thresholds}
    return RiskCoverageCurve(coverage=k / n, risk=risk, aurc=float(risk.mean()), coverage_at=cov_at)


def select_thresholds(validation, policy="default") -> tuple:
    """Confidence thresholds chosen from validation records only.

    ``policy`` is ``"default"`` (the fixed 0.9/0.8/0.7 set) or
    ``{"coverage_targets": [...]}``: for each target c, the largest threshold
    accepting at least a fraction c of validation records.
    """
    validation = list(validation)
    if not validation:
        raise ValueError("threshold selection needs validation records")
    if policy == "default" or policy is None:
        return DEFAULT_THRESHOLDS
    if isinstance(policy, dict) and "coverage_targets" in policy:
        conf = np.sort(np.array([r.confidence for r in validation]))[::-1]
        n = len(conf)
        taus = []
        for c in policy["coverage_targets"]:
            if not 0.0 < c <= 1.0:
                raise InfeasiblePolicyError(f"coverage target {c} outside (0, 1]")
            need = int(np.ceil(c * n - 1e-12))
            tau = float(conf[need - 1])
            if tau <= 0.0:
                raise InfeasiblePolicyError(f"coverage target {c} needs a nonpositive threshold")
            taus.append(tau)
        return tuple(taus)
    raise InfeasiblePolicyError(f"unknown threshold policy {policy!r}")


def save_thresholds(path, taus) -> None:
    with open(path, "w") as fh:
        json.dump({"thresholds": [float(t) for t in taus]}, fh)


def load_thresholds(path) -> tuple:
    with open(path) as fh:
        return tuple(float(t) for t in json.load(fh)["thresholds"])
