"""Single-pass Monte Carlo inference with uncertainty-weighted attention.

The same M stochastic passes serve two purposes: their embeddings feed the
running per-token uncertainty estimate, and their logits are aggregated into
the predictive distribution. Pass ``m`` sees the uncertainty computed from
embeddings ``1..m`` (its own included), so pass 1 is always unmodulated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .encoder import ConfigError, EncoderConfig, EncoderWeights, StochasticityPlan, embed, forward
from .linalg import column_std, softmax_rows

DUMP_FIELDS = (
    "example_id",
    "label",
    "mean_probs",
    "mean_logits",
    "predicted_class",
    "confidence",
    "predictive_variance",
    "token_uncertainty",
)


@dataclass
class McOutcome:
    per_pass_logits: np.ndarray  # M x C
    mean_probs: np.ndarray
    mean_logits: np.ndarray
    predictive_variance: float
    class_variance: np.ndarray  # per-class variance of the pass probabilities
    token_uncertainty_final: np.ndarray
    pass_count: int

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.mean_probs))

    @property
    def confidence(self) -> float:
        return float(np.max(self.mean_probs))

    def to_record(self, example_id, label=None, include_passes: bool = False) -> dict:
        rec = {
            "example_id": example_id,
            "label": None if label is None else int(label),
            "mean_probs": self.mean_probs.tolist(),
            "mean_logits": self.mean_logits.tolist(),
            "predicted_class": self.predicted_class,
            "confidence": self.confidence,
            "predictive_variance": float(self.predictive_variance),
            "token_uncertainty": self.token_uncertainty_final.tolist(),
        }
        if include_passes:
            rec["per_pass_logits"] = self.per_pass_logits.tolist()
        return rec


def token_uncertainty_running(samples) -> np.ndarray:
    """Per-token uncertainty: the embedding-dimension mean of the across-sample std.

    ``samples`` is a list of T x d embedding matrices from the passes so far.
    """
    return column_std(samples).mean(axis=-1)


def predictive_entropy(mean_probs) -> float:
    p = np.asarray(mean_probs, dtype=np.float64)
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def aggregate(per_pass_logits: np.ndarray, token_uncertainty: np.ndarray) -> McOutcome:
    per_pass_logits = np.atleast_2d(np.asarray(per_pass_logits, dtype=np.float64))
    probs = softmax_rows(per_pass_logits)
    mean_probs = probs.mean(axis=0)
    c = int(np.argmax(mean_probs))
    class_var = probs.var(axis=0)
    return McOutcome(
        per_pass_logits=per_pass_logits,
        mean_probs=mean_probs,
        mean_logits=per_pass_logits.mean(axis=0),
        predictive_variance=float(class_var[c]),
        class_variance=class_var,
        token_uncertainty_final=np.asarray(token_uncertainty, dtype=np.float64),
        pass_count=per_pass_logits.shape[0],
    )


def run_mc_inference(tokens, weights: EncoderWeights, config: EncoderConfig | None = None, seed: int = 0) -> McOutcome:
    """Run M stochastic passes with running token uncertainty and aggregate them.

    ``config`` carries the inference regime (rates, lambda, M); defaults to the
    weights' own config. Deterministic in ``(weights, tokens, seed, config)``.
    """
    config = config or weights.config
    m_total = int(config.mc_samples)
    if m_total < 1:
        raise ConfigError(f"mc_samples must be >= 1, got {m_total}")
    zs = []
    logits = []
    u = None
    for m in range(m_total):
        plan = StochasticityPlan.all_layers(seed, pass_index=m)
        z = embed(tokens, weights, plan)
        zs.append(z)
        u = token_uncertainty_running(zs)
        trace = forward(tokens, weights, config, plan, token_uncertainty=u, embedded=z)
        logits.append(trace.logits)
    return aggregate(np.stack(logits), u)


def run_deterministic(tokens, weights: EncoderWeights, config: EncoderConfig | None = None) -> McOutcome:
    """One dropout-free pass, packaged as a single-sample outcome."""
    config = config or weights.config
    trace = forward(tokens, weights, config, StochasticityPlan.deterministic())
    return aggregate(trace.logits[None], np.zeros(len(np.atleast_1d(tokens))))


def write_dump(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class DumpFormatError(ValueError):
    """A prediction-dump line failed to parse; message names the line."""


def iter_dump(path) -> Iterator[dict]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DumpFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            missing = [k for k in ("example_id", "label", "mean_probs", "mean_logits") if k not in rec]
            if missing:
                raise DumpFormatError(f"{path}:{lineno}: missing fields {missing}")
            yield rec


def read_dump(path) -> list[dict]:
    return list(iter_dump(Path(path)))
