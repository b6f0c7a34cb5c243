"""Layer-wise attribution of predictive variance under MC dropout.

For each noise source ``l`` (0 = embedding dropout, 1..L = encoder blocks) a
nested Monte Carlo estimator measures

    V(l) = E_outer[ Var_inner( y | all masks except layer l's ) ]

where ``y`` is the probability of the deterministic prediction's class. Within
an inner group only layer ``l``'s masks are redrawn; every other layer, both
upstream and downstream, keeps the masks of its outer draw. The total variance
comes from an all-layers-stochastic run, and the gap ``total - sum(V)`` is
reported as the residual (interaction terms the per-layer split ignores).

The total run uses the same mask keys as the inner draws (common random
numbers), which keeps the residual free of independent sampling noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .encoder import ConfigError, EncoderConfig, EncoderWeights, StochasticityPlan, _check_tokens, forward, forward_core
from .linalg import softmax_rows
from .mcinfer import run_mc_inference


class ZeroTotalError(ValueError):
    """Normalisation requested for an all-zero contribution vector."""


@dataclass
class LayerVarianceReport:
    per_layer_variance: np.ndarray  # length L+1, index 0 = embedding
    normalized: np.ndarray
    total_variance: float
    residual: float
    outer_samples: int
    inner_samples: int
    zero_total: bool = False
    target_class: int = 0
    per_layer_stderr: np.ndarray | None = None

    @property
    def labels(self) -> list:
        return ["embedding"] + [f"encoder_layer_{l}" for l in range(1, len(self.per_layer_variance))]

    def write_csv(self, path) -> None:
        """One row per noise source plus an ``output`` row (the classifier head has no dropout)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer_index", "component_label", "variance", "normalized"])
            for i, (label, v, nv) in enumerate(zip(self.labels, self.per_layer_variance, self.normalized)):
                w.writerow([i, label, repr(float(v)), repr(float(nv))])
            w.writerow([len(self.labels), "output", repr(0.0), repr(0.0)])


def normalize_contributions(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("variance contributions must be nonnegative")
    total = v.sum()
    if not total > 0:
        raise ZeroTotalError("contributions sum to zero")
    return v / total


def group_mean(values, groups) -> list:
    """Mean of ``values`` over each index group, e.g. ``[[0], [1, 2, 3, 4], ...]``."""
    values = np.asarray(values, dtype=np.float64)
    return [float(values[list(g)].mean()) for g in groups]


def _target_probs(tokens, weights, config, plans, u, cls) -> np.ndarray:
    """Target-class probability under each plan, evaluated as one batch.

    All plans share the same live sites, so each site's multiplier is either
    absent for every row or present for every row.
    """
    tok = np.broadcast_to(np.asarray(tokens, dtype=np.int64), (len(plans), len(tokens)))

    def drop(layer, component, shape):
        rows = [p.multiplier(layer, component, shape[1:], config.rate(component)) for p in plans]
        return None if rows[0] is None else np.stack(rows)

    uu = None if u is None else np.broadcast_to(u, tok.shape)
    logits, _, _, _ = forward_core(weights.params, config, tok, drop, uu, config.lam)
    return softmax_rows(logits)[:, cls]


def estimate_layer_variance(
    tokens,
    weights: EncoderWeights,
    config: EncoderConfig | None = None,
    seed: int = 0,
    outer: int = 32,
    inner: int = 32,
    layers=None,
) -> LayerVarianceReport:
    """Nested MC estimate of per-layer variance contributions.

    ``layers`` optionally restricts which noise sources are live (default: all).
    Token uncertainty for the modulated attention is taken from
    :func:`run_mc_inference` with the same seed and held fixed throughout.
    """
    config = config or weights.config
    tokens = _check_tokens(tokens, config)[0]
    if outer < 2 or inner < 2:
        raise ConfigError(f"outer and inner sample counts must be >= 2, got {outer}, {inner}")
    L = config.num_layers
    live = frozenset(range(L + 1)) if layers is None else frozenset(layers)
    u = run_mc_inference(tokens, weights, config, seed).token_uncertainty_final if config.lam > 0 else None
    base = forward(tokens, weights, config, StochasticityPlan.deterministic(), token_uncertainty=u).logits
    cls = int(np.argmax(base))

    def key(o, i):
        return o * (inner + 1) + i

    v = np.zeros(L + 1)
    se = np.zeros(L + 1)
    for l in range(L + 1):
        # silent layers are estimated too (they come out exactly 0), so attribution is measured, not assumed
        group_vars = np.empty(outer)
        for o in range(outer):
            plans = [
                StochasticityPlan(seed=seed, pass_index=key(o, inner), layers=live, layer_pass={l: key(o, i)})
                for i in range(inner)
            ]
            group_vars[o] = np.var(_target_probs(tokens, weights, config, plans, u, cls), ddof=1)
        v[l] = group_vars.mean()
        se[l] = group_vars.std(ddof=1) / np.sqrt(outer)
    ys = np.concatenate([
        _target_probs(tokens, weights, config,
                      [StochasticityPlan(seed=seed, pass_index=key(o, i), layers=live) for i in range(inner)], u, cls)
        for o in range(outer)
    ])
    total = float(np.var(ys, ddof=1))
    s = v.sum()
    if s > 0:
        normalized, zero = v / s, False
    else:
        normalized, zero = np.full(L + 1, 1.0 / (L + 1)), True
    return LayerVarianceReport(
        per_layer_variance=v,
        normalized=normalized,
        total_variance=total,
        residual=total - float(s),
        outer_samples=outer,
        inner_samples=inner,
        zero_total=zero,
        target_class=cls,
        per_layer_stderr=se,
    )
