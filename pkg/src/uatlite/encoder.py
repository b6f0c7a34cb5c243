"""Toy post-norm transformer encoder classifier with uncertainty-modulated attention.

Layer indexing follows the variance diagnostics: layer 0 is the embedding block
(token + learned position embedding, layer norm, embedding dropout), layers
``1..L`` are encoder blocks (attention dropout on the attention probabilities,
feed-forward dropout on the block output before its residual). The classifier
reads the hidden state at position 0 (the CLS slot).

The batched core :func:`forward_core` is shared by inference (batch of one) and
by the trainer, which needs its cache for manual backprop.
"""

from __future__ import annotations

import collections
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

from .linalg import RngStream, ShapeError, sample_dropout_mask, softmax_rows

COMPONENTS = ("embedding", "attention", "ffn")
_COMPONENT_ID = {c: i for i, c in enumerate(COMPONENTS)}
LN_EPS = 1e-12
CHECKPOINT_FORMAT = "uatlite-checkpoint/1"

# Instrumentation for pass-count checks; incremented by embed() and forward().
call_counts: collections.Counter = collections.Counter()


class VocabularyError(ValueError):
    """Token id outside the embedding table, or sequence too long."""


class ConfigError(ValueError):
    """Invalid encoder or inference configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    max_seq_len: int = 16
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 32
    ff_dim: int = 64
    num_classes: int = 3
    dropout_embedding: float = 0.1
    dropout_attention: float = 0.2
    dropout_ffn: float = 0.3
    lam: float = 0.5
    mc_samples: int = 5
    pad_id: int | None = 1

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        for name in ("dropout_embedding", "dropout_attention", "dropout_ffn"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {rate}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        for name in ("vocab_size", "max_seq_len", "num_layers", "model_dim", "ff_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def rate(self, component: str) -> float:
        return getattr(self, f"dropout_{component}")

    def with_rates(self, embedding: float, attention: float, ffn: float) -> "EncoderConfig":
        return replace(self, dropout_embedding=embedding, dropout_attention=attention, dropout_ffn=ffn)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: EncoderConfig) -> dict[str, tuple]:
    d, f = config.model_dim, config.ff_dim
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for l in range(1, config.num_layers + 1):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"l{l}.{w}"] = (d, d)
            shapes[f"l{l}.b{w[1]}"] = (d,)
        shapes[f"l{l}.ln1_g"] = (d,)
        shapes[f"l{l}.ln1_b"] = (d,)
        shapes[f"l{l}.w1"] = (d, f)
        shapes[f"l{l}.b1"] = (f,)
        shapes[f"l{l}.w2"] = (f, d)
        shapes[f"l{l}.b2"] = (d,)
        shapes[f"l{l}.ln2_g"] = (d,)
        shapes[f"l{l}.ln2_b"] = (d,)
    shapes["cls_w"] = (d, config.num_classes)
    shapes["cls_b"] = (config.num_classes,)
    return shapes


@dataclass
class EncoderWeights:
    """All trainable parameters, keyed by name (see :func:`param_shapes`)."""

    config: EncoderConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ShapeError(f"parameter set mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            arr = self.params[name]
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0, std: float = 0.02) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            short = name.split(".")[-1]
            if short.endswith("_g"):
                params[name] = np.ones(shape)
            elif len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, std, size=shape)
        return cls(config, params)

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def save(self, path) -> None:
        """Write an ``.npz`` checkpoint: one float64 array per parameter plus a
        ``__meta__`` JSON string holding the format tag and the config echo."""
        meta = json.dumps({"format": CHECKPOINT_FORMAT, "config": self.config.to_dict()}, sort_keys=True)
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.array(meta), **self.params)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "EncoderWeights":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
            config = EncoderConfig.from_dict(meta["config"])
            params = {k: np.array(data[k], dtype=np.float64) for k in data.files if k != "__meta__"}
        return cls(config, params)


@dataclass(frozen=True)
class StochasticityPlan:
    """Which dropout masks are live in one forward pass, and how they are keyed.

    Each mask is drawn from a stream keyed by ``(seed, pass, layer, component)``
    where ``pass`` is ``pass_index`` unless ``layer_pass`` overrides it for that
    layer. Overrides let the variance diagnostics resample one layer while every
    other layer keeps its masks.
    """

    seed: int = 0
    pass_index: int = 0
    layers: frozenset | None = None
    components: frozenset = frozenset(COMPONENTS)
    layer_pass: Mapping[int, int] = field(default_factory=dict)

    @classmethod
    def deterministic(cls) -> "StochasticityPlan":
        return cls(layers=frozenset())

    @classmethod
    def all_layers(cls, seed: int, pass_index: int = 0) -> "StochasticityPlan":
        return cls(seed=seed, pass_index=pass_index)

    @classmethod
    def single_layer(cls, layer: int, seed: int, pass_index: int = 0) -> "StochasticityPlan":
        return cls(seed=seed, pass_index=pass_index, layers=frozenset({layer}))

    @classmethod
    def component_subset(cls, components, seed: int, pass_index: int = 0) -> "StochasticityPlan":
        components = frozenset(components)
        if not components <= set(COMPONENTS):
            raise ConfigError(f"unknown components {sorted(components - set(COMPONENTS))}")
        return cls(seed=seed, pass_index=pass_index, components=components)

    @property
    def mode(self) -> str:
        if self.layers is not None and not self.layers:
            return "deterministic"
        if self.layers is not None and len(self.layers) == 1:
            return f"single-layer({next(iter(self.layers))})"
        if self.components != frozenset(COMPONENTS):
            return "component-subset"
        return "all-layers"

    def is_active(self, layer: int, component: str) -> bool:
        if component not in self.components:
            return False
        return self.layers is None or layer in self.layers

    def multiplier(self, layer: int, component: str, shape, rate: float) -> np.ndarray | None:
        """Inverted-dropout multiplier for one site, or ``None`` when the site is inactive."""
        if rate == 0.0 or not self.is_active(layer, component):
            return None
        p = self.layer_pass.get(layer, self.pass_index)
        stream = RngStream(self.seed).fork(p, layer, _COMPONENT_ID[component])
        return sample_dropout_mask(stream, shape, rate).as_multiplier()


DropFn = Callable[[int, str, tuple], "np.ndarray | None"]


@dataclass
class ForwardTrace:
    hidden: list  # L+1 matrices, each T x d
    attention: list  # per layer, H x T x T probabilities (before attention dropout)
    logits: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.attention)


def _check_tokens(tokens, config: EncoderConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[-1] > config.max_seq_len:
        raise VocabularyError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= config.vocab_size)]
        raise VocabularyError(f"token id {int(bad.flat[0])} outside vocabulary of size {config.vocab_size}")
    return tokens.astype(np.int64)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def attention_logits(q, k, head_dim: int) -> np.ndarray:
    """Scaled dot-product logits ``q @ k.T / sqrt(head_dim)`` over the last two axes."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    return (q @ np.swapaxes(k, -1, -2)) / math.sqrt(head_dim)


def modulate_logits(a, token_uncertainty, lam: float) -> np.ndarray:
    """Damp each key column ``j`` of the logits by ``exp(-lam * U[j])``.

    ``token_uncertainty`` broadcasts against the key axis (the last axis of ``a``).
    With ``lam == 0`` the input is returned unchanged.
    """
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(token_uncertainty, dtype=np.float64)
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if np.any(u < 0):
        raise ValueError("token uncertainty must be nonnegative")
    if u.shape[-1] != a.shape[-1]:
        raise ShapeError(f"uncertainty length {u.shape[-1]} != number of keys {a.shape[-1]}")
    if lam == 0.0:
        return a
    return a * np.exp(-lam * u)[..., None, :]


def plan_drop(plan: StochasticityPlan, config: EncoderConfig) -> DropFn:
    def drop(layer, component, shape):
        return plan.multiplier(layer, component, shape, config.rate(component))

    return drop


def embed_core(params, tokens, drop: DropFn):
    t = tokens.shape[-1]
    x = params["tok_emb"][tokens] + params["pos_emb"][:t]
    e, ln = layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    m = drop(0, "embedding", e.shape)
    z = e if m is None else e * m
    return z, {"ln": ln, "mask": m, "e": e}


def forward_core(
    params,
    config: EncoderConfig,
    tokens: np.ndarray,
    drop: DropFn,
    token_uncertainty: np.ndarray | None = None,
    lam: float = 0.0,
    embedded: np.ndarray | None = None,
    keep_cache: bool = False,
):
    """Batched forward pass over ``tokens`` of shape ``(B, T)``.

    Returns ``(logits, hidden, attention, cache)``; ``cache`` is ``None`` unless
    ``keep_cache`` is set.
    """
    B, T = tokens.shape
    H, dk, d = config.num_heads, config.head_dim, config.model_dim
    cache = {"tokens": tokens} if keep_cache else None
    if embedded is None:
        z, emb_cache = embed_core(params, tokens, drop)
        if keep_cache:
            cache["embed"] = emb_cache
    else:
        z = embedded.reshape(B, T, d)
    pad = None
    if config.pad_id is not None:
        pad = tokens == config.pad_id
        if not pad.any():
            pad = None
    mod = token_uncertainty is not None and lam != 0.0
    hidden = [z]
    attention = []
    h = z
    for l in range(1, config.num_layers + 1):
        p = lambda n: params[f"l{l}.{n}"]  # noqa: E731
        q = (h @ p("wq") + p("bq")).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
        k = (h @ p("wk") + p("bk")).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
        v = (h @ p("wv") + p("bv")).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
        a = attention_logits(q, k, dk)
        if mod:
            a = modulate_logits(a, np.asarray(token_uncertainty).reshape(B, 1, T), lam)
        if pad is not None:
            a = np.where(pad[:, None, None, :], -np.inf, a)
        alpha = softmax_rows(a)
        m_att = drop(l, "attention", alpha.shape)
        alpha_d = alpha if m_att is None else alpha * m_att
        ctx = (alpha_d @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        o = ctx @ p("wo") + p("bo")
        h1, ln1 = layer_norm(h + o, p("ln1_g"), p("ln1_b"))
        f_pre = h1 @ p("w1") + p("b1")
        f_act = gelu(f_pre)
        f = f_act @ p("w2") + p("b2")
        m_ffn = drop(l, "ffn", f.shape)
        f_d = f if m_ffn is None else f * m_ffn
        h_new, ln2 = layer_norm(h1 + f_d, p("ln2_g"), p("ln2_b"))
        if keep_cache:
            cache[l] = dict(h_in=h, q=q, k=k, v=v, mod=(np.exp(-lam * token_uncertainty).reshape(B, 1, 1, T) if mod else None),
                            alpha=alpha, m_att=m_att, alpha_d=alpha_d, ctx=ctx, ln1=ln1, h1=h1,
                            f_pre=f_pre, f_act=f_act, m_ffn=m_ffn, ln2=ln2)
        h = h_new
        hidden.append(h)
        attention.append(alpha)
    logits = h[:, 0, :] @ params["cls_w"] + params["cls_b"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("forward pass produced non-finite logits")
    return logits, hidden, attention, cache


def embed(tokens, weights: EncoderWeights, plan: StochasticityPlan) -> np.ndarray:
    """Token + position embedding, layer norm and embedding dropout for one sequence (T x d)."""
    config = weights.config
    tok = _check_tokens(tokens, config)
    call_counts["embed"] += 1
    z, _ = embed_core(weights.params, tok, plan_drop(plan, config))
    return z[0]


def forward(
    tokens,
    weights: EncoderWeights,
    config: EncoderConfig | None = None,
    plan: StochasticityPlan | None = None,
    token_uncertainty=None,
    embedded: np.ndarray | None = None,
) -> ForwardTrace:
    """Full encoder pass for one sequence.

    ``config`` supplies the inference regime (dropout rates, lambda); it must
    agree with the weights' architecture and defaults to ``weights.config``.
    ``embedded`` reuses an embedding already computed by :func:`embed` for this
    plan. Absent ``token_uncertainty`` means plain attention.
    """
    config = config or weights.config
    _check_architecture(config, weights.config)
    plan = plan or StochasticityPlan.deterministic()
    tok = _check_tokens(tokens, config)
    u = None
    if token_uncertainty is not None:
        u = np.asarray(token_uncertainty, dtype=np.float64).reshape(1, -1)
        if u.shape[1] != tok.shape[1]:
            raise ShapeError(f"uncertainty length {u.shape[1]} != sequence length {tok.shape[1]}")
        if np.any(u < 0):
            raise ValueError("token uncertainty must be nonnegative")
    call_counts["forward"] += 1
    emb = None if embedded is None else np.asarray(embedded)[None]
    logits, hidden, attention, _ = forward_core(
        weights.params, config, tok, plan_drop(plan, config), u, config.lam, embedded=emb
    )
    return ForwardTrace([h[0] for h in hidden], [a[0] for a in attention], logits[0])


_ARCH_FIELDS = ("vocab_size", "max_seq_len", "num_layers", "num_heads", "model_dim", "ff_dim", "num_classes")


def _check_architecture(config: EncoderConfig, arch: EncoderConfig) -> None:
    for name in _ARCH_FIELDS:
        if getattr(config, name) != getattr(arch, name):
            raise ConfigError(f"config {name}={getattr(config, name)} does not match weights ({getattr(arch, name)})")
