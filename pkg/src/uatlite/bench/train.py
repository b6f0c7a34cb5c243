"""Minibatch Adam trainer for the toy encoder, with hand-written backprop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..encoder import EncoderConfig, EncoderWeights, forward_core, gelu_grad
from ..linalg import softmax_rows

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    dropout: float = 0.1
    init_std: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)


def sample_masks(rng: np.random.Generator, config: EncoderConfig, batch: int, seq_len: int, rate: float) -> dict:
    """Inverted-dropout multipliers for every (layer, component) site of one batch."""
    if rate == 0.0:
        return {}
    H, d = config.num_heads, config.model_dim
    shapes = {(0, "embedding"): (batch, seq_len, d)}
    for l in range(1, config.num_layers + 1):
        shapes[(l, "attention")] = (batch, H, seq_len, seq_len)
        shapes[(l, "ffn")] = (batch, seq_len, d)
    scale = 1.0 / (1.0 - rate)
    return {key: (rng.random(shape) >= rate) * scale for key, shape in shapes.items()}


def _ln_backward(dy, cache, g):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0), dy.reshape(-1, dy.shape[-1]).sum(0)


def _lin_grads(x, dy):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(0)


def loss_and_grads(params: dict, config: EncoderConfig, tokens, labels, masks: dict | None = None, need_grads: bool = True):
    """Mean cross-entropy of the CLS classifier and its gradient w.r.t. every parameter."""
    masks = masks or {}
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    B, T = tokens.shape
    H, dk, d = config.num_heads, config.head_dim, config.model_dim
    logits, hidden, _, cache = forward_core(
        params, config, tokens, lambda l, c, shape: masks.get((l, c)), keep_cache=need_grads
    )
    probs = softmax_rows(logits)
    loss = float(-np.mean(np.log(probs[np.arange(B), labels] + 1e-300)))
    if not need_grads:
        return loss, None
    g = {}
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    hL = hidden[-1]
    g["cls_w"] = hL[:, 0, :].T @ dlogits
    g["cls_b"] = dlogits.sum(0)
    dh = np.zeros_like(hL)
    dh[:, 0, :] = dlogits @ params["cls_w"].T
    s = math.sqrt(dk)
    for l in range(config.num_layers, 0, -1):
        c = cache[l]
        p = lambda n: params[f"l{l}.{n}"]  # noqa: E731
        dx2, g[f"l{l}.ln2_g"], g[f"l{l}.ln2_b"] = _ln_backward(dh, c["ln2"], p("ln2_g"))
        dh1 = dx2.copy()
        df = dx2 if c["m_ffn"] is None else dx2 * c["m_ffn"]
        g[f"l{l}.w2"], g[f"l{l}.b2"] = _lin_grads(c["f_act"], df)
        df_pre = (df @ p("w2").T) * gelu_grad(c["f_pre"])
        g[f"l{l}.w1"], g[f"l{l}.b1"] = _lin_grads(c["h1"], df_pre)
        dh1 += df_pre @ p("w1").T
        dx1, g[f"l{l}.ln1_g"], g[f"l{l}.ln1_b"] = _ln_backward(dh1, c["ln1"], p("ln1_g"))
        dh_in = dx1.copy()
        g[f"l{l}.wo"], g[f"l{l}.bo"] = _lin_grads(c["ctx"], dx1)
        dctx = (dx1 @ p("wo").T).reshape(B, T, H, dk).transpose(0, 2, 1, 3)
        dalpha_d = dctx @ np.swapaxes(c["v"], -1, -2)
        dv = np.swapaxes(c["alpha_d"], -1, -2) @ dctx
        dalpha = dalpha_d if c["m_att"] is None else dalpha_d * c["m_att"]
        alpha = c["alpha"]
        da = alpha * (dalpha - (dalpha * alpha).sum(-1, keepdims=True))
        if c["mod"] is not None:
            da = da * c["mod"]
        dq = da @ c["k"] / s
        dkk = np.swapaxes(da, -1, -2) @ c["q"] / s
        h_in = c["h_in"]
        for name, grad in (("q", dq), ("k", dkk), ("v", dv)):
            grad = grad.transpose(0, 2, 1, 3).reshape(B, T, d)
            g[f"l{l}.w{name}"], g[f"l{l}.b{name}"] = _lin_grads(h_in, grad)
            dh_in += grad @ p(f"w{name}").T
        dh = dh_in
    e = cache["embed"]
    de = dh if e["mask"] is None else dh * e["mask"]
    dx, g["emb_ln_g"], g["emb_ln_b"] = _ln_backward(de, e["ln"], params["emb_ln_g"])
    g["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(g["tok_emb"], tokens.ravel(), dx.reshape(-1, d))
    g["pos_emb"] = np.zeros_like(params["pos_emb"])
    g["pos_emb"][:T] = dx.sum(0)
    return loss, g


def evaluate_loss(weights: EncoderWeights, tokens, labels, batch_size: int = 256) -> tuple:
    """Dropout-free mean loss and accuracy over a dataset."""
    total, correct = 0.0, 0
    for start in range(0, len(labels), batch_size):
        tb, lb = tokens[start:start + batch_size], labels[start:start + batch_size]
        logits, _, _, _ = forward_core(weights.params, weights.config, tb, lambda *a: None)
        probs = softmax_rows(logits)
        total += float(-np.log(probs[np.arange(len(lb)), lb] + 1e-300).sum())
        correct += int((probs.argmax(1) == lb).sum())
    return total / len(labels), correct / len(labels)


def train_encoder(dataset, config: EncoderConfig, seed: int = 0, train_config: TrainConfig | None = None, history: list | None = None) -> EncoderWeights:
    """Train from a fresh initialisation on ``dataset`` (a split with ``tokens``/``labels``).

    Per-epoch mean training loss is appended to ``history`` when given.
    """
    tc = train_config or TrainConfig()
    tokens = np.asarray(dataset.tokens)
    labels = np.asarray(dataset.labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    weights = EncoderWeights.init(config, seed=seed, std=tc.init_std)
    params = weights.params
    rng = np.random.default_rng([seed, 7])
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            masks = sample_masks(rng, config, len(idx), tokens.shape[1], tc.dropout)
            loss, grads = loss_and_grads(params, config, tokens[idx], labels[idx], masks)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step} (lr={tc.lr})")
            losses.append(loss)
            if tc.lr == 0.0:
                continue
            norm = math.sqrt(sum(float((gv * gv).sum()) for gv in grads.values()))
            clip = min(1.0, tc.grad_clip / (norm + 1e-12)) if tc.grad_clip else 1.0
            step += 1
            bc1 = 1.0 - tc.beta1 ** step
            bc2 = 1.0 - tc.beta2 ** step
            for k, gv in grads.items():
                gv = gv * clip
                m1[k] = tc.beta1 * m1[k] + (1 - tc.beta1) * gv
                m2[k] = tc.beta2 * m2[k] + (1 - tc.beta2) * gv * gv
                params[k] -= tc.lr * (m1[k] / bc1) / (np.sqrt(m2[k] / bc2) + tc.eps)
        mean_loss = float(np.mean(losses))
        log.debug("epoch %d loss %.4f", epoch, mean_loss)
        if history is not None:
            history.append(mean_loss)
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise TrainingDivergedError(f"parameter {k} became non-finite")
    return weights

