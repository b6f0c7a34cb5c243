"""Dense numerical kernel shared by the encoder, inference and trainer.

Matrices are plain ``float64`` numpy arrays. Randomness goes through
:class:`RngStream`, a counter-based stream: every draw is a pure function of
``(seed, counter)``, so per-pass, per-layer and per-component dropout masks can
be regenerated independently and in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_UINT64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class InvalidRateError(ValueError):
    """Raised for a dropout rate outside ``[0, 1)``."""


def as_matrix(data) -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite entries")
    return out


def softmax_rows(m, axis: int = -1) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting the row maximum.

    Entries equal to ``-inf`` (masked keys) receive probability zero, provided
    each row keeps at least one finite entry.
    """
    m = np.asarray(m, dtype=np.float64)
    shifted = m - np.max(m, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class RngStream:
    """Counter-based random stream.

    Each call to :meth:`generator` hands out a numpy ``Generator`` seeded from
    ``(seed, key, counter)`` and advances the counter; nothing else changes.
    ``key`` namespaces child streams created by :meth:`fork`.
    """

    seed: int
    counter: int = 0
    key: tuple = ()

    def generator(self) -> np.random.Generator:
        entropy = [self.seed & _UINT64, *(k & _UINT64 for k in self.key), self.counter]
        self.counter += 1
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def fork(self, *key: int) -> "RngStream":
        """Independent child stream identified by ``key``; does not advance self."""
        return RngStream(self.seed, 0, self.key + (len(key),) + tuple(int(k) for k in key))

    def derive_seed(self, *key: int) -> int:
        """A 64-bit seed that is a pure function of ``(seed, key)``."""
        ss = np.random.SeedSequence([self.seed & _UINT64, *(int(k) & _UINT64 for k in self.key + key)])
        a, b = ss.generate_state(2, np.uint32)
        return (int(a) << 32) | int(b)


@dataclass(frozen=True)
class DropoutMask:
    keep: np.ndarray
    rate: float
    scale: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "scale", 1.0 / (1.0 - self.rate))

    @property
    def shape(self) -> tuple:
        return self.keep.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Inverted dropout: zero dropped entries, rescale kept ones."""
        if self.rate == 0.0:
            return x
        return np.where(self.keep, x * self.scale, 0.0)

    def as_multiplier(self) -> np.ndarray:
        return self.keep * self.scale


def sample_dropout_mask(rng: RngStream, shape, rate: float) -> DropoutMask:
    """Draw an inverted-dropout mask; each entry is kept with probability ``1 - rate``."""
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise InvalidRateError(f"dropout rate must lie in [0, 1), got {rate}")
    shape = tuple(shape)
    if rate == 0.0:
        rng.counter += 1
        return DropoutMask(np.ones(shape, dtype=bool), 0.0)
    keep = rng.generator().random(shape) >= rate
    return DropoutMask(keep, rate)


def column_std(samples) -> np.ndarray:
    """Entrywise population standard deviation across a list of equal-shape matrices.

    A single sample yields zeros.
    """
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise ValueError("column_std needs at least one sample")
    shape = samples[0].shape
    for s in samples[1:]:
        if s.shape != shape:
            raise ShapeError(f"sample shape {s.shape} does not match {shape}")
    stacked = np.stack(samples)
    # shifting by the first sample keeps identical samples at exactly zero
    return np.std(stacked - stacked[0], axis=0, ddof=0)
