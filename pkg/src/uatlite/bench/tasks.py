"""Synthetic majority-vote classification tasks with controllable ambiguity and shift.

Vocabulary layout (ids):

* 0: CLS, always at position 0
* 1: PAD (reserved, never generated)
* ``2 .. 2+C*k``: class-indicative tokens, ``k`` per class
* next ``C*k`` ids: held-out twins of the indicative tokens, used only by the
  shifted split
* the rest: neutral filler

The label is the class whose indicative tokens are most frequent; exact ties
are broken uniformly at random, which is the only label noise. An ambiguous
example has its top two class counts within one of each other.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CLS_ID = 0
PAD_ID = 1
SPLITS = ("train", "val", "test_id", "test_ood")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}


class InfeasibleTaskError(ValueError):
    pass


class DataFormatError(ValueError):
    """A dataset file could not be parsed; the message names the line."""


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 64
    seq_len: int = 16
    num_classes: int = 3
    tokens_per_class: int = 4
    ambiguity_fraction: float = 0.3
    shift_profile: dict = field(default_factory=lambda: {"kind": "remap", "fraction": 0.5})
    label_rule: str = "majority"
    min_indicative: int = 3
    max_indicative: int = 10
    sizes: dict = field(default_factory=lambda: {"train": 4000, "val": 500, "test_id": 500, "test_ood": 500})
    seed: int = 0

    def __post_init__(self):
        c, k = self.num_classes, self.tokens_per_class
        if self.label_rule != "majority":
            raise InfeasibleTaskError(f"unsupported label rule {self.label_rule!r}")
        if c < 2 or k < 1:
            raise InfeasibleTaskError("need at least two classes and one indicative token per class")
        if self.vocab_size < 2 + 2 * c * k + 1:
            raise InfeasibleTaskError(f"vocab_size {self.vocab_size} too small for {c} classes x {k} tokens plus twins and filler")
        content = self.seq_len - 1
        if content < 2:
            raise InfeasibleTaskError(f"seq_len {self.seq_len} leaves no room for a majority vote")
        if not 2 <= self.min_indicative <= self.max_indicative <= content:
            raise InfeasibleTaskError(
                f"indicative count range [{self.min_indicative}, {self.max_indicative}] infeasible for {content} content slots"
            )
        if not 0.0 <= self.ambiguity_fraction <= 1.0:
            raise InfeasibleTaskError("ambiguity_fraction must lie in [0, 1]")
        kind = self.shift_profile.get("kind")
        if kind not in ("identity", "remap"):
            raise InfeasibleTaskError(f"unknown shift profile {kind!r}")
        if kind == "remap" and not 0.0 <= float(self.shift_profile.get("fraction", 0.0)) <= 1.0:
            raise InfeasibleTaskError("shift fraction must lie in [0, 1]")
        missing = set(SPLITS) - set(self.sizes)
        if missing:
            raise InfeasibleTaskError(f"sizes missing splits {sorted(missing)}")

    @property
    def indicative(self) -> np.ndarray:
        """(num_classes, tokens_per_class) array of indicative token ids."""
        n = self.num_classes * self.tokens_per_class
        return np.arange(2, 2 + n).reshape(self.num_classes, self.tokens_per_class)

    @property
    def held_out(self) -> np.ndarray:
        n = self.num_classes * self.tokens_per_class
        return np.arange(2 + n, 2 + 2 * n).reshape(self.num_classes, self.tokens_per_class)

    @property
    def filler(self) -> np.ndarray:
        return np.arange(2 + 2 * self.num_classes * self.tokens_per_class, self.vocab_size)

    def shift_map(self) -> dict:
        """Indicative token id -> held-out twin id, for the shifted split."""
        if self.shift_profile.get("kind") == "identity":
            return {}
        frac = float(self.shift_profile.get("fraction", 0.0))
        ind = self.indicative.ravel()
        twins = self.held_out.ravel()
        n = int(round(frac * ind.size))
        rng = np.random.default_rng([self.seed, 99])
        chosen = np.sort(rng.permutation(ind.size)[:n])
        return {int(ind[i]): int(twins[i]) for i in chosen}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SyntheticTaskSpec":
        d = dict(d)
        if "sizes" in d:
            d["sizes"] = {**cls().sizes, **d["sizes"]}
        return cls(**d)


@dataclass
class Split:
    name: str
    tokens: np.ndarray  # N x T int64
    labels: np.ndarray
    ambiguous: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def example_ids(self) -> list:
        return [f"{self.name}-{i}" for i in range(len(self))]

    def records(self):
        for i in range(len(self)):
            yield {
                "example_id": f"{self.name}-{i}",
                "split": self.name,
                "tokens": self.tokens[i].tolist(),
                "label": int(self.labels[i]),
                "ambiguous": bool(self.ambiguous[i]),
            }


def _counts(rng, n_ind: int, num_classes: int, ambiguous: bool) -> np.ndarray:
    for _ in range(10_000):
        counts = rng.multinomial(n_ind, np.full(num_classes, 1.0 / num_classes))
        top2 = np.sort(counts)[-2:]
        gap = top2[1] - top2[0]
        if (gap <= 1) == ambiguous:
            return counts
    raise InfeasibleTaskError(f"could not draw {'ambiguous' if ambiguous else 'clear'} counts for {n_ind} indicative tokens")


def _example(spec: SyntheticTaskSpec, rng) -> tuple:
    content = spec.seq_len - 1
    ambiguous = bool(rng.random() < spec.ambiguity_fraction)
    lo = spec.min_indicative
    if not ambiguous:
        lo = max(lo, 2)
    n_ind = int(rng.integers(lo, spec.max_indicative + 1))
    counts = _counts(rng, n_ind, spec.num_classes, ambiguous)
    winners = np.flatnonzero(counts == counts.max())
    label = int(winners[0] if len(winners) == 1 else rng.choice(winners))
    ind = spec.indicative
    toks = [int(rng.choice(ind[c])) for c in range(spec.num_classes) for _ in range(counts[c])]
    toks += rng.choice(spec.filler, size=content - n_ind).tolist()
    toks = rng.permutation(np.array(toks, dtype=np.int64))
    return np.concatenate([[CLS_ID], toks]), label, ambiguous


def generate_split(spec: SyntheticTaskSpec, name: str, n: int | None = None) -> Split:
    """Generate one split; example ``i`` depends only on ``(seed, split, i)``."""
    n = spec.sizes[name] if n is None else n
    code = _SPLIT_CODE[name]
    tokens = np.empty((n, spec.seq_len), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    amb = np.empty(n, dtype=bool)
    for i in range(n):
        tokens[i], labels[i], amb[i] = _example(spec, np.random.default_rng([spec.seed, code, i]))
    if name == "test_ood":
        remap = spec.shift_map()
        if remap:
            lut = np.arange(spec.vocab_size)
            for src, dst in remap.items():
                lut[src] = dst
            tokens = lut[tokens]
    return Split(name, tokens, labels, amb)


def generate_task(spec: SyntheticTaskSpec) -> dict:
    return {name: generate_split(spec, name) for name in SPLITS}


def write_splits(splits: dict, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, split in splits.items():
        path = out_dir / f"{name}.jsonl"
        with open(path, "w") as fh:
            for rec in split.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        paths.append(path)
    return paths


def read_split(path) -> Split:
    tokens, labels, amb, name = [], [], [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tokens.append(rec["tokens"])
                labels.append(int(rec["label"]))
                amb.append(bool(rec.get("ambiguous", False)))
                name = rec.get("split", name)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed example ({exc})") from None
    if len({len(t) for t in tokens}) > 1:
        raise DataFormatError(f"{path}: sequences of different lengths")
    return Split(name or Path(path).stem, np.array(tokens, dtype=np.int64), np.array(labels, dtype=np.int64), np.array(amb, dtype=bool))
