"""Confusion counts from paired token streams and the digraph built from them."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import TokenStream
from .errors import DataFormatError, ShapeError

CONFUSION_HEADER = ["channel", "src", "dst", "count"]


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Sparse off-diagonal counts ``(src, dst) -> count`` sorted by (src, dst)."""

    channel: int
    vocab_size: int
    src: np.ndarray
    dst: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        src = _readonly(self.src, np.int64)
        dst = _readonly(self.dst, np.int64)
        count = _readonly(self.count, np.int64)
        if not (src.shape == dst.shape == count.shape) or src.ndim != 1:
            raise ShapeError("src, dst and count must be equal-length vectors")
        if src.size:
            if (src == dst).any():
                raise ShapeError("confusion matrices carry no diagonal entries")
            if (count <= 0).any():
                raise ShapeError("confusion counts must be positive")
            if min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= self.vocab_size:
                raise ShapeError("confusion entry outside the vocabulary")
            key = src * self.vocab_size + dst
            if (np.diff(key) <= 0).any():
                raise ShapeError("confusion entries must be unique and sorted by (src, dst)")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "count", count)

    @classmethod
    def from_pairs(cls, channel, vocab_size, src, dst, count=None) -> "ConfusionMatrix":
        """Accumulate (possibly repeated, unsorted) entries; diagonal entries are dropped."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        count = np.ones(src.shape, dtype=np.int64) if count is None else np.asarray(count, dtype=np.int64)
        off = src != dst
        key = src[off] * vocab_size + dst[off]
        uniq, inv = np.unique(key, return_inverse=True)
        total = np.bincount(inv.ravel(), weights=count[off], minlength=uniq.size).astype(np.int64)
        keep = total > 0
        uniq, total = uniq[keep], total[keep]
        return cls(channel, vocab_size, uniq // vocab_size, uniq % vocab_size, total)

    @property
    def nnz(self) -> int:
        return int(self.src.size)

    @property
    def total(self) -> int:
        return int(self.count.sum())

    def to_dict(self) -> dict:
        return {(int(s), int(d)): int(c) for s, d, c in zip(self.src, self.dst, self.count)}

    def dense(self) -> np.ndarray:
        out = np.zeros((self.vocab_size, self.vocab_size), dtype=np.int64)
        out[self.src, self.dst] = self.count
        return out

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if (self.channel, self.vocab_size) != (other.channel, other.vocab_size):
            raise ShapeError("can only merge confusion matrices of the same channel and vocabulary")
        return ConfusionMatrix.from_pairs(
            self.channel, self.vocab_size,
            np.concatenate([self.src, other.src]), np.concatenate([self.dst, other.dst]),
            np.concatenate([self.count, other.count]),
        )

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return (
            self.channel == other.channel and self.vocab_size == other.vocab_size
            and np.array_equal(self.src, other.src) and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.count, other.count)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class WeightedDigraph:
    node_count: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    total_weight: float

    def __post_init__(self):
        src = _readonly(self.src, np.int64)
        dst = _readonly(self.dst, np.int64)
        w = _readonly(self.weight, np.float64)
        if src.size:
            if (src == dst).any():
                raise ShapeError("digraph arcs may not be self-loops")
            if (w <= 0).any():
                raise ShapeError("arc weights must be positive")
            if min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= self.node_count:
                raise ShapeError("arc endpoint outside the node range")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "total_weight", math.fsum(w.tolist()))

    @classmethod
    def from_arcs(cls, node_count: int, arcs: Iterable) -> "WeightedDigraph":
        """Build from ``(src, dst, weight)`` triples; repeated arcs add up."""
        arcs = list(arcs)
        if not arcs:
            return cls(node_count, [], [], [], 0.0)
        src, dst, w = (np.array(col) for col in zip(*arcs))
        key = src.astype(np.int64) * node_count + dst.astype(np.int64)
        uniq, inv = np.unique(key, return_inverse=True)
        weight = np.bincount(inv.ravel(), weights=w.astype(np.float64), minlength=uniq.size)
        return cls(node_count, uniq // node_count, uniq % node_count, weight, 0.0)

    @property
    def arc_count(self) -> int:
        return int(self.src.size)

    def to_dict(self) -> dict:
        return {(int(s), int(d)): float(w) for s, d, w in zip(self.src, self.dst, self.weight)}


def build_confusion(pairs: Iterable, vocab_sizes: Optional[Sequence[int]] = None) -> list:
    """One ConfusionMatrix per channel from ``(original, retokenized)`` stream pairs.

    Every position with ``y_i != x_i`` adds one to entry ``(x_i, y_i)``.
    ``vocab_sizes`` is only needed when ``pairs`` is empty.
    """
    srcs, dsts = None, None
    for x, y in pairs:
        if not isinstance(x, TokenStream) or not isinstance(y, TokenStream):
            raise ShapeError("pairs must hold TokenStream objects")
        if x.tokens.shape != y.tokens.shape or x.vocab_sizes != y.vocab_sizes:
            raise ShapeError(f"paired streams differ in shape: {x.tokens.shape} vs {y.tokens.shape}")
        if vocab_sizes is None:
            vocab_sizes = x.vocab_sizes
        elif tuple(vocab_sizes) != x.vocab_sizes:
            raise ShapeError("all pairs must share the same vocabularies")
        if srcs is None:
            srcs = [[] for _ in vocab_sizes]
            dsts = [[] for _ in vocab_sizes]
        diff = x.tokens != y.tokens
        for c in range(x.channels):
            srcs[c].append(x.tokens[diff[:, c], c])
            dsts[c].append(y.tokens[diff[:, c], c])
    if vocab_sizes is None:
        raise ShapeError("vocabulary sizes are required for an empty pair list")
    out = []
    for c, v in enumerate(vocab_sizes):
        if srcs is None:
            out.append(ConfusionMatrix(c, int(v), [], [], []))
        else:
            out.append(ConfusionMatrix.from_pairs(c, int(v), np.concatenate(srcs[c]), np.concatenate(dsts[c])))
    return out


def to_graph(m: ConfusionMatrix, noise_threshold: int = 1) -> WeightedDigraph:
    """Keep entries with count >= ``noise_threshold`` as weighted arcs."""
    if noise_threshold < 1:
        raise ValueError("noise threshold must be >= 1")
    keep = m.count >= noise_threshold
    return WeightedDigraph(m.vocab_size, m.src[keep], m.dst[keep], m.count[keep].astype(np.float64), 0.0)


def write_confusion_csv(path_or_file, matrices: Sequence[ConfusionMatrix]) -> None:
    rows = []
    for m in sorted(matrices, key=lambda m: m.channel):
        rows.extend((m.channel, int(s), int(d), int(c)) for s, d, c in zip(m.src, m.dst, m.count))
    rows.sort()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONFUSION_HEADER)
    w.writerows(rows)
    _write_text(path_or_file, buf.getvalue())


def read_confusion_csv(path, vocab_sizes: Optional[Sequence[int]] = None) -> list:
    """Parse a confusion CSV. Without ``vocab_sizes`` each vocabulary is sized to its largest id + 1."""
    rows = _read_int_rows(path, CONFUSION_HEADER)
    n_ch = len(vocab_sizes) if vocab_sizes is not None else (max((r[1][0] for r in rows), default=-1) + 1)
    by_ch = [[] for _ in range(n_ch)]
    prev = None
    for line, (ch, s, d, c) in rows:
        if ch >= n_ch:
            raise DataFormatError(f"channel {ch} out of range", path, line)
        if s == d or c <= 0:
            raise DataFormatError("diagonal entry or non-positive count", path, line)
        if prev is not None and (ch, s, d) <= prev:
            raise DataFormatError("rows must be unique and sorted by (channel, src, dst)", path, line)
        if vocab_sizes is not None and max(s, d) >= vocab_sizes[ch]:
            raise DataFormatError(f"token id outside vocabulary of channel {ch}", path, line)
        prev = (ch, s, d)
        by_ch[ch].append((s, d, c))
    out = []
    for ch, entries in enumerate(by_ch):
        if vocab_sizes is not None:
            v = int(vocab_sizes[ch])
        else:
            v = max((max(s, d) for s, d, _ in entries), default=0) + 1
        arr = np.array(entries, dtype=np.int64).reshape(-1, 3)
        out.append(ConfusionMatrix(ch, v, arr[:, 0], arr[:, 1], arr[:, 2]))
    return out


def _write_text(path_or_file, text):
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", newline="") as fh:
            fh.write(text)


def _read_int_rows(path, header):
    try:
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read: {exc.strerror}", path) from None
    if not lines or [h.strip() for h in lines[0]] != header:
        raise DataFormatError(f"expected header {','.join(header)}", path, 1)
    rows = []
    for lineno, row in enumerate(lines[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", path, lineno)
        try:
            vals = tuple(int(v) for v in row)
        except ValueError:
            raise DataFormatError("non-integer field", path, lineno) from None
        if min(vals) < 0:
            raise DataFormatError("negative field", path, lineno)
        rows.append((lineno, vals))
    return rows
