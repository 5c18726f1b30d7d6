"""Token-level retokenization noise and attacks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import ClusterMap, TokenStream
from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True, eq=False)
class PlantedChannel:
    """Each token survives with probability ``r``; otherwise it is swapped for a
    different token of its planted cluster with probability ``q_in``, else for a
    different token drawn from the whole vocabulary.

    Singleton clusters have no in-cluster alternative, so their substitutions
    always come from the whole vocabulary.
    """

    planted: ClusterMap
    r: float
    q_in: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ConfigurationError(f"survival probability r must lie in (0, 1], got {self.r}")
        if not 0.0 <= self.q_in <= 1.0:
            raise ConfigurationError(f"q_in must lie in [0, 1], got {self.q_in}")
        if self.planted.vocab_size < 2:
            raise ConfigurationError("a substitution channel needs at least 2 tokens")

    @classmethod
    def blocks(cls, vocab_size: int, cluster_size: int, r: float, q_in: float = 0.0,
               channel: int = 0) -> "PlantedChannel":
        """Planted clusters of ``cluster_size`` consecutive token ids."""
        if cluster_size < 1 or vocab_size % cluster_size:
            raise ConfigurationError(
                f"cluster size {cluster_size} does not divide vocabulary size {vocab_size}"
            )
        return cls(ClusterMap(channel, np.arange(vocab_size) // cluster_size), r, q_in)

    @classmethod
    def uniform(cls, vocab_size: int, r: float, channel: int = 0) -> "PlantedChannel":
        """Structure-free substitution channel (singleton clusters, q_in = 0)."""
        return cls(ClusterMap.identity(channel, vocab_size), r, 0.0)

    @property
    def vocab_size(self) -> int:
        return self.planted.vocab_size

    def _layout(self):
        cluster_of = self.planted.cluster_of
        order = np.argsort(cluster_of, kind="stable")
        sizes = np.bincount(cluster_of)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size) - starts[cluster_of[order]]
        return order, sizes, starts, rank

    def corrupt(self, tokens: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        v = self.vocab_size
        keep = rng.random(n) < self.r
        inside = rng.random(n) < self.q_in
        u_in = rng.random(n)
        u_any = rng.integers(0, v - 1, size=n)

        order, sizes, starts, rank = self._layout()
        cl = self.planted.cluster_of[tokens]
        size = sizes[cl]
        pick = np.minimum(np.floor(u_in * (size - 1)).astype(np.int64), np.maximum(size - 2, 0))
        pick += pick >= rank[tokens]
        in_cluster = order[np.minimum(starts[cl] + pick, v - 1)]
        anywhere = u_any + (u_any >= tokens)
        swapped = np.where(inside & (size > 1), in_cluster, anywhere)
        return np.where(keep, tokens, swapped)


def _per_channel(ch, n_channels):
    if isinstance(ch, PlantedChannel):
        return [ch] * n_channels
    ch = list(ch)
    if len(ch) != n_channels:
        raise ShapeError(f"{len(ch)} channel models for {n_channels} stream channels")
    return ch


def apply_channel(x: TokenStream, ch: Union[PlantedChannel, Sequence[Optional[PlantedChannel]]],
                  seed: int) -> TokenStream:
    """Pass every channel of ``x`` through its noise model; ``None`` leaves a channel clean."""
    models = _per_channel(ch, x.channels)
    rng = np.random.default_rng(seed)
    out = np.array(x.tokens)
    for c, model in enumerate(models):
        if model is None:
            continue
        if model.vocab_size != x.vocab_sizes[c]:
            raise ShapeError(
                f"channel {c}: noise model covers {model.vocab_size} tokens, stream has {x.vocab_sizes[c]}"
            )
        out[:, c] = model.corrupt(x.channel(c), rng)
    return TokenStream(out, x.vocab_sizes)


def expected_cluster_match(ch: PlantedChannel, token_weights: Optional[np.ndarray] = None) -> float:
    """Closed-form P[C(y) = C(x)] under the planted map, averaged over tokens.

    For equal cluster sizes ``s`` and uniform tokens this is
    ``r + (1 - r) * (q_in + (1 - q_in) * (s - 1) / (|V| - 1))``.
    """
    v = ch.vocab_size
    size = np.bincount(ch.planted.cluster_of)[ch.planted.cluster_of].astype(np.float64)
    collide = (size - 1) / (v - 1)
    q = np.where(size > 1, ch.q_in, 0.0)
    per_token = ch.r + (1 - ch.r) * (q + (1 - q) * collide)
    if token_weights is None:
        return float(per_token.mean())
    w = np.asarray(token_weights, dtype=np.float64)
    return float(np.dot(w, per_token) / w.sum())


@dataclass(frozen=True)
class AttackSpec:
    """``substitute`` (rate), ``crop`` (kept fraction) or ``shift`` (dropped leading steps)."""

    kind: str
    value: float
    from_end: bool = False

    def __post_init__(self):
        if self.kind == "substitute":
            if not 0.0 <= self.value <= 1.0:
                raise ConfigurationError(f"substitution rate must lie in [0, 1], got {self.value}")
        elif self.kind == "crop":
            if not 0.0 < self.value <= 1.0:
                raise ConfigurationError(f"crop fraction must lie in (0, 1], got {self.value}")
        elif self.kind == "shift":
            if self.value < 0 or self.value != int(self.value):
                raise ConfigurationError(f"shift offset must be a non-negative integer, got {self.value}")
        else:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        """``substitute:0.1``, ``crop:0.5``, ``crop:0.5:end`` or ``shift:3``."""
        parts = text.strip().split(":")
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "end"):
            raise ConfigurationError(f"cannot parse attack {text!r}")
        try:
            value = float(parts[1])
        except ValueError:
            raise ConfigurationError(f"cannot parse attack {text!r}") from None
        return cls(parts[0], value, from_end=len(parts) == 3)

    def __str__(self):
        value = int(self.value) if self.kind == "shift" else self.value
        return f"{self.kind}:{value}" + (":end" if self.from_end else "")


def attack(x: TokenStream, spec: AttackSpec, seed: int) -> TokenStream:
    n = x.length
    if spec.kind == "substitute":
        rng = np.random.default_rng(seed)
        out = np.array(x.tokens)
        for c, v in enumerate(x.vocab_sizes):
            hit = rng.random(n) < spec.value
            repl = rng.integers(0, v, size=n)
            out[:, c] = np.where(hit, repl, out[:, c])
        return TokenStream(out, x.vocab_sizes)
    if spec.kind == "crop":
        keep = int(math.floor(spec.value * n + 0.5))
        if keep == 0:
            raise ShapeError(f"cropping {n} steps to fraction {spec.value} leaves nothing")
        rows = x.tokens[n - keep:] if spec.from_end else x.tokens[:keep]
        return TokenStream(rows, x.vocab_sizes)
    offset = int(spec.value)
    if offset >= n:
        raise ShapeError(f"shifting by {offset} steps empties a {n}-step stream")
    return TokenStream(x.tokens[offset:], x.vocab_sizes)
