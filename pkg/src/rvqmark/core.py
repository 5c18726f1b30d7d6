"""Domain types, the keyed vocabulary partition and sequence-match primitives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, ShapeError


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TokenStream:
    """A ``length x channels`` grid of token ids, one vocabulary per channel."""

    tokens: np.ndarray
    vocab_sizes: tuple

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be 2-D (steps, channels), got shape {tokens.shape}")
        vocab = tuple(int(v) for v in self.vocab_sizes)
        if len(vocab) != tokens.shape[1] or len(vocab) == 0:
            raise ShapeError(f"{len(vocab)} vocabulary sizes for {tokens.shape[1]} channels")
        if any(v <= 0 for v in vocab):
            raise ShapeError("vocabulary sizes must be positive")
        if tokens.size and not np.issubdtype(tokens.dtype, np.integer):
            raise ShapeError("token ids must be integers")
        tokens = _frozen(tokens, np.int64)
        if tokens.size and ((tokens < 0).any() or (tokens >= np.array(vocab)[None, :]).any()):
            raise ShapeError("token id outside its channel vocabulary")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "vocab_sizes", vocab)

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    def channel(self, c: int) -> np.ndarray:
        return self.tokens[:, c]

    def __eq__(self, other):
        if not isinstance(other, TokenStream):
            return NotImplemented
        return self.vocab_sizes == other.vocab_sizes and np.array_equal(self.tokens, other.tokens)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ClusterMap:
    """Surjective token -> cluster map for one channel, cluster ids contiguous from 0."""

    channel: int
    cluster_of: np.ndarray

    def __post_init__(self):
        cluster_of = _frozen(self.cluster_of, np.int64)
        if cluster_of.ndim != 1 or cluster_of.size == 0:
            raise ConfigurationError("cluster map needs one entry per token")
        k = int(cluster_of.max()) + 1
        if cluster_of.min() < 0 or np.bincount(cluster_of, minlength=k).min() == 0:
            raise ConfigurationError("cluster ids must be contiguous from 0 with every id used")
        object.__setattr__(self, "cluster_of", cluster_of)

    @classmethod
    def identity(cls, channel: int, vocab_size: int) -> "ClusterMap":
        return cls(channel, np.arange(vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.cluster_of.shape[0]

    @property
    def cluster_count(self) -> int:
        return int(self.cluster_of.max()) + 1

    def __call__(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ShapeError(f"token id outside the domain of the channel {self.channel} cluster map")
        return self.cluster_of[tokens]

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == cluster)

    def __eq__(self, other):
        if not isinstance(other, ClusterMap):
            return NotImplemented
        return self.channel == other.channel and np.array_equal(self.cluster_of, other.cluster_of)

    __hash__ = None


def identity_maps(vocab_sizes: Sequence[int]) -> list:
    return [ClusterMap.identity(c, v) for c, v in enumerate(vocab_sizes)]


def green_size(gamma: float, n_clusters: int) -> int:
    """round(gamma * K), halves rounded up; must leave both lists non-empty."""
    if not 0.0 < gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in (0, 1), got {gamma}")
    size = int(math.floor(gamma * n_clusters + 0.5))
    if not 1 <= size <= n_clusters - 1:
        raise ConfigurationError(
            f"gamma={gamma} over {n_clusters} cluster(s) gives a green list of {size}; "
            f"it must hold between 1 and {n_clusters - 1} clusters"
        )
    return size


@dataclass(frozen=True)
class WatermarkConfig:
    key: bytes
    gamma: float = 0.25
    delta: float = 2.0
    context_h: int = 0
    watermarked_channels: tuple = (0,)
    context_channel: int = 0
    defer_on_repeated_key: bool = False

    def __post_init__(self):
        key = bytes(self.key)
        if len(key) != 32:
            raise ConfigurationError("watermark key must be 256 bits (32 bytes)")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not (self.delta >= 0.0 and math.isfinite(self.delta)):
            raise ConfigurationError(f"delta must be finite and >= 0, got {self.delta}")
        if self.context_h < 0:
            raise ConfigurationError("context length h must be >= 0")
        chans = tuple(sorted(set(int(c) for c in self.watermarked_channels)))
        if not chans or chans[0] < 0:
            raise ConfigurationError("at least one non-negative watermarked channel is required")
        if self.context_channel < 0:
            raise ConfigurationError("context channel must be a channel index")
        object.__setattr__(self, "key", key)
        object.__setattr__(self, "watermarked_channels", chans)

    @classmethod
    def from_hex(cls, key_hex: str, **kw) -> "WatermarkConfig":
        try:
            key = bytes.fromhex(key_hex)
        except ValueError as exc:
            raise ConfigurationError(f"key is not valid hex: {exc}") from None
        return cls(key=key, **kw)

    def validate_for(self, vocab_sizes: Sequence[int], maps: Sequence[ClusterMap]) -> None:
        n_ch = len(vocab_sizes)
        if self.context_channel >= n_ch or self.watermarked_channels[-1] >= n_ch:
            raise ConfigurationError(
                f"configured channels {self.watermarked_channels} / context "
                f"{self.context_channel} do not exist in a {n_ch}-channel stream"
            )
        if len(maps) != n_ch:
            raise ConfigurationError(f"{len(maps)} cluster maps for {n_ch} channels")
        for c, (v, cmap) in enumerate(zip(vocab_sizes, maps)):
            if cmap.vocab_size != v:
                raise ConfigurationError(
                    f"channel {c}: cluster map covers {cmap.vocab_size} tokens, vocabulary has {v}"
                )
        for c in self.watermarked_channels:
            green_size(self.gamma, maps[c].cluster_count)


@dataclass(frozen=True)
class GreenSet:
    channel: int
    members: frozenset
    n_clusters: int = field(compare=False)

    def __contains__(self, cluster):
        return cluster in self.members

    def __len__(self):
        return len(self.members)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.n_clusters, dtype=bool)
        out[list(self.members)] = True
        return out


def prf_partition(key: bytes, channel: int, context_key: Sequence[int], n_clusters: int,
                  gamma: float) -> GreenSet:
    """Keyed green list over ``n_clusters`` clusters for one (channel, context).

    Each cluster id gets a 64-bit keyed score and the ``round(gamma*K)`` lowest
    scores are green; with ``h = 0`` pass an empty context for the static list.
    """
    if n_clusters < 2:
        raise ConfigurationError(f"need at least 2 clusters to split, got {n_clusters}")
    n_green = green_size(gamma, n_clusters)
    state = kernels.context_state(kernels.channel_state(bytes(key), channel), tuple(context_key))
    mask = kernels.green_mask(state, kernels.cluster_table(n_clusters), n_green)
    return GreenSet(channel, frozenset(np.flatnonzero(mask).tolist()), n_clusters)


def _check_aligned(x: TokenStream, y: TokenStream):
    if x.tokens.shape != y.tokens.shape:
        raise ShapeError(f"stream shapes differ: {x.tokens.shape} vs {y.tokens.shape}")


def token_match(x: TokenStream, y: TokenStream):
    """Per-channel fraction of positions where ``y`` equals ``x``, and their mean."""
    _check_aligned(x, y)
    if x.length == 0:
        raise ShapeError("token match of empty streams is undefined")
    per = (x.tokens == y.tokens).mean(axis=0)
    return per, float(per.mean())


def cluster_match(x: TokenStream, y: TokenStream, maps: Sequence[ClusterMap]) -> np.ndarray:
    """Per-channel fraction of positions where ``y`` lands in the same cluster as ``x``."""
    _check_aligned(x, y)
    if len(maps) != x.channels:
        raise ShapeError(f"{len(maps)} cluster maps for {x.channels} channels")
    if x.length == 0:
        raise ShapeError("cluster match of empty streams is undefined")
    return np.array([(m(x.channel(c)) == m(y.channel(c))).mean() for c, m in enumerate(maps)])


@dataclass(frozen=True)
class KernelPlan:
    """Flat arrays the generation / detection kernels consume."""

    cluster_of: np.ndarray     # (C, Vmax), zero padded
    n_clusters: np.ndarray     # (C,)
    n_green: np.ndarray        # (C,), 0 on unmarked channels
    marked: np.ndarray         # (C,) bool
    base_states: np.ndarray    # (C,) uint64, fold(channel_state, h)
    table: np.ndarray          # (Kmax,) uint64 cluster hash table
    context_channel: int
    h: int
    defer: bool


def kernel_plan(config: WatermarkConfig, maps: Sequence[ClusterMap]) -> KernelPlan:
    vocab = [m.vocab_size for m in maps]
    config.validate_for(vocab, maps)
    n_ch = len(maps)
    cluster_of = np.zeros((n_ch, max(vocab)), dtype=np.int64)
    n_clusters = np.zeros(n_ch, dtype=np.int64)
    n_green = np.zeros(n_ch, dtype=np.int64)
    marked = np.zeros(n_ch, dtype=bool)
    base_states = np.zeros(n_ch, dtype=np.uint64)
    for c, m in enumerate(maps):
        cluster_of[c, :m.vocab_size] = m.cluster_of
        n_clusters[c] = m.cluster_count
    for c in config.watermarked_channels:
        marked[c] = True
        n_green[c] = green_size(config.gamma, int(n_clusters[c]))
        base_states[c] = kernels.fold_int(kernels.channel_state(config.key, c), config.context_h)
    return KernelPlan(
        cluster_of, n_clusters, n_green, marked, base_states,
        kernels.cluster_table(int(n_clusters.max())),
        config.context_channel, config.context_h, bool(config.defer_on_repeated_key),
    )
