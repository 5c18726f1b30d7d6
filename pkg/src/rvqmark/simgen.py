"""Synthetic autoregressive generator with cluster-level green biasing.

``generate`` accepts any logit provider, a callable
``provider(step, channel, prefix) -> array of shape (|V_c|,)`` where ``prefix``
holds the tokens of all channels for the steps before ``step``. Sampling is
Gumbel-max: token = argmax(logits + gumbel + delta * green), with the Gumbel
noise drawn up front from the generation seed, so a provider's output fully
determines the trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .core import (
    ClusterMap, TokenStream, WatermarkConfig, identity_maps, kernel_plan,
)
from .errors import ShapeError, UndefinedEstimateError

LogitProvider = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass(eq=False)
class SyntheticModel:
    """i.i.d. Gaussian base logits per step, scaled by ``entropy_scale``.

    Small scales give near-uniform next-token distributions, large scales
    peaked ones. Logits of channel ``c`` are the rows of one
    ``default_rng([seed, c])`` normal draw, so they do not depend on the prefix.
    """

    vocab_sizes: tuple
    entropy_scale: float = 1.0
    seed: int = 0
    _blocks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        if not self.entropy_scale > 0:
            raise ValueError("entropy_scale must be positive")

    def logit_block(self, channel: int, n_steps: int) -> np.ndarray:
        block = self._blocks.get(channel)
        if block is None or block.shape[0] < n_steps:
            rng = np.random.default_rng([self.seed, channel])
            block = self.entropy_scale * rng.standard_normal((n_steps, self.vocab_sizes[channel]))
            self._blocks[channel] = block
        return block[:n_steps]

    def __call__(self, step: int, channel: int, prefix: np.ndarray) -> np.ndarray:
        block = self._blocks.get(channel)
        if block is None or block.shape[0] <= step:
            block = self.logit_block(channel, max(2 * step, 64))
        return block[step]


@dataclass(frozen=True, eq=False)
class GenerationTrace:
    stream: TokenStream
    green_flags: np.ndarray      # (N, C) token sampled from its step's green list
    deferred_flags: np.ndarray   # (N, C) bias skipped because the context repeated
    watermarked_channels: tuple


def _gumbel(rng, n, vocab_sizes):
    return [-np.log(rng.standard_exponential((n, v))) for v in vocab_sizes]


def generate(model, config: WatermarkConfig, maps: Optional[Sequence[ClusterMap]], n: int,
             seed: int, vocab_sizes: Optional[Sequence[int]] = None) -> GenerationTrace:
    """Sample ``n`` steps from ``model`` with the green-cluster bias of ``config``.

    ``maps`` default to identity (plain token-level KGW). For a generic
    provider the vocabulary sizes come from ``maps`` or ``vocab_sizes``.
    """
    if n < 1:
        raise ValueError("generation length must be >= 1")
    if maps is None:
        if vocab_sizes is None:
            vocab_sizes = getattr(model, "vocab_sizes", None)
        if vocab_sizes is None:
            raise ValueError("vocabulary sizes are needed when no cluster maps are given")
        maps = identity_maps(vocab_sizes)
    vocab = [m.vocab_size for m in maps]
    plan = kernel_plan(config, maps)
    rng = np.random.default_rng(seed)
    gumbel = _gumbel(rng, n, vocab)

    if isinstance(model, SyntheticModel):
        if tuple(vocab) != model.vocab_sizes:
            raise ShapeError(f"model vocabularies {model.vocab_sizes} do not match maps {vocab}")
        noisy = np.full((len(vocab), n, max(vocab)), -np.inf)
        for c, v in enumerate(vocab):
            noisy[c, :, :v] = model.logit_block(c, n) + gumbel[c]
        tokens, green, deferred = kernels.generate_kernel(
            noisy, np.asarray(vocab, dtype=np.int64), plan.cluster_of, plan.n_clusters,
            plan.n_green, plan.marked, plan.base_states, plan.table,
            plan.context_channel, plan.h, float(config.delta), plan.defer,
        )
    else:
        tokens, green, deferred = _generate_stepwise(model, plan, vocab, gumbel, n, config.delta)

    return GenerationTrace(
        TokenStream(tokens, vocab), green, deferred, config.watermarked_channels,
    )


def _generate_stepwise(provider, plan, vocab, gumbel, n, delta):
    n_ch = len(vocab)
    tokens = np.zeros((n, n_ch), dtype=np.int64)
    green = np.zeros((n, n_ch), dtype=bool)
    deferred = np.zeros((n, n_ch), dtype=bool)
    cc, h = plan.context_channel, plan.h
    seen = set()
    for i in range(n):
        ctx = tuple(
            int(plan.cluster_of[cc, tokens[j, cc]]) if j >= 0 else kernels.SENTINEL
            for j in range(i - h, i)
        )
        repeated = plan.defer and ctx in seen
        seen.add(ctx)
        for c in range(n_ch):
            logits = np.asarray(provider(i, c, tokens[:i]), dtype=np.float64)
            if logits.shape != (vocab[c],):
                raise ShapeError(
                    f"logit provider returned shape {logits.shape} at step {i}, channel {c}; "
                    f"expected ({vocab[c]},)"
                )
            if not np.isfinite(logits).all():
                raise ShapeError(f"logit provider returned non-finite values at step {i}, channel {c}")
            row = logits + gumbel[c][i]
            if plan.marked[c]:
                state = int(plan.base_states[c])
                for cid in ctx:
                    state = kernels.fold_int(state, cid + 1)
                mask = kernels.green_mask(state, plan.table[:plan.n_clusters[c]], int(plan.n_green[c]))
                token_green = mask[plan.cluster_of[c, :vocab[c]]]
                if not repeated:
                    row = row + np.where(token_green, delta, 0.0)
                tok = int(np.argmax(row))
                green[i, c] = token_green[tok]
                deferred[i, c] = repeated
            else:
                tok = int(np.argmax(row))
            tokens[i, c] = tok
    return tokens, green, deferred


def estimate_g(trace: GenerationTrace) -> np.ndarray:
    """Realized green fraction over non-deferred steps, one entry per watermarked channel."""
    out = []
    for c in trace.watermarked_channels:
        live = ~trace.deferred_flags[:, c]
        if not live.any():
            raise UndefinedEstimateError(f"channel {c}: every step was deferred")
        out.append(trace.green_flags[live, c].mean())
    return np.array(out)


def pooled_g(traces: Sequence[GenerationTrace]) -> np.ndarray:
    """estimate_g pooled over many traces (ratio of sums, not mean of ratios)."""
    chans = traces[0].watermarked_channels
    num = np.zeros(len(chans))
    den = np.zeros(len(chans))
    for tr in traces:
        for k, c in enumerate(chans):
            live = ~tr.deferred_flags[:, c]
            num[k] += tr.green_flags[live, c].sum()
            den[k] += live.sum()
    if (den == 0).any():
        raise UndefinedEstimateError("every step was deferred on some channel")
    return num / den
