"""Seeded Monte Carlo harness: null calibration, theory grids, paired
cluster-vs-token comparisons and attack sweeps.

Every trial derives its seeds from ``(seed, purpose, trial)`` through
``SeedSequence``, so results do not depend on execution order or worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import AttackSpec, PlantedChannel, apply_channel, attack
from .community import cluster_confusion
from .core import TokenStream, WatermarkConfig, identity_maps, token_match
from .detect import detect
from .graph import build_confusion
from .simgen import SyntheticModel, generate, pooled_g
from .theory import expected_z

# seed purposes
MODEL, GENERATION, CHANNEL, ATTACK, CAPTURE, CLUSTER, THEORY = range(7)


def derive_seed(seed: int, purpose: int, trial: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), purpose, trial]).generate_state(1, np.uint64)[0])


def run_trials(fn: Callable, args: Sequence, workers: int = 1) -> list:
    """Map ``fn`` over ``args`` in trial order, optionally across a process pool."""
    if workers <= 1 or len(args) < 2:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args, chunksize=max(1, len(args) // (4 * workers))))


# ---------------------------------------------------------------------------
# building blocks

def watermarked_trace(vocab_sizes, config, maps, n, seed, trial, entropy_scale=1.0):
    model = SyntheticModel(vocab_sizes, entropy_scale, derive_seed(seed, MODEL, trial))
    return generate(model, config, maps, n, derive_seed(seed, GENERATION, trial))


def capture_pairs(channel_models, vocab_sizes, n_streams, n, seed):
    """Uniform token streams and their retokenized versions, for confusion capture."""
    pairs = []
    for t in range(n_streams):
        rng = np.random.default_rng(derive_seed(seed, CAPTURE, t))
        x = TokenStream(np.column_stack([rng.integers(0, v, size=n) for v in vocab_sizes]), vocab_sizes)
        y = apply_channel(x, channel_models, derive_seed(seed, CHANNEL, t))
        pairs.append((x, y))
    return pairs


def planted_confusion(ch: PlantedChannel, positions: int, seed: int):
    """Confusion matrix from ``positions`` uniform tokens passed once through ``ch``."""
    pairs = capture_pairs([ch], (ch.vocab_size,), 1, positions, seed)
    return build_confusion(pairs)[0], pairs


def recovered_map(ch: PlantedChannel, positions: int, seed: int, rho=1.0, noise_threshold=1,
                  algorithm="leiden"):
    conf, _ = planted_confusion(ch, positions, seed)
    return cluster_confusion(conf, rho, noise_threshold, algorithm, derive_seed(seed, CLUSTER))


# ---------------------------------------------------------------------------
# null calibration

@dataclass
class NullCalibration:
    z: np.ndarray
    p: np.ndarray

    @property
    def mean(self):
        return float(self.z.mean())

    @property
    def std(self):
        return float(self.z.std(ddof=1))

    def fpr(self, alpha=0.01):
        return float((self.p <= alpha).mean())


def null_calibration(trials: int, n: int, vocab_sizes, config: WatermarkConfig, seed: int,
                     detect_config: Optional[WatermarkConfig] = None, entropy_scale=1.0):
    """Detect ``trials`` streams that carry no watermark for ``detect_config``.

    With ``config.delta == 0`` the streams are plain model samples; with a
    watermarking ``config`` and a different ``detect_config`` key this is the
    wrong-key null.
    """
    detect_config = detect_config or config
    maps = identity_maps(vocab_sizes)
    z = np.empty(trials)
    p = np.empty(trials)
    for t in range(trials):
        tr = watermarked_trace(vocab_sizes, config, maps, n, seed, t, entropy_scale)
        rep = detect(tr.stream, detect_config, maps)
        z[t], p[t] = rep.z_total, rep.p_value
    return NullCalibration(z, p)


# ---------------------------------------------------------------------------
# theory vs simulation

@dataclass
class TheoryCell:
    gamma: float
    h: int
    g: float
    r: float
    predicted: float
    empirical: float
    se: float

    @property
    def within_3se(self) -> bool:
        return abs(self.predicted - self.empirical) <= 3 * self.se


def theory_cell(gamma, h, r, trials, n=200, vocab=200, delta=2.0, entropy_scale=1.0, seed=0,
                key=b"\x00" * 32):
    """Single-channel watermark through a structure-free substitution channel.

    ``g`` and ``r`` are measured on the same traces the z-scores come from.
    """
    config = WatermarkConfig(key, gamma, delta, h, (0,))
    maps = identity_maps((vocab,))
    ch = PlantedChannel.uniform(vocab, r)
    traces, z, match = [], np.empty(trials), np.empty(trials)
    for t in range(trials):
        tr = watermarked_trace((vocab,), config, maps, n, seed, t, entropy_scale)
        y = apply_channel(tr.stream, ch, derive_seed(seed, CHANNEL, t))
        traces.append(tr)
        match[t] = token_match(tr.stream, y)[1]
        z[t] = detect(y, config, maps).z_total
    g_hat = float(pooled_g(traces)[0])
    r_hat = float(match.mean())
    return TheoryCell(
        gamma, h, g_hat, r_hat, expected_z(n, gamma, g_hat, r_hat, h),
        float(z.mean()), float(z.std(ddof=1) / math.sqrt(trials)),
    )


def theory_grid(gammas, hs, r=0.85, trials=2000, n=200, vocab=200, delta=2.0, entropy_scale=1.0,
                seed=0, workers=1, key=b"\x00" * 32):
    """All ``(gamma, h)`` cells (h-major order) and the Pearson correlation per h."""
    grid = [(gm, h) for h in hs for gm in gammas]
    jobs = [(gm, h, r, trials, n, vocab, delta, entropy_scale, derive_seed(seed, THEORY, k), key)
            for k, (gm, h) in enumerate(grid)]
    cells = run_trials(_theory_job, jobs, workers)
    return cells, row_correlations(cells)


def pearson(a, b) -> float:
    """Pearson correlation; nan with fewer than two points or a constant side."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def row_correlations(cells) -> dict:
    hs = sorted({c.h for c in cells})
    return {h: pearson([c.predicted for c in cells if c.h == h], [c.empirical for c in cells if c.h == h])
            for h in hs}


def _theory_job(args):
    return theory_cell(*args)


# ---------------------------------------------------------------------------
# paired token-level vs cluster-level detection

@dataclass
class PairedResult:
    base: np.ndarray       # -log10 p with identity maps
    cluster: np.ndarray    # -log10 p with the supplied cluster maps

    @property
    def win_rate(self) -> float:
        return float((self.cluster > self.base).mean())

    @property
    def median_ratio(self) -> float:
        return float(np.median(self.cluster) / np.median(self.base))


def paired_gain(ch: PlantedChannel, cluster_map, trials, config: WatermarkConfig, n=200, seed=0,
                entropy_scale=1.0):
    """Same model, sampling noise and channel noise; only the vocabulary map differs."""
    vocab = (ch.vocab_size,)
    base_maps = identity_maps(vocab)
    cl_maps = [cluster_map]
    base = np.empty(trials)
    clus = np.empty(trials)
    for t in range(trials):
        for maps, out in ((base_maps, base), (cl_maps, clus)):
            tr = watermarked_trace(vocab, config, maps, n, seed, t, entropy_scale)
            y = apply_channel(tr.stream, ch, derive_seed(seed, CHANNEL, t))
            out[t] = detect(y, config, maps).neg_log10_p
    return PairedResult(base, clus)


def attack_sweep(ch: Optional[PlantedChannel], maps, attacks: Sequence[Optional[AttackSpec]], trials,
                 config: WatermarkConfig, n=200, seed=0, entropy_scale=1.0):
    """-log10 p per trial for each attack (``None`` = no attack), on common watermarked streams."""
    vocab = tuple(m.vocab_size for m in maps)
    out = np.empty((len(attacks), trials))
    for t in range(trials):
        tr = watermarked_trace(vocab, config, maps, n, seed, t, entropy_scale)
        y = tr.stream if ch is None else apply_channel(tr.stream, ch, derive_seed(seed, CHANNEL, t))
        for a, spec in enumerate(attacks):
            ya = y if spec is None else attack(y, spec, derive_seed(seed, ATTACK, t))
            out[a, t] = detect(ya, config, maps).neg_log10_p
    return out
