"""Closed-form detection predictors under independent per-token corruption.

Symbols: ``N`` counted steps, ``gamma`` green ratio, ``g`` realized green
fraction of the watermarked generator, ``r`` token survival, ``r_cl`` cluster
survival, ``h`` context length, ``C`` channels.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

DEFAULT_KMIN = 10_000


def _check(gamma, survival):
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if not 0.0 <= survival <= 1.0:
        raise ValueError(f"survival probability must lie in [0, 1], got {survival}")


def p1(gamma: float, r: float, g: float, h: int) -> float:
    """Probability that a received token counts as green: gamma + r**(h+1) * (g - gamma)."""
    _check(gamma, r)
    return gamma + r ** (h + 1) * (g - gamma)


def expected_z(n: int, gamma: float, g: float, r: float, h: int) -> float:
    """Mean single-channel z under H1: sqrt(N) (g - gamma) / sqrt(gamma (1 - gamma)) * r**(h+1)."""
    if n < 1:
        raise ValueError("N must be >= 1")
    _check(gamma, r)
    return math.sqrt(n) * (g - gamma) / math.sqrt(gamma * (1 - gamma)) * r ** (h + 1)


def expected_z_cluster(n: int, gamma: float, g: float, r_cl: float, h: int) -> float:
    """expected_z with the cluster survival rate in place of the token survival rate."""
    return expected_z(n, gamma, g, r_cl, h)


def expected_z_total(n: int, gamma: float, g: Sequence[float], r_cl: Sequence[float], h: int) -> float:
    """Pooled multi-channel z: sum_c N (g_c - gamma) r_cl_c**(h+1) / sqrt(C N gamma (1 - gamma))."""
    g, r_cl = list(g), list(r_cl)
    if len(g) != len(r_cl) or not g:
        raise ValueError("need one g and one r_cl per channel")
    if n < 1:
        raise ValueError("N must be >= 1")
    for r in r_cl:
        _check(gamma, r)
    signal = sum(n * (gc - gamma) * rc ** (h + 1) for gc, rc in zip(g, r_cl))
    return signal / math.sqrt(len(g) * n * gamma * (1 - gamma))


class KeySpace(NamedTuple):
    ok: bool
    size: int
    unigram: bool


def key_space_ok(n_clusters: int, h: int, kmin: int = DEFAULT_KMIN) -> KeySpace:
    """Is the context key space ``K**h`` at least ``kmin``? ``h = 0`` is the single-key unigram regime."""
    if kmin < 1:
        raise ValueError("kmin must be >= 1")
    if h < 0 or n_clusters < 1:
        raise ValueError("need h >= 0 and at least one cluster")
    size = n_clusters ** h
    return KeySpace(size >= kmin, size, h == 0)
