"""Green counting, z-statistics and p-values."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

from . import kernels
from .core import ClusterMap, TokenStream, WatermarkConfig, identity_maps, kernel_plan
from .errors import DataFormatError, ShapeError, UndefinedEstimateError

LN10 = math.log(10.0)
TINY = np.nextafter(0.0, 1.0)


def green_flags(y: TokenStream, config: WatermarkConfig, maps: Optional[Sequence[ClusterMap]] = None):
    """Per-step ``(green, excluded)`` flags, each ``(N, C)``; unmarked channels are all False."""
    if maps is None:
        maps = identity_maps(y.vocab_sizes)
    if tuple(m.vocab_size for m in maps) != y.vocab_sizes:
        raise ShapeError(
            f"cluster maps cover vocabularies {[m.vocab_size for m in maps]}, stream has {list(y.vocab_sizes)}"
        )
    plan = kernel_plan(config, maps)
    return kernels.count_green_kernel(
        y.tokens, plan.cluster_of, plan.n_clusters, plan.n_green, plan.marked, plan.base_states,
        plan.table, plan.context_channel, plan.h, plan.defer,
    )


def count_green(y: TokenStream, config: WatermarkConfig, maps: Optional[Sequence[ClusterMap]] = None):
    """``(G_sum, counted_steps)`` per watermarked channel, in ``config.watermarked_channels`` order."""
    green, excluded = green_flags(y, config, maps)
    chans = list(config.watermarked_channels)
    live = ~excluded[:, chans]
    return (green[:, chans] & live).sum(axis=0), live.sum(axis=0)


def z_channel(g_sum, n, gamma: float) -> float:
    if n < 1:
        raise UndefinedEstimateError("z-score needs at least one counted step")
    return (g_sum - gamma * n) / math.sqrt(gamma * (1 - gamma) * n)


def z_total(per_channel) -> float:
    """Pooled z over ``(G_sum, N, gamma)`` triples that share gamma."""
    per_channel = list(per_channel)
    gammas = {float(gm) for _, _, gm in per_channel}
    if len(gammas) != 1:
        raise ValueError("all channels must share the same gamma")
    gamma = gammas.pop()
    n_total = sum(int(n) for _, n, _ in per_channel)
    if n_total == 0:
        raise UndefinedEstimateError("z_total needs at least one counted step")
    excess = sum(float(g) - gamma * int(n) for g, n, _ in per_channel)
    return excess / math.sqrt(gamma * (1 - gamma) * n_total)


def p_value(z: float) -> float:
    """Upper-tail standard normal probability, floored at the smallest subnormal."""
    if not math.isfinite(z):
        raise ValueError("z must be finite")
    return max(0.5 * math.erfc(z / math.sqrt(2.0)), TINY)


def neg_log10_p(z: float) -> float:
    """-log10 of the upper normal tail, computed in log space (exact far past underflow)."""
    return -float(special.log_ndtr(-z)) / LN10


def p_value_exact(g_sum: int, n: int, gamma: float) -> float:
    """Exact binomial P[X >= G_sum] for a single-channel small-N cross-check."""
    return float(stats.binom.sf(g_sum - 1, n, gamma))


@dataclass(frozen=True, eq=False)
class DetectionReport:
    channels: tuple
    green: np.ndarray
    counted: np.ndarray
    z: np.ndarray
    z_total: float
    p_value: float
    neg_log10_p: float
    gamma: float
    context_h: int
    defer_on_repeated_key: bool
    stream_id: str = ""
    n_channels: int = field(default=0)

    def __eq__(self, other):
        if not isinstance(other, DetectionReport):
            return NotImplemented
        return (
            self.channels == other.channels and np.array_equal(self.green, other.green)
            and np.array_equal(self.counted, other.counted)
            and np.array_equal(self.z, other.z, equal_nan=True)
            and self.z_total == other.z_total and self.p_value == other.p_value
            and self.neg_log10_p == other.neg_log10_p and self.gamma == other.gamma
            and self.context_h == other.context_h
            and self.defer_on_repeated_key == other.defer_on_repeated_key
            and self.n_channels == other.n_channels
        )

    __hash__ = None

    def summary(self) -> str:
        lines = [f"stream {self.stream_id or '-'}: z_total={self.z_total:.4f}  p={self.p_value:.4g}"
                 f"  -log10 p={self.neg_log10_p:.3f}"]
        for c, g, n, z in zip(self.channels, self.green, self.counted, self.z):
            frac = g / n if n else float("nan")
            lines.append(f"  channel {c}: green {g}/{n} ({frac:.3f})  z={z:.4f}")
        lines.append(f"  gamma={self.gamma} h={self.context_h} defer={self.defer_on_repeated_key}")
        return "\n".join(lines)


def detect(y: TokenStream, config: WatermarkConfig, maps: Optional[Sequence[ClusterMap]] = None,
           stream_id: str = "") -> DetectionReport:
    green, counted = count_green(y, config, maps)
    zs = np.array([
        z_channel(int(g), int(n), config.gamma) if n else float("nan") for g, n in zip(green, counted)
    ])
    zt = z_total([(int(g), int(n), config.gamma) for g, n in zip(green, counted)])
    return DetectionReport(
        channels=config.watermarked_channels, green=green, counted=counted, z=zs, z_total=zt,
        p_value=p_value(zt), neg_log10_p=neg_log10_p(zt), gamma=config.gamma,
        context_h=config.context_h, defer_on_repeated_key=config.defer_on_repeated_key,
        stream_id=stream_id, n_channels=y.channels,
    )


def tpr_at_fpr(h1_p_values, fpr: float) -> float:
    """Share of H1 p-values at or below the target false-positive rate."""
    if not 0.0 < fpr <= 1.0:
        raise ValueError(f"fpr must lie in (0, 1], got {fpr}")
    p = np.asarray(h1_p_values, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no H1 p-values")
    return float((p <= fpr).mean())


def report_header(n_channels: int) -> list:
    return (["stream_id", "z_total", "p", "neglog10p"]
            + [f"G{c}" for c in range(n_channels)] + [f"N{c}" for c in range(n_channels)])


def report_row(rep: DetectionReport) -> list:
    g = [0] * rep.n_channels
    n = [0] * rep.n_channels
    for c, gc, nc in zip(rep.channels, rep.green, rep.counted):
        g[c], n[c] = int(gc), int(nc)
    return [rep.stream_id, repr(rep.z_total), repr(rep.p_value), repr(rep.neg_log10_p)] + g + n


def write_reports_csv(path_or_file, reports: Sequence[DetectionReport]) -> None:
    n_ch = max((r.n_channels for r in reports), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report_header(n_ch))
    for r in reports:
        w.writerow(report_row(r))
    text = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", newline="") as fh:
            fh.write(text)


def read_reports_csv(path):
    """Parse a report CSV into ``(stream_ids, z_total, p, neglog10p)`` arrays."""
    try:
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read: {exc.strerror}", path) from None
    if not lines or lines[0][:4] != ["stream_id", "z_total", "p", "neglog10p"]:
        raise DataFormatError("expected header stream_id,z_total,p,neglog10p,...", path, 1)
    width = len(lines[0])
    ids, z, p, nl = [], [], [], []
    for lineno, row in enumerate(lines[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataFormatError(f"expected {width} fields, found {len(row)}", path, lineno)
        try:
            vals = [float(v) for v in row[1:4]]
        except ValueError:
            raise DataFormatError("non-numeric z_total, p or neglog10p", path, lineno) from None
        if not 0.0 <= vals[1] <= 1.0:
            raise DataFormatError(f"p-value {vals[1]} outside [0, 1]", path, lineno)
        ids.append(row[0])
        z.append(vals[0])
        p.append(vals[1])
        nl.append(vals[2])
    return ids, np.array(z), np.array(p), np.array(nl)
