"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are errors, so a typo
in a sweep file fails loudly instead of silently running the default. Lists
are comma separated; per-channel lists of length one are broadcast.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from .channel import AttackSpec, PlantedChannel
from .community import ALGORITHMS
from .core import ClusterMap, WatermarkConfig
from .errors import ConfigurationError

DEFAULT_KEY = hashlib.sha256(b"rvqmark default watermark key").hexdigest()


def _ints(text):
    return tuple(int(t) for t in _split(text))


def _floats(text):
    return tuple(float(t) for t in _split(text))


def _split(text):
    parts = [t.strip() for t in str(text).split(",")]
    if not parts or any(p == "" for p in parts):
        raise ValueError(f"malformed list {text!r}")
    return parts


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_attack(text):
    t = str(text).strip()
    return "none" if t.lower() == "none" else str(AttackSpec.parse(t))


@dataclass(frozen=True)
class ExperimentConfig:
    # watermark
    key: str = DEFAULT_KEY
    gamma: float = 0.25
    delta: float = 2.0
    h: int = 1
    channels: Optional[tuple] = None          # watermarked channels; None = all
    context_channel: int = 0
    defer: bool = False
    # model and run size
    vocab_sizes: tuple = (2048,)
    n: int = 200
    trials: int = 100
    pairs: int = 50                           # capture streams for confusion estimation
    seed: int = 0
    entropy_scale: float = 1.0
    workers: int = 1
    # retokenization channel (planted blocks; cluster_size 1 = structure-free)
    r: float = 0.8
    q_in: float = 0.9
    cluster_size: int = 32
    # clustering
    rho: tuple = (1.0,)
    noise_threshold: tuple = (1,)
    algorithm: str = "leiden"
    # evaluation
    attack: str = "none"
    fpr: tuple = (1e-6, 1e-4, 1e-2, 1.0)
    gammas: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    hs: tuple = (0, 1, 2)

    # ------------------------------------------------------------------
    _PARSERS = {
        "key": str, "gamma": float, "delta": float, "h": int, "channels": _ints,
        "context_channel": int, "defer": _bool, "vocab_sizes": _ints, "n": int, "trials": int,
        "pairs": int, "seed": int, "entropy_scale": float, "workers": int, "r": float,
        "q_in": float, "cluster_size": int, "rho": _floats, "noise_threshold": _ints,
        "algorithm": str, "attack": _opt_attack, "fpr": _floats, "gammas": _floats, "hs": _ints,
    }

    @classmethod
    def keys(cls):
        return tuple(cls._PARSERS)

    @classmethod
    def from_items(cls, items, base: Optional["ExperimentConfig"] = None, origin="config"):
        """Build from ``(key, text value, line)`` triples over ``base`` (defaults if None)."""
        values = {}
        for key, text, line in items:
            where = f"{origin}:{line}" if line else origin
            if key not in cls._PARSERS:
                raise ConfigurationError(f"{where}: unknown key {key!r}")
            try:
                values[key] = cls._PARSERS[key](text)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"{where}: bad value for {key!r}: {exc}") from None
        cfg = dataclasses.replace(base or cls(), **values)
        cfg.validate()
        return cfg

    @classmethod
    def parse(cls, text: str, origin="config", base=None):
        items = []
        for i, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{origin}:{i}: expected 'key = value', got {raw.strip()!r}")
            k, v = line.split("=", 1)
            items.append((k.strip(), v.strip(), i))
        return cls.from_items(items, base, origin)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.parse(text, str(path))

    def with_overrides(self, **values):
        """Apply already-typed overrides (CLI flags), skipping ``None``."""
        cfg = dataclasses.replace(self, **{k: v for k, v in values.items() if v is not None})
        cfg.validate()
        return cfg

    # ------------------------------------------------------------------
    def validate(self):
        C = len(self.vocab_sizes)
        if C < 1 or any(v < 2 for v in self.vocab_sizes):
            raise ConfigurationError("vocab_sizes needs at least one channel, each of size >= 2")
        for c in self.watermarked_channels:
            if not 0 <= c < C:
                raise ConfigurationError(f"watermarked channel {c} does not exist (C = {C})")
        if len(set(self.watermarked_channels)) != len(self.watermarked_channels):
            raise ConfigurationError("watermarked channels must be distinct")
        if not 0 <= self.context_channel < C:
            raise ConfigurationError(f"context channel {self.context_channel} does not exist (C = {C})")
        if self.n < 1 or self.trials < 0 or self.pairs < 0 or self.workers < 1:
            raise ConfigurationError("need n >= 1, trials >= 0, pairs >= 0, workers >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if not (0.0 < self.r <= 1.0 and 0.0 <= self.q_in <= 1.0):
            raise ConfigurationError("r must lie in (0, 1] and q_in in [0, 1]")
        if self.cluster_size < 1 or any(v % self.cluster_size for v in self.vocab_sizes):
            raise ConfigurationError("cluster_size must divide every vocabulary size")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {sorted(ALGORITHMS)}")
        for name in ("rho", "noise_threshold"):
            vals = getattr(self, name)
            if len(vals) not in (1, C):
                raise ConfigurationError(f"{name} needs 1 or {C} values, got {len(vals)}")
        if any(x <= 0 for x in self.rho) or any(m < 1 for m in self.noise_threshold):
            raise ConfigurationError("rho must be positive and noise_threshold >= 1")
        if any(not 0 < f <= 1 for f in self.fpr):
            raise ConfigurationError("fpr values must lie in (0, 1]")
        if any(h < 0 for h in self.hs) or any(not 0 < g < 1 for g in self.gammas):
            raise ConfigurationError("theory grid needs hs >= 0 and gammas in (0, 1)")
        if self.entropy_scale <= 0:
            raise ConfigurationError("entropy_scale must be positive")
        self.watermark()  # key, gamma, delta, h checks

    @property
    def watermarked_channels(self) -> tuple:
        return tuple(range(len(self.vocab_sizes))) if self.channels is None else tuple(self.channels)

    def per_channel(self, name):
        vals = getattr(self, name)
        return vals * len(self.vocab_sizes) if len(vals) == 1 else vals

    def watermark(self, delta: Optional[float] = None) -> WatermarkConfig:
        try:
            return WatermarkConfig.from_hex(
                self.key, gamma=self.gamma, delta=self.delta if delta is None else delta,
                context_h=self.h, watermarked_channels=self.watermarked_channels,
                context_channel=self.context_channel, defer_on_repeated_key=self.defer,
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    def channel_models(self):
        """One planted retokenization channel per codebook channel."""
        return [
            PlantedChannel.blocks(v, self.cluster_size, self.r, self.q_in, channel=c)
            for c, v in enumerate(self.vocab_sizes)
        ]

    def attack_spec(self) -> Optional[AttackSpec]:
        return None if self.attack == "none" else AttackSpec.parse(self.attack)

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def detection_fingerprint(cfg: WatermarkConfig, maps: list[ClusterMap]) -> dict:
    """Everything detection must agree on with embedding, in a comparable form."""
    h = hashlib.sha256()
    for m in maps:
        h.update(m.cluster_of.astype("<i8").tobytes())
        h.update(b"|")
    return {
        "key_sha256": hashlib.sha256(cfg.key).hexdigest(),
        "gamma": cfg.gamma,
        "context_h": cfg.context_h,
        "watermarked_channels": list(cfg.watermarked_channels),
        "context_channel": cfg.context_channel,
        "defer_on_repeated_key": cfg.defer_on_repeated_key,
        "vocab_sizes": [m.vocab_size for m in maps],
        "maps_sha256": h.hexdigest(),
    }
