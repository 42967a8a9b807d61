"""Hybrid angular/Euclidean routing metric with clamped random factors.

Link cost is ``(a * ang + (1 - a) * euc) * rand`` and a junction turn costs
``a * ang * rand``, where ``ang`` is in degrees and ``euc`` in metres, mixed
as-is. ``rand`` is drawn from Normal(1, sigma) and clamped to
``[clamp_lo, clamp_hi]``.

Random factors come from a counter-based generator: each factor is a pure
function of ``(seed, origin, iteration, element)``, so serial and parallel
runs draw identical numbers regardless of evaluation order.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError

__all__ = [
    "MetricParams",
    "RandStream",
    "origin_key",
    "clamp_factor",
    "rand_factor",
    "sample_rand",
    "sample_rand_array",
    "link_cost",
    "turn_cost",
    "radius_cost",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = 1.0 / 9007199254740992.0


@dataclass(frozen=True)
class MetricParams:
    a: float = 0.5
    sigma: float = 1.0
    clamp_lo: float = 0.1
    clamp_hi: float = 10.0
    oversample: int = 50
    seed: int = 1

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ConfigError(f"hybrid coefficient a must lie in [0, 1], got {self.a}")
        if not self.sigma >= 0.0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 < self.clamp_lo <= 1.0 <= self.clamp_hi:
            raise ConfigError(f"clamp bounds must satisfy 0 < lo <= 1 <= hi, got [{self.clamp_lo}, {self.clamp_hi}]")
        if int(self.oversample) != self.oversample or self.oversample < 1:
            raise ConfigError(f"oversample must be a positive integer, got {self.oversample}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed}")

    def replace(self, **changes) -> "MetricParams":
        d = self.__dict__ | changes
        return MetricParams(**d)

    def to_dict(self) -> dict:
        return {"a": self.a, "sigma": self.sigma, "clamp": [self.clamp_lo, self.clamp_hi],
                "oversample": self.oversample, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricParams":
        allowed = {"a", "sigma", "clamp", "oversample", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown metric keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("a", "sigma", "oversample", "seed") if k in d}
        if "clamp" in d:
            clamp = d["clamp"]
            if not isinstance(clamp, (list, tuple)) or len(clamp) != 2:
                raise ConfigError("metric 'clamp' must be a [lo, hi] pair")
            kw["clamp_lo"], kw["clamp_hi"] = float(clamp[0]), float(clamp[1])
        return cls(**kw)


@dataclass(frozen=True)
class RandStream:
    """Substream of random factors for one origin and oversample iteration."""

    global_seed: int
    origin_id: str
    iteration: int

    @property
    def key(self) -> int:
        return origin_key(self.origin_id)


def origin_key(link_id: str) -> int:
    """Stable 32-bit key for a link id; survives edits elsewhere in the network."""
    return zlib.crc32(str(link_id).encode("utf-8"))


@njit(cache=True, nogil=True)
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def _uniform(seed, key, iteration, counter):
    h = _mix64(np.uint64(seed) + _GOLDEN)
    h = _mix64(h ^ _mix64(np.uint64(key) + _GOLDEN))
    h = _mix64(h ^ _mix64(np.uint64(iteration) + _GOLDEN))
    h = _mix64(h ^ _mix64(np.uint64(counter) + _GOLDEN))
    # (0, 1]
    return (float(h >> _S11) + 1.0) * _TWO53


@njit(cache=True, nogil=True)
def _normal(seed, key, iteration, element):
    u1 = _uniform(seed, key, iteration, 2 * element)
    u2 = _uniform(seed, key, iteration, 2 * element + 1)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@njit(cache=True, nogil=True)
def clamp_factor(x, lo, hi):
    """Move ``x`` to the nearest endpoint of ``[lo, hi]`` if outside it."""
    return min(max(x, lo), hi)


@njit(cache=True, nogil=True)
def rand_factor(seed, key, iteration, element, sigma, lo, hi):
    """Clamped Normal(1, sigma) factor for one network element."""
    if sigma == 0.0:
        return 1.0
    return clamp_factor(1.0 + sigma * _normal(seed, key, iteration, element), lo, hi)


def sample_rand(stream: RandStream, params: MetricParams, draw: int = 0) -> float:
    """Draw the ``draw``-th factor of ``stream``.

    Identical ``(seed, origin, iteration, draw)`` always yields the same
    value; ``sigma == 0`` yields exactly 1.
    """
    return rand_factor(stream.global_seed, stream.key, stream.iteration, draw,
                       params.sigma, params.clamp_lo, params.clamp_hi)


def sample_rand_array(seed: int, key: int, iteration: int, n: int, params: MetricParams) -> np.ndarray:
    """Vector of the first ``n`` factors of a substream."""
    return _rand_array(seed, key, iteration, n, params.sigma, params.clamp_lo, params.clamp_hi)


@njit(cache=True, nogil=True)
def _rand_array(seed, key, iteration, n, sigma, lo, hi):
    out = np.empty(n)
    for i in range(n):
        out[i] = rand_factor(seed, key, iteration, i, sigma, lo, hi)
    return out


def link_cost(link, params: MetricParams, rand: float) -> float:
    """Routing cost of traversing the whole of ``link``."""
    a = params.a
    return (a * link.angular_curvature + (1.0 - a) * link.length) * rand


def turn_cost(angle: float, params: MetricParams, rand: float) -> float:
    """Routing cost of a junction turn of ``angle`` degrees."""
    return params.a * angle * rand


def radius_cost(link=None) -> float:
    """Network-Euclidean cost: link length; junctions (``link=None``) cost 0."""
    return 0.0 if link is None else link.length
