"""Randomization ranges, sampling and [-1, 1] normalization of dynamics parameters."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RandomizationRanges:
    names: tuple
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        if low.shape != high.shape or low.shape != (len(self.names),):
            raise ValueError("names, low and high must have matching lengths")
        if np.any(low > high):
            bad = [n for n, lo, hi in zip(self.names, low, high) if lo > hi]
            raise ValueError(f"low > high for {bad}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @classmethod
    def from_pairs(cls, pairs):
        names = [n for n, _ in pairs]
        low = [lo for _, (lo, _) in pairs]
        high = [hi for _, (_, hi) in pairs]
        return cls(tuple(names), np.array(low), np.array(high))

    @property
    def dim(self):
        return len(self.names)

    @property
    def midpoint(self):
        return 0.5 * (self.low + self.high)

    def pairs(self):
        return [(n, (float(lo), float(hi))) for n, lo, hi in zip(self.names, self.low, self.high)]

    def to_dict(self):
        return {n: [float(lo), float(hi)] for n, lo, hi in zip(self.names, self.low, self.high)}

    @classmethod
    def from_dict(cls, d):
        return cls.from_pairs([(k, tuple(v)) for k, v in d.items()])

    def replace(self, **bounds):
        """Copy with some parameters' (low, high) replaced."""
        low, high = self.low.copy(), self.high.copy()
        for name, (lo, hi) in bounds.items():
            i = self.names.index(name)
            low[i], high[i] = lo, hi
        return RandomizationRanges(self.names, low, high)

    def contains(self, theta, atol=1e-12):
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.low - atol) and np.all(theta <= self.high + atol))

    def normalize(self, theta):
        """Map physical values to [-1, 1]; degenerate dimensions map to 0."""
        theta = np.asarray(theta, dtype=float)
        span = self.high - self.low
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, 2.0 * (theta - self.low) / safe - 1.0, 0.0)

    def denormalize(self, z):
        z = np.asarray(z, dtype=float)
        return self.low + 0.5 * (z + 1.0) * (self.high - self.low)


PENDULUM_RANGES = RandomizationRanges.from_pairs([
    ("damping", (0.02, 0.3)),
    ("gravity", (8.5, 11.0)),
    ("length1", (0.3, 0.9)),
    ("length2", (0.3, 0.9)),
    ("density", (0.5, 1.5)),
])

# gravity, then per-joint damping and stiffness, joints ordered back to front
CHAIN_RANGES = RandomizationRanges.from_pairs([
    ("gravity", (5.5, 14.0)),
    ("damping_0", (3.0, 9.0)),
    ("damping_1", (1.5, 7.5)),
    ("damping_2", (1.0, 5.0)),
    ("damping_3", (1.5, 7.5)),
    ("damping_4", (1.0, 5.0)),
    ("damping_5", (0.2, 2.8)),
    ("stiffness_0", (100.0, 380.0)),
    ("stiffness_1", (20.0, 340.0)),
    ("stiffness_2", (10.0, 230.0)),
    ("stiffness_3", (20.0, 340.0)),
    ("stiffness_4", (20.0, 220.0)),
    ("stiffness_5", (10.0, 110.0)),
])

DEFAULT_RANGES = {"pendulum": PENDULUM_RANGES, "chain": CHAIN_RANGES}


def sample_dynamics(ranges, rng, n=None):
    """Independent uniform draw of every parameter within its range.

    Returns one vector, or an ``(n, dim)`` array when ``n`` is given.
    """
    rng = np.random.default_rng(rng)
    size = (ranges.dim,) if n is None else (n, ranges.dim)
    return ranges.low + (ranges.high - ranges.low) * rng.random(size)
