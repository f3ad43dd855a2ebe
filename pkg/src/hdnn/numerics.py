"""Deterministic, numerically stable elementary operations.

Conventions used throughout the toolkit:

* parameters are stored in float32 by default (float64 available for
  gradient checking); all reductions and matrix products accumulate in
  float64,
* every random draw flows from a single :class:`Rng` seed through named
  substreams, so adding a consumer never perturbs another consumer's
  stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

STORAGE_DTYPE = np.float32


class Rng:
    """Seeded random source handing out independent named substreams.

    Backed by the counter-based Philox generator. A given (seed, name)
    pair always produces the same stream, on any platform, regardless of
    how many other streams were created before it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, name: str) -> np.random.Generator:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        words = np.frombuffer(digest[:16], dtype=np.uint32)
        entropy = [self.seed] + [int(w) for w in words]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with 64-bit accumulation regardless of operand dtype."""
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)


def sigmoid(x):
    """Logistic function, stable over the whole finite range (no overflow)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax_with_temperature(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of logits / temperature, max-shifted for stability.

    Accepts a single logit vector or a batch of rows. Raising the
    temperature above 1 flattens the distribution; it must be positive.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    z = np.atleast_2d(z)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=1, keepdims=True)
    if np.asarray(logits).ndim == 1:
        return out[0]
    return out


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) via max-shift; exact for a single element."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = v.max()
    if not np.isfinite(m):
        # all -inf (empty mass) or an explicit +inf/NaN input dominates
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


def uniform_init(rows: int, cols: int, lo: float, hi: float,
                 rng: np.random.Generator, dtype=STORAGE_DTYPE) -> np.ndarray:
    """Matrix with i.i.d. uniform entries in [lo, hi), reproducible per stream.

    ``rng`` is a per-consumer stream obtained from :meth:`Rng.stream`.
    """
    if not lo < hi:
        raise ValueError(f"uniform_init requires lo < hi, got [{lo}, {hi})")
    out = rng.uniform(lo, hi, size=(rows, cols))
    if np.dtype(dtype) != np.float64:
        # casting may round an entry up onto hi; keep the half-open range
        out = np.minimum(out.astype(dtype), np.nextafter(dtype(hi), dtype(lo)))
    return out
