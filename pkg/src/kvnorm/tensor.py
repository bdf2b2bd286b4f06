"""Dense float32 kernels and the repo-wide seeded PRNG.

A ``Tensor2D`` is simply a 2-D C-contiguous ``numpy.ndarray`` of dtype
float32. Products are delegated to numpy; with a fixed thread count the
BLAS call order is fixed, which is what keeps golden values stable.

PRNG contract
-------------
Every seeded behaviour in the package draws from :class:`SplitMix64`.
Draw ``i`` (1-based) of a stream seeded with ``s`` is
``mix(s + i * 0x9E3779B97F4A7C15 mod 2**64)``. Uniform floats are
``(x >> 11) * 2**-53`` and normal deviates come from Box-Muller applied to
consecutive uniform pairs ``(u1, u2)``: ``r = sqrt(-2 ln(1 - u1))``,
yielding ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """One splitmix64 finalisation of a python int (used to derive sub-seeds)."""
    with np.errstate(over="ignore"):
        return int(_mix(np.array([x & _MASK64], dtype=np.uint64))[0])


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, e.g. ``(seed, layer, head, step)``."""
    s = seed & _MASK64
    for k in keys:
        s = mix64(s ^ mix64((k + 0x632BE59BD9B4E019) & _MASK64))
    return s


class SplitMix64:
    """Counter-based splitmix64 stream; block draws are vectorised."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * GOLDEN_GAMMA
            return _mix(state)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Uniform ints in ``[0, high)`` via ``floor(u * high)``."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def choice(self, pool: Sequence[int], k: int) -> list[int]:
        """``k`` items of ``pool`` without replacement (partial Fisher-Yates)."""
        items = list(pool)
        if k > len(items):
            raise ValueError(f"cannot draw {k} items from a pool of {len(items)}")
        u = self.uniform(k)
        for i in range(k):
            j = i + int(u[i] * (len(items) - i))
            items[i], items[j] = items[j], items[i]
        return items[:k]


def _require_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return m


def as_tensor(data, rows: Optional[int] = None, cols: Optional[int] = None) -> np.ndarray:
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _require_finite(a @ b, "matmul")


def softmax_rows(m: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Row softmax; ``mask`` marks the entries that may receive weight."""
    m = np.asarray(m)
    if mask is None:
        mask = np.ones(m.shape, dtype=bool)
    elif mask.shape != m.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match {m.shape}")
    if not np.all(mask.any(axis=-1)):
        raise DegenerateRowError("softmax row has no unmasked entries")
    z = np.where(mask, m, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return _require_finite(e / e.sum(axis=-1, keepdims=True), "softmax_rows")


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(v.ravel(), v.ravel())))


def seeded_init(rows: int, cols: int, scheme: str = "normal", seed: int = 0,
                sigma: float = 0.02) -> np.ndarray:
    if scheme == "zeros":
        return np.zeros((rows, cols), dtype=np.float32)
    if scheme == "ones":
        return np.ones((rows, cols), dtype=np.float32)
    if scheme != "normal":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    draws = SplitMix64(seed).normal(rows * cols) * sigma
    return draws.astype(np.float32).reshape(rows, cols)
