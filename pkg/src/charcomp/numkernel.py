"""Minimal dense numeric kernel shared by the model code.

Everything here is 64-bit float math on plain numpy arrays: a deterministic
counter-based RNG, Glorot initialization, the elementwise nonlinearities, and
a central finite-difference estimator used to verify analytic gradients.
No BLAS tuning, no parallelism; the model is small enough that clarity wins.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Array = np.ndarray

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15  # SplitMix64 state increment (golden-ratio odd constant)
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_GAMMA_U = np.uint64(_GAMMA)
_MIX_A_U = np.uint64(_MIX_A)
_MIX_B_U = np.uint64(_MIX_B)
_TO_UNIT = 2.0 ** -53  # top 53 bits of a u64 -> float in [0, 1)


def _mix64(x: int) -> int:
    """SplitMix64 output mixer on one 64-bit word (Python-int arithmetic)."""
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return x ^ (x >> 31)


def _fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash, used only to derive fork seeds from labels."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class Rng:
    """Deterministic counter-based generator (SplitMix64 stream).

    Word ``k`` (0-based) of the stream for ``seed`` is::

        mix64((seed + (k + 1) * 0x9E3779B97F4A7C15) mod 2**64)

    where ``mix64`` is the SplitMix64 finalizer.  The stream is a pure
    function of the seed -- no platform entropy, no global state -- so it is
    identical across runs and platforms.  ``fork(label)`` starts the stream
    seeded with ``mix64(seed XOR fnv1a64(label))``; child streams are
    therefore reproducible from ``(seed, label)`` alone and independent of
    how much of the parent stream has been consumed.
    """

    __slots__ = ("seed", "_counter")

    def __init__(self, seed: int) -> None:
        self.seed = seed & _MASK64
        self._counter = 0

    def fork(self, label: str) -> "Rng":
        return Rng(_mix64(self.seed ^ _fnv1a64(label.encode("utf-8"))))

    def next_u64(self) -> int:
        self._counter += 1
        return _mix64((self.seed + self._counter * _GAMMA) & _MASK64)

    def _block_u64(self, n: int) -> Array:
        # Vectorized continuation of the same stream; wrapping uint64 ops.
        ks = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = ks * _GAMMA_U + np.uint64(self.seed)
        z = (z ^ (z >> np.uint64(30))) * _MIX_A_U
        z = (z ^ (z >> np.uint64(27))) * _MIX_B_U
        return z ^ (z >> np.uint64(31))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform floats in [low, high); scalar when ``size`` is None."""
        if size is None:
            u = (self.next_u64() >> 11) * _TO_UNIT
            return low + (high - low) * u
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = 1
        for s in shape:
            n *= int(s)
        u = (self._block_u64(n) >> np.uint64(11)).astype(np.float64) * _TO_UNIT
        return (low + (high - low) * u).reshape(shape)

    def randbelow(self, n: int) -> int:
        """Unbiased uniform integer in [0, n) via masked rejection."""
        if n <= 0:
            raise ValueError(f"randbelow needs n >= 1, got {n}")
        if n == 1:
            return 0  # no draw consumed
        mask = (1 << (n - 1).bit_length()) - 1
        while True:
            r = self.next_u64() & mask
            if r < n:
                return r

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx


def require_finite(a: Array, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite values in {what}")


def matvec(w: Array, x: Array) -> Array:
    """Dense matrix-vector product ``out[i] = sum_j w[i, j] * x[j]``."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ValueError(
            f"matvec: shape mismatch, matrix is {w.shape} but vector has shape {x.shape}"
        )
    return w @ x


def sigmoid(x: Array) -> Array:
    """Elementwise logistic function; saturates cleanly at 0/1 for huge |x|."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softmax(v: Array) -> Array:
    """Numerically stable softmax onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    if v.size < 1:
        raise ValueError("softmax: empty input")
    require_finite(v, "softmax input")
    e = np.exp(v - v.max())
    return e / e.sum()


def init_uniform(rng: Rng, rows: int, cols: int) -> Array:
    """Glorot-uniform matrix: entries i.i.d. in [-b, b], b = sqrt(6/(rows+cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"init_uniform: invalid shape ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def finite_diff(f: Callable[[Array], float], x: Array, h: float) -> Array:
    """Central finite-difference gradient estimate of a scalar function.

    out[i] = (f(x + h*e_i) - f(x - h*e_i)) / (2h).  Each evaluation of ``f``
    must be finite; a NaN/Inf result is reported as an error rather than
    silently polluting the estimate.
    """
    if h <= 0:
        raise ValueError(f"finite_diff: step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    probe = x.copy()
    for i in range(x.size):
        orig = probe[i]
        probe[i] = orig + h
        f_plus = float(f(probe))
        probe[i] = orig - h
        f_minus = float(f(probe))
        probe[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"finite_diff: non-finite evaluation at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
