"""Numerics foundation: float64 arrays, keyed counter-based RNG streams, small helpers.

Tensors are plain ``numpy.ndarray`` objects in float64. Quantization elsewhere
in the package is simulated on top of these arrays.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when two operands have incompatible shapes."""

    def __init__(self, op: str, a_shape: tuple, b_shape: tuple):
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        super().__init__(f"{op}: incompatible shapes {self.a_shape} and {self.b_shape}")


class Rng:
    """Counter-based random streams keyed by ``(seed, *keys)``.

    Each call to :meth:`stream` returns a fresh Philox generator whose key is
    derived from the seed and the given keys, so e.g. the noise drawn for
    sampling step 17 never depends on how many numbers other consumers took.
    The object itself also behaves as a sequential generator (``randn``,
    ``uniform``, ``integers``) over the ``()`` stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = self.stream()

    def stream(self, *keys: int | str) -> np.random.Generator:
        words = [self.seed & 0xFFFF_FFFF, self.seed >> 32]
        for k in keys:
            words.append(_key_word(k))
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, *keys: int | str) -> "Rng":
        """Independent Rng whose seed is derived from this one and ``keys``."""
        seed = int(self.stream("child", *keys).integers(0, 2**63))
        return Rng(seed)

    def randn(self, *shape: int) -> np.ndarray:
        return randn(self._gen, shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _key_word(k: int | str) -> int:
    if isinstance(k, str):
        # stable across processes, unlike hash()
        h = 2166136261
        for ch in k.encode():
            h = ((h ^ ch) * 16777619) & 0xFFFF_FFFF
        return h
    return int(k) & 0xFFFF_FFFF


def randn(gen: np.random.Generator | Rng, shape) -> np.ndarray:
    """I.i.d. standard normal draws of the given shape (advances ``gen``)."""
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("randn: shape must be nonempty")
    if isinstance(gen, Rng):
        gen = gen._gen
    return gen.standard_normal(shape, dtype=DTYPE)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(op, np.shape(a), np.shape(b))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    check_same_shape("add", a, b)
    return a + b


def mul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    check_same_shape("mul", a, b)
    return a * b


def scale(a, c: float) -> np.ndarray:
    return as_tensor(a) * float(c)


def mean(x, axis=None) -> np.ndarray:
    return np.mean(as_tensor(x), axis=axis)


def std(x, axis=None) -> np.ndarray:
    """Population standard deviation (ddof=0)."""
    return np.std(as_tensor(x), axis=axis)


def cosine(a, b) -> float:
    """dot(a, b) / (|a| |b|) over all entries."""
    a, b = as_tensor(a).ravel(), as_tensor(b).ravel()
    if a.shape != b.shape:
        raise ShapeError("cosine", a.shape, b.shape)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine: zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
