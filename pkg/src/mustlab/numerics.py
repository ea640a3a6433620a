"""Dense float64 matrices, a pinned random stream, and finite differences.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
The helpers here add the shape/finiteness checks the rest of the package
relies on.

Random numbers come from :class:`Rng`, which draws raw 64-bit words from
NumPy's PCG64 bit generator (whose stream is fixed across platforms and
NumPy releases) and applies its own transforms on top:

* uniform doubles: ``(word >> 11) * 2**-53``, giving values in ``[0, 1)``;
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)``, using
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` then ``... * sin(2 pi u2)``;
* integers in ``[0, n)``: ``floor(uniform * n)``.

Only the bit generator is borrowed, so the transform cannot drift with
library updates.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

Matrix = np.ndarray

_INV_2_53 = 1.0 / 9007199254740992.0


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation."""


def as_matrix(values, name: str = "matrix") -> Matrix:
    """Return ``values`` as a finite 2-D float64 array (copying only if needed)."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ValueError("matrix product overflowed")
    return out


class Rng:
    """Seeded random stream; see the module docstring for the exact transforms.

    ``Rng(seed, stream)`` with distinct ``stream`` values gives independent
    streams derived from one experiment seed.
    """

    def __init__(self, seed: int, stream: int | tuple[int, ...] = ()):
        if isinstance(stream, int):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._bits = np.random.PCG64(ss)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        if high < 1:
            raise ValueError(f"high must be positive, got {high}")
        idx = np.floor(self.uniform(n) * high).astype(np.int64)
        return np.minimum(idx, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def rng_normal(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if rows < 1 or cols < 1:
        raise ShapeError(f"rows and cols must be positive, got {rows}x{cols}")
    z = rng.normal(rows * cols).reshape(rows, cols)
    return mean + std * z


def finite_diff_gradient(
    loss_fn: Callable[[np.ndarray], float], params, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``params`` may have any shape; the returned gradient has the same shape.
    ``loss_fn`` receives a perturbed copy and must not keep a reference to it.
    It may return a ``numpy.longdouble``; the difference is then formed in
    that precision.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    theta = np.array(params, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        plus = loss_fn(theta.copy())
        flat[j] = orig - h
        minus = loss_fn(theta.copy())
        flat[j] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise ValueError(f"loss is not finite around component {j}")
        # the difference is taken before rounding so extended-precision losses keep their digits
        grad[j] = (plus - minus) / (2.0 * h)
    return grad.reshape(theta.shape)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
