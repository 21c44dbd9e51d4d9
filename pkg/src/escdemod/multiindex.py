"""Multi-indices and the ordered derivative basis.

A multi-index ``alpha`` labels the mixed partial derivative ``D^alpha J`` and
the monomial ``x^alpha``.  A :class:`DerivativeBasis` is the ordered set of
all multi-indices with ``min_order <= |alpha| <= max_order``; its order fixes
the layout of every covariance matrix and demodulation vector downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np


class ParameterError(ValueError):
    """Invalid argument (dimension mismatch, bad bounds, ...)."""


@dataclass(frozen=True, order=False)
class MultiIndex:
    entries: tuple[int, ...]

    def __post_init__(self):
        entries = tuple(int(e) for e in self.entries)
        if len(entries) < 1:
            raise ParameterError("a multi-index needs at least one entry")
        if any(e < 0 for e in entries):
            raise ParameterError(f"negative entry in multi-index {entries}")
        object.__setattr__(self, "entries", entries)

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def order(self) -> int:
        return sum(self.entries)

    @property
    def factorial(self) -> int:
        return math.prod(math.factorial(e) for e in self.entries)

    def __add__(self, other: MultiIndex) -> MultiIndex:
        if other.n != self.n:
            raise ParameterError("multi-index dimension mismatch")
        return MultiIndex(tuple(a + b for a, b in zip(self.entries, other.entries)))

    def __iter__(self) -> Iterator[int]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __str__(self) -> str:
        return "(" + ",".join(str(e) for e in self.entries) + ")"


def count_derivatives(n: int, k: int) -> int:
    """Number of distinct k-th order partial derivatives in n variables."""
    if n < 1 or k < 0:
        raise ParameterError(f"need n >= 1 and k >= 0, got n={n}, k={k}")
    return math.comb(n + k - 1, k)


def _indices_of_order(n: int, k: int) -> list[tuple[int, ...]]:
    # compositions of k into n parts, in descending lexicographic order so that
    # (k,0,..,0) comes first; for k=2 this matches vech's column-major layout
    if n == 1:
        return [(k,)]
    out = []
    for first in range(k, -1, -1):
        for rest in _indices_of_order(n - 1, k - first):
            out.append((first,) + rest)
    return out


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DerivativeBasis:
    """Graded set of multi-indices, ordered by total order then lexicographically
    (descending) within an order."""

    n: int
    min_order: int
    max_order: int
    indices: tuple[MultiIndex, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[MultiIndex]:
        return iter(self.indices)

    def __getitem__(self, i) -> MultiIndex:
        return self.indices[i]

    @property
    def size(self) -> int:
        return len(self.indices)

    # cached: these sit on the hot path of every demodulator evaluation
    @cached_property
    def orders(self) -> np.ndarray:
        return _frozen(np.array([alpha.order for alpha in self.indices], dtype=int))

    @cached_property
    def factorials(self) -> np.ndarray:
        return _frozen(np.array([alpha.factorial for alpha in self.indices], dtype=float))

    @cached_property
    def exponents(self) -> np.ndarray:
        """(o, n) integer array of the multi-index entries."""
        return _frozen(np.array([alpha.entries for alpha in self.indices], dtype=int).reshape(len(self), self.n))

    def position(self, alpha: MultiIndex | Sequence[int]) -> int:
        key = alpha if isinstance(alpha, MultiIndex) else MultiIndex(tuple(alpha))
        try:
            return self.indices.index(key)
        except ValueError:
            raise KeyError(f"{key} not in basis") from None

    def block(self, order: int) -> list[int]:
        """Positions of all multi-indices of the given total order."""
        return [i for i, alpha in enumerate(self.indices) if alpha.order == order]

    def has_order(self, order: int) -> bool:
        return self.min_order <= order <= self.max_order

    def labels(self) -> list[str]:
        return [str(alpha) for alpha in self.indices]


def enumerate_basis(n: int, min_order: int, max_order: int) -> DerivativeBasis:
    if n < 1:
        raise ParameterError(f"dimension must be >= 1, got {n}")
    if min_order < 0 or min_order > max_order:
        raise ParameterError(f"invalid order range [{min_order}, {max_order}]")
    indices = tuple(
        MultiIndex(e)
        for k in range(min_order, max_order + 1)
        for e in _indices_of_order(n, k)
    )
    return DerivativeBasis(n=n, min_order=min_order, max_order=max_order, indices=indices)


def monomial_power(x, alpha: MultiIndex | Sequence[int]) -> float:
    """``prod(x_i ** alpha_i)`` with ``0 ** 0 == 1``."""
    entries = alpha.entries if isinstance(alpha, MultiIndex) else tuple(alpha)
    x = np.asarray(x, dtype=float)
    if x.shape != (len(entries),):
        raise ParameterError(f"x has shape {x.shape}, multi-index has {len(entries)} entries")
    return float(math.prod(xi**e for xi, e in zip(x.tolist(), entries)))


def monomials(x: np.ndarray, basis: DerivativeBasis) -> np.ndarray:
    """Vectorized monomials: rows of ``x`` (shape (..., n)) -> (..., o)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.n:
        raise ParameterError(f"last axis of x is {x.shape[-1]}, basis dimension is {basis.n}")
    # numpy already defines 0.0 ** 0 == 1.0
    return np.prod(x[..., None, :] ** basis.exponents, axis=-1)

