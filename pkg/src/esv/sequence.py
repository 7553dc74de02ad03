"""Sequences, order-preserving coalitions, Shapley weights and the brute-force oracle.

Coalitions are stored as integer bitmasks over element positions (bit ``i`` set
means element ``i`` is present). Python integers are unbounded, so the same
canonical form serves every sequence length and set equality is integer
equality.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from esv.errors import CapacityError, ValidationError

DEFAULT_EXHAUSTIVE_LIMIT = 16


@dataclass(frozen=True)
class FeatureSequence:
    """An ordered sequence of ``n`` elements, each a ``D``-dimensional feature vector."""

    elements: np.ndarray
    timestamps: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        arr = np.array(self.elements, dtype=np.float64, copy=True)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValidationError(f"elements: expected a 2-d array, got {arr.ndim} dims")
        if arr.shape[0] < 1:
            raise ValidationError("elements: a sequence needs at least one element")
        if arr.shape[1] < 1:
            raise ValidationError("elements: feature dimension must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("elements: all feature values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "elements", arr)
        if self.timestamps is not None:
            ts = np.array(self.timestamps, dtype=np.float64, copy=True).reshape(-1)
            if ts.shape[0] != arr.shape[0]:
                raise ValidationError("timestamps: length must equal element count")
            ts.setflags(write=False)
            object.__setattr__(self, "timestamps", ts)

    @property
    def n(self) -> int:
        return self.elements.shape[0]

    @property
    def dim(self) -> int:
        return self.elements.shape[1]

    def __len__(self) -> int:
        return self.n

    def select(self, sub: "SubsequenceIndex | int") -> np.ndarray:
        """Feature rows of a subsequence, in sequence order, shape ``(|sub|, D)``."""
        mask = sub.mask if isinstance(sub, SubsequenceIndex) else int(sub)
        return self.elements[list(mask_positions(mask))]

    def full(self) -> "SubsequenceIndex":
        return SubsequenceIndex.from_mask(full_mask(self.n), self.n)


@dataclass(frozen=True)
class SubsequenceIndex:
    """An order-preserving subset of positions of a length-``n`` sequence.

    Positions are 0-indexed. Two indices are equal iff they select the same set
    of positions from the same-length sequence.
    """

    mask: int
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise ValidationError("n must be non-negative")
        if self.mask < 0 or self.mask >> self.n:
            raise ValidationError(f"mask {self.mask:#x} has bits outside 0..{self.n - 1}")

    @classmethod
    def from_positions(cls, positions: Sequence[int], n: int) -> "SubsequenceIndex":
        mask = 0
        for p in positions:
            p = int(p)
            if not 0 <= p < n:
                raise ValidationError(f"position {p} outside 0..{n - 1}")
            if mask >> p & 1:
                raise ValidationError(f"duplicate position {p}")
            mask |= 1 << p
        return cls(mask, n)

    @classmethod
    def from_mask(cls, mask: int, n: int) -> "SubsequenceIndex":
        return cls(int(mask), n)

    @classmethod
    def empty(cls, n: int) -> "SubsequenceIndex":
        return cls(0, n)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(mask_positions(self.mask))

    @property
    def size(self) -> int:
        return popcount(self.mask)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, i: int) -> bool:
        return bool(self.mask >> i & 1)

    def with_element(self, i: int) -> "SubsequenceIndex":
        if i in self:
            raise ValidationError(f"element {i} already present")
        return SubsequenceIndex(self.mask | (1 << i), self.n)

    def without_element(self, i: int) -> "SubsequenceIndex":
        if i not in self:
            raise ValidationError(f"element {i} not present")
        return SubsequenceIndex(self.mask & ~(1 << i), self.n)

    def __repr__(self) -> str:
        return f"SubsequenceIndex({list(self.positions)}, n={self.n})"


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def full_mask(n: int) -> int:
    return (1 << n) - 1


def mask_positions(mask: int) -> Iterator[int]:
    i = 0
    while mask:
        if mask & 1:
            yield i
        mask >>= 1
        i += 1


def shapley_weight(n: int, s: int) -> float:
    """Probability weight ``(n - s - 1)! s! / n!`` of a size-``s`` coalition.

    Evaluated as ``1 / (n * binom(n - 1, s))`` with the binomial built as a
    running product of ratios, so nothing overflows for large ``n``.
    """
    if n < 1 or s < 0 or s > n - 1:
        raise ValidationError(f"shapley_weight needs n >= 1 and 0 <= s <= n - 1 (got n={n}, s={s})")
    k = min(s, n - 1 - s)
    inv_binom = 1.0
    for j in range(1, k + 1):
        inv_binom *= j / (n - k - 1 + j)
    return inv_binom / n


def enumerate_subsequences(n: int, s: int, excluding: int | None = None) -> Iterator[SubsequenceIndex]:
    """Yield every size-``s`` subsequence of a length-``n`` sequence exactly once.

    Order is lexicographic over sorted position tuples. If ``excluding`` is
    given, that position never appears.
    """
    if n < 0:
        raise ValidationError("n must be non-negative")
    pool = list(range(n))
    if excluding is not None:
        if not 0 <= excluding < n:
            raise ValidationError(f"excluding={excluding} outside 0..{n - 1}")
        pool.remove(excluding)
    if not 0 <= s <= len(pool):
        raise ValidationError(f"subset size {s} outside 0..{len(pool)}")
    for combo in itertools.combinations(pool, s):
        mask = 0
        for p in combo:
            mask |= 1 << p
        yield SubsequenceIndex(mask, n)


def marginal_contribution(
    score: Callable[[SubsequenceIndex], np.ndarray],
    i: int,
    sub: SubsequenceIndex,
    c: int,
) -> float:
    """``f_c(sub + x_i) - f_c(sub)`` for a coalition not containing ``i``.

    ``score`` maps a :class:`SubsequenceIndex` to the class-score vector, e.g.
    ``functools.partial(evaluate, model, X)``.
    """
    if i in sub:
        raise ValidationError(f"element {i} is already in the coalition")
    return float(score(sub.with_element(i))[c] - score(sub)[c])


def brute_force_esv(model, X: FeatureSequence, c: int, limit: int = DEFAULT_EXHAUSTIVE_LIMIT) -> np.ndarray:
    """Element Shapley values for class ``c`` straight from the weighted-marginal definition.

    Every coalition is scored once through :func:`esv.models.evaluate` (for
    multi-scale models that is the direct, non-recurrent expectation), then each
    element sums ``w(|S|) * (f(S + i) - f(S))`` over all ``S`` without ``i``.
    This path shares nothing with :mod:`esv.engine` beyond the scorer and serves
    as the test oracle.
    """
    from esv.models import evaluate, MultiScaleModel

    n = X.n
    if n > limit:
        raise CapacityError(f"brute force limited to n <= {limit} (got n={n})")
    cache = {} if isinstance(model, MultiScaleModel) else None
    scores = {}
    for mask in range(1 << n):
        scores[mask] = evaluate(model, X, SubsequenceIndex(mask, n), cache=cache)[c]
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        terms = []
        for mask in range(1 << n):
            if mask & bit:
                continue
            terms.append(shapley_weight(n, popcount(mask)) * (scores[mask | bit] - scores[mask]))
        phi[i] = math.fsum(terms)
    return phi
