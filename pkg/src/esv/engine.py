"""Element Shapley values: exact bottom-up computation and the chained-sampling approximation.

Both paths use the per-scale form of the Shapley value: the attribution of
element ``i`` is the average over scales ``s = 1..n`` of

    mean score of size-s subsequences containing i
  - mean score of size-(s-1) subsequences without i

with the size-0 mean being the empty prior. The exact path averages over every
subsequence; the approximate path grows a sampled pool scale by scale and
keeps running sums across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from esv.errors import ValidationError
from esv.models import (
    CallCounter,
    MultiScaleModel,
    Scorer,
    score_all_subsequences,
    subsets_by_size,
)
from esv.sequence import DEFAULT_EXHAUSTIVE_LIMIT, FeatureSequence

SUPPORTING = "supporting"
DISTRACTING = "distracting"


@dataclass
class AttributionResult:
    """Per-element attributions for a set of classes.

    ``phi[i, k]`` is the attribution of element ``i`` to class ``classes[k]``;
    ``evidential[k]`` is ``f(X) - f(empty)`` for that class.
    """

    phi: np.ndarray
    classes: tuple[int, ...]
    evidential: np.ndarray
    mode: str
    model_calls: int
    m: int | None = None
    iterations: int | None = None
    seed: int | None = None
    strict_alg1: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def column(self, c: int) -> np.ndarray:
        try:
            k = self.classes.index(c)
        except ValueError:
            raise ValidationError(f"class {c} not in result (has {list(self.classes)})") from None
        return self.phi[:, k]

    def provenance(self) -> tuple:
        return (self.n, self.mode, self.m, self.iterations, self.seed, self.strict_alg1)


def compensated_sum(values: np.ndarray) -> np.ndarray:
    """Sum over axis 0 by pairwise reduction with two-sum error compensation."""
    s = np.asarray(values, dtype=np.float64)
    if s.shape[0] == 0:
        return np.zeros(s.shape[1:])
    err = np.zeros(s.shape[1:])
    while s.shape[0] > 1:
        if s.shape[0] % 2:
            s = np.concatenate([s, np.zeros((1,) + s.shape[1:])])
        a, b = s[0::2], s[1::2]
        t = a + b
        bp = t - a
        err += ((a - (t - bp)) + (b - bp)).sum(axis=0)
        s = t
    return s[0] + err


def _member_sums(member: np.ndarray, scores: np.ndarray):
    """Per element: (sum, count) of scores over rows containing it and over rows lacking it."""
    n = member.shape[1]
    inside = np.zeros((n, scores.shape[1]))
    outside = np.zeros((n, scores.shape[1]))
    for i in range(n):
        col = member[:, i]
        inside[i] = compensated_sum(scores[col])
        outside[i] = compensated_sum(scores[~col])
    counts = member.sum(axis=0)
    return inside, counts, outside, member.shape[0] - counts


def _resolve_classes(model, classes) -> tuple[int, ...]:
    C = model.n_classes
    if classes is None:
        return tuple(range(C))
    out = tuple(int(c) for c in classes)
    if not out:
        raise ValidationError("classes: need at least one class")
    for c in out:
        if not 0 <= c < C:
            raise ValidationError(f"classes: class index {c} outside 0..{C - 1}")
    return out


def _membership(masks: np.ndarray, n: int) -> np.ndarray:
    shifts = np.arange(n) if masks.dtype != object else np.array(range(n), dtype=object)
    return ((masks[:, None] >> shifts) & 1).astype(bool)


def exact_esv(
    model,
    X: FeatureSequence,
    classes: Sequence[int] | None = None,
    limit: int = DEFAULT_EXHAUSTIVE_LIMIT,
) -> AttributionResult:
    """Exact attributions from one pass over all ``2^n`` subsequence scores.

    Multi-scale models get every subsequence score from the bottom-up
    recurrence; variable-length scorers are evaluated on each subsequence.
    """
    classes = _resolve_classes(model, classes)
    n = X.n
    before = model.calls.value
    table = score_all_subsequences(model, X, limit)[:, list(classes)]
    calls = model.calls.value - before
    levels = subsets_by_size(n)
    inside = np.zeros((n + 1, n, len(classes)))
    outside = np.zeros((n + 1, n, len(classes)))
    outside[0] = table[0]
    for s in range(1, n + 1):
        masks, _ = levels[s]
        member = _membership(masks, n)
        ins, n_in, outs, n_out = _member_sums(member, table[masks])
        inside[s] = ins / n_in[:, None]
        if s < n:
            outside[s] = outs / n_out[:, None]
    phi = compensated_sum(inside[1:] - outside[:-1]) / n
    return AttributionResult(
        phi=phi,
        classes=classes,
        evidential=table[-1] - table[0],
        mode="exact",
        model_calls=calls,
    )


# ---------------------------------------------------------------------------
# sampling


def _mask_dtype(n: int):
    return np.int64 if n <= 62 else object


def _bits(pos: np.ndarray, dtype) -> np.ndarray:
    if dtype is object:
        return np.vectorize(lambda p: 1 << int(p), otypes=[object])(pos)
    return np.int64(1) << pos


def _positions(masks: np.ndarray, n: int, s: int) -> np.ndarray:
    return np.nonzero(_membership(masks, n))[1].reshape(len(masks), s)


@dataclass
class SamplePool:
    """Sampled subsequences (sorted bitmasks) at one scale plus the generator that drew them."""

    masks: np.ndarray
    scale: int
    n: int
    m: int
    rng: np.random.Generator

    def __len__(self):
        return len(self.masks)


def singletons(n: int, m: int, rng: np.random.Generator) -> SamplePool:
    dtype = _mask_dtype(n)
    masks = _bits(np.arange(n), dtype).astype(dtype)
    return SamplePool(masks, 1, n, m, rng)


def candidate_pool(masks: np.ndarray, n: int) -> np.ndarray:
    """Every subsequence obtained by adding one absent element to one of ``masks``, deduplicated and sorted."""
    dtype = masks.dtype
    grown = []
    for j in range(n):
        bit = (1 << j) if dtype == object else np.int64(1) << j
        lacking = masks[(masks & bit) == 0]
        grown.append(lacking | bit)
    return np.unique(np.concatenate(grown))


def grow_candidates(pool: SamplePool, X: FeatureSequence | None = None) -> SamplePool:
    """Next-scale pool: at most ``m`` candidates drawn uniformly without replacement."""
    if len(pool) == 0 or pool.scale >= pool.n:
        raise ValidationError(f"cannot grow a pool at scale {pool.scale} of n={pool.n}")
    cands = candidate_pool(pool.masks, pool.n)
    if len(cands) > pool.m:
        pick = pool.rng.choice(len(cands), size=pool.m, replace=False)
        cands = np.sort(cands[pick])
    return SamplePool(cands, pool.scale + 1, pool.n, pool.m, pool.rng)


def _parent_mean(masks, pos, prev_masks, prev_raw):
    """Mean raw score over sampled one-smaller parents of each subsequence, and parent counts."""
    total = np.zeros((len(masks), prev_raw.shape[1]))
    z = np.zeros(len(masks), dtype=np.int64)
    dtype = masks.dtype
    for j in range(pos.shape[1]):
        child = masks - _bits(pos[:, j], dtype)
        idx = np.searchsorted(prev_masks, child)
        idx = np.minimum(idx, len(prev_masks) - 1)
        found = prev_masks[idx] == child
        total[found] += prev_raw[idx[found]]
        z += found
    with np.errstate(invalid="ignore", divide="ignore"):
        return total / z[:, None], z


def approx_esv(
    model,
    X: FeatureSequence,
    classes: Sequence[int] | None = None,
    m: int = 256,
    iterations: int = 4,
    seed: int | None = None,
    strict_alg1: bool | None = None,
) -> AttributionResult:
    """Approximate attributions with at most ``m`` sampled subsequences per scale.

    Each iteration restarts from all single-element subsequences and grows the
    pool one scale at a time. Multi-scale models score a sampled subsequence
    from its fixed-length model plus the mean over its sampled parents;
    variable-length scorers are evaluated on it directly. Per-element running
    sums persist across iterations. With ``m >= max_k binom(n, k)`` and one
    iteration the pools are complete and the result is exact.
    """
    if seed is None:
        raise ValidationError("seed: an explicit RNG seed is required")
    if int(m) < 1:
        raise ValidationError(f"m: must be >= 1 (got {m})")
    if int(iterations) < 1:
        raise ValidationError(f"iterations: must be >= 1 (got {iterations})")
    m, iterations, seed = int(m), int(iterations), int(seed)
    classes = _resolve_classes(model, classes)
    multiscale = isinstance(model, MultiScaleModel)
    if strict_alg1 is None:
        strict_alg1 = bool(getattr(model, "strict_alg1", False))
    n, C = X.n, model.n_classes
    rng = np.random.default_rng(seed)
    before = model.calls.value

    S = np.zeros((n + 1, n, C))
    N = np.zeros((n + 1, n))
    Sb = np.zeros((n + 1, n, C))
    Nb = np.zeros((n + 1, n))
    Sb[0] = model.empty_prior
    Nb[0] = 1.0
    level_sum = np.zeros((n + 1, C))
    level_count = np.zeros(n + 1)
    level_sum[0], level_count[0] = model.empty_prior, 1.0
    full_scores = []

    for _ in range(iterations):
        pool = singletons(n, m, rng)
        prev_masks = prev_raw = None
        for s in range(1, n + 1):
            if s > 1:
                pool = grow_candidates(pool)
            masks = pool.masks
            pos = _positions(masks, n, s)
            if not multiscale:
                raw = model.score_batch(X.elements[pos])
                final = raw
            else:
                if s == 1:
                    raw = model.single_scale(X.elements[pos])
                else:
                    parent, z = _parent_mean(masks, pos, prev_masks, prev_raw)
                    keep = z > 0
                    if not keep.all():
                        masks, pos, parent = masks[keep], pos[keep], parent[keep]
                        pool = SamplePool(masks, s, n, m, rng)
                    if s <= model.n_max:
                        raw = (model.single_scale(X.elements[pos]) + (s - 1) * parent) / s
                    elif strict_alg1:
                        raw = (s - 1) / s * parent
                    else:
                        raw = parent
                final = model.finalize(raw)
            member = _membership(masks, n)
            ins, n_in, outs, n_out = _member_sums(member, final)
            S[s] += ins
            N[s] += n_in
            Sb[s] += outs
            Nb[s] += n_out
            level_sum[s] += compensated_sum(final)
            level_count[s] += len(masks)
            if s == n:
                full_scores.append(final[0])
            prev_masks, prev_raw = masks, raw

    def means(sums, counts):
        out = np.empty_like(sums)
        for s in range(n + 1):
            fallback = level_sum[s] / level_count[s] if level_count[s] else np.zeros(C)
            have = counts[s] > 0
            out[s][have] = sums[s][have] / counts[s][have, None]
            out[s][~have] = fallback
        return out

    with_i = means(S, N)
    without_i = means(Sb, Nb)
    phi = compensated_sum(with_i[1:] - without_i[:-1]) / n
    full = np.mean(full_scores, axis=0) if full_scores else np.array(model.empty_prior)
    idx = list(classes)
    return AttributionResult(
        phi=phi[:, idx],
        classes=classes,
        evidential=(full - model.empty_prior)[idx],
        mode="approx",
        model_calls=model.calls.value - before,
        m=m,
        iterations=iterations,
        seed=seed,
        strict_alg1=strict_alg1 if multiscale else False,
    )


def sampled_fraction(n: int, m: int) -> float:
    """Fraction of the ``2^n - 1`` non-empty subsequences visited in one sampling iteration."""
    from math import comb

    visited = sum(min(m, comb(n, s)) if s > 1 else n for s in range(1, n + 1))
    return visited / ((1 << n) - 1)


# ---------------------------------------------------------------------------
# derived quantities


def contrastive_esv(result_gt: AttributionResult, result_pt: AttributionResult, gt: int, pt: int) -> np.ndarray:
    """``phi^gt - phi^pt`` per element: how much more each element backs ``gt`` than ``pt``."""
    if result_gt.provenance() != result_pt.provenance():
        raise ValidationError(
            f"contrast needs results from the same run setup ({result_gt.provenance()} vs {result_pt.provenance()})"
        )
    return result_gt.column(gt) - result_pt.column(pt)


def classify_elements(result: AttributionResult, c: int) -> list[str]:
    """``supporting`` where the attribution is positive, ``distracting`` otherwise (zero included)."""
    return [SUPPORTING if v > 0 else DISTRACTING for v in result.column(c)]


class _Combined(Scorer):
    def __init__(self, model, weights):
        super().__init__(1, model.dim, [float(weights @ model.empty_prior)])
        self.model = model
        self.w = weights
        self.calls = model.calls

    def score_batch(self, batch):
        return self.model.score_batch(batch) @ self.w[:, None]


class _CombinedScale:
    def __init__(self, f, weights):
        self.f, self.w = f, weights

    def __call__(self, batch):
        return np.asarray(self.f(batch)) @ self.w[:, None]


def class_combination(model, weights) -> Scorer | MultiScaleModel:
    """Single-class model scoring ``sum_c weights[c] * f_c``; e.g. ``[.., 1, .., -1, ..]`` for a contrast."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (model.n_classes,):
        raise ValidationError(f"weights: expected {model.n_classes} entries")
    if isinstance(model, MultiScaleModel):
        if model.normalize:
            raise ValidationError("class combinations of a normalized multi-scale model are not multi-scale models")
        combined = MultiScaleModel(
            [_CombinedScale(f, w) for f in model.scales], 1, model.dim, [float(w @ model.empty_prior)],
            strict_alg1=model.strict_alg1,
        )
        combined.calls = model.calls
        return combined
    return _Combined(model, w)


__all__ = [
    "AttributionResult",
    "CallCounter",
    "SamplePool",
    "approx_esv",
    "candidate_pool",
    "class_combination",
    "classify_elements",
    "compensated_sum",
    "contrastive_esv",
    "exact_esv",
    "grow_candidates",
    "sampled_fraction",
    "singletons",
]
