"""Approximation-quality metrics and rank-ordered element ablation."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from esv.engine import AttributionResult, approx_esv, exact_esv, sampled_fraction
from esv.errors import UndefinedMetricError, ValidationError
from esv.models import MultiScaleModel, evaluate
from esv.sequence import DEFAULT_EXHAUSTIVE_LIMIT, FeatureSequence, SubsequenceIndex, full_mask

ORDERS = ("esv-descending", "esv-ascending", "center-out", "edges-in", "uniform", "random")


def _pair(phi_hat, phi) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(phi_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(phi, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValidationError("empty attribution vectors")
    return a, b


def relative_error(phi_hat, phi) -> float:
    """Mean absolute error normalised by the mean unsigned exact attribution."""
    a, b = _pair(phi_hat, phi)
    scale = np.mean(np.abs(b))
    if scale == 0:
        raise UndefinedMetricError("relative error undefined: exact attributions are all zero")
    return float(np.mean(np.abs(a - b)) / scale)


def pearson_r(phi_hat, phi) -> float:
    a, b = _pair(phi_hat, phi)
    if a.size < 2:
        raise UndefinedMetricError("correlation needs at least two elements")
    da, db = a - a.mean(), b - b.mean()
    va, vb = np.dot(da, da), np.dot(db, db)
    if va == 0 or vb == 0:
        raise UndefinedMetricError("correlation undefined for a zero-variance vector")
    return float(np.clip(np.dot(da, db) / math.sqrt(va * vb), -1.0, 1.0))


def _lad_objective(x, y, a, b) -> float:
    return math.fsum(np.abs(y - a - b * x))


def lad_fit(x, y, tol: float = 1e-10, max_iter: int = 1000) -> tuple[float, float]:
    """Least-absolute-deviation line ``y ~ a + b x``; returns ``(intercept, slope)``.

    Iteratively reweighted least squares from the ordinary least-squares start,
    weights ``1 / max(|r|, 1e-12)``, stopping when both coefficients move less
    than ``tol``. Some LAD optimum passes through two data points, so the IRLS
    answer is then snapped to the best line through two of the points closest
    to it. Among equally good lines the first pair in index order wins.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise UndefinedMetricError("LAD fit needs at least two points")
    if np.ptp(x) == 0:
        raise UndefinedMetricError("LAD slope undefined: all regressor values are equal")
    design = np.column_stack([np.ones_like(x), x])
    coef = np.linalg.lstsq(design, y, rcond=None)[0]
    for _ in range(max_iter):
        w = 1.0 / np.maximum(np.abs(y - design @ coef), 1e-12)
        sw = np.sqrt(w)
        new = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)[0]
        done = np.all(np.abs(new - coef) <= tol * (1.0 + np.abs(coef)))
        coef = new
        if done:
            break
    a, b = float(coef[0]), float(coef[1])
    best = (_lad_objective(x, y, a, b), a, b)
    near = np.argsort(np.abs(y - a - b * x), kind="stable")[: min(x.size, 8)]
    for p, i in enumerate(sorted(near)):
        for j in sorted(near)[p + 1:]:
            if x[i] == x[j]:
                continue
            bj = (y[j] - y[i]) / (x[j] - x[i])
            aj = y[i] - bj * x[i]
            obj = _lad_objective(x, y, aj, bj)
            if obj < best[0] - 1e-12 * max(1.0, best[0]):
                best = (obj, aj, bj)
    return best[1], best[2]


def lad_slope(phi_hat, phi) -> float:
    """Slope of the LAD regression of approximate on exact attributions (1 means unbiased)."""
    a, b = _pair(phi_hat, phi)
    return lad_fit(b, a)[1]


# ---------------------------------------------------------------------------
# ablation


def center_out_order(n: int) -> list[int]:
    """0-indexed: start at position ceil(n/2) (1-indexed), then alternate right, left."""
    start = (n + 1) // 2 - 1
    order = [start]
    for d in range(1, n):
        for p in (start + d, start - d):
            if 0 <= p < n:
                order.append(p)
    return order


def edges_in_order(n: int) -> list[int]:
    order = []
    lo, hi = 0, n - 1
    while lo <= hi:
        order.append(lo)
        if hi != lo:
            order.append(hi)
        lo, hi = lo + 1, hi - 1
    return order


def uniform_order(n: int) -> list[int]:
    """Greedy removal keeping survivors as evenly spread as possible.

    Each step removes the element whose removal maximises the smallest gap
    between consecutive survivors; remaining ties go to the removal with the
    lexicographically largest sorted gap profile, then to the lowest index.
    """
    survivors = list(range(n))
    order = []
    while survivors:
        best_key, best_p = None, None
        for k, p in enumerate(survivors):
            rest = survivors[:k] + survivors[k + 1:]
            gaps = sorted(np.diff(rest).tolist()) if len(rest) > 1 else [math.inf]
            key = (gaps[0], gaps)
            if best_key is None or key > best_key:
                best_key, best_p = key, p
        order.append(best_p)
        survivors.remove(best_p)
    return order


def removal_order(order: str, n: int, phi: np.ndarray | None = None, seed: int | None = None) -> list[int]:
    """Permutation of ``0..n-1`` giving which element to drop at each step."""
    if order == "esv-descending":
        return np.argsort(-np.asarray(phi), kind="stable").tolist()
    if order == "esv-ascending":
        return np.argsort(np.asarray(phi), kind="stable").tolist()
    if order == "center-out":
        return center_out_order(n)
    if order == "edges-in":
        return edges_in_order(n)
    if order == "uniform":
        return uniform_order(n)
    if order == "random":
        if seed is None:
            raise ValidationError("seed: random ablation order needs a seed")
        return np.random.default_rng(seed).permutation(n).tolist()
    raise ValidationError(f"order: unknown policy {order!r} (expected one of {', '.join(ORDERS)})")


@dataclass
class AblationCurve:
    """Scores after each removal step; ``points[k]`` has ``n - k`` elements remaining."""

    order: str
    removed: list[int]
    points: list[tuple[int, float, bool]]


def ablate_by_rank(
    model,
    X: FeatureSequence,
    result: AttributionResult | None,
    c: int,
    order: str,
    seed: int | None = None,
    label: int | None = None,
) -> AblationCurve:
    """Drop elements one at a time following ``order`` and re-score the survivors.

    A step is correct when the argmax class of the survivors' scores equals
    ``label`` (defaults to ``c``).
    """
    n = X.n
    phi = None
    if order.startswith("esv-"):
        if result is None:
            raise ValidationError(f"order {order!r} needs an attribution result")
        if result.n != n:
            raise ValidationError("attribution result does not match the sequence length")
        phi = result.column(c)
    perm = removal_order(order, n, phi, seed)
    label = c if label is None else label
    cache = {} if isinstance(model, MultiScaleModel) else None
    mask = full_mask(n)
    points = []
    for step in range(n):
        if step:
            mask &= ~(1 << perm[step - 1])
        scores = evaluate(model, X, SubsequenceIndex(mask, n), cache=cache)
        points.append((n - step, float(scores[c]), bool(int(np.argmax(scores)) == label)))
    return AblationCurve(order=order, removed=perm, points=points)


# ---------------------------------------------------------------------------
# approximation quality grid


@dataclass
class EvalItem:
    """One input for :func:`batch_quality`; ``c=None`` explains the top-scoring class."""

    model: object
    X: FeatureSequence
    c: int | None
    name: str = ""


@dataclass
class ApproxQualityReport:
    m: int
    iterations: int
    relative_error: float
    lad_slope: float
    pearson_r: float
    sampled_fraction: float
    per_video: list[dict] = field(default_factory=list)
    gaps: int = 0


def _safe(metric, a, b):
    try:
        return metric(a, b)
    except UndefinedMetricError:
        return None


def _nanmean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else math.nan


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ESV_THREADS", "1")))
    except ValueError:
        return 1


def batch_quality(
    items: Iterable[EvalItem],
    m_grid: Sequence[int],
    iterations_grid: Sequence[int],
    seeds: Sequence[int],
    min_evidential: float | None = None,
    limit: int = DEFAULT_EXHAUSTIVE_LIMIT,
) -> dict[tuple[int, int], ApproxQualityReport]:
    """Compare approximate against exact attributions over a grid of ``(m, iterations)``.

    Exact attributions are computed once per item. Metrics are computed per
    item and seed and averaged per cell; an undefined metric leaves a gap and
    is counted in ``gaps``. Items whose exact evidential score falls below
    ``min_evidential`` are skipped.
    """
    items = list(items)

    def exact_for(item):
        if item.c is None:
            res = exact_esv(item.model, item.X, None, limit=limit)
            c = int(np.argmax(res.evidential + item.model.empty_prior))
            item = EvalItem(item.model, item.X, c, item.name)
        else:
            res = exact_esv(item.model, item.X, [item.c], limit=limit)
        k = res.classes.index(item.c)
        return item, res.phi[:, k], float(res.evidential[k])

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        exacts = list(pool.map(exact_for, items))
    if min_evidential is not None:
        exacts = [e for e in exacts if e[2] >= min_evidential]
    if not exacts:
        return {}

    def run_cell(cell):
        m, it = cell
        rows = []
        for item, phi, evid in exacts:
            for seed in seeds:
                est = approx_esv(item.model, item.X, [item.c], m=m, iterations=it, seed=seed).column(item.c)
                rows.append({
                    "name": item.name,
                    "seed": seed,
                    "evidential": evid,
                    "relative_error": _safe(relative_error, est, phi),
                    "lad_slope": _safe(lad_slope, est, phi),
                    "pearson_r": _safe(pearson_r, est, phi),
                })
        gaps = sum(r[k] is None for r in rows for k in ("relative_error", "lad_slope", "pearson_r"))
        return ApproxQualityReport(
            m=m,
            iterations=it,
            relative_error=_nanmean([r["relative_error"] for r in rows]),
            lad_slope=_nanmean([r["lad_slope"] for r in rows]),
            pearson_r=_nanmean([r["pearson_r"] for r in rows]),
            sampled_fraction=float(np.mean([sampled_fraction(e[0].X.n, m) for e in exacts])),
            per_video=rows,
            gaps=gaps,
        )

    cells = [(int(m), int(it)) for m in m_grid for it in iterations_grid]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        reports = list(pool.map(run_cell, cells))
    return dict(zip(cells, reports))


# ---------------------------------------------------------------------------
# synthetic ablation data


def planted_distractor_model(dim: int = 4, n_classes: int = 3, hidden: int = 8, strength: float = 2.0, seed: int = 0):
    """Mean-pool MLP whose class-0 score rises with the mean of feature 0.

    One hidden unit carries feature 0 linearly into class 0 (and against
    class 1); the rest are small random units on the other features.
    """
    from esv.models import ModelSpec, load_model

    rng = np.random.default_rng(seed)
    w1 = rng.normal(scale=0.3, size=(dim, hidden))
    w1[0, :] = 0.0
    w1[:, 0] = 0.0
    w1[0, 0] = strength
    b1 = rng.normal(scale=0.1, size=hidden)
    b1[0] = 10.0
    w2 = rng.normal(scale=0.3, size=(hidden, n_classes))
    w2[0] = 0.0
    w2[0, 0], w2[0, 1 % n_classes] = 1.0, -1.0 if n_classes > 1 else 1.0
    b2 = np.zeros(n_classes)
    b2[0] = -10.0
    spec = ModelSpec("mean-pool-mlp", n_classes, dim, np.zeros(n_classes), {"w1": w1, "b1": b1, "w2": w2, "b2": b2})
    return load_model(spec)


def planted_distractor_sequence(n: int, n_distractors: int, dim: int = 4, noise: float = 0.3,
                                rng: np.random.Generator | None = None):
    """Sequence where ``n_distractors`` random elements carry feature 0 near -1, the rest near +1.

    Returns ``(X, distractor_positions)``.
    """
    rng = rng or np.random.default_rng()
    x = rng.normal(scale=noise, size=(n, dim))
    bad = np.sort(rng.choice(n, size=n_distractors, replace=False))
    sign = np.ones(n)
    sign[bad] = -1.0
    x[:, 0] += sign
    return FeatureSequence(x), bad.tolist()
