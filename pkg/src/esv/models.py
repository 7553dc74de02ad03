"""Scoring models evaluated on subsequences.

A scorer maps a batch of equal-length subsequences ``(B, k, D)`` to class
scores ``(B, C)``. Variable-length scorers accept any ``k >= 1``. The
multi-scale model is built from fixed-length scorers ``f^1..f^n_max`` and
averages them over every scale and every subsequence at that scale; it can be
evaluated directly from that definition or bottom-up for all subsequences of a
sequence at once.

The empty subsequence is never passed to a scorer. Its score is the model's
empty prior.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np

from esv.errors import CapacityError, ValidationError
from esv.sequence import (
    DEFAULT_EXHAUSTIVE_LIMIT,
    FeatureSequence,
    SubsequenceIndex,
    mask_positions,
)

KINDS = ("linear-additive", "mean-pool-mlp", "per-scale-mlp", "pairwise-relational")
MODEL_FORMAT = "esv-model/1"


class CallCounter:
    """Monotonic count of non-empty model evaluations, safe to bump from several threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, k: int = 1) -> None:
        with self._lock:
            self._value += int(k)

    @property
    def value(self) -> int:
        return self._value

    def reset(self) -> None:
        with self._lock:
            self._value = 0


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _relu(z):
    return np.maximum(z, 0.0)


class Scorer:
    """Base class for variable-length scorers."""

    variable_length = True

    def __init__(self, n_classes: int, dim: int, empty_prior, normalize: bool = False):
        prior = np.array(empty_prior, dtype=np.float64).reshape(-1)
        if prior.shape != (n_classes,):
            raise ValidationError(f"empty_prior: expected {n_classes} entries, got {prior.shape[0]}")
        prior.setflags(write=False)
        self.n_classes = n_classes
        self.dim = dim
        self.empty_prior = prior
        self.normalize = normalize
        self.calls = CallCounter()

    def _raw(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 3 or batch.shape[1] < 1 or batch.shape[2] != self.dim:
            raise ValidationError(f"expected a (B, k>=1, {self.dim}) batch, got shape {batch.shape}")
        self.calls.add(batch.shape[0])
        out = self._raw(batch)
        return softmax(out) if self.normalize else out

    def __call__(self, elements: np.ndarray) -> np.ndarray:
        return self.score_batch(np.asarray(elements, dtype=np.float64)[None])[0]


class LinearAdditive(Scorer):
    """``prior + sum_i x_i @ W``; its exact element attributions are ``x_i @ W``."""

    def __init__(self, weights, empty_prior, normalize=False):
        weights = np.array(weights, dtype=np.float64)
        super().__init__(weights.shape[1], weights.shape[0], empty_prior, normalize)
        self.weights = weights

    def _raw(self, batch):
        return self.empty_prior + batch.sum(axis=1) @ self.weights


class MeanPoolMLP(Scorer):
    """One-hidden-layer MLP on the mean element feature; invariant to element order."""

    def __init__(self, w1, b1, w2, b2, empty_prior, normalize=False):
        self.w1, self.b1, self.w2, self.b2 = (np.array(a, dtype=np.float64) for a in (w1, b1, w2, b2))
        super().__init__(self.w2.shape[1], self.w1.shape[0], empty_prior, normalize)

    def _raw(self, batch):
        return _relu(batch.mean(axis=1) @ self.w1 + self.b1) @ self.w2 + self.b2


class PairwiseRelational(Scorer):
    """``bias + sum_i x_i @ U + sum_{i<j} g([x_i, x_j])`` over ordered element pairs.

    ``g`` is a one-hidden-layer MLP on the concatenated pair, so swapping the
    order of two elements changes the score.
    """

    def __init__(self, unary, bias, w1, b1, w2, b2, empty_prior, normalize=False):
        self.unary, self.bias, self.w1, self.b1, self.w2, self.b2 = (
            np.array(a, dtype=np.float64) for a in (unary, bias, w1, b1, w2, b2)
        )
        super().__init__(self.unary.shape[1], self.unary.shape[0], empty_prior, normalize)

    def _raw(self, batch):
        out = self.bias + batch.sum(axis=1) @ self.unary
        k = batch.shape[1]
        if k >= 2:
            first, second = np.triu_indices(k, 1)
            pairs = np.concatenate([batch[:, first], batch[:, second]], axis=2)
            out = out + (_relu(pairs @ self.w1 + self.b1) @ self.w2 + self.b2).sum(axis=1)
        return out


class CallableScorer(Scorer):
    """Wraps ``fn(elements (k, D)) -> (C,)``; handy for hand-built set functions."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], n_classes, dim, empty_prior, normalize=False):
        super().__init__(n_classes, dim, empty_prior, normalize)
        self.fn = fn

    def _raw(self, batch):
        return np.stack([np.asarray(self.fn(row), dtype=np.float64).reshape(self.n_classes) for row in batch])


class ScaleMLP:
    """Fixed-length scorer ``f^s``: MLP on the concatenation of ``s`` element features."""

    def __init__(self, scale: int, w1, b1, w2, b2):
        self.scale = scale
        self.w1, self.b1, self.w2, self.b2 = (np.array(a, dtype=np.float64) for a in (w1, b1, w2, b2))

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        if batch.shape[1] != self.scale:
            raise ValidationError(f"scale-{self.scale} model given length-{batch.shape[1]} input")
        flat = batch.reshape(batch.shape[0], -1)
        return _relu(flat @ self.w1 + self.b1) @ self.w2 + self.b2


class MultiScaleModel:
    """Equal-weight average over scales ``1..min(k, n_max)`` of fixed-length scorers.

    ``scales[s - 1]`` must accept ``(B, s, D)`` batches. The call counter counts
    fixed-length scorer evaluations. ``strict_alg1`` selects the bottom-up
    variant that scales the parent mean by ``(s - 1) / s`` above ``n_max``; the
    default leaves it unscaled, which is the variant that agrees with the direct
    definition.
    """

    variable_length = False

    def __init__(self, scales, n_classes: int, dim: int, empty_prior, normalize=False, strict_alg1=False):
        if not scales:
            raise ValidationError("a multi-scale model needs at least one scale")
        prior = np.array(empty_prior, dtype=np.float64).reshape(-1)
        if prior.shape != (n_classes,):
            raise ValidationError(f"empty_prior: expected {n_classes} entries, got {prior.shape[0]}")
        prior.setflags(write=False)
        self.scales = list(scales)
        self.n_classes = n_classes
        self.dim = dim
        self.empty_prior = prior
        self.normalize = normalize
        self.strict_alg1 = strict_alg1
        self.calls = CallCounter()

    @property
    def n_max(self) -> int:
        return len(self.scales)

    def single_scale(self, batch: np.ndarray) -> np.ndarray:
        """Raw ``f^s`` scores for a ``(B, s, D)`` batch, ``s <= n_max``."""
        s = batch.shape[1]
        if not 1 <= s <= self.n_max:
            raise ValidationError(f"no single-scale model for length {s} (n_max={self.n_max})")
        self.calls.add(batch.shape[0])
        return np.asarray(self.scales[s - 1](batch), dtype=np.float64).reshape(batch.shape[0], self.n_classes)

    def finalize(self, raw: np.ndarray) -> np.ndarray:
        return softmax(raw) if self.normalize else raw

    def with_strict_alg1(self, strict: bool) -> "MultiScaleModel":
        twin = MultiScaleModel(self.scales, self.n_classes, self.dim, self.empty_prior, self.normalize, strict)
        twin.calls = self.calls
        return twin


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, X: FeatureSequence, sub: SubsequenceIndex, cache: dict | None = None) -> np.ndarray:
    """Class scores of ``model`` on the subsequence ``sub`` of ``X``.

    The empty subsequence returns the empty prior without counting a call.
    Multi-scale models are evaluated from the direct definition; pass a shared
    ``cache`` dict to reuse fixed-length scores across calls.
    """
    if sub.n != X.n:
        raise ValidationError(f"subsequence is over n={sub.n}, sequence has n={X.n}")
    if sub.mask == 0:
        return np.array(model.empty_prior)
    if isinstance(model, MultiScaleModel):
        return multiscale_direct(model, sub, X, cache=cache)
    return model.score_batch(X.select(sub)[None])[0]


def multiscale_direct(msm: MultiScaleModel, sub: SubsequenceIndex, X: FeatureSequence, cache: dict | None = None):
    """``E_s E_{X''|s} f^s(X'')`` by enumerating every sub-subsequence of ``sub``.

    Exponential in ``|sub|``. ``cache`` maps bitmasks to raw fixed-length scores.
    """
    positions = sub.positions
    k = len(positions)
    if k == 0:
        raise ValidationError("multiscale_direct needs a non-empty subsequence; use evaluate for the prior")
    top = min(k, msm.n_max)
    per_scale = []
    for s in range(1, top + 1):
        combos = list(itertools.combinations(positions, s))
        masks = [sum(1 << p for p in combo) for combo in combos]
        if cache is None:
            rows = msm.single_scale(X.elements[np.array(combos)])
        else:
            missing = [(mk, combo) for mk, combo in zip(masks, combos) if mk not in cache]
            if missing:
                out = msm.single_scale(X.elements[np.array([combo for _, combo in missing])])
                for (mk, _), row in zip(missing, out):
                    cache[mk] = row
            rows = np.stack([cache[mk] for mk in masks])
        per_scale.append(rows.mean(axis=0))
    return msm.finalize(np.mean(per_scale, axis=0))


@lru_cache(maxsize=32)
def subsets_by_size(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """For each size ``s = 0..n``: (bitmasks, positions ``(K, s)``) in lexicographic order."""
    out = []
    for s in range(n + 1):
        combos = list(itertools.combinations(range(n), s))
        pos = np.array(combos, dtype=np.int64).reshape(len(combos), s)
        masks = (np.int64(1) << pos).sum(axis=1) if s else np.zeros(1, dtype=np.int64)
        pos.setflags(write=False)
        masks.setflags(write=False)
        out.append((masks, pos))
    return tuple(out)


def _check_limit(n: int, limit: int) -> None:
    if n > limit:
        raise CapacityError(f"exhaustive evaluation limited to n <= {limit} (got n={n})")


def recurrent_table(msm: MultiScaleModel, X: FeatureSequence, limit: int = DEFAULT_EXHAUSTIVE_LIMIT) -> np.ndarray:
    """Raw multi-scale scores of every subsequence, row index = bitmask; row 0 unused.

    Built bottom-up: a size-``k`` subsequence combines ``f^k`` (when
    ``k <= n_max``) with the mean over its ``k`` one-smaller children, so each
    fixed-length scorer runs once per subsequence.
    """
    n = X.n
    _check_limit(n, limit)
    table = np.zeros((1 << n, msm.n_classes))
    levels = subsets_by_size(n)
    for s in range(1, n + 1):
        masks, pos = levels[s]
        if s == 1:
            table[masks] = msm.single_scale(X.elements[pos])
            continue
        child_sum = np.zeros((len(masks), msm.n_classes))
        for j in range(s):
            child_sum += table[masks - (np.int64(1) << pos[:, j])]
        child_mean = child_sum / s
        if s <= msm.n_max:
            table[masks] = (msm.single_scale(X.elements[pos]) + (s - 1) * child_mean) / s
        elif msm.strict_alg1:
            table[masks] = (s - 1) / s * child_mean
        else:
            table[masks] = child_mean
    return table


def multiscale_recurrent(msm: MultiScaleModel, X: FeatureSequence, limit: int = DEFAULT_EXHAUSTIVE_LIMIT):
    """Scores of every non-empty subsequence, keyed by :class:`SubsequenceIndex`."""
    table = msm.finalize(recurrent_table(msm, X, limit))
    return {SubsequenceIndex(mask, X.n): table[mask] for mask in range(1, 1 << X.n)}


def score_all_subsequences(model, X: FeatureSequence, limit: int = DEFAULT_EXHAUSTIVE_LIMIT) -> np.ndarray:
    """Final scores for all ``2^n`` subsequences, row = bitmask, row 0 = empty prior."""
    n = X.n
    _check_limit(n, limit)
    if isinstance(model, MultiScaleModel):
        table = model.finalize(recurrent_table(model, X, limit))
    else:
        table = np.zeros((1 << n, model.n_classes))
        for s, (masks, pos) in enumerate(subsets_by_size(n)):
            if s:
                table[masks] = model.score_batch(X.elements[pos])
    table[0] = model.empty_prior
    return table


# ---------------------------------------------------------------------------
# model specs


@dataclass
class ModelSpec:
    """Declarative description of a built-in model.

    ``parameters`` maps names to arrays; the required names and shapes depend
    on ``kind`` (see :func:`expected_shapes`).
    """

    kind: str
    n_classes: int
    dim: int
    empty_prior: np.ndarray
    parameters: dict[str, np.ndarray] = field(default_factory=dict)
    n_max: int | None = None
    normalize: bool = False
    prior_is_distribution: bool = False


def _hidden(params: Mapping[str, np.ndarray], name: str, path: str) -> int:
    if name not in params:
        raise ValidationError(f"{path}.{name}: missing parameter")
    arr = params[name]
    if arr.ndim != 2:
        raise ValidationError(f"{path}.{name}: expected a 2-d array, got shape {arr.shape}")
    return arr.shape[1]


def expected_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Required parameter shapes for ``spec.kind``; hidden widths are read from ``w1`` arrays."""
    C, D, p = spec.n_classes, spec.dim, spec.parameters
    if spec.kind == "linear-additive":
        return {"weights": (D, C)}
    if spec.kind == "mean-pool-mlp":
        H = _hidden(p, "w1", "parameters")
        return {"w1": (D, H), "b1": (H,), "w2": (H, C), "b2": (C,)}
    if spec.kind == "pairwise-relational":
        H = _hidden(p, "pair.w1", "parameters")
        return {"unary": (D, C), "bias": (C,), "pair.w1": (2 * D, H), "pair.b1": (H,), "pair.w2": (H, C), "pair.b2": (C,)}
    if spec.kind == "per-scale-mlp":
        if spec.n_max is None or spec.n_max < 1:
            raise ValidationError("n_max: per-scale-mlp needs n_max >= 1")
        shapes = {}
        for s in range(1, spec.n_max + 1):
            H = _hidden(p, f"scale{s}.w1", "parameters")
            shapes.update({
                f"scale{s}.w1": (s * D, H),
                f"scale{s}.b1": (H,),
                f"scale{s}.w2": (H, C),
                f"scale{s}.b2": (C,),
            })
        return shapes
    raise ValidationError(f"kind: unknown model kind {spec.kind!r} (expected one of {', '.join(KINDS)})")


def validate_spec(spec: ModelSpec) -> None:
    if spec.n_classes < 1:
        raise ValidationError("C: need at least one class")
    if spec.dim < 1:
        raise ValidationError("D: feature dimension must be >= 1")
    prior = np.asarray(spec.empty_prior, dtype=np.float64)
    if prior.shape != (spec.n_classes,):
        raise ValidationError(f"empty_prior: expected shape ({spec.n_classes},), got {prior.shape}")
    if not np.all(np.isfinite(prior)):
        raise ValidationError("empty_prior: entries must be finite")
    if spec.prior_is_distribution or spec.normalize:
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise ValidationError("empty_prior: must be non-negative and sum to 1 for a distribution")
    if spec.kind != "per-scale-mlp" and spec.n_max is not None:
        raise ValidationError(f"n_max: only per-scale-mlp takes n_max (kind is {spec.kind!r})")
    shapes = expected_shapes(spec)
    extra = set(spec.parameters) - set(shapes)
    if extra:
        raise ValidationError(f"parameters.{sorted(extra)[0]}: unexpected parameter for kind {spec.kind!r}")
    for name, shape in shapes.items():
        if name not in spec.parameters:
            raise ValidationError(f"parameters.{name}: missing parameter")
        arr = np.asarray(spec.parameters[name])
        if arr.shape != shape:
            raise ValidationError(f"parameters.{name}: expected shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"parameters.{name}: non-finite values")


def load_model(spec: ModelSpec, strict_alg1: bool = False):
    """Build an immutable scorer from a validated spec.

    ``per-scale-mlp`` becomes a :class:`MultiScaleModel`; other kinds are
    variable-length scorers evaluated directly on any subsequence.
    """
    validate_spec(spec)
    p = {k: np.array(v, dtype=np.float64) for k, v in spec.parameters.items()}
    for arr in p.values():
        arr.setflags(write=False)
    prior = spec.empty_prior
    if spec.kind == "linear-additive":
        return LinearAdditive(p["weights"], prior, spec.normalize)
    if spec.kind == "mean-pool-mlp":
        return MeanPoolMLP(p["w1"], p["b1"], p["w2"], p["b2"], prior, spec.normalize)
    if spec.kind == "pairwise-relational":
        return PairwiseRelational(
            p["unary"], p["bias"], p["pair.w1"], p["pair.b1"], p["pair.w2"], p["pair.b2"], prior, spec.normalize
        )
    scales = [
        ScaleMLP(s, p[f"scale{s}.w1"], p[f"scale{s}.b1"], p[f"scale{s}.w2"], p[f"scale{s}.b2"])
        for s in range(1, spec.n_max + 1)
    ]
    return MultiScaleModel(scales, spec.n_classes, spec.dim, prior, spec.normalize, strict_alg1)


def random_model_spec(
    kind: str,
    n_classes: int = 3,
    dim: int = 4,
    *,
    hidden: int = 16,
    n_max: int = 8,
    seed: int = 0,
    empty_prior=None,
    normalize: bool = False,
) -> ModelSpec:
    """A spec with Gaussian weights scaled by ``1/sqrt(fan_in)``; for tests and experiments."""
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        return rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)

    def bias(k):
        return rng.normal(scale=0.1, size=k)

    C, D, H = n_classes, dim, hidden
    if kind == "linear-additive":
        params = {"weights": dense(D, C)}
    elif kind == "mean-pool-mlp":
        params = {"w1": dense(D, H), "b1": bias(H), "w2": dense(H, C), "b2": bias(C)}
    elif kind == "pairwise-relational":
        params = {
            "unary": dense(D, C), "bias": bias(C),
            "pair.w1": dense(2 * D, H), "pair.b1": bias(H), "pair.w2": dense(H, C) / 4, "pair.b2": bias(C) / 4,
        }
    elif kind == "per-scale-mlp":
        params = {}
        for s in range(1, n_max + 1):
            params.update({
                f"scale{s}.w1": dense(s * D, H), f"scale{s}.b1": bias(H),
                f"scale{s}.w2": dense(H, C), f"scale{s}.b2": bias(C),
            })
    else:
        raise ValidationError(f"kind: unknown model kind {kind!r}")
    if empty_prior is None:
        empty_prior = np.full(C, 1.0 / C)
    return ModelSpec(
        kind=kind,
        n_classes=C,
        dim=D,
        empty_prior=np.asarray(empty_prior, dtype=np.float64),
        parameters=params,
        n_max=n_max if kind == "per-scale-mlp" else None,
        normalize=normalize,
    )


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "format": MODEL_FORMAT,
        "kind": spec.kind,
        "C": spec.n_classes,
        "D": spec.dim,
        "n_max": spec.n_max,
        "normalize": spec.normalize,
        "empty_prior": {
            "scores": [float(v) for v in spec.empty_prior],
            "distribution": spec.prior_is_distribution,
        },
        "parameters": [
            {"name": name, "shape": list(np.shape(arr)), "data": [float(v) for v in np.ravel(arr)]}
            for name, arr in spec.parameters.items()
        ],
    }


def spec_from_dict(doc: Mapping) -> ModelSpec:
    """Parse and validate a model document; errors name the offending field."""
    if not isinstance(doc, Mapping):
        raise ValidationError("model document must be a mapping")
    if doc.get("format") != MODEL_FORMAT:
        raise ValidationError(f"format: expected {MODEL_FORMAT!r}, got {doc.get('format')!r}")
    for key in ("kind", "C", "D", "empty_prior", "parameters"):
        if key not in doc:
            raise ValidationError(f"{key}: missing field")
    prior = doc["empty_prior"]
    if isinstance(prior, Mapping):
        scores, is_dist = prior.get("scores"), bool(prior.get("distribution", False))
    else:
        scores, is_dist = prior, False
    params = {}
    for k, entry in enumerate(doc["parameters"]):
        path = f"parameters[{k}]"
        try:
            name, shape, data = entry["name"], tuple(int(d) for d in entry["shape"]), entry["data"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: needs name, shape and data ({exc})") from None
        try:
            arr = np.asarray(data, dtype=np.float64)
        except (TypeError, ValueError):
            raise ValidationError(f"parameters.{name}: data must be numbers") from None
        if arr.ndim != 1 or arr.size != int(np.prod(shape)):
            raise ValidationError(f"parameters.{name}: {arr.size} values do not fill shape {shape}")
        params[name] = arr.reshape(shape)
    try:
        C, D = int(doc["C"]), int(doc["D"])
        n_max = None if doc.get("n_max") is None else int(doc["n_max"])
        prior_arr = np.asarray(scores, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"header: {exc}") from None
    spec = ModelSpec(
        kind=str(doc["kind"]),
        n_classes=C,
        dim=D,
        empty_prior=prior_arr,
        parameters=params,
        n_max=n_max,
        normalize=bool(doc.get("normalize", False)),
        prior_is_distribution=is_dist,
    )
    validate_spec(spec)
    return spec
