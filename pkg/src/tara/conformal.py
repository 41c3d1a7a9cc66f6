"""Mondrian split-conformal p-values over CHSH outcome pairs.

The "feature" of a trial is its measurement context and the "label" is the
outcome pair (a, b).  A per-context table of smoothed outcome-pair
frequencies, fitted on classical (LHV) data, defines the nonconformity
score ``-log P(a, b | context)``.
"""

from __future__ import annotations

import bisect
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from .chsh import CONTEXTS, Context, DatasetLike, as_dataset

OUTCOMES = (-1, 0, 1)
PAIRS: tuple[tuple[int, int], ...] = tuple((a, b) for a in OUTCOMES for b in OUTCOMES)


def pair_index(a, b):
    """Index of (a, b) in :data:`PAIRS`; works elementwise on arrays."""
    return (np.asarray(a) + 1) * 3 + (np.asarray(b) + 1)


def _context_index(context) -> int:
    if isinstance(context, Context):
        return context.index
    x, z = context
    return Context(int(x), int(z)).index


@dataclass(frozen=True, eq=False)
class LhvConditionalModel:
    """Smoothed outcome-pair probabilities, one row of 9 per context."""

    tables: np.ndarray
    pseudo_count: float

    def __post_init__(self) -> None:
        t = np.array(self.tables, dtype=float)
        if t.shape != (4, 9):
            raise ValueError("tables must have shape (4, 9)")
        if np.any(t <= 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("each context table must be strictly positive and sum to 1")
        t.setflags(write=False)
        object.__setattr__(self, "tables", t)

    def probability(self, context, pair: tuple[int, int]) -> float:
        return float(self.tables[_context_index(context), pair_index(*pair)])

    def scores(self, data: DatasetLike) -> np.ndarray:
        ds = as_dataset(data)
        return -np.log(self.tables[ds.context_index, pair_index(ds.a, ds.b)])


def fit_lhv_model(data: DatasetLike, pseudo_count: float = 1.0) -> LhvConditionalModel:
    """Laplace-smoothed per-context outcome-pair frequencies."""
    if not pseudo_count > 0:
        raise ValueError("pseudo_count must be positive")
    ds = as_dataset(data)
    if len(ds) == 0:
        raise ValueError("empty dataset")
    ctx = ds.context_index
    counts = np.zeros((4, 9))
    np.add.at(counts, (ctx, pair_index(ds.a, ds.b)), 1.0)
    n_c = counts.sum(axis=1)
    missing = [CONTEXTS[i] for i in range(4) if n_c[i] == 0]
    if missing:
        raise ValueError("missing contexts: " + ", ".join(f"{x}{z}" for x, z in missing))
    tables = (counts + pseudo_count) / (n_c[:, None] + 9.0 * pseudo_count)
    return LhvConditionalModel(tables, float(pseudo_count))


def score(model: LhvConditionalModel, context, pair: tuple[int, int]) -> float:
    return -math.log(model.probability(context, pair))


def conformal_pvalue(cal_scores: Sequence[float], test_score: float, *, smoothed: bool = False,
                     u: float | None = None) -> float:
    """Rank p-value of ``test_score`` among sorted calibration scores.

    Unsmoothed: ``(1 + #{s_i >= s}) / (1 + n)``.  Smoothed: ties (including
    the test point itself) are broken by ``u`` in (0, 1], which makes the
    p-value exactly uniform under exchangeability.
    """
    n = len(cal_scores)
    lo = bisect.bisect_left(cal_scores, test_score)
    if not smoothed:
        return (1 + n - lo) / (1 + n)
    if u is None:
        raise ValueError("smoothed p-value needs a tie-breaking draw u")
    hi = bisect.bisect_right(cal_scores, test_score)
    return ((n - hi) + u * (hi - lo + 1)) / (1 + n)


def conformal_pvalues(cal_scores: np.ndarray, test_scores: np.ndarray, *, smoothed: bool = False,
                      u: np.ndarray | None = None) -> np.ndarray:
    """Vectorised :func:`conformal_pvalue` against one sorted calibration array."""
    cal = np.asarray(cal_scores, dtype=float)
    s = np.asarray(test_scores, dtype=float)
    n = len(cal)
    lo = np.searchsorted(cal, s, side="left")
    if not smoothed:
        return (1.0 + n - lo) / (1.0 + n)
    if u is None:
        raise ValueError("smoothed p-values need tie-breaking draws u")
    hi = np.searchsorted(cal, s, side="right")
    return ((n - hi) + np.asarray(u) * (hi - lo + 1)) / (1.0 + n)


def uniform_open_closed(rng: np.random.Generator, size=None):
    """Draws from (0, 1], so smoothed p-values are never exactly zero."""
    return 1.0 - rng.random(size)


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Sorted calibration scores per context (index order of CONTEXTS)."""

    scores: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.scores) != 4:
            raise ValueError("calibration needs one score list per context")
        frozen = []
        for s in self.scores:
            arr = np.sort(np.asarray(s, dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError("calibration scores must be finite")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "scores", tuple(frozen))

    def for_context(self, context) -> np.ndarray:
        return self.scores[_context_index(context)]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.scores)

    @classmethod
    def from_scores(cls, context_index: np.ndarray, scores: np.ndarray) -> CalibrationSet:
        ctx = np.asarray(context_index)
        s = np.asarray(scores, dtype=float)
        return cls(tuple(s[ctx == i] for i in range(4)))


def calibrate(model: LhvConditionalModel, data: DatasetLike) -> CalibrationSet:
    ds = as_dataset(data)
    return CalibrationSet.from_scores(ds.context_index, model.scores(ds))


def mondrian_pvalue(cal: CalibrationSet, context, test_score: float, *, smoothed: bool = False,
                    u: float | None = None) -> float:
    scores = cal.for_context(context)
    if len(scores) == 0:
        raise ValueError(f"uncalibrated context {Context.from_index(_context_index(context))}")
    return conformal_pvalue(scores, test_score, smoothed=smoothed, u=u)


def mondrian_pvalues(model: LhvConditionalModel, cal: CalibrationSet, data: DatasetLike, *,
                     smoothed: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """p-value of every trial's observed outcome pair within its own context."""
    ds = as_dataset(data)
    ctx = ds.context_index
    s = model.scores(ds)
    u = None
    if smoothed:
        if rng is None:
            raise ValueError("smoothed p-values need an rng")
        u = uniform_open_closed(rng, len(ds))
    out = np.empty(len(ds))
    for i in range(4):
        mask = ctx == i
        if not mask.any():
            continue
        if len(cal.scores[i]) == 0:
            raise ValueError(f"uncalibrated context {Context.from_index(i)}")
        out[mask] = conformal_pvalues(cal.scores[i], s[mask], smoothed=smoothed,
                                      u=None if u is None else u[mask])
    return out


class OnlineMondrian:
    """Smoothed Mondrian p-values where each scored trial then joins its bag.

    Ranking every new score against all earlier ones in its context (the
    calibration bag plus the stream so far) makes the smoothed p-values
    independent and uniform whenever the whole sequence is exchangeable,
    which is the hypothesis a test martingale needs.
    """

    def __init__(self, model: LhvConditionalModel, cal: CalibrationSet, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        self._bags = [list(s) for s in cal.scores]

    def pvalue(self, x: int, z: int, a: int, b: int) -> float:
        i = 2 * x + z
        bag = self._bags[i]
        s = -math.log(self.model.tables[i, (a + 1) * 3 + (b + 1)])
        p = conformal_pvalue(bag, s, smoothed=True, u=float(uniform_open_closed(self.rng)))
        bisect.insort(bag, s)
        return p

    def stream(self, data: DatasetLike) -> Iterator[float]:
        for r in as_dataset(data).records():
            yield self.pvalue(r.x, r.z, r.a, r.b)


def _check_alpha(alpha: float) -> None:
    # alpha = 1 is allowed and gives empty sets, since no p-value exceeds 1.
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")


def prediction_set(model: LhvConditionalModel, cal: CalibrationSet, context,
                   alpha: float) -> frozenset[tuple[int, int]]:
    """All outcome pairs whose (unsmoothed) Mondrian p-value exceeds alpha."""
    _check_alpha(alpha)
    i = _context_index(context)
    pv = _pair_pvalues(model, cal, i)
    return frozenset(p for p, v in zip(PAIRS, pv) if v > alpha)


def _pair_pvalues(model: LhvConditionalModel, cal: CalibrationSet, i: int) -> np.ndarray:
    if len(cal.scores[i]) == 0:
        raise ValueError(f"uncalibrated context {Context.from_index(i)}")
    return conformal_pvalues(cal.scores[i], -np.log(model.tables[i]))


def expected_set_size(data: DatasetLike, model: LhvConditionalModel, cal: CalibrationSet,
                      alpha: float) -> float:
    """Mean prediction-set size over the trials of a dataset."""
    _check_alpha(alpha)
    ds = as_dataset(data)
    if len(ds) == 0:
        raise ValueError("empty dataset")
    ctx = ds.context_index
    present = np.unique(ctx)
    sizes = np.zeros(4)
    for i in present:
        sizes[i] = np.count_nonzero(_pair_pvalues(model, cal, int(i)) > alpha)
    return float(sizes[ctx].mean())


def coverage(data: DatasetLike, model: LhvConditionalModel, cal: CalibrationSet, alpha: float) -> float:
    """Fraction of trials whose observed outcome pair lies in its prediction set."""
    _check_alpha(alpha)
    ds = as_dataset(data)
    ctx = ds.context_index
    member = np.zeros((4, 9), dtype=bool)
    for i in np.unique(ctx):
        member[i] = _pair_pvalues(model, cal, int(i)) > alpha
    return float(member[ctx, pair_index(ds.a, ds.b)].mean())
