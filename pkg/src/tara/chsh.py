"""CHSH data types and statistics.

Outcomes are encoded as integers: ``+1``, ``-1`` and ``0`` for a detector
that did not click.  Correlators are computed on coincidences (trials where
both sides clicked); click rates partition all trials into four categories.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Union

import numpy as np

CLASSICAL_BOUND = 2.0
TSIRELSON_BOUND = 2.0 * math.sqrt(2.0)
ALGEBRAIC_BOUND = 4.0

# Order matters: S = E00 + E01 + E10 - E11.
CONTEXTS: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))
CHSH_SIGNS = (1.0, 1.0, 1.0, -1.0)


class Outcome(IntEnum):
    MINUS = -1
    NO_CLICK = 0
    PLUS = 1


@dataclass(frozen=True, order=True)
class Context:
    x: int
    z: int

    def __post_init__(self) -> None:
        if self.x not in (0, 1) or self.z not in (0, 1):
            raise ValueError(f"invalid context ({self.x}, {self.z}); settings must be 0 or 1")

    @property
    def index(self) -> int:
        return 2 * self.x + self.z

    @classmethod
    def from_index(cls, index: int) -> Context:
        return cls(index >> 1, index & 1)

    def __str__(self) -> str:
        return f"{self.x}{self.z}"


@dataclass(frozen=True)
class MeasurementRecord:
    trial_index: int
    x: int
    z: int
    a: int
    b: int

    @property
    def context(self) -> Context:
        return Context(self.x, self.z)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of CHSH trials.

    Arrays are int64 and never mutated after construction.  ``label`` is the
    ground truth ("classical" / "quantum") when known.
    """

    trial: np.ndarray
    x: np.ndarray
    z: np.ndarray
    a: np.ndarray
    b: np.ndarray
    label: str | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.trial)
        for name in ("trial", "x", "z", "a", "b"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.ndim != 1 or len(arr) != n:
                raise ValueError(f"column {name!r} has inconsistent length")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    def __len__(self) -> int:
        return len(self.trial)

    def __iter__(self) -> Iterator[MeasurementRecord]:
        return self.records()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("trial", "x", "z", "a", "b")
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def context_index(self) -> np.ndarray:
        return 2 * self.x + self.z

    def records(self) -> Iterator[MeasurementRecord]:
        for row in zip(self.trial.tolist(), self.x.tolist(), self.z.tolist(), self.a.tolist(), self.b.tolist()):
            yield MeasurementRecord(*row)

    def subset(self, index: np.ndarray | slice) -> Dataset:
        return Dataset(
            self.trial[index], self.x[index], self.z[index], self.a[index], self.b[index],
            label=self.label, metadata=dict(self.metadata),
        )

    def validate(self) -> None:
        """Raise ValueError when any column leaves its domain."""
        if np.any((self.x != 0) & (self.x != 1)) or np.any((self.z != 0) & (self.z != 1)):
            raise ValueError("settings must be 0 or 1")
        if np.any(np.abs(self.a) > 1) or np.any(np.abs(self.b) > 1):
            raise ValueError("outcomes must be -1, 0 or +1")
        if len(self.trial) > 1 and np.any(np.diff(self.trial) <= 0):
            raise ValueError("trial indices must be strictly increasing")

    @classmethod
    def from_records(cls, records: Iterable[MeasurementRecord], label: str | None = None,
                     metadata: dict[str, Any] | None = None) -> Dataset:
        rows = [(r.trial_index, r.x, r.z, int(r.a), int(r.b)) for r in records]
        cols = np.array(rows, dtype=np.int64).reshape(-1, 5)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], cols[:, 4],
                   label=label, metadata=dict(metadata or {}))


DatasetLike = Union[Dataset, Iterable[MeasurementRecord]]


def as_dataset(data: DatasetLike) -> Dataset:
    if isinstance(data, Dataset):
        return data
    return Dataset.from_records(data)


@dataclass(frozen=True)
class CorrelationSummary:
    """Per-context correlators plus click-rate partition of a dataset.

    Maps are keyed by ``(x, z)`` tuples.  ``click_rates`` is
    ``(p_A, p_B, p_AB, p_empty)``: Alice-only, Bob-only, both, neither.
    ``flagged`` lists contexts with no coincidences (their correlator is 0).
    """

    e: dict[tuple[int, int], float]
    n_coincident: dict[tuple[int, int], int]
    n_total: dict[tuple[int, int], int]
    click_rates: tuple[float, float, float, float]
    flagged: tuple[tuple[int, int], ...] = ()

    @property
    def s(self) -> float:
        return chsh_s(self)

    @property
    def correlators(self) -> tuple[float, float, float, float]:
        return tuple(self.e[c] for c in CONTEXTS)  # type: ignore[return-value]


def summarize(data: DatasetLike, no_click: int | None = None) -> CorrelationSummary:
    """Correlators and click rates of a dataset.

    With ``no_click=None`` correlators are post-selected on coincidences.
    Passing ``+1`` or ``-1`` instead assigns that outcome to every missed
    detection before correlating, so every trial counts; click rates are
    always computed from the raw outcomes.
    """
    ds = as_dataset(data)
    n = len(ds)
    if n == 0:
        raise ValueError("empty dataset")
    if no_click not in (None, 1, -1):
        raise ValueError("no_click must be None, +1 or -1")
    ctx = ds.context_index
    counts = np.bincount(ctx, minlength=4)
    missing = [CONTEXTS[i] for i in range(4) if counts[i] == 0]
    if missing:
        names = ", ".join(f"{x}{z}" for x, z in missing)
        raise ValueError(f"missing contexts: {names}")

    click_a = ds.a != 0
    click_b = ds.b != 0
    p_a = float(np.mean(click_a & ~click_b))
    p_b = float(np.mean(~click_a & click_b))
    p_ab = float(np.mean(click_a & click_b))
    p_empty = float(np.mean(~click_a & ~click_b))

    if no_click is None:
        use = click_a & click_b
        prod = ds.a * ds.b
    else:
        use = np.ones(n, dtype=bool)
        prod = np.where(click_a, ds.a, no_click) * np.where(click_b, ds.b, no_click)

    sums = np.bincount(ctx[use], weights=prod[use], minlength=4)
    n_coin = np.bincount(ctx[use], minlength=4)
    e: dict[tuple[int, int], float] = {}
    flagged = []
    for i, c in enumerate(CONTEXTS):
        if n_coin[i] == 0:
            e[c] = 0.0
            flagged.append(c)
        else:
            e[c] = float(sums[i] / n_coin[i])
    return CorrelationSummary(
        e=e,
        n_coincident={c: int(n_coin[i]) for i, c in enumerate(CONTEXTS)},
        n_total={c: int(counts[i]) for i, c in enumerate(CONTEXTS)},
        click_rates=(p_a, p_b, p_ab, p_empty),
        flagged=tuple(flagged),
    )


def _correlator_vector(source: CorrelationSummary | Mapping | Sequence[float]) -> list[float]:
    if isinstance(source, CorrelationSummary):
        source = source.e
    if isinstance(source, Mapping):
        missing = [c for c in CONTEXTS if c not in source]
        if missing:
            raise ValueError("missing contexts: " + ", ".join(f"{x}{z}" for x, z in missing))
        return [float(source[c]) for c in CONTEXTS]
    values = [float(v) for v in source]
    if len(values) != 4:
        raise ValueError(f"expected 4 correlators, got {len(values)}")
    return values


def chsh_s(source: CorrelationSummary | Mapping | Sequence[float]) -> float:
    """S = E00 + E01 + E10 - E11.

    Accepts a summary, a mapping keyed by ``(x, z)``, or four correlators in
    context order 00, 01, 10, 11.
    """
    e00, e01, e10, e11 = _correlator_vector(source)
    return e00 + e01 + e10 - e11


def chsh_standard_error(summary: CorrelationSummary) -> float:
    """Pooled standard error of S from per-context binomial variances."""
    var = 0.0
    for c in CONTEXTS:
        n = summary.n_coincident[c]
        if n == 0:
            return math.inf
        var += max(1.0 - summary.e[c] ** 2, 0.0) / n
    return math.sqrt(var)


def classify_regime(s: float, tol: float = 1e-9) -> str:
    """Map S onto classical / quantum / superquantum (closed lower intervals)."""
    mag = abs(s)
    if mag > ALGEBRAIC_BOUND + tol:
        raise ValueError(f"non-physical correlator input: |S| = {mag} exceeds 4")
    if mag <= CLASSICAL_BOUND:
        return "classical"
    if mag <= TSIRELSON_BOUND:
        return "quantum"
    return "superquantum"


def classical_margin(s: float) -> float:
    """Violation above the classical bound, in percent of the bound."""
    return (abs(s) - CLASSICAL_BOUND) / CLASSICAL_BOUND * 100.0
