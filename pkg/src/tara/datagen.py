"""Seeded CHSH trial generators.

Every generator is a pure function of its :class:`GeneratorConfig`; the same
config (seed included) always yields the same trials.  The quantum branch
samples outcome pairs directly from the Born-rule correlators instead of
simulating a state vector, which is equivalent for CHSH statistics.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from .chsh import CONTEXTS, Dataset

MODELS = (
    "lhv-deterministic",
    "lhv-mixture",
    "lhv-detection",
    "lhv-memory",
    "lhv-communication",
    "quantum-singlet",
    "pr-box",
)
CLASSICAL_MODELS = frozenset(m for m in MODELS if m.startswith("lhv-"))
SCHEDULES = ("round-robin", "uniform")

DEFAULT_ANGLES_A = (0.0, math.pi / 2)
DEFAULT_ANGLES_B = (math.pi / 4, -math.pi / 4)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class DeterministicStrategy:
    a0: int
    a1: int
    b0: int
    b1: int

    def alice(self, x: int) -> int:
        return self.a1 if x else self.a0

    def bob(self, z: int) -> int:
        return self.b1 if z else self.b0

    def correlators(self) -> tuple[int, int, int, int]:
        return tuple(self.alice(x) * self.bob(z) for x, z in CONTEXTS)  # type: ignore[return-value]

    @property
    def s(self) -> int:
        return self.a0 * self.b0 + self.a0 * self.b1 + self.a1 * self.b0 - self.a1 * self.b1

    def flipped(self) -> DeterministicStrategy:
        return DeterministicStrategy(-self.a0, -self.a1, -self.b0, -self.b1)


def enumerate_strategies() -> list[DeterministicStrategy]:
    """All 16 local deterministic strategies, index 0 being all +1."""
    return [DeterministicStrategy(*v) for v in itertools.product((1, -1), repeat=4)]


STRATEGIES = enumerate_strategies()
# Columns: a0, a1, b0, b1.
_STRATEGY_TABLE = np.array([[s.a0, s.a1, s.b0, s.b1] for s in STRATEGIES], dtype=np.int64)
_FLIP_INDEX = np.array([STRATEGIES.index(s.flipped()) for s in STRATEGIES], dtype=np.int64)


def optimal_classical_weights(bias: float = 1.0) -> np.ndarray:
    """Mixture weights ``(1 - bias) * uniform + bias * uniform-over-{S = +2}``.

    ``bias = 1`` gives correlators (1/2, 1/2, 1/2, -1/2), the closest local
    model to the singlet; ``bias = 0`` gives all correlators zero.
    """
    best = np.array([s.s == 2 for s in STRATEGIES], dtype=float)
    return (1.0 - bias) / 16.0 + bias * best / best.sum()


def mixture_correlators(weights: np.ndarray) -> np.ndarray:
    """Exact E_xz of a strategy mixture, in context order."""
    corr = np.array([s.correlators() for s in STRATEGIES], dtype=float)
    return np.asarray(weights, dtype=float) @ corr


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of one generator run.

    ``weights`` (16 entries, strategy order of :func:`enumerate_strategies`)
    overrides ``bias`` for the mixture-based models.  ``eta`` is the detection
    efficiency: for ``lhv-detection`` it drives the outcome-dependent click
    rule, for every other model each side independently misses with
    probability ``1 - eta``.
    """

    model: str
    trials_per_context: int
    seed: int
    weights: Optional[tuple[float, ...]] = None
    bias: float = 1.0
    strategy: int = 0
    eta: float = 1.0
    memory_order: int = 1
    kappa: float = 0.0
    visibility: float = 1.0
    angles_a: tuple[float, float] = DEFAULT_ANGLES_A
    angles_b: tuple[float, float] = DEFAULT_ANGLES_B
    schedule: str = "round-robin"

    def __post_init__(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {', '.join(MODELS)}")
        if isinstance(self.trials_per_context, bool) or not isinstance(self.trials_per_context, int) \
                or self.trials_per_context < 1:
            raise ConfigError("trials_per_context must be a positive integer")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2**64)")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (16,) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ConfigError("weights must be 16 non-negative numbers summing to 1")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))
        if not 0.0 <= self.bias <= 1.0:
            raise ConfigError("bias must lie in [0, 1]")
        if not 0 <= self.strategy < 16:
            raise ConfigError("strategy must be an index in [0, 16)")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError("eta must lie in (0, 1]")
        if self.memory_order < 1:
            raise ConfigError("memory_order must be >= 1")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")
        if not 0.0 <= self.visibility <= 1.0:
            raise ConfigError("visibility must lie in [0, 1]")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {', '.join(SCHEDULES)}")
        object.__setattr__(self, "angles_a", tuple(float(v) for v in self.angles_a))
        object.__setattr__(self, "angles_b", tuple(float(v) for v in self.angles_b))
        if len(self.angles_a) != 2 or len(self.angles_b) != 2:
            raise ConfigError("angles must have two entries per party")

    @property
    def label(self) -> str:
        return "classical" if self.model in CLASSICAL_MODELS else "quantum"

    def mixture_weights(self) -> np.ndarray:
        if self.weights is not None:
            return np.array(self.weights)
        return optimal_classical_weights(self.bias)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("angles_a", "angles_b"):
            d[k] = list(d[k])
        if d["weights"] is not None:
            d["weights"] = list(d["weights"])
        return d

    def replace(self, **changes: Any) -> GeneratorConfig:
        d = asdict(self)
        d.update(changes)
        return GeneratorConfig(**d)


def quantum_correlators(visibility: float = 1.0, angles_a=DEFAULT_ANGLES_A,
                        angles_b=DEFAULT_ANGLES_B) -> np.ndarray:
    """Singlet-family correlators v*cos(theta_A - theta_B) in context order."""
    return np.array([visibility * math.cos(angles_a[x] - angles_b[z]) for x, z in CONTEXTS])


def _schedule(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    n = 4 * cfg.trials_per_context
    if cfg.schedule == "round-robin":
        return np.arange(n, dtype=np.int64) % 4
    return rng.integers(0, 4, size=n)


def _random_loss(a: np.ndarray, b: np.ndarray, eta: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if eta >= 1.0:
        return a, b
    keep = rng.random((2, len(a))) < eta
    return np.where(keep[0], a, 0), np.where(keep[1], b, 0)


def _strategy_outcomes(lam: np.ndarray, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = _STRATEGY_TABLE[lam]
    a = np.where(x == 1, rows[:, 1], rows[:, 0])
    b = np.where(z == 1, rows[:, 3], rows[:, 2])
    return a, b


def generate(cfg: GeneratorConfig) -> Dataset:
    """Run one generator and return its trials as a labelled :class:`Dataset`."""
    rng = np.random.default_rng(cfg.seed)
    ctx = _schedule(cfg, rng)
    n = len(ctx)
    x, z = ctx >> 1, ctx & 1

    if cfg.model == "lhv-deterministic":
        lam = np.full(n, cfg.strategy, dtype=np.int64)
        a, b = _strategy_outcomes(lam, x, z)
        a, b = _random_loss(a, b, cfg.eta, rng)

    elif cfg.model == "lhv-mixture":
        lam = rng.choice(16, size=n, p=cfg.mixture_weights())
        a, b = _strategy_outcomes(lam, x, z)
        a, b = _random_loss(a, b, cfg.eta, rng)

    elif cfg.model == "lhv-detection":
        angle = rng.uniform(0.0, 2.0 * math.pi, size=n)
        ca = np.cos(angle - np.take(cfg.angles_a, x))
        cb = np.cos(angle - np.take(cfg.angles_b, z))
        a = np.where(ca >= 0, 1, -1)
        b = np.where(cb >= 0, 1, -1)
        a = np.where(np.abs(ca) >= 1.0 - cfg.eta, a, 0)
        b = np.where(np.abs(cb) >= 1.0 - cfg.eta, b, 0)

    elif cfg.model == "lhv-memory":
        # State 1 answers with the globally flipped strategy; flipping both
        # parties leaves every product ab unchanged, so the state sequence
        # only depends on the hidden strategy draws and the click pattern.
        lam = rng.choice(16, size=n, p=cfg.mixture_weights())
        a, b = _strategy_outcomes(lam, x, z)
        a, b = _random_loss(a, b, cfg.eta, rng)
        anti = (a * b == -1).astype(np.int64)
        csum = np.concatenate(([0], np.cumsum(anti)))
        t = np.arange(n)
        window = csum[t] - csum[np.maximum(t - cfg.memory_order, 0)]
        sign = np.where(window % 2 == 1, -1, 1)
        a, b = a * sign, b * sign

    elif cfg.model == "lhv-communication":
        lam = rng.choice(16, size=n, p=cfg.mixture_weights())
        a, b = _strategy_outcomes(lam, x, z)
        signal = rng.random(n) < cfg.kappa
        a_sig = rng.choice(np.array([-1, 1]), size=n)
        b_sig = a_sig * np.where((x & z) == 1, -1, 1)
        a = np.where(signal, a_sig, a)
        b = np.where(signal, b_sig, b)
        a, b = _random_loss(a, b, cfg.eta, rng)

    elif cfg.model == "quantum-singlet":
        e = quantum_correlators(cfg.visibility, cfg.angles_a, cfg.angles_b)[ctx]
        prod = np.where(rng.random(n) < (1.0 + e) / 2.0, 1, -1)
        a = rng.choice(np.array([-1, 1]), size=n)
        b = prod * a
        a, b = _random_loss(a, b, cfg.eta, rng)

    else:  # pr-box
        a = rng.choice(np.array([-1, 1]), size=n)
        b = a * np.where((x & z) == 1, -1, 1)
        a, b = _random_loss(a, b, cfg.eta, rng)

    return Dataset(
        trial=np.arange(n, dtype=np.int64), x=x, z=z, a=a, b=b,
        label=cfg.label, metadata={"config": cfg.to_dict(), "seed": cfg.seed, "label": cfg.label},
    )


def exact_correlator_dataset(correlators, trials_per_context: int, label: str | None = None) -> Dataset:
    """Deterministic fully-efficient dataset whose empirical correlators are exact.

    Each context gets ``round((1 + E) / 2 * n)`` agreeing pairs; the request
    is rejected when E*n does not land on that grid.
    """
    corr = [float(c) for c in correlators]
    if len(corr) != 4:
        raise ValueError("need four correlators in context order 00, 01, 10, 11")
    n = trials_per_context
    agree_counts = []
    for e in corr:
        if not -1.0 <= e <= 1.0:
            raise ValueError(f"correlator {e} outside [-1, 1]")
        k = round((1.0 + e) / 2.0 * n)
        if not math.isclose((2 * k - n) / n, e, abs_tol=1e-12):
            raise ValueError(f"correlator {e} not representable with {n} trials per context")
        agree_counts.append(k)
    rows = []
    seen = [0, 0, 0, 0]
    for t in range(4 * n):
        c = t % 4
        j = seen[c]
        seen[c] += 1
        a = 1 if j % 2 == 0 else -1
        b = a if j < agree_counts[c] else -a
        rows.append((c >> 1, c & 1, a, b))
    arr = np.array(rows, dtype=np.int64)
    return Dataset(np.arange(4 * n), arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], label=label,
                   metadata={"correlators": corr})
