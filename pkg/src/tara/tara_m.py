"""Streaming detector: betting martingale over conformal p-values.

Wealth evolves as ``M_t = M_{t-1} * (1 + beta_t * (p_t - 1/2))`` and is kept
in log space.  Under the null (uniform p-values) any *predictable* bet keeps
``E[M_t] = 1``, so Ville's inequality bounds the chance of ever reaching
``1/alpha`` by ``alpha``.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass, field, replace

import numpy as np

STRATEGIES = ("sign", "mixture", "paper-kelly-unsafe")
UNSAFE_STRATEGY = "paper-kelly-unsafe"
UNSAFE_DISCLAIMER = (
    "WARNING: paper-kelly-unsafe bets on sign(p_t - 1/2) after seeing p_t; every factor is >= 1, "
    "the process is not a supermartingale and the alpha guarantee does not hold"
)
_MAX_LOG = math.log(np.finfo(float).max)


def _mixture_bets(lam: float) -> tuple[float, ...]:
    return (-lam, -lam / 2.0, lam / 2.0, lam)


@dataclass(frozen=True)
class MartingaleState:
    """Immutable snapshot of the wealth process.

    ``bet_state`` is ``(sum of past p,)`` for the sign strategy and the
    component log-wealths for the mixture strategy.
    """

    t: int = 0
    log_wealth: float = 0.0
    lam: float = 0.2
    bet_state: tuple[float, ...] = (0.0,)
    threshold: float = 20.0
    strategy: str = "sign"

    def __post_init__(self) -> None:
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must lie in (0, 1)")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def wealth(self) -> float:
        """exp(log_wealth), saturating at the largest finite float."""
        if self.log_wealth >= _MAX_LOG:
            return float(np.finfo(float).max)
        return math.exp(self.log_wealth)

    @property
    def detected(self) -> bool:
        return self.log_wealth >= math.log(self.threshold)


def initial_state(alpha: float = 0.05, lam: float = 0.2, strategy: str = "sign") -> MartingaleState:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    bet_state = (0.0,) * 4 if strategy == "mixture" else (0.0,)
    return MartingaleState(lam=lam, threshold=1.0 / alpha, strategy=strategy, bet_state=bet_state)


def next_bet(state: MartingaleState) -> float:
    """Bet for the next step, from information strictly before it.

    sign: ``lam * sign(mean of past p - 1/2)``, ``+lam`` with no history and
    0 on an exact tie.  mixture: wealth-weighted average of the fixed bets
    ``(-lam, -lam/2, lam/2, lam)``, which reproduces the averaged wealth.
    """
    if state.strategy == UNSAFE_STRATEGY:
        raise ValueError("paper-kelly-unsafe bets depend on the current p-value; use update()")
    if state.strategy == "mixture":
        logs = np.array(state.bet_state)
        w = np.exp(logs - logs.max())
        return float(np.dot(w, _mixture_bets(state.lam)) / w.sum())
    if state.t == 0:
        return state.lam
    diff = state.bet_state[0] / state.t - 0.5
    if diff == 0.0:
        return 0.0
    return math.copysign(state.lam, diff)


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p-value {p} outside (0, 1]")
    return p


def update(state: MartingaleState, p: float) -> MartingaleState:
    return step(state, p)[0]


def step(state: MartingaleState, p: float) -> tuple[MartingaleState, float]:
    """Consume one p-value; returns the new state and the bet that was used."""
    p = _check_p(p)
    if state.strategy == UNSAFE_STRATEGY:
        diff = p - 0.5
        beta = 0.0 if diff == 0 else math.copysign(state.lam, diff)
    else:
        beta = next_bet(state)
    log_wealth = state.log_wealth + math.log1p(beta * (p - 0.5))
    if state.strategy == "mixture":
        bet_state = tuple(
            lw + math.log1p(b * (p - 0.5)) for lw, b in zip(state.bet_state, _mixture_bets(state.lam))
        )
        # Keep the reported log-wealth exactly the log of the averaged wealth.
        logs = np.array(bet_state)
        top = logs.max()
        log_wealth = float(top + math.log(np.exp(logs - top).mean()))
    else:
        bet_state = (state.bet_state[0] + p,)
    return replace(state, t=state.t + 1, log_wealth=log_wealth, bet_state=bet_state), beta


@dataclass(frozen=True)
class StreamReport:
    detected: bool
    stop_time: int | None
    final_log_wealth: float
    steps: int
    alpha: float
    lam: float
    strategy: str
    trajectory: list[tuple[int, float, float, float]] = field(repr=False, default_factory=list)

    @property
    def valid(self) -> bool:
        return self.strategy != UNSAFE_STRATEGY


def detect_stream(pvalues: Iterable[float], alpha: float = 0.05, lam: float = 0.2,
                  strategy: str = "sign", keep_trajectory: bool = True,
                  stop_on_detection: bool = True) -> StreamReport:
    """Run the wealth process until it first reaches 1/alpha or the stream ends.

    With ``stop_on_detection=False`` the whole stream is consumed and
    ``stop_time`` is the first crossing.  Trajectory rows are
    ``(t, p, beta, log_wealth)``.
    """
    state = initial_state(alpha, lam, strategy)
    traj: list[tuple[int, float, float, float]] = []
    first: int | None = None
    for p in pvalues:
        state, beta = step(state, p)
        if keep_trajectory:
            traj.append((state.t, float(p), beta, state.log_wealth))
        if first is None and state.detected:
            first = state.t
            if stop_on_detection:
                break
    return StreamReport(first is not None, first, state.log_wealth, state.t, alpha, lam, strategy, traj)


def log_wealth_paths(pvalues: np.ndarray, lam: float = 0.2, strategy: str = "sign") -> np.ndarray:
    """Vectorised log-wealth trajectories for a (runs, steps) array of p-values.

    Equivalent to repeated :func:`update` calls; used for Monte Carlo work.
    """
    p = np.atleast_2d(np.asarray(pvalues, dtype=float))
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("p-values must lie in (0, 1]")
    centred = p - 0.5
    if strategy == "sign":
        runs, steps = p.shape
        past_mean = np.zeros_like(p)
        past_mean[:, 1:] = np.cumsum(p, axis=1)[:, :-1] / np.arange(1, steps)
        beta = lam * np.sign(past_mean - 0.5)
        beta[:, 0] = lam
        return np.cumsum(np.log1p(beta * centred), axis=1)
    if strategy == "mixture":
        comps = np.stack([np.cumsum(np.log1p(b * centred), axis=1) for b in _mixture_bets(lam)])
        top = comps.max(axis=0)
        return top + np.log(np.exp(comps - top).mean(axis=0))
    if strategy == UNSAFE_STRATEGY:
        return np.cumsum(np.log1p(lam * np.abs(centred)), axis=1)
    raise ValueError(f"unknown strategy {strategy!r}")
