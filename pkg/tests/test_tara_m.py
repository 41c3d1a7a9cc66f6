import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tara.tara_m import (UNSAFE_STRATEGY, MartingaleState, detect_stream, initial_state, log_wealth_paths,
                         next_bet, step, update)

unit_p = st.floats(min_value=1e-9, max_value=1.0)


def test_first_bet_is_plus_lambda():
    assert next_bet(initial_state(lam=0.3)) == 0.3


def test_sign_rule_follows_history_mean():
    state = MartingaleState(t=10, bet_state=(7.0,), lam=0.5)
    assert next_bet(state) == 0.5
    state = MartingaleState(t=10, bet_state=(3.0,), lam=0.5)
    assert next_bet(state) == -0.5


def test_exact_tie_means_no_bet():
    assert next_bet(MartingaleState(t=4, bet_state=(2.0,), lam=0.5)) == 0.0


def test_half_leaves_wealth_unchanged():
    s = initial_state(lam=0.9)
    for _ in range(5):
        s = update(s, 0.5)
    assert s.log_wealth == 0.0 and s.wealth == 1.0


def test_factor_arithmetic():
    s = MartingaleState(lam=0.5)
    s2, beta = step(s, 0.9)
    assert beta == 0.5
    assert s2.wealth == pytest.approx(1.2)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        update(initial_state(), 0.0)
    with pytest.raises(ValueError):
        update(initial_state(), 1.5)
    with pytest.raises(ValueError):
        initial_state(lam=1.0)
    with pytest.raises(ValueError):
        initial_state(alpha=0.0)
    with pytest.raises(ValueError):
        initial_state(strategy="greedy")


def test_unsafe_strategy_refuses_predictable_bet():
    with pytest.raises(ValueError):
        next_bet(initial_state(strategy=UNSAFE_STRATEGY))


def test_unsafe_strategy_never_loses():
    rng = np.random.default_rng(0)
    rep = detect_stream(1 - rng.random(500), strategy=UNSAFE_STRATEGY, stop_on_detection=False)
    lw = [row[3] for row in rep.trajectory]
    assert all(b >= a for a, b in zip(lw, lw[1:]))
    assert not rep.valid


@given(st.lists(unit_p, min_size=1, max_size=200), st.floats(0.01, 0.99),
       st.sampled_from(["sign", "mixture", UNSAFE_STRATEGY]))
def test_log_additivity_and_positivity(ps, lam, strategy):
    rep = detect_stream(ps, lam=lam, strategy=strategy, stop_on_detection=False)
    for t, p, beta, lw in rep.trajectory:
        assert abs(beta) <= lam + 1e-15
        assert math.isfinite(lw)
    if strategy != "mixture":
        total = math.fsum(math.log1p(beta * (p - 0.5)) for _, p, beta, _ in rep.trajectory)
        assert rep.final_log_wealth == pytest.approx(total, abs=1e-9)
    again = detect_stream(ps, lam=lam, strategy=strategy, stop_on_detection=False)
    assert again.trajectory == rep.trajectory


@given(st.lists(unit_p, min_size=1, max_size=100), st.floats(0.01, 0.99),
       st.sampled_from(["sign", "mixture", UNSAFE_STRATEGY]))
def test_vectorised_paths_match_sequential(ps, lam, strategy):
    rep = detect_stream(ps, lam=lam, strategy=strategy, stop_on_detection=False)
    paths = log_wealth_paths(np.array([ps]), lam=lam, strategy=strategy)
    assert np.allclose(paths[0], [row[3] for row in rep.trajectory], atol=1e-9)


def test_mixture_wealth_is_average_of_components():
    ps = [0.9, 0.8, 0.3, 0.95, 0.7]
    rep = detect_stream(ps, lam=0.4, strategy="mixture", stop_on_detection=False)
    comps = [np.prod([1 + b * (p - 0.5) for p in ps]) for b in (-0.4, -0.2, 0.2, 0.4)]
    assert math.exp(rep.final_log_wealth) == pytest.approx(np.mean(comps), rel=1e-12)


def test_wealth_saturates_instead_of_overflowing():
    s = MartingaleState(log_wealth=1e6)
    assert s.wealth == np.finfo(float).max


def test_stop_time_is_first_crossing():
    ps = [0.99] * 400
    stopped = detect_stream(ps, alpha=0.05)
    full = detect_stream(ps, alpha=0.05, stop_on_detection=False)
    assert stopped.detected and stopped.stop_time == full.stop_time == stopped.steps
    assert full.steps == 400
    crossing = next(t for t, _, _, lw in full.trajectory if lw >= math.log(20))
    assert crossing == stopped.stop_time


@pytest.mark.parametrize("strategy", ["sign", "mixture"])
def test_expected_wealth_is_one_under_uniform_null(strategy):
    rng = np.random.default_rng(1 if strategy == "sign" else 2)
    p = 1 - rng.random((4000, 1000))
    lw = log_wealth_paths(p, lam=0.2, strategy=strategy)
    for t in (100, 1000):
        w = np.exp(lw[:, t - 1])
        se = w.std(ddof=1) / math.sqrt(len(w))
        assert abs(w.mean() - 1) < 3 * se


@pytest.mark.parametrize("alpha", [0.05, 0.1])
def test_ville_false_alarm_bound(alpha):
    rng = np.random.default_rng(int(alpha * 100))
    runs = 1000
    lw = log_wealth_paths(1 - rng.random((runs, 2000)), lam=0.2)
    freq = np.mean(lw.max(axis=1) >= math.log(1 / alpha))
    assert freq <= alpha + 3 * math.sqrt(alpha * (1 - alpha) / runs)


def test_power_against_shifted_pvalues():
    rng = np.random.default_rng(3)
    p = rng.beta(1.3, 1.0, size=(50, 2000))
    lw = log_wealth_paths(p, lam=0.2)
    assert np.mean(lw.max(axis=1) >= math.log(20)) >= 0.95
