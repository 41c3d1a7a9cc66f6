import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tara.conformal import calibrate, fit_lhv_model
from tara.datagen import GeneratorConfig, exact_correlator_dataset, generate
from tara.dataio import read_config
from tara.experiments import ROLE_TRAIN, build_calibration, dataset_features, derive_rng, family_datasets
from tara.tara_k import (FEATURE_NAMES, FEATURE_SUBSETS, FeatureVector, batch_decision, detect_batch,
                         extract_features, fit_envelope, kolmogorov_critical, ks_threshold, ks_two_sample, ks_uniform)

GRID = 10_000


def _brute_uniform(p):
    # Data on the k/GRID lattice: the sup is attained at a lattice point,
    # either as F(t) - t or as t - F(t-).
    p = np.sort(np.asarray(p))
    t = np.arange(GRID + 1) / GRID
    f = np.searchsorted(p, t, side="right") / len(p)
    f_left = np.searchsorted(p, t, side="left") / len(p)
    return max(np.max(f - t), np.max(t - f_left))


def _brute_two_sample(r, s):
    t = np.arange(GRID + 1) / GRID
    fr = np.searchsorted(np.sort(r), t, side="right") / len(r)
    fs = np.searchsorted(np.sort(s), t, side="right") / len(s)
    return np.max(np.abs(fr - fs))


def _lattice(rng, size):
    return rng.integers(0, GRID + 1, size=size) / GRID


# -- KS statistics -------------------------------------------------------------

def test_ks_uniform_examples():
    assert ks_uniform([0.5]) == 0.5
    n = 9
    assert ks_uniform([i / (n + 1) for i in range(1, n + 1)]) == pytest.approx(1 / (n + 1))
    with pytest.raises(ValueError):
        ks_uniform([])


def test_constant_ones_sample_has_distance_one():
    # The empirical CDF is 0 on [0, 1), so t - F(t-) tends to 1 as t -> 1.
    # Only looking at the last order statistic would give 1/n, which
    # misses the left limit.
    from scipy.stats import kstest
    for n in (1, 4, 25):
        assert ks_uniform([1.0] * n) == 1.0
        assert kstest([1.0] * n, "uniform").statistic == pytest.approx(1.0)
        assert _brute_uniform([1.0] * n) == pytest.approx(1.0)


def test_ks_uniform_matches_scipy():
    from scipy.stats import kstest
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.random(rng.integers(1, 40))
        assert ks_uniform(p) == pytest.approx(kstest(p, "uniform").statistic, abs=1e-12)


def test_ks_oracles_on_random_lattice_instances():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = _lattice(rng, rng.integers(1, 51))
        b = _lattice(rng, rng.integers(1, 51))
        assert abs(ks_uniform(a) - _brute_uniform(a)) < 1e-9
        assert abs(ks_two_sample(a, b) - _brute_two_sample(a, b)) < 1e-9


def test_two_sample_examples():
    assert ks_two_sample([0.1, 0.4], [0.1, 0.4]) == 0.0
    assert ks_two_sample([0.1, 0.2], [0.5, 0.9]) == 1.0
    assert ks_two_sample([0.1, 0.5, 0.9], [0.2, 0.6]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        ks_two_sample([], [0.1])


def test_ks_threshold_examples():
    assert kolmogorov_critical(0.05) == pytest.approx(1.3581, abs=1e-4)
    assert kolmogorov_critical(0.01) == pytest.approx(1.6276, abs=1e-4)
    assert ks_threshold(100, 100) == pytest.approx(0.1921, abs=1e-4)
    assert ks_threshold(50, 50) == pytest.approx(kolmogorov_critical(0.05) * math.sqrt(2 / 50))
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            ks_threshold(10, 10, bad)


@given(st.floats(1e-6, 0.999), st.floats(1e-6, 0.999))
def test_critical_value_is_monotone_in_alpha(a, b):
    lo, hi = sorted((a, b))
    assert kolmogorov_critical(lo) >= kolmogorov_critical(hi)


# -- features ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def lhv_artifacts():
    return build_calibration(generate(GeneratorConfig("lhv-mixture", 6000, seed=11)), rng=derive_rng(1, 0))


def test_pr_box_features(lhv_artifacts):
    art = lhv_artifacts
    ds = generate(GeneratorConfig("pr-box", 100, seed=2))
    f = extract_features(ds, art.model, art.cal, rng=np.random.default_rng(0))
    assert f.abs_s == 4.0 and f.p_AB == 1.0 and f.p_empty == 0.0
    assert 0 <= f.tara_k <= 1
    assert set(f.as_dict()) == set(FEATURE_NAMES)


def test_feature_vector_rejects_nan():
    with pytest.raises(ValueError):
        FeatureVector(math.nan, 0, 0, 1, 0, 0.1, 4)


def test_feature_subsets():
    assert FEATURE_SUBSETS["full"] == FEATURE_NAMES
    assert "abs_s" not in FEATURE_SUBSETS["cp-only"]
    assert FEATURE_SUBSETS["click-only"] == ("p_A", "p_B", "p_AB", "p_empty")


def test_lhv_tara_k_below_threshold_most_seeds():
    fit = generate(GeneratorConfig("lhv-mixture", 2000, seed=5))
    model = fit_lhv_model(fit)
    cal = calibrate(model, generate(GeneratorConfig("lhv-mixture", 5000, seed=6)))
    below = 0
    for seed in range(50):
        ds = generate(GeneratorConfig("lhv-mixture", 250, seed=100 + seed))
        f = extract_features(ds, model, cal, rng=np.random.default_rng(seed))
        below += f.tara_k < kolmogorov_critical(0.05) / math.sqrt(len(ds))
    assert below >= 45


def test_hardware_like_tara_k_is_small(lhv_artifacts):
    # Trapped-ion-level correlators sit close to the LHV reference: order 1e-2.
    art = lhv_artifacts
    ion = exact_correlator_dataset((0.724, 0.704, 0.648, -0.640), 1000)
    f = extract_features(ion, art.model, art.cal, rng=np.random.default_rng(0))
    assert 0.0015 < f.tara_k < 0.17


# -- envelope ----------------------------------------------------------------------

def test_identical_features_are_singular():
    x = np.ones((100, 7))
    with pytest.raises(np.linalg.LinAlgError):
        fit_envelope(x)


def test_too_few_samples():
    with pytest.raises(ValueError, match="too few samples"):
        fit_envelope(np.random.default_rng(0).normal(size=(55, 7)))


def test_gaussian_center_recovered():
    rng = np.random.default_rng(2)
    mean = np.array([1.0, -2.0, 0.5, 3.0, 0.0, 10.0, -1.0])
    a = rng.normal(size=(7, 7)) * 0.3 + np.eye(7)
    x = rng.normal(size=(4000, 7)) @ a.T + mean
    env = fit_envelope(x)
    center_raw = env.center * env.scale + env.location
    se = x.std(axis=0) / math.sqrt(len(x))
    # The trimmed mean of a symmetric law is unbiased; its SE is a bit above the plain mean's.
    assert np.all(np.abs(center_raw - mean) < 3 * se * 1.3)


def test_threshold_is_calibration_quantile():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 7))
    env = fit_envelope(x, target_fpr=0.05)
    dist = env.score(x)
    assert env.threshold == pytest.approx(np.quantile(dist, 0.95), abs=1e-12)
    assert np.allclose(dist, env.calibration_distances)
    assert np.allclose(env.precision, env.precision.T)
    assert np.all(np.linalg.eigvalsh(env.precision) > 0)


def test_score_is_affine_invariant():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(400, 7)) * rng.uniform(0.5, 3, size=7)
    test = rng.normal(size=(50, 7)) * 2
    a = rng.normal(size=(7, 7)) + 3 * np.eye(7)
    b = rng.normal(size=7)
    e1 = fit_envelope(x)
    e2 = fit_envelope(x @ a.T + b)
    # The ridge is the only non-invariant step; its relative effect grows
    # with the conditioning of the map.
    tol = 10 * 1e-6 * np.linalg.cond(a) ** 2
    assert np.allclose(e1.score(test), e2.score(test @ a.T + b), rtol=tol)
    assert e1.threshold == pytest.approx(e2.threshold, rel=tol)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5))
def test_decision_is_monotone_in_tara_k(a, tau, d, thr, bump):
    before = batch_decision(a, tau, d, thr)
    after = batch_decision(a, tau, d + bump, thr)
    assert not (before == "Quantum" and after == "Classical")


# -- batch detection ---------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(lhv_artifacts):
    cfg = read_config("src/tara/configs/ablation_default.json", "ablation")
    train = family_datasets(cfg.lhv_families, 1, ROLE_TRAIN, cfg.n_train, cfg.trials_per_context)
    env = fit_envelope(dataset_features(train, lhv_artifacts, 0.1, 1, ROLE_TRAIN), 0.05)
    return lhv_artifacts, env


def _decide(trained, ds, seed):
    art, env = trained
    return detect_batch(env, art.reference_pvalues, ds, art.model, art.cal, rng=derive_rng(seed, 0))


def test_quantum_singlet_flagged(trained):
    hits = sum(_decide(trained, generate(GeneratorConfig("quantum-singlet", 500, seed=100 + s)), s).decision
               == "Quantum" for s in range(50))
    assert hits >= 48


def test_held_out_calibration_family_mostly_classical(trained):
    n = 100
    classical = sum(_decide(trained, generate(GeneratorConfig("lhv-mixture", 500, seed=500 + s)), s).decision
                    == "Classical" for s in range(n))
    assert classical / n >= 0.9 - 3 * math.sqrt(0.1 * 0.9 / n)


def test_hardware_correlators_flagged(trained):
    report = _decide(trained, exact_correlator_dataset((0.724, 0.704, 0.648, -0.640), 1000), 0)
    assert report.decision == "Quantum"
    assert report.fpr_bound == pytest.approx(0.10)
    d = report.as_dict()
    assert d["decision"] == "Quantum" and "feature.tara_k" in d
