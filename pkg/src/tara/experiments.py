"""Experiment harnesses: ROC ablation, calibration leakage, hardware reports.

Every random quantity is derived from ``(config.seed, role, index)`` through
:class:`numpy.random.SeedSequence`, so a cell's result does not depend on
the order in which cells are evaluated.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.stats import rankdata

from .chsh import (CONTEXTS, Dataset, chsh_s, chsh_standard_error, classical_margin, classify_regime,
                   summarize)
from .config import AblationConfig, FamilySpec, LeakageConfig
from .conformal import (CalibrationSet, LhvConditionalModel, OnlineMondrian, calibrate, fit_lhv_model,
                        mondrian_pvalues)
from .datagen import generate
from .tara_k import (FEATURE_NAMES, FEATURE_SUBSETS, BatchReport, EnvelopeModel, FeatureVector, detect_batch,
                     extract_features, fit_envelope, ks_uniform)
from .tara_m import StreamReport, detect_stream

FPR_GRID = (0.01, 0.05)
QUANTUM_LABELS = {"quantum", "q", "1", "true"}
CLASSICAL_LABELS = {"classical", "c", "0", "false"}

# Role codes keep seed streams of different experiment parts disjoint.
ROLE_REFERENCE, ROLE_TRAIN, ROLE_TEST_C, ROLE_TEST_Q, ROLE_PVALUES, ROLE_SHUFFLE = range(6)
ROLE_CAL_SAME, ROLE_CAL_CROSS, ROLE_LEAK_Q, ROLE_LEAK_L = range(6, 10)


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(2, dtype=np.uint32).view(np.uint64)[0])


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _binary_labels(labels: Sequence[Any]) -> np.ndarray:
    out = np.empty(len(labels), dtype=bool)
    for i, lab in enumerate(labels):
        key = str(lab).strip().lower() if not isinstance(lab, (bool, np.bool_)) else str(bool(lab)).lower()
        if key in QUANTUM_LABELS:
            out[i] = True
        elif key in CLASSICAL_LABELS:
            out[i] = False
        else:
            raise ValueError(f"unrecognised label {lab!r}")
    return out


@dataclass(frozen=True)
class RocResult:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    tpr_at_fpr: dict[float, float]
    n_positive: int
    n_negative: int

    @property
    def auc_se(self) -> float:
        return auc_standard_error(self.auc, self.n_positive, self.n_negative)


def auc_rank(scores: Sequence[float], labels: Sequence[Any]) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=float)
    y = _binary_labels(labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_standard_error(auc: float, n_pos: int, n_neg: int) -> float:
    """Hanley-McNeil standard error of an AUC estimate."""
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc**2 / (1.0 + auc)
    var = (auc * (1 - auc) + (n_pos - 1) * (q1 - auc**2) + (n_neg - 1) * (q2 - auc**2)) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))


def roc(scores: Sequence[float], labels: Sequence[Any]) -> RocResult:
    """Exact empirical ROC; higher scores mean "more quantum".

    The sweep lowers the threshold through every distinct score, starting
    from (0, 0).  TPR at a target FPR is read at the lowest threshold whose
    FPR does not exceed the target.
    """
    s = np.asarray(scores, dtype=float)
    y = _binary_labels(labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = np.cumsum(~y_sorted)[last_of_group]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    at = {}
    for target in FPR_GRID:
        ok = fpr <= target + 1e-12
        at[target] = float(tpr[ok].max())
    return RocResult(thresholds, fpr, tpr, auc_rank(s, y), at, n_pos, n_neg)


def auc_trapezoid(fpr: np.ndarray, tpr: np.ndarray) -> float:
    x, y = np.asarray(fpr, dtype=float), np.asarray(tpr, dtype=float)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    """(mean_a - mean_b) / pooled SD with n-1 weighting."""
    x, y = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("each sample needs at least two values")
    pooled = ((len(x) - 1) * x.var(ddof=1) + (len(y) - 1) * y.var(ddof=1)) / (len(x) + len(y) - 2)
    if pooled <= 0:
        raise ValueError("zero pooled variance")
    return float((x.mean() - y.mean()) / math.sqrt(pooled))


# -- calibration artefacts ------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConformalArtifacts:
    model: LhvConditionalModel
    cal: CalibrationSet
    reference_pvalues: np.ndarray


def build_calibration(data: Dataset, pseudo_count: float = 1.0,
                      rng: np.random.Generator | None = None) -> ConformalArtifacts:
    """Three-way split of a classical dataset by trial order.

    The first third fits the outcome-pair model, the second provides the
    calibration scores and the last third yields held-out reference
    p-values for the two-sample KS branch.
    """
    n = len(data)
    if n < 12:
        raise ValueError("calibration dataset too small to split")
    # Cut on multiples of 4 so round-robin schedules keep every context in every part.
    third = (n // 3) // 4 * 4 or n // 3
    fit_part = data.subset(slice(0, third))
    cal_part = data.subset(slice(third, 2 * third))
    ref_part = data.subset(slice(2 * third, n))
    model = fit_lhv_model(fit_part, pseudo_count)
    cal = calibrate(model, cal_part)
    rng = rng or np.random.default_rng(0)
    ref = mondrian_pvalues(model, cal, ref_part, smoothed=True, rng=rng)
    return ConformalArtifacts(model, cal, ref)


def _sample_family(families: Sequence[FamilySpec], seed: int, role: int, index: int,
                   trials_per_context: int) -> Dataset:
    rng = derive_rng(seed, role, index, 0)
    shares = np.array([f.share for f in families], dtype=float)
    fam = families[int(rng.choice(len(families), p=shares / shares.sum()))]
    cfg = fam.sample(trials_per_context, derive_seed(seed, role, index, 1), rng)
    return generate(cfg)


def family_datasets(families: Sequence[FamilySpec], seed: int, role: int, count: int,
                    trials_per_context: int) -> list[Dataset]:
    return [_sample_family(families, seed, role, i, trials_per_context) for i in range(count)]


def dataset_features(datasets: Sequence[Dataset], art: ConformalArtifacts, alpha: float, seed: int,
                     role: int) -> list[FeatureVector]:
    return [
        extract_features(ds, art.model, art.cal, alpha=alpha, rng=derive_rng(seed, ROLE_PVALUES, role, i))
        for i, ds in enumerate(datasets)
    ]


# -- ablation -------------------------------------------------------------

@dataclass(frozen=True)
class AblationResult:
    results: dict[str, RocResult]
    envelopes: dict[str, EnvelopeModel]
    train_features: np.ndarray = field(repr=False)
    test_features: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)
    artifacts: ConformalArtifacts = field(repr=False)

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for name, r in self.results.items():
            out.append({
                "subset": name,
                "auc": r.auc,
                "auc_se": r.auc_se,
                "tpr_at_5pct_fpr": r.tpr_at_fpr[0.05],
                "tpr_at_1pct_fpr": r.tpr_at_fpr[0.01],
                "n_quantum": r.n_positive,
                "n_classical": r.n_negative,
            })
        return out


def ablation_study(config: AblationConfig, shuffle_labels: bool = False,
                   subsets: dict[str, Sequence[str]] | None = None) -> AblationResult:
    """Train one envelope per feature subset on classical features; score a mixed pool."""
    subsets = dict(FEATURE_SUBSETS if subsets is None else subsets)
    seed = config.seed
    ref_cfg = config.reference.sample(config.reference_trials_per_context,
                                      derive_seed(seed, ROLE_REFERENCE, 0, 1), derive_rng(seed, ROLE_REFERENCE))
    art = build_calibration(generate(ref_cfg), config.pseudo_count, derive_rng(seed, ROLE_REFERENCE, 1))

    tpc = config.trials_per_context
    train = family_datasets(config.lhv_families, seed, ROLE_TRAIN, config.n_train, tpc)
    test_c = family_datasets(config.lhv_families, seed, ROLE_TEST_C, config.n_test_classical, tpc)
    test_q = family_datasets(config.quantum_families, seed, ROLE_TEST_Q, config.n_test_quantum, tpc)

    f_train = dataset_features(train, art, config.alpha, seed, ROLE_TRAIN)
    f_test = (dataset_features(test_c, art, config.alpha, seed, ROLE_TEST_C)
              + dataset_features(test_q, art, config.alpha, seed, ROLE_TEST_Q))
    labels = np.array(["classical"] * len(test_c) + ["quantum"] * len(test_q))
    if shuffle_labels:
        labels = derive_rng(seed, ROLE_SHUFFLE).permutation(labels)

    x_train = np.array([f.as_array() for f in f_train])
    x_test = np.array([f.as_array() for f in f_test])
    results, envelopes = {}, {}
    for name, cols in subsets.items():
        idx = [FEATURE_NAMES.index(c) for c in cols]
        env = fit_envelope(x_train[:, idx], config.target_fpr, feature_names=cols)
        envelopes[name] = env
        results[name] = roc(env.score(x_test[:, idx]), labels)
    return AblationResult(results, envelopes, x_train, x_test, labels, art)


# -- leakage --------------------------------------------------------------

@dataclass(frozen=True)
class LeakageReport:
    auc_same: float
    auc_cross: float
    cohens_d_same: float
    cohens_d_cross: float
    tpr5_same: float
    tpr5_cross: float
    n_quantum: int
    n_classical: int
    score: str = "conformity = 1 - KS distance of smoothed p-values from uniform"

    @property
    def inflation(self) -> float:
        """AUC gap in percentage points."""
        return (self.auc_same - self.auc_cross) * 100.0

    @property
    def auc_same_se(self) -> float:
        return auc_standard_error(self.auc_same, self.n_quantum, self.n_classical)

    @property
    def auc_cross_se(self) -> float:
        return auc_standard_error(self.auc_cross, self.n_quantum, self.n_classical)

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"metric": "roc_auc", "same_dist": self.auc_same, "cross_dist": self.auc_cross,
             "inflation": self.inflation},
            {"metric": "cohens_d", "same_dist": self.cohens_d_same, "cross_dist": self.cohens_d_cross,
             "inflation": self.cohens_d_same - self.cohens_d_cross},
            {"metric": "tpr_at_5pct_fpr", "same_dist": self.tpr5_same, "cross_dist": self.tpr5_cross,
             "inflation": (self.tpr5_same - self.tpr5_cross) * 100.0},
        ]


def conformity_scores(datasets: Sequence[Dataset], model: LhvConditionalModel, cal: CalibrationSet,
                      seed: int, role: int) -> np.ndarray:
    """1 - KS distance from uniform of each dataset's smoothed p-values."""
    return np.array([
        1.0 - ks_uniform(mondrian_pvalues(model, cal, ds, smoothed=True, rng=derive_rng(seed, ROLE_PVALUES, role, i)))
        for i, ds in enumerate(datasets)
    ])


def leakage_experiment(config: LeakageConfig, shuffle_labels: bool = False) -> LeakageReport:
    """Score the same quantum-vs-classical pool under two calibration sources.

    Same-distribution: the conformity model is fitted and calibrated on an
    independent run of the test quantum family.  Cross-distribution: on a
    quantum family with different noise parameters.
    """
    seed = config.seed
    test_q = family_datasets([config.quantum], seed, ROLE_LEAK_Q, config.n_test, config.trials_per_context)
    test_l = family_datasets(config.classical, seed, ROLE_LEAK_L, config.n_test, config.trials_per_context)
    pool = test_q + test_l
    labels = np.array(["quantum"] * len(test_q) + ["classical"] * len(test_l))
    if shuffle_labels:
        labels = derive_rng(seed, ROLE_SHUFFLE).permutation(labels)
    is_q = labels == "quantum"

    def condition(family: FamilySpec, role: int) -> tuple[float, float, float]:
        cal_data = _sample_family([family], seed, role, 0, config.calibration_trials_per_context)
        half = (len(cal_data) // 2) // 4 * 4
        model = fit_lhv_model(cal_data.subset(slice(0, half)), config.pseudo_count)
        cal = calibrate(model, cal_data.subset(slice(half, len(cal_data))))
        scores = conformity_scores(pool, model, cal, seed, role)
        r = roc(scores, labels)
        return r.auc, cohens_d(scores[is_q], scores[~is_q]), r.tpr_at_fpr[0.05]

    auc_s, d_s, t_s = condition(config.quantum, ROLE_CAL_SAME)
    auc_c, d_c, t_c = condition(config.quantum_cross, ROLE_CAL_CROSS)
    return LeakageReport(auc_s, auc_c, d_s, d_c, t_s, t_c, int(is_q.sum()), int((~is_q).sum()))


# -- hardware report ------------------------------------------------------

@dataclass(frozen=True)
class HardwareReport:
    s: float
    s_se: float
    correlators: dict[tuple[int, int], float]
    n_trials: int
    click_rates: tuple[float, float, float, float]
    regime: str
    batch: BatchReport | None = None
    stream: StreamReport | None = None

    @property
    def margin(self) -> float:
        return classical_margin(self.s)

    def rows(self) -> list[tuple[str, str]]:
        rows = [("chsh_s", f"{self.s:.3f}"), ("chsh_s_se", f"{self.s_se:.3f}")]
        rows += [(f"e_{x}{z}", f"{self.correlators[(x, z)]:.3f}") for x, z in CONTEXTS]
        rows += [
            ("classical_margin_pct", f"{self.margin:+.1f}"),
            ("regime", self.regime),
            ("n_trials", str(self.n_trials)),
            ("p_A", f"{self.click_rates[0]:.4f}"),
            ("p_B", f"{self.click_rates[1]:.4f}"),
            ("p_AB", f"{self.click_rates[2]:.4f}"),
            ("p_empty", f"{self.click_rates[3]:.4f}"),
        ]
        if self.batch is not None:
            rows += [
                ("tara_k_decision", self.batch.decision),
                ("tara_k_uniform", f"{self.batch.features.tara_k:.4f}"),
                ("tara_k_two_sample", f"{self.batch.tara_k:.4f}"),
                ("anomaly_score", f"{self.batch.anomaly_score:.4f}"),
            ]
        if self.stream is not None:
            rows += [
                ("tara_m_decision", "Quantum" if self.stream.detected else "Classical"),
                ("tara_m_log_wealth", f"{self.stream.final_log_wealth:.4f}"),
                ("tara_m_stop_time", "none" if self.stream.stop_time is None else str(self.stream.stop_time)),
            ]
        return rows


def hardware_report(data: Dataset, artifacts: ConformalArtifacts | None = None,
                    envelope: EnvelopeModel | None = None, *, alpha: float = 0.05, lam: float = 0.2,
                    set_alpha: float = 0.1, seed: int = 0, stop_on_detection: bool = True) -> HardwareReport:
    """CHSH summary with margin over 2, plus detector verdicts when calibration is supplied.

    The stream detector stops at its first crossing by default, so the
    reported log-wealth is the wealth at the decision time.
    """
    summary = summarize(data)
    s = chsh_s(summary)
    batch = stream = None
    if artifacts is not None:
        if envelope is not None:
            batch = detect_batch(envelope, artifacts.reference_pvalues, data, artifacts.model, artifacts.cal,
                                 ks_alpha=alpha, alpha=set_alpha, rng=derive_rng(seed, 0))
        online = OnlineMondrian(artifacts.model, artifacts.cal, derive_rng(seed, 1))
        stream = detect_stream(online.stream(data), alpha=alpha, lam=lam, keep_trajectory=False,
                               stop_on_detection=stop_on_detection)
    return HardwareReport(
        s=s,
        s_se=chsh_standard_error(summary),
        correlators=dict(summary.e),
        n_trials=len(data),
        click_rates=summary.click_rates,
        regime=classify_regime(s),
        batch=batch,
        stream=stream,
    )
