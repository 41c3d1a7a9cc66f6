"""Batch detector: KS calibration statistics and a one-class elliptic envelope."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, fields

import numpy as np

from .chsh import DatasetLike, as_dataset, summarize
from .conformal import CalibrationSet, LhvConditionalModel, expected_set_size, mondrian_pvalues

FEATURE_NAMES = ("abs_s", "p_A", "p_B", "p_AB", "p_empty", "tara_k", "exp_set_size")

FEATURE_SUBSETS: dict[str, tuple[str, ...]] = {
    "full": FEATURE_NAMES,
    "s-only": ("abs_s",),
    "cp-only": tuple(n for n in FEATURE_NAMES if n != "abs_s"),
    "click-only": ("p_A", "p_B", "p_AB", "p_empty"),
}

REJECT_FRACTION = 0.10
REWEIGHT_ITERATIONS = 3
RIDGE_SCALE = 1e-6
MAD_TO_SD = 1.4826


def ks_uniform(pvals: Sequence[float]) -> float:
    """One-sample KS distance of the empirical CDF from Uniform(0, 1)."""
    p = np.sort(np.asarray(pvals, dtype=float))
    n = len(p)
    if n == 0:
        raise ValueError("ks_uniform needs at least one value")
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - p), np.max(p - (i - 1) / n)))


def ks_two_sample(ref: Sequence[float], test: Sequence[float]) -> float:
    """Exact sup of |F_ref - F_test| over the merged support."""
    r = np.sort(np.asarray(ref, dtype=float))
    t = np.sort(np.asarray(test, dtype=float))
    if len(r) == 0 or len(t) == 0:
        raise ValueError("ks_two_sample needs two non-empty samples")
    support = np.concatenate([r, t])
    f_r = np.searchsorted(r, support, side="right") / len(r)
    f_t = np.searchsorted(t, support, side="right") / len(t)
    return float(np.max(np.abs(f_r - f_t)))


def kolmogorov_critical(alpha: float) -> float:
    """Asymptotic Kolmogorov critical value c_alpha = sqrt(-ln(alpha/2)/2)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return math.sqrt(-math.log(alpha / 2.0) / 2.0)


def ks_threshold(n: int, m: int, alpha: float = 0.05) -> float:
    """Two-sample rejection threshold c_alpha * sqrt((n + m) / (n m))."""
    if n < 1 or m < 1:
        raise ValueError("sample sizes must be >= 1")
    return kolmogorov_critical(alpha) * math.sqrt((n + m) / (n * m))


@dataclass(frozen=True)
class FeatureVector:
    abs_s: float
    p_A: float
    p_B: float
    p_AB: float
    p_empty: float
    tara_k: float
    exp_set_size: float

    def __post_init__(self) -> None:
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ValueError("feature vector has non-finite components")

    def as_array(self, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def extract_features(data: DatasetLike, model: LhvConditionalModel, cal: CalibrationSet,
                     alpha: float = 0.1, rng: np.random.Generator | None = None,
                     pvalues: np.ndarray | None = None) -> FeatureVector:
    """Seven-component descriptor of a dataset.

    ``tara_k`` is the one-sample KS distance of the dataset's smoothed
    Mondrian p-values from uniform; pass precomputed ``pvalues`` to reuse
    them, otherwise ``rng`` drives the tie-breaking.
    """
    ds = as_dataset(data)
    summary = summarize(ds)
    if pvalues is None:
        if rng is None:
            raise ValueError("extract_features needs an rng or precomputed p-values")
        pvalues = mondrian_pvalues(model, cal, ds, smoothed=True, rng=rng)
    p_a, p_b, p_ab, p_empty = summary.click_rates
    return FeatureVector(
        abs_s=abs(summary.s),
        p_A=p_a, p_B=p_b, p_AB=p_ab, p_empty=p_empty,
        tara_k=ks_uniform(pvalues),
        exp_set_size=expected_set_size(ds, model, cal, alpha),
    )


def feature_matrix(features, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    """Stack FeatureVectors (or pass through an array) into shape (n, len(names))."""
    if isinstance(features, np.ndarray):
        return np.atleast_2d(np.asarray(features, dtype=float))
    return np.array([f.as_array(names) for f in features], dtype=float).reshape(-1, len(names))


@dataclass(frozen=True, eq=False)
class EnvelopeModel:
    """Fitted robust ellipse over standardized features.

    ``location`` / ``scale`` standardize raw features; ``center`` and
    ``precision`` live in the standardized space.  ``threshold`` is on the
    Mahalanobis distance (not its square).
    """

    feature_names: tuple[str, ...]
    location: np.ndarray
    scale: np.ndarray
    center: np.ndarray
    precision: np.ndarray
    threshold: float
    ridge: float
    target_fpr: float
    n_samples: int
    calibration_distances: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def __post_init__(self) -> None:
        d = len(self.feature_names)
        for name, shape in (("location", (d,)), ("scale", (d,)), ("center", (d,)), ("precision", (d, d))):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not np.allclose(self.precision, self.precision.T, atol=1e-10, rtol=1e-10):
            raise ValueError("precision matrix is not symmetric")
        if np.any(self.scale <= 0):
            raise ValueError("scale entries must be positive")
        arr = np.array(self.calibration_distances, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "calibration_distances", arr)

    def standardize(self, features) -> np.ndarray:
        return (feature_matrix(features, self.feature_names) - self.location) / self.scale

    def score(self, features) -> np.ndarray:
        """Mahalanobis distance of each row from the robust center."""
        diff = self.standardize(features) - self.center
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", diff, self.precision, diff), 0.0))


def robust_standardization(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column median and MAD scale (falls back to SD, then 1, when degenerate)."""
    loc = np.median(x, axis=0)
    scale = MAD_TO_SD * np.median(np.abs(x - loc), axis=0)
    sd = x.std(axis=0)
    scale = np.where(scale > 0, scale, sd)
    scale = np.where(scale > 0, scale, 1.0)
    return loc, scale


def _regularized_precision(cov: np.ndarray) -> tuple[np.ndarray, float]:
    d = cov.shape[0]
    trace = float(np.trace(cov))
    ridge = RIDGE_SCALE * trace / d
    reg = cov + ridge * np.eye(d)
    eig = np.linalg.eigvalsh(reg)
    if trace <= 0 or eig[0] <= 0 or eig[-1] / eig[0] > 1e15:
        raise np.linalg.LinAlgError("singular feature scatter: covariance not invertible after ridge")
    prec = np.linalg.inv(reg)
    return (prec + prec.T) / 2.0, ridge


def _distances(z: np.ndarray, center: np.ndarray, precision: np.ndarray) -> np.ndarray:
    diff = z - center
    return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", diff, precision, diff), 0.0))


def fit_envelope(features, target_fpr: float = 0.05,
                 feature_names: Sequence[str] = FEATURE_NAMES) -> EnvelopeModel:
    """Robust location/scatter by hard-rejection reweighting.

    Starting from the plain mean and covariance of the standardized
    features, each of three passes drops the 10% of points farthest in
    Mahalanobis distance and refits.  The threshold is the empirical
    ``1 - target_fpr`` quantile of the distances of all fitting points.
    """
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must lie in (0, 1)")
    names = tuple(feature_names)
    x = feature_matrix(features, names)
    n, d = x.shape
    if n < 8 * d:
        raise ValueError(f"too few samples for envelope: {n} < {8 * d} (8 per dimension)")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    loc, scale = robust_standardization(x)
    z = (x - loc) / scale

    keep = np.ones(n, dtype=bool)
    center = z.mean(axis=0)
    precision, ridge = _regularized_precision(np.atleast_2d(np.cov(z, rowvar=False)))
    for _ in range(REWEIGHT_ITERATIONS):
        dist = _distances(z, center, precision)
        keep = dist <= np.quantile(dist, 1.0 - REJECT_FRACTION)
        center = z[keep].mean(axis=0)
        precision, ridge = _regularized_precision(np.atleast_2d(np.cov(z[keep], rowvar=False)))

    dist = _distances(z, center, precision)
    tau = float(np.quantile(dist, 1.0 - target_fpr))
    return EnvelopeModel(names, loc, scale, center, precision, tau, ridge, target_fpr, n, dist)


@dataclass(frozen=True)
class BatchReport:
    decision: str
    anomaly_score: float
    envelope_threshold: float
    tara_k: float
    ks_threshold: float
    envelope_fpr: float
    ks_alpha: float
    n_reference: int
    n_test: int
    features: FeatureVector

    @property
    def fpr_bound(self) -> float:
        """Bonferroni bound on the false-positive rate of the OR rule."""
        return min(1.0, self.envelope_fpr + self.ks_alpha)

    @property
    def envelope_fired(self) -> bool:
        return self.anomaly_score > self.envelope_threshold

    @property
    def ks_fired(self) -> bool:
        return self.tara_k > self.ks_threshold

    def as_dict(self) -> dict[str, object]:
        out: dict[str, object] = {
            "decision": self.decision,
            "anomaly_score": self.anomaly_score,
            "envelope_threshold": self.envelope_threshold,
            "envelope_fired": self.envelope_fired,
            "tara_k_two_sample": self.tara_k,
            "ks_threshold": self.ks_threshold,
            "ks_fired": self.ks_fired,
            "envelope_fpr": self.envelope_fpr,
            "ks_alpha": self.ks_alpha,
            "fpr_bound": self.fpr_bound,
            "n_reference": self.n_reference,
            "n_test": self.n_test,
        }
        out.update({f"feature.{k}": v for k, v in self.features.as_dict().items()})
        return out


def batch_decision(anomaly_score: float, envelope_threshold: float, ks_stat: float, ks_thr: float) -> str:
    """OR rule: Quantum when either the envelope or the two-sample KS branch fires."""
    return "Quantum" if anomaly_score > envelope_threshold or ks_stat > ks_thr else "Classical"


def detect_batch(envelope: EnvelopeModel, reference_pvalues: Sequence[float], data: DatasetLike,
                 model: LhvConditionalModel, cal: CalibrationSet, *, ks_alpha: float = 0.05,
                 alpha: float = 0.1, rng: np.random.Generator) -> BatchReport:
    """Quantum iff the envelope flags the features or the two-sample KS rejects.

    ``reference_pvalues`` are smoothed p-values of held-out classical trials
    against the same calibration set.
    """
    ds = as_dataset(data)
    pvals = mondrian_pvalues(model, cal, ds, smoothed=True, rng=rng)
    feats = extract_features(ds, model, cal, alpha=alpha, pvalues=pvals)
    a = float(envelope.score(feats.as_array(envelope.feature_names)[None, :])[0])
    d_two = ks_two_sample(reference_pvalues, pvals)
    thr = ks_threshold(len(reference_pvalues), len(pvals), ks_alpha)
    return BatchReport(
        decision=batch_decision(a, envelope.threshold, d_two, thr),
        anomaly_score=a,
        envelope_threshold=envelope.threshold,
        tara_k=d_two,
        ks_threshold=thr,
        envelope_fpr=envelope.target_fpr,
        ks_alpha=ks_alpha,
        n_reference=len(reference_pvalues),
        n_test=len(pvals),
        features=feats,
    )
