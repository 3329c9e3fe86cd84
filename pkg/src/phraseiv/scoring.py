"""Phrase backends: Linear Gaussian Classifier and cosine scoring.

The LGC models each phrase as N(w | m_i, S) with one within-class
covariance S shared by all phrases.  The covariance can be estimated on
one labelled set (for instance, different phrases) and combined with
class means estimated on another, which is how it is meant to be used
when enrollment data per phrase is scarce.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from . import binio
from .errors import DimensionMismatchError, InsufficientDataError

logger = logging.getLogger(__name__)

LGC_MAGIC = b"PKLG"
COSINE_MAGIC = b"PKCS"
COV_EPSILON = 1e-6
MIN_FORCED_SHRINKAGE = 0.1
LOG_2PI = np.log(2.0 * np.pi)

NORMALIZATIONS = ("none", "max-norm", "posterior", "log-posterior")


@dataclass(frozen=True, eq=False)
class ScoreVector:
    values: np.ndarray
    normalization: str = "none"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).reshape(-1))

    def __len__(self):
        return self.values.size

    def __getitem__(self, i):
        return self.values[i]


@dataclass(frozen=True, eq=False)
class WithinClassEstimate:
    labels: tuple
    means: np.ndarray        # (K, R)
    counts: np.ndarray       # (K,)
    covariance: np.ndarray   # (R, R), regularized
    shrinkage: float


@dataclass(frozen=True, eq=False)
class LgcModel:
    labels: tuple
    means: np.ndarray
    covariance: np.ndarray
    priors: np.ndarray = None
    counts: np.ndarray = None

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        K, R = means.shape
        if cov.shape != (R, R):
            raise DimensionMismatchError("covariance does not match i-vector dimension")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        priors = (np.full(K, 1.0 / K) if self.priors is None
                  else np.asarray(self.priors, dtype=np.float64).reshape(-1))
        if priors.size != K or np.any(priors <= 0):
            raise ValueError("priors must be positive, one per class")
        if abs(priors.sum() - 1.0) > 1e-12:
            priors = priors / priors.sum()
        counts = (np.zeros(K) if self.counts is None
                  else np.asarray(self.counts, dtype=np.float64).reshape(-1))
        try:
            chol = cho_factor(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                "within-class covariance is not positive definite") from exc
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "_chol", chol)

    @property
    def num_classes(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def log_densities(self, w):
        """log N(w | m_i, S) for every class i."""
        diff = np.asarray(w, dtype=np.float64)[None, :] - self.means
        sol = cho_solve(self._chol, diff.T)
        maha = np.einsum("ik,ki->i", diff, sol)
        logdet = 2.0 * np.log(np.diag(self._chol[0])).sum()
        return -0.5 * (maha + logdet + self.dim * LOG_2PI)


@dataclass(frozen=True, eq=False)
class CosineModel:
    labels: tuple
    means: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if np.any(np.linalg.norm(means, axis=1) == 0):
            raise ValueError("cosine model has a zero-vector class mean")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "means", means)

    @property
    def num_classes(self):
        return self.means.shape[0]


# ---------------------------------------------------------------------------
# Estimation


def _group(labels, ivectors):
    X = np.stack([np.asarray(getattr(v, "w", v), dtype=np.float64) for v in ivectors])
    order = list(dict.fromkeys(labels))
    groups = {lab: [] for lab in order}
    for lab, row in zip(labels, X):
        groups[lab].append(row)
    return order, {lab: np.stack(rows) for lab, rows in groups.items()}


def class_means(labels, ivectors):
    order, groups = _group(labels, ivectors)
    means = np.stack([groups[lab].mean(axis=0) for lab in order])
    counts = np.array([groups[lab].shape[0] for lab in order], dtype=np.float64)
    return tuple(order), means, counts


def regularize_covariance(cov, shrinkage):
    """(1 - lam) S + lam diag(S) + eps tr(S)/R I, with eps = 1e-6.

    An all-zero scatter falls back to eps * I.
    """
    R = cov.shape[0]
    reg = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    scale = np.trace(cov) / R
    if scale <= 0:
        scale = 1.0
    reg = reg + COV_EPSILON * scale * np.eye(R)
    return 0.5 * (reg + reg.T)


def estimate_within_class_cov(labels, ivectors, shrinkage=0.0):
    """Class means and the average within-class covariance (divided by N).

    When there are fewer degrees of freedom (N - K) than dimensions, the
    scatter matrix is singular and a minimum shrinkage is forced.
    """
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    order, groups = _group(labels, ivectors)
    K = len(order)
    means = np.stack([groups[lab].mean(axis=0) for lab in order])
    counts = np.array([groups[lab].shape[0] for lab in order], dtype=np.float64)
    N = counts.sum()
    R = means.shape[1]
    scatter = np.zeros((R, R))
    for lab, mean in zip(order, means):
        d = groups[lab] - mean
        scatter += d.T @ d
    cov = scatter / N
    if N - K < R and 0 < N - K and shrinkage < MIN_FORCED_SHRINKAGE:
        logger.warning("within-class scatter has rank <= %d < %d; forcing shrinkage %.2f",
                       int(N - K), R, MIN_FORCED_SHRINKAGE)
        shrinkage = MIN_FORCED_SHRINKAGE
    return WithinClassEstimate(tuple(order), means, counts,
                               regularize_covariance(cov, shrinkage), shrinkage)


def enroll_lgc(labels, ivectors, covariance=None, shrinkage=0.0, priors=None):
    """LGC from enrollment i-vectors.

    With `covariance` given (e.g. estimated on other phrases), only the
    class means come from the enrollment data.
    """
    if covariance is None:
        est = estimate_within_class_cov(labels, ivectors, shrinkage)
        if len(est.labels) < 2:
            raise InsufficientDataError("LGC needs at least two classes")
        return LgcModel(est.labels, est.means, est.covariance, priors, est.counts)
    order, means, counts = class_means(labels, ivectors)
    return LgcModel(order, means, covariance, priors, counts)


def enroll_cosine(labels, ivectors):
    order, means, _ = class_means(labels, ivectors)
    return CosineModel(order, means)


# ---------------------------------------------------------------------------
# Scoring


def _vector(w):
    arr = np.asarray(getattr(w, "w", w), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("test i-vector is not finite")
    return arr


def lgc_log_posteriors(model, w):
    arr = _vector(w)
    if arr.size != model.dim:
        raise DimensionMismatchError(f"i-vector dim {arr.size} != model dim {model.dim}")
    if model.num_classes < 2:
        raise InsufficientDataError("posteriors need at least two classes")
    joint = model.log_densities(arr) + np.log(model.priors)
    return ScoreVector(joint - logsumexp(joint), "log-posterior")


def lgc_posteriors(model, w):
    """P(i | w) with Gaussian class likelihoods and the model priors."""
    return ScoreVector(np.exp(lgc_log_posteriors(model, w).values), "posterior")


def cosine_scores(model, w):
    arr = _vector(w)
    norm = np.linalg.norm(arr)
    if norm == 0:
        raise ValueError("cosine scoring of a zero test vector")
    if arr.size != model.means.shape[1]:
        raise DimensionMismatchError("i-vector dimension does not match cosine model")
    sims = model.means @ arr / (np.linalg.norm(model.means, axis=1) * norm)
    return ScoreVector(np.clip(sims, -1.0, 1.0), "none")


def max_norm(scores):
    """s_i - max_{j != i} s_j."""
    if scores.normalization != "none":
        raise ValueError("max-norm expects un-normalized scores")
    s = scores.values
    if s.size < 2:
        raise InsufficientDataError("max-norm needs at least two classes")
    order = np.argsort(-s, kind="stable")
    best, second = s[order[0]], s[order[1]]
    others = np.full(s.size, best)
    others[order[0]] = second
    return ScoreVector(s - others, "max-norm")


def classify(scores):
    """Index of the best score; ties go to the lowest index."""
    values = scores.values if isinstance(scores, ScoreVector) else np.asarray(scores)
    return int(np.argmax(values))


# ---------------------------------------------------------------------------
# Serialization


def write_lgc(model, fh):
    w = binio.Writer(fh, LGC_MAGIC)
    w.u32(model.num_classes, model.dim)
    for lab in model.labels:
        w.string(lab)
    w.array(model.priors)
    w.array(model.means)
    w.array(model.covariance)


def read_lgc(fh):
    r = binio.Reader(fh, LGC_MAGIC)
    K, R = r.u32(2)
    labels = tuple(r.string() for _ in range(K))
    priors = r.array((K,))
    means = r.array((K, R))
    cov = r.array((R, R))
    r.expect_eof()
    return LgcModel(labels, means, cov, priors)


def write_cosine(model, fh):
    w = binio.Writer(fh, COSINE_MAGIC)
    w.u32(model.num_classes, model.means.shape[1])
    for lab in model.labels:
        w.string(lab)
    w.array(model.means)


def read_cosine(fh):
    r = binio.Reader(fh, COSINE_MAGIC)
    K, R = r.u32(2)
    labels = tuple(r.string() for _ in range(K))
    means = r.array((K, R))
    r.expect_eof()
    return CosineModel(labels, means)


def save_backend(model, path):
    binio.save(write_lgc if isinstance(model, LgcModel) else write_cosine, model, path)


def load_backend(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        fh.seek(0)
        if magic == COSINE_MAGIC:
            return read_cosine(fh)
        return read_lgc(fh)
