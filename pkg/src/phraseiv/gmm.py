"""Diagonal-covariance GMMs: EM training, relevance-MAP, posteriors."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import binio
from .errors import DimensionMismatchError, InsufficientDataError
from .frontend import as_frames

logger = logging.getLogger(__name__)

GMM_MAGIC = b"PKGM"
LOG_2PI = np.log(2.0 * np.pi)
VARIANCE_FLOOR_SCALE = 1e-4
SPLIT_SCALE = 0.1
# frames per chunk when accumulating statistics over large corpora
CHUNK = 32768


@dataclass(frozen=True, eq=False)
class DiagonalGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if m.shape != v.shape or m.shape[0] != w.size or w.size < 1:
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def num_components(self):
        return self.weights.size

    @property
    def dim(self):
        return self.means.shape[1]

    def with_means(self, means):
        return DiagonalGmm(self.weights, means, self.variances)

    def component_logpdf(self, X):
        """log N(x_t | m_c, diag(v_c)) for every frame/component pair, (T, C)."""
        return gaussian_logpdf(X, self.means, self.variances)

    def weighted_logpdf(self, X):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return self.component_logpdf(X) + logw


def gaussian_logpdf(X, means, variances):
    """Diagonal Gaussian log densities of frames X under C components."""
    prec = 1.0 / variances
    const = -0.5 * (means.shape[1] * LOG_2PI + np.log(variances).sum(axis=1)
                    + (means ** 2 * prec).sum(axis=1))
    return const + X @ (means * prec).T - 0.5 * (X ** 2) @ prec.T


def _validated(gmm, features):
    X = as_frames(features)
    if X.shape[1] != gmm.dim:
        raise DimensionMismatchError(
            f"feature dim {X.shape[1]} does not match model dim {gmm.dim}")
    return X


def frame_posteriors(gmm, features):
    """Per-frame component responsibilities (T, C), rows summing to 1."""
    X = _validated(gmm, features)
    lp = gmm.weighted_logpdf(X)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def frame_loglik(gmm, features):
    X = _validated(gmm, features)
    return logsumexp(gmm.weighted_logpdf(X), axis=1)


def avg_loglik(gmm, features):
    """Mean over frames of log p(x_t | gmm)."""
    return float(frame_loglik(gmm, features).mean())


# ---------------------------------------------------------------------------
# EM


def accumulate(gmm, X):
    """Zeroth, first and second order stats plus total log-likelihood.

    Chunked over frames; the per-chunk accumulators combine by addition,
    which is the map-reduce contract used for corpus-level training.
    """
    C, F = gmm.means.shape
    n = np.zeros(C)
    f = np.zeros((C, F))
    s = np.zeros((C, F))
    llk = 0.0
    for start in range(0, X.shape[0], CHUNK):
        x = X[start:start + CHUNK]
        lp = gmm.weighted_logpdf(x)
        norm = logsumexp(lp, axis=1, keepdims=True)
        gamma = np.exp(lp - norm)
        llk += float(norm.sum())
        n += gamma.sum(axis=0)
        f += gamma.T @ x
        s += gamma.T @ (x * x)
    return n, f, s, llk


def _m_step(n, f, s, var_floor, old):
    C = n.size
    weights = n / n.sum()
    means = old.means.copy()
    variances = old.variances.copy()
    live = n > 0
    means[live] = f[live] / n[live, None]
    variances[live] = s[live] / n[live, None] - means[live] ** 2
    variances = np.maximum(variances, var_floor)
    if not np.all(live):
        # dead components keep their old parameters with zero weight
        logger.debug("%d of %d components received no data", C - live.sum(), C)
    return DiagonalGmm(weights, means, variances)


def _split(gmm, count, rng, var_floor):
    """Split the `count` heaviest components along +-0.1 sigma."""
    order = np.argsort(-gmm.weights, kind="stable")[:count]
    weights = list(gmm.weights)
    means = list(gmm.means)
    variances = list(gmm.variances)
    for c in order:
        sign = rng.choice([-1.0, 1.0], size=gmm.dim)
        delta = SPLIT_SCALE * np.sqrt(gmm.variances[c]) * sign
        weights[c] = gmm.weights[c] / 2.0
        means[c] = gmm.means[c] + delta
        weights.append(gmm.weights[c] / 2.0)
        means.append(gmm.means[c] - delta)
        variances.append(gmm.variances[c])
    w = np.array(weights)
    return DiagonalGmm(w / w.sum(), np.array(means),
                       np.maximum(np.array(variances), var_floor))


def _resplit_empty(gmm, n, rng, min_count):
    """Replace near-empty components by splitting the heaviest one."""
    empty = np.flatnonzero(n < min_count)
    if empty.size == 0:
        return gmm, False
    weights = gmm.weights.copy()
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    for c in empty:
        heavy = int(np.argmax(weights))
        logger.info("component %d is empty; re-splitting component %d", c, heavy)
        sign = rng.choice([-1.0, 1.0], size=gmm.dim)
        delta = SPLIT_SCALE * np.sqrt(variances[heavy]) * sign
        half = weights[heavy] / 2.0
        weights[heavy] = weights[c] = half
        means[c] = means[heavy] - delta
        means[heavy] = means[heavy] + delta
        variances[c] = variances[heavy]
    return DiagonalGmm(weights / weights.sum(), means, variances), True


def global_gaussian(X, var_floor=None):
    mean = X.mean(axis=0)
    var = X.var(axis=0)
    if var_floor is None:
        var_floor = VARIANCE_FLOOR_SCALE * var
    var = np.maximum(var, np.maximum(var_floor, np.finfo(float).tiny))
    return DiagonalGmm(np.ones(1), mean[None], var[None])


def em_iterations(gmm, X, iters, var_floor, history=None, rng=None, tag=None):
    """Run `iters` EM iterations; the llk of each E-step goes to `history`."""
    rng = rng if rng is not None else np.random.default_rng(0)
    min_count = 1e-8 * X.shape[0]
    for it in range(iters):
        n, f, s, llk = accumulate(gmm, X)
        if history is not None:
            history.append((tag if tag is not None else gmm.num_components, it, llk))
        gmm = _m_step(n, f, s, var_floor, gmm)
        gmm, resplit = _resplit_empty(gmm, n, rng, min_count)
        if resplit and history is not None:
            history.append(("resplit", it, None))
    return gmm


def train_ubm(features, num_components, em_iters=10, seed=0, history=None,
              min_frames_per_component=10):
    """Train a diagonal GMM by binary splitting and EM.

    Parameters
    ----------
    features : list of FeatureMatrix or arrays
        Training utterances; frames are pooled.
    num_components : int
    em_iters : int
        EM iterations run after every split level.
    seed : int
        Seeds the split perturbation signs (PCG64).
    history : list, optional
        Receives ``(level, iteration, total_loglik)`` tuples.
    """
    X = np.vstack([as_frames(f) for f in features])
    if X.shape[0] < min_frames_per_component * num_components:
        raise InsufficientDataError(
            f"{X.shape[0]} frames is fewer than "
            f"{min_frames_per_component} x {num_components} components")
    var_floor = VARIANCE_FLOOR_SCALE * X.var(axis=0)
    var_floor = np.maximum(var_floor, np.finfo(float).tiny)
    rng = np.random.default_rng(seed)
    gmm = global_gaussian(X, var_floor)
    if num_components == 1:
        return em_iterations(gmm, X, em_iters, var_floor, history, rng)
    while gmm.num_components < num_components:
        count = min(gmm.num_components, num_components - gmm.num_components)
        gmm = _split(gmm, count, rng, var_floor)
        gmm = em_iterations(gmm, X, em_iters, var_floor, history, rng)
    return gmm


# ---------------------------------------------------------------------------
# MAP


def map_adapt_means(ubm, features, relevance_factor=16.0):
    """Relevance-MAP adaptation of the means; weights/variances untouched."""
    X = _validated(ubm, features)
    gamma = frame_posteriors(ubm, X)
    n = gamma.sum(axis=0)
    f = gamma.T @ X
    return ubm.with_means(map_means_from_stats(ubm.means, n, f, relevance_factor))


def map_means_from_stats(prior_means, n, f, relevance_factor):
    """(f_c + r m_c) / (n_c + r), leaving components with n_c + r == 0 alone."""
    denom = n + relevance_factor
    adapted = prior_means.copy()
    ok = denom > 0
    adapted[ok] = (f[ok] + relevance_factor * prior_means[ok]) / denom[ok, None]
    return adapted


# ---------------------------------------------------------------------------
# Serialization


def write_gmm(gmm, fh):
    w = binio.Writer(fh, GMM_MAGIC)
    w.u32(gmm.num_components, gmm.dim)
    w.array(gmm.weights)
    w.array(gmm.means)
    w.array(gmm.variances)


def read_gmm(fh):
    r = binio.Reader(fh, GMM_MAGIC)
    C, F = r.u32(2)
    weights = r.array((C,))
    means = r.array((C, F))
    variances = r.array((C, F))
    r.expect_eof()
    return DiagonalGmm(weights, means, variances)


def save_gmm(gmm, path):
    binio.save(write_gmm, gmm, path)


def load_gmm(path):
    return binio.load(read_gmm, path)
