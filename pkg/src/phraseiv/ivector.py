"""Sufficient statistics, total-variability training and i-vector extraction.

Notation: C components, F feature dims, R subspace rank.  T is stored
as a (C*F, R) matrix whose row block c maps the latent vector to the
mean offset of component c.  Stats are centered on the alignment
model's means, and the alignment model's diagonal covariances are used
as the (fixed) residual covariances.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import binio
from .errors import DimensionMismatchError, FileFormatError, InsufficientDataError
from .frontend import as_frames
from .gmm import frame_posteriors
from .hmm import viterbi_align, within_state_posteriors

logger = logging.getLogger(__name__)

STATS_MAGIC = b"PKST"
TV_MAGIC = b"PKTV"
IVEC_MAGIC = b"PKIV"
RIDGE = 1e-8
# utterances per E-step batch
BATCH = 256


@dataclass(frozen=True, eq=False)
class SufficientStats:
    zeroth: np.ndarray   # (C,)
    first: np.ndarray    # (C, F), centered

    def __post_init__(self):
        n = np.asarray(self.zeroth, dtype=np.float64).reshape(-1)
        f = np.atleast_2d(np.asarray(self.first, dtype=np.float64))
        if f.shape[0] != n.size:
            raise ValueError("zeroth/first order stats disagree on C")
        object.__setattr__(self, "zeroth", n)
        object.__setattr__(self, "first", f)

    @property
    def num_components(self):
        return self.zeroth.size

    @property
    def dim(self):
        return self.first.shape[1]

    @property
    def num_frames(self):
        return float(self.zeroth.sum())


@dataclass(frozen=True, eq=False)
class TotalVariabilityModel:
    T: np.ndarray           # (C*F, R)
    variances: np.ndarray   # (C, F)

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.T, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if T.shape[0] != v.size or T.shape[1] < 1:
            raise ValueError("T rows must equal C*F and rank must be >= 1")
        if not np.all(np.isfinite(T)):
            raise ValueError("T contains non-finite values")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "variances", v)

    @property
    def rank(self):
        return self.T.shape[1]

    @property
    def num_components(self):
        return self.variances.shape[0]

    @property
    def dim(self):
        return self.variances.shape[1]

    def component_blocks(self):
        return self.T.reshape(self.num_components, self.dim, self.rank)

    def precision_terms(self):
        """T_c' Sigma_c^-1 T_c for every component, (C, R, R)."""
        Tc = self.component_blocks()
        return np.einsum("cfr,cf,cfs->crs", Tc, 1.0 / self.variances, Tc)


@dataclass(frozen=True, eq=False)
class IVector:
    w: np.ndarray
    alignment: str = "gmm"
    feature: str = "mfcc"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("i-vector contains non-finite values")
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.w.size


# ---------------------------------------------------------------------------
# Statistics


def collect_stats_gmm(ubm, features):
    """N_c = sum_t gamma_tc, F_c = sum_t gamma_tc (x_t - m_c)."""
    X = as_frames(features)
    gamma = frame_posteriors(ubm, X)
    n = gamma.sum(axis=0)
    f = gamma.T @ X - n[:, None] * ubm.means
    return SufficientStats(n, f)


def collect_stats_hmm(mono, phrase_hmm, features):
    """Stats under Viterbi alignment to a phrase HMM.

    Each frame is distributed over the components of its aligned state by
    within-state responsibilities and accumulated into the inventory of
    `mono` (shared by every phrase HMM composed from it).
    """
    X = as_frames(features)
    if phrase_hmm.num_inventory != mono.num_components:
        raise DimensionMismatchError("phrase HMM does not share the monophone inventory")
    path = viterbi_align(phrase_hmm, X)
    post = within_state_posteriors(phrase_hmm, X, path)
    comps = phrase_hmm.state_components[path.states]          # (T, M)
    C = mono.num_components
    n = np.bincount(comps.ravel(), weights=post.ravel(), minlength=C)
    f = np.zeros((C, X.shape[1]))
    np.add.at(f, comps.ravel(), (post[:, :, None] * X[:, None, :]).reshape(-1, X.shape[1]))
    f -= n[:, None] * mono.means
    return SufficientStats(n, f)


# ---------------------------------------------------------------------------
# Posterior of the latent variable


def _check_layout(tv, stats):
    if stats.num_components != tv.num_components or stats.dim != tv.dim:
        raise DimensionMismatchError(
            f"stats layout ({stats.num_components}, {stats.dim}) does not match "
            f"model ({tv.num_components}, {tv.dim})")


def _posteriors(tv, N, Fw, TSiT):
    """Posterior precision factors and means for a batch of utterances.

    N: (U, C) counts; Fw: (U, C*F) first-order stats pre-multiplied by
    Sigma^-1.  Returns (L, w, b) with L (U, R, R).
    """
    R = tv.rank
    L = np.einsum("uc,crs->urs", N, TSiT)
    L[:, np.arange(R), np.arange(R)] += 1.0
    b = Fw @ tv.T
    w = np.linalg.solve(L, b[:, :, None])[:, :, 0]
    return L, w, b


def extract_ivector(tv, stats, alignment="gmm", feature="mfcc"):
    """MAP point estimate w = (I + T' S^-1 N T)^-1 T' S^-1 f."""
    _check_layout(tv, stats)
    N = stats.zeroth[None]
    Fw = (stats.first / tv.variances).reshape(1, -1)
    _, w, _ = _posteriors(tv, N, Fw, tv.precision_terms())
    return IVector(w[0], alignment, feature)


def extract_ivectors(tv, stats_list, alignment="gmm", feature="mfcc"):
    """Batched extraction; identical results to per-utterance calls."""
    TSiT = tv.precision_terms()
    out = []
    for start in range(0, len(stats_list), BATCH):
        chunk = stats_list[start:start + BATCH]
        for st in chunk:
            _check_layout(tv, st)
        N = np.stack([st.zeroth for st in chunk])
        Fw = np.stack([(st.first / tv.variances).ravel() for st in chunk])
        _, w, _ = _posteriors(tv, N, Fw, TSiT)
        out.extend(IVector(row, alignment, feature) for row in w)
    return out


def posterior_precision(tv, stats):
    _check_layout(tv, stats)
    L, _, _ = _posteriors(tv, stats.zeroth[None], np.zeros((1, tv.T.shape[0])),
                          tv.precision_terms())
    return L[0]


# ---------------------------------------------------------------------------
# EM training


def init_tv(variances, rank, seed):
    """Deterministic PCG64 normal entries scaled by 0.1 * sqrt(mean variance)."""
    rng = np.random.default_rng(seed)
    scale = 0.1 * np.sqrt(np.mean(variances))
    return TotalVariabilityModel(rng.standard_normal((variances.size, rank)) * scale,
                                 variances)


def em_step(tv, stats_list):
    """One EM iteration; returns (new_model, objective of the input model).

    The objective is the log marginal likelihood of the first-order stats
    up to terms independent of T:
    sum_u -0.5 log|L_u| + 0.5 b_u' L_u^-1 b_u.
    """
    C, F, R = tv.num_components, tv.dim, tv.rank
    TSiT = tv.precision_terms()
    A = np.zeros((C, R, R))
    Cacc = np.zeros((C * F, R))
    objective = 0.0
    inv_var = (1.0 / tv.variances).ravel()
    for start in range(0, len(stats_list), BATCH):
        chunk = stats_list[start:start + BATCH]
        N = np.stack([st.zeroth for st in chunk])
        Fc = np.stack([st.first.ravel() for st in chunk])
        L, w, b = _posteriors(tv, N, Fc * inv_var, TSiT)
        Linv = np.linalg.inv(L)
        _, logdet = np.linalg.slogdet(L)
        objective += float(-0.5 * logdet.sum() + 0.5 * np.einsum("ur,ur->", b, w))
        Eww = Linv + w[:, :, None] * w[:, None, :]
        A += np.einsum("uc,urs->crs", N, Eww)
        Cacc += Fc.T @ w
    T_new = tv.component_blocks().copy()
    Cb = Cacc.reshape(C, F, R)
    for c in range(C):
        if not np.any(A[c]):
            continue
        try:
            factor = cho_factor(A[c])
        except np.linalg.LinAlgError:
            logger.warning("singular normal equations for component %d; ridge %g", c, RIDGE)
            factor = cho_factor(A[c] + RIDGE * np.eye(R))
        T_new[c] = cho_solve(factor, Cb[c].T).T
    return TotalVariabilityModel(T_new.reshape(C * F, R), tv.variances), objective


def tv_objective(tv, stats_list):
    return em_step(tv, stats_list)[1]


def train_tv(stats, rank, iters=10, seed=0, variances=None, history=None):
    """Train the total-variability subspace by EM.

    Parameters
    ----------
    stats : list of SufficientStats
    rank : int
    iters : int
    seed : int
        Seeds the PCG64 initialization of T.
    variances : (C, F) array
        Diagonal covariances of the alignment model (required).
    history : list, optional
        Receives the objective evaluated at each iteration's input model.
    """
    if variances is None:
        raise ValueError("alignment-model variances are required")
    variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
    if len(stats) < rank:
        raise InsufficientDataError(f"{len(stats)} utterances for rank {rank}")
    for st in stats:
        if st.first.shape != variances.shape:
            raise DimensionMismatchError("stats do not share the model layout")
    tv = init_tv(variances, rank, seed)
    for _ in range(iters):
        tv, obj = em_step(tv, stats)
        if history is not None:
            history.append(obj)
    return tv


# ---------------------------------------------------------------------------
# Serialization


def write_stats(stats, fh):
    w = binio.Writer(fh, STATS_MAGIC)
    w.u32(stats.num_components, stats.dim)
    w.array(stats.zeroth)
    w.array(stats.first)


def read_stats(fh):
    r = binio.Reader(fh, STATS_MAGIC)
    C, F = r.u32(2)
    n = r.array((C,))
    f = r.array((C, F))
    r.expect_eof()
    return SufficientStats(n, f)


def write_tv(tv, fh):
    w = binio.Writer(fh, TV_MAGIC)
    w.u32(tv.num_components, tv.dim, tv.rank)
    w.array(tv.variances)
    w.array(tv.T)


def read_tv(fh):
    r = binio.Reader(fh, TV_MAGIC)
    C, F, R = r.u32(3)
    variances = r.array((C, F))
    T = r.array((C * F, R))
    r.expect_eof()
    return TotalVariabilityModel(T, variances)


def write_ivectors(archive, fh):
    """`archive` maps utterance id -> IVector (or array), written in order."""
    items = list(archive.items())
    R = len(np.asarray(getattr(items[0][1], "w", items[0][1]))) if items else 0
    w = binio.Writer(fh, IVEC_MAGIC)
    w.u32(R, len(items))
    for key, vec in items:
        arr = np.asarray(getattr(vec, "w", vec), dtype=np.float64)
        if arr.size != R:
            raise DimensionMismatchError("i-vectors in one archive must share R")
        w.string(key)
        w.array(arr)


def read_ivectors(fh):
    r = binio.Reader(fh, IVEC_MAGIC)
    R, count = r.u32(2)
    out = {}
    for _ in range(count):
        key = r.string()
        if key in out:
            raise FileFormatError(f"duplicate id {key!r} in i-vector archive")
        out[key] = IVector(r.array((R,)))
    r.expect_eof()
    return out


def save_stats(stats, path):
    binio.save(write_stats, stats, path)


def load_stats(path):
    return binio.load(read_stats, path)


def save_tv(tv, path):
    binio.save(write_tv, tv, path)


def load_tv(path):
    return binio.load(read_tv, path)


def save_ivectors(archive, path):
    binio.save(write_ivectors, archive, path)


def load_ivectors(path):
    return binio.load(read_ivectors, path)
