"""Comparison systems: GMM-UBM LLR (UV1), phrase HMM LLR (UV2), DTW (UV3).

All scores are oriented so that higher means "more likely the claimed
phrase".
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import AlignmentInfeasibleError, DimensionMismatchError, InsufficientDataError
from .frontend import as_frames
from .gmm import avg_loglik
from .hmm import viterbi_align

REJECT = float("-inf")


@dataclass(frozen=True)
class DtwResult:
    cost: float
    path_length: int
    path: tuple = ()

    @property
    def normalized_cost(self):
        return self.cost / self.path_length


def uv1_score(phrase_model, ubm, features):
    return avg_loglik(phrase_model, features) - avg_loglik(ubm, features)


def uv2_score(phrase_hmm, ubm, features):
    """Per-frame Viterbi log-likelihood minus per-frame UBM log-likelihood.

    Utterances too short to traverse the HMM get the -inf rejection score.
    """
    X = as_frames(features)
    try:
        path = viterbi_align(phrase_hmm, X)
    except AlignmentInfeasibleError:
        return REJECT
    return path.log_likelihood / X.shape[0] - avg_loglik(ubm, X)


def dtw_distance(a, b, keep_path=False):
    """Boundary-anchored DTW with steps (1,0), (0,1), (1,1).

    Local cost is the Euclidean distance between frames; the reported
    cost is the sum along the optimal path and is normalized by the
    number of cells on that path.  The DP runs over anti-diagonals.
    """
    A, B = as_frames(a), as_frames(b)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatchError("DTW inputs differ in feature dimension")
    n, m = A.shape[0], B.shape[0]
    dist = cdist(A, B)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # 0: diagonal, 1: from (i-1, j), 2: from (i, j-1)
    move = np.zeros((n, m), dtype=np.int8)
    for k in range(n + m - 1):
        i = np.arange(max(0, k - m + 1), min(k, n - 1) + 1)
        j = k - i
        cand = np.stack([acc[i, j], acc[i, j + 1], acc[i + 1, j]])
        best = np.argmin(cand, axis=0)
        move[i, j] = best
        acc[i + 1, j + 1] = dist[i, j] + cand[best, np.arange(i.size)]
    i, j = n - 1, m - 1
    path = [(i, j)]
    while (i, j) != (0, 0):
        step = move[i, j]
        if step == 0:
            i, j = i - 1, j - 1
        elif step == 1:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    path.reverse()
    return DtwResult(float(acc[n, m]), len(path), tuple(path) if keep_path else ())


def uv3_score(enrollment, test):
    """Negated minimum normalized DTW cost over the enrollment templates."""
    if len(enrollment) == 0:
        raise InsufficientDataError("UV3 needs at least one enrollment utterance")
    return -min(dtw_distance(e, test).normalized_cost for e in enrollment)


def fuse_scores(per_system_scores, dev_stats, weights=None):
    """Weighted sum of z-normalized system scores.

    Parameters
    ----------
    per_system_scores : list of score sequences, one per system
    dev_stats : list of (mean, std) per system, from development scores
    weights : optional sequence of per-system weights (default equal)
    """
    systems = [np.asarray(s, dtype=np.float64) for s in per_system_scores]
    if not systems:
        raise ValueError("no systems to fuse")
    length = systems[0].size
    if any(s.size != length for s in systems) or len(dev_stats) != len(systems):
        raise ValueError("score lists differ in length")
    if weights is None:
        weights = np.full(len(systems), 1.0 / len(systems))
    if len(weights) != len(systems):
        raise ValueError("one weight per system required")
    fused = np.zeros(length)
    for s, (mu, sd), wt in zip(systems, dev_stats, weights):
        if wt == 0:
            continue
        fused += wt * (s - mu) / sd
    return fused


def dev_statistics(scores):
    s = np.asarray(scores, dtype=np.float64)
    s = s[np.isfinite(s)]
    sd = s.std()
    return float(s.mean()), float(sd if sd > 0 else 1.0)
