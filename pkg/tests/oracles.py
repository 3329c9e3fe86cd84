"""Independent reference implementations used as test oracles.

Each one evaluates a quantity the slow, obvious way (enumeration, double
loops, dense densities) so it shares no code path with the library.
"""

import itertools

import numpy as np
from scipy.stats import multivariate_normal


def brute_force_viterbi(state_ll, log_self, log_fwd):
    """Best score over every monotone unit-step path from state 0 to S-1."""
    T, S = state_ll.shape
    best = -np.inf
    best_path = None
    for steps in itertools.product((0, 1), repeat=T - 1):
        if sum(steps) != S - 1:
            continue
        path = np.concatenate([[0], np.cumsum(steps)]).astype(int)
        score = state_ll[np.arange(T), path].sum()
        for t, step in enumerate(steps):
            score += log_fwd[path[t]] if step else log_self[path[t]]
        if score > best:
            best, best_path = score, path
    return best_path, best


def monotone_paths(n, m):
    """Every boundary-anchored path with steps (1,0), (0,1), (1,1)."""
    def extend(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            yield path
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                yield from extend(path + [(i + di, j + dj)])
    yield from extend([(0, 0)])


def brute_force_dtw(a, b):
    best = np.inf
    for path in monotone_paths(len(a), len(b)):
        cost = sum(np.linalg.norm(a[i] - b[j]) for i, j in path)
        best = min(best, cost)
    return best


def sweep_eer(tar, non):
    """O(n^2) threshold sweep with linear interpolation at the crossing."""
    thresholds = sorted(set(tar) | set(non)) + [np.inf]
    points = []
    for t in thresholds:
        miss = sum(1 for s in tar if s < t) / len(tar)
        fa = sum(1 for s in non if s >= t) / len(non)
        points.append((miss, fa))
    for k, (miss, fa) in enumerate(points):
        if miss >= fa:
            if k == 0 or miss == fa:
                return miss
            m0, f0 = points[k - 1]
            d0, d1 = m0 - f0, miss - fa
            alpha = -d0 / (d1 - d0)
            return m0 + alpha * (miss - m0)
    raise AssertionError("curves never cross")


def dense_posteriors(means, covariance, priors, w):
    dens = np.array([multivariate_normal.pdf(w, m, covariance) for m in means])
    joint = dens * priors
    return joint / joint.sum()


def exact_log_posterior(w, tv, ubm, X, gamma):
    """log p(w) + sum_t sum_c gamma_tc log N(x_t | m_c + T_c w, Sigma_c), up to constants."""
    Tc = tv.component_blocks()
    total = -0.5 * w @ w
    for t in range(X.shape[0]):
        for c in range(tv.num_components):
            mean = ubm.means[c] + Tc[c] @ w
            total += gamma[t, c] * (-0.5 * np.sum((X[t] - mean) ** 2 / tv.variances[c]))
    return total
