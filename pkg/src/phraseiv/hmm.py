"""Left-to-right HMMs over a shared Gaussian component inventory.

Every state owns a small GMM whose components are rows of one global
inventory (means/variances arrays).  Monophone sets allocate a disjoint
block of rows per state; phrase HMMs composed from them reference the
same rows, so statistics collected through any phrase HMM land in one
phrase-independent layout.

Topology is strictly left to right: each state has a self loop and a
single forward arc, no skips.  Paths start in state 0 and end in the
last state.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import binio
from .errors import (AlignmentInfeasibleError, DimensionMismatchError,
                     InsufficientDataError, UnknownPhoneError)
from .frontend import as_frames
from .gmm import (DiagonalGmm, VARIANCE_FLOOR_SCALE, _m_step, accumulate,
                  em_iterations, frame_posteriors, gaussian_logpdf,
                  global_gaussian, map_means_from_stats, _split)

logger = logging.getLogger(__name__)

HMM_MAGIC = b"PKHM"
TRANSITION_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class PhraseHmm:
    means: np.ndarray               # (C_inv, F) component inventory
    variances: np.ndarray           # (C_inv, F)
    state_components: np.ndarray    # (S, M) inventory row per state mixture
    state_weights: np.ndarray       # (S, M)
    self_loop: np.ndarray           # (S,)
    state_labels: tuple = ()

    def __post_init__(self):
        comps = np.atleast_2d(np.asarray(self.state_components, dtype=np.int64))
        weights = np.atleast_2d(np.asarray(self.state_weights, dtype=np.float64))
        loops = np.asarray(self.self_loop, dtype=np.float64).reshape(-1)
        if comps.shape != weights.shape or comps.shape[0] != loops.size:
            raise ValueError("inconsistent HMM state arrays")
        if np.any((loops <= 0) | (loops >= 1)):
            raise ValueError("self-loop probabilities must lie in (0, 1)")
        object.__setattr__(self, "state_components", comps)
        object.__setattr__(self, "state_weights", weights)
        object.__setattr__(self, "self_loop", loops)
        object.__setattr__(self, "state_labels", tuple(self.state_labels))

    @property
    def num_states(self):
        return self.self_loop.size

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def num_inventory(self):
        return self.means.shape[0]

    def state_gmm(self, s):
        idx = self.state_components[s]
        return DiagonalGmm(self.state_weights[s], self.means[idx], self.variances[idx])

    def mixture_logpdf(self, X):
        """Per-state mixture terms log w_sm + log N(x_t | comp), (T, S, M)."""
        used, inverse = np.unique(self.state_components, return_inverse=True)
        lp = gaussian_logpdf(X, self.means[used], self.variances[used])
        with np.errstate(divide="ignore"):
            logw = np.log(self.state_weights)
        return lp[:, inverse.reshape(self.state_components.shape)] + logw

    def state_loglik(self, X):
        return logsumexp(self.mixture_logpdf(X), axis=2)


@dataclass(frozen=True, eq=False)
class MonophoneSet:
    phones: tuple
    num_states: int
    comps_per_state: int
    means: np.ndarray        # (P*S*M, F)
    variances: np.ndarray    # (P*S*M, F)
    weights: np.ndarray      # (P*S, M)
    self_loop: np.ndarray    # (P*S,)

    def __post_init__(self):
        object.__setattr__(self, "phones", tuple(self.phones))
        P, S, M = len(self.phones), self.num_states, self.comps_per_state
        if self.means.shape[0] != P * S * M or self.weights.shape != (P * S, M):
            raise ValueError("inconsistent monophone parameter shapes")

    @property
    def num_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def phone_index(self, phone):
        try:
            return self.phones.index(phone)
        except ValueError:
            raise UnknownPhoneError(phone) from None

    def state_index(self, phone, s):
        return self.phone_index(phone) * self.num_states + s

    def components_of(self, state):
        M = self.comps_per_state
        return np.arange(state * M, (state + 1) * M)


@dataclass(frozen=True)
class AlignmentPath:
    states: np.ndarray
    log_likelihood: float
    num_states: int = field(default=0)

    def occupancy(self):
        return np.bincount(self.states, minlength=self.num_states)


# ---------------------------------------------------------------------------
# Composition and alignment


def compose_phrase_hmm(mono, phone_sequence):
    """Concatenate monophone HMMs; component rows are shared, not copied."""
    if len(phone_sequence) == 0:
        raise ValueError("empty phone sequence")
    states = [mono.state_index(p, s) for p in phone_sequence
              for s in range(mono.num_states)]
    comps = np.stack([mono.components_of(st) for st in states])
    labels = [f"{p}_{s}" for p in phone_sequence for s in range(mono.num_states)]
    return PhraseHmm(mono.means, mono.variances, comps, mono.weights[states],
                     mono.self_loop[states], labels)


def _viterbi(state_ll, log_self, log_fwd):
    T, S = state_ll.shape
    if T < S:
        raise AlignmentInfeasibleError(
            f"{T} frames cannot traverse {S} left-to-right states")
    delta = np.full(S, -np.inf)
    delta[0] = state_ll[0, 0]
    moved = np.zeros((T, S), dtype=bool)
    neg = np.array([-np.inf])
    for t in range(1, T):
        stay = delta + log_self
        move = np.concatenate([neg, delta[:-1] + log_fwd[:-1]])
        take = move > stay
        moved[t] = take
        delta = np.where(take, move, stay) + state_ll[t]
    score = float(delta[-1])
    if not np.isfinite(score):
        raise AlignmentInfeasibleError("no finite-likelihood path")
    path = np.empty(T, dtype=np.int64)
    s = S - 1
    for t in range(T - 1, -1, -1):
        path[t] = s
        if moved[t, s]:
            s -= 1
    return path, score


def viterbi_align(hmm, features):
    """Best monotone path from state 0 (frame 0) to the last state."""
    X = as_frames(features)
    if X.shape[1] != hmm.dim:
        raise DimensionMismatchError(
            f"feature dim {X.shape[1]} does not match HMM dim {hmm.dim}")
    if X.shape[0] < hmm.num_states:
        raise AlignmentInfeasibleError(
            f"{X.shape[0]} frames cannot traverse {hmm.num_states} states")
    ll = hmm.state_loglik(X)
    states, score = _viterbi(ll, np.log(hmm.self_loop), np.log1p(-hmm.self_loop))
    return AlignmentPath(states, score, hmm.num_states)


def path_loglik(hmm, features, states):
    """Log-likelihood of a given state path, recomputed term by term."""
    X = as_frames(features)
    states = np.asarray(states)
    ll = hmm.state_loglik(X)
    total = ll[np.arange(len(states)), states].sum()
    steps = np.diff(states)
    prev = states[:-1]
    total += np.where(steps == 0, np.log(hmm.self_loop[prev]),
                      np.log1p(-hmm.self_loop[prev])).sum()
    return float(total)


def within_state_posteriors(hmm, features, path):
    """Responsibilities of each aligned state's components, (T, M)."""
    X = as_frames(features)
    mix = hmm.mixture_logpdf(X)[np.arange(X.shape[0]), path.states]
    return np.exp(mix - logsumexp(mix, axis=1, keepdims=True))


def write_alignment(path, fh):
    for t, s in enumerate(path.states):
        fh.write(f"{t} {int(s)}\n")


# ---------------------------------------------------------------------------
# Training


def _clip_self_loop(n_self, n_fwd):
    total = n_self + n_fwd
    p = np.where(total > 0, n_self / np.maximum(total, 1e-300), 0.5)
    return np.clip(p, TRANSITION_FLOOR, 1.0 - TRANSITION_FLOOR)


def _uniform_segmentation(num_frames, num_states):
    return (np.arange(num_frames) * num_states) // num_frames


def _state_gmm_init(X, M, var_floor, rng, iters=3):
    gmm = global_gaussian(X, var_floor)
    while gmm.num_components < M:
        count = min(gmm.num_components, M - gmm.num_components)
        gmm = _split(gmm, count, rng, var_floor)
        gmm = em_iterations(gmm, X, iters, var_floor, rng=rng)
    return gmm


def train_monophones(features, transcripts, num_states=3, comps_per_state=8,
                     iters=10, seed=0, history=None, min_phone_count=3):
    """Flat-start Viterbi training of monophone HMMs.

    Each utterance is first segmented uniformly over the states of its
    transcript; state GMMs are grown by binary splitting on those frames.
    Then every iteration aligns all utterances (its total path
    log-likelihood is appended to `history`) and re-estimates state GMMs
    by one EM step on the hard-assigned frames and the self-loop
    probabilities by path counts.
    """
    feats = [as_frames(f) for f in features]
    if len(feats) != len(transcripts):
        raise ValueError("features and transcripts differ in length")
    counts = Counter(p for tr in transcripts for p in tr)
    rare = sorted(p for p, c in counts.items() if c < min_phone_count)
    if rare:
        raise InsufficientDataError(f"phones seen fewer than {min_phone_count} times: {rare}")
    phones = tuple(sorted(counts))
    P, S, M = len(phones), num_states, comps_per_state
    dim = feats[0].shape[1]
    allX = np.vstack(feats)
    var_floor = np.maximum(VARIANCE_FLOOR_SCALE * allX.var(axis=0), np.finfo(float).tiny)
    rng = np.random.default_rng(seed)
    pidx = {p: i for i, p in enumerate(phones)}
    utt_states = []
    for X, tr in zip(feats, transcripts):
        seq = np.array([pidx[p] * S + s for p in tr for s in range(S)])
        if X.shape[0] < seq.size:
            raise AlignmentInfeasibleError(
                f"utterance with {X.shape[0]} frames is shorter than its {seq.size} states")
        utt_states.append(seq)

    def collect(segmentations):
        frames = [[] for _ in range(P * S)]
        n_self = np.zeros(P * S)
        n_fwd = np.zeros(P * S)
        for X, seq, seg in zip(feats, utt_states, segmentations):
            glob = seq[seg]
            for st in np.unique(glob):
                frames[st].append(X[glob == st])
            same = seg[1:] == seg[:-1]
            np.add.at(n_self, glob[:-1][same], 1)
            np.add.at(n_fwd, glob[:-1][~same], 1)
        return [np.vstack(f) if f else np.empty((0, dim)) for f in frames], n_self, n_fwd

    frames, n_self, n_fwd = collect(
        [_uniform_segmentation(X.shape[0], seq.size) for X, seq in zip(feats, utt_states)])
    gmms = []
    for st in range(P * S):
        if frames[st].shape[0] == 0:
            raise InsufficientDataError(f"state {st} received no frames")
        gmms.append(_state_gmm_init(frames[st], M, var_floor, rng))
    self_loop = _clip_self_loop(n_self, n_fwd)

    def assemble(gmms, self_loop):
        return MonophoneSet(phones, S, M,
                            np.vstack([g.means for g in gmms]),
                            np.vstack([g.variances for g in gmms]),
                            np.stack([g.weights for g in gmms]),
                            self_loop.copy())

    mono = assemble(gmms, self_loop)
    for it in range(iters):
        total = 0.0
        segs = []
        for X, tr in zip(feats, transcripts):
            path = viterbi_align(compose_phrase_hmm(mono, tr), X)
            total += path.log_likelihood
            segs.append(path.states)
        if history is not None:
            history.append(total)
        frames, n_self, n_fwd = collect(segs)
        new = []
        for st, g in enumerate(gmms):
            n, f, s, _ = accumulate(g, frames[st])
            new.append(_m_step(n, f, s, var_floor, g))
        gmms = new
        mono = assemble(gmms, _clip_self_loop(n_self, n_fwd))
    return mono


def _phrase_hmm_from_ubm(ubm, state_means, self_loop):
    S = len(state_means)
    C = ubm.num_components
    return PhraseHmm(np.vstack(state_means), np.tile(ubm.variances, (S, 1)),
                     np.arange(S * C).reshape(S, C), np.tile(ubm.weights, (S, 1)),
                     self_loop, [f"s{s}" for s in range(S)])


def train_uv2_model(ubm, features, num_states=5, relevance_factor=16.0, iters=5):
    """Phrase HMM whose state GMMs are MAP-adapted (means) from the UBM.

    Transitions are re-estimated from path counts with add-one smoothing.
    """
    feats = [as_frames(f) for f in features]
    if not feats:
        raise InsufficientDataError("UV2 training needs at least one utterance")
    for X in feats:
        if X.shape[0] < num_states:
            raise AlignmentInfeasibleError(
                f"utterance with {X.shape[0]} frames is shorter than {num_states} states")
    posts = [frame_posteriors(ubm, X) for X in feats]
    segs = [_uniform_segmentation(X.shape[0], num_states) for X in feats]
    hmm = None
    for it in range(iters):
        means = []
        for s in range(num_states):
            n = np.zeros(ubm.num_components)
            f = np.zeros_like(ubm.means)
            for X, g, seg in zip(feats, posts, segs):
                sel = seg == s
                n += g[sel].sum(axis=0)
                f += g[sel].T @ X[sel]
            means.append(map_means_from_stats(ubm.means, n, f, relevance_factor))
        n_self = np.zeros(num_states)
        n_fwd = np.zeros(num_states)
        for seg in segs:
            same = seg[1:] == seg[:-1]
            np.add.at(n_self, seg[:-1][same], 1)
            np.add.at(n_fwd, seg[:-1][~same], 1)
        self_loop = (n_self + 1.0) / (n_self + n_fwd + 2.0)
        hmm = _phrase_hmm_from_ubm(ubm, means, self_loop)
        if it < iters - 1:
            segs = [viterbi_align(hmm, X).states for X in feats]
    return hmm


# ---------------------------------------------------------------------------
# Serialization.  One container for both monophone sets (kind 0) and
# phrase HMMs (kind 1).


def write_hmm(model, fh):
    w = binio.Writer(fh, HMM_MAGIC)
    if isinstance(model, MonophoneSet):
        w.u32(0, len(model.phones), model.num_states, model.comps_per_state,
              model.num_components, model.dim)
        for p in model.phones:
            w.string(p)
        w.array(model.means)
        w.array(model.variances)
        for st in range(len(model.phones) * model.num_states):
            w.array(model.self_loop[st:st + 1])
            w.array(model.weights[st])
    else:
        S, M = model.state_components.shape
        w.u32(1, S, 1, M, model.num_inventory, model.dim)
        labels = model.state_labels or tuple(f"s{s}" for s in range(S))
        for lab in labels:
            w.string(lab)
        w.array(model.means)
        w.array(model.variances)
        for st in range(S):
            w.array(model.self_loop[st:st + 1])
            w.u32(*model.state_components[st])
            w.array(model.state_weights[st])


def read_hmm(fh):
    r = binio.Reader(fh, HMM_MAGIC)
    kind, count, S, M, C, F = r.u32(6)
    names = tuple(r.string() for _ in range(count))
    means = r.array((C, F))
    variances = r.array((C, F))
    if kind == 0:
        loops, weights = [], []
        for _ in range(count * S):
            loops.append(r.array((1,))[0])
            weights.append(r.array((M,)))
        r.expect_eof()
        return MonophoneSet(names, S, M, means, variances, np.stack(weights), np.array(loops))
    loops, comps, weights = [], [], []
    for _ in range(count):
        loops.append(r.array((1,))[0])
        comps.append(r.u32(M))
        weights.append(r.array((M,)))
    r.expect_eof()
    return PhraseHmm(means, variances, np.array(comps), np.stack(weights),
                     np.array(loops), names)


def save_hmm(model, path):
    binio.save(write_hmm, model, path)


def load_hmm(path):
    return binio.load(read_hmm, path)
