import io

import numpy as np
import pytest
from scipy.optimize import minimize

from phraseiv.errors import BadMagicError, DimensionMismatchError, InsufficientDataError
from phraseiv.gmm import DiagonalGmm, frame_posteriors
from phraseiv.hmm import MonophoneSet, compose_phrase_hmm
from phraseiv.ivector import (IVector, SufficientStats, TotalVariabilityModel,
                              collect_stats_gmm, collect_stats_hmm, em_step,
                              extract_ivector, extract_ivectors, init_tv,
                              posterior_precision, read_ivectors, read_stats, read_tv,
                              train_tv, write_ivectors, write_stats, write_tv)

from conftest import roundtrip
from oracles import exact_log_posterior


def random_ubm(rng, C, F):
    w = rng.uniform(0.2, 1.0, C)
    return DiagonalGmm(w / w.sum(), rng.standard_normal((C, F)) * 2,
                       rng.uniform(0.5, 2.0, (C, F)))


def random_stats(rng, C, F, frames=30):
    n = rng.dirichlet(np.ones(C)) * frames
    return SufficientStats(n, rng.standard_normal((C, F)) * np.sqrt(n)[:, None])


def random_tv(rng, C, F, R):
    return TotalVariabilityModel(rng.standard_normal((C * F, R)), rng.uniform(0.5, 2.0, (C, F)))


class TestStats:
    def test_single_component(self, rng):
        ubm = random_ubm(rng, 1, 3)
        X = rng.standard_normal((11, 3))
        st = collect_stats_gmm(ubm, X)
        np.testing.assert_allclose(st.zeroth, [11.0])
        np.testing.assert_allclose(st.first[0], (X - ubm.means[0]).sum(axis=0), atol=1e-12)

    def test_frames_at_means_center_to_zero(self):
        means = np.array([[-50.0, 0.0], [50.0, 10.0]])
        ubm = DiagonalGmm(np.array([0.5, 0.5]), means, np.ones((2, 2)))
        X = np.vstack([means[0], means[0], means[1]])
        st = collect_stats_gmm(ubm, X)
        np.testing.assert_allclose(st.first, 0.0, atol=1e-9)
        np.testing.assert_allclose(st.zeroth, [2, 1], atol=1e-12)

    def test_double_loop_oracle(self, rng):
        ubm = random_ubm(rng, 3, 2)
        X = rng.standard_normal((7, 2))
        gamma = frame_posteriors(ubm, X)
        n = np.zeros(3)
        f = np.zeros((3, 2))
        for t in range(7):
            for c in range(3):
                n[c] += gamma[t, c]
                f[c] += gamma[t, c] * (X[t] - ubm.means[c])
        st = collect_stats_gmm(ubm, X)
        np.testing.assert_allclose(st.zeroth, n, atol=1e-10)
        np.testing.assert_allclose(st.first, f, atol=1e-10)


def two_phone_mono(means, var=1.0):
    F = len(means[0])
    return MonophoneSet(("a", "b"), 1, 1, np.array(means, dtype=float),
                        np.full((2, F), var), np.ones((2, 1)), np.array([0.5, 0.5]))


class TestHmmStats:
    def test_single_state_equals_gmm(self, rng):
        mono = MonophoneSet(("a",), 1, 1, rng.standard_normal((1, 3)),
                            rng.uniform(0.5, 2, (1, 3)), np.ones((1, 1)), np.array([0.6]))
        X = rng.standard_normal((12, 3))
        hs = collect_stats_hmm(mono, compose_phrase_hmm(mono, ["a"]), X)
        gs = collect_stats_gmm(DiagonalGmm(np.ones(1), mono.means, mono.variances), X)
        np.testing.assert_allclose(hs.zeroth, gs.zeroth, atol=1e-12)
        np.testing.assert_allclose(hs.first, gs.first, atol=1e-12)

    def test_staircase_counts(self, rng):
        mono = two_phone_mono([[-5.0, -5.0], [5.0, 5.0]])
        X = np.vstack([rng.normal(-5, 0.5, (7, 2)), rng.normal(5, 0.5, (4, 2))])
        st = collect_stats_hmm(mono, compose_phrase_hmm(mono, ["a", "b"]), X)
        np.testing.assert_array_equal(st.zeroth, [7.0, 4.0])

    def test_partition_and_layout(self, rng):
        P, S, M, F = 3, 2, 2, 2
        w = rng.uniform(0.2, 1, (P * S, M))
        mono = MonophoneSet(("a", "b", "c"), S, M, rng.standard_normal((P * S * M, F)),
                            rng.uniform(0.5, 2, (P * S * M, F)),
                            w / w.sum(axis=1, keepdims=True), np.full(P * S, 0.7))
        X = rng.standard_normal((25, F))
        hs = collect_stats_hmm(mono, compose_phrase_hmm(mono, ["c", "a"]), X)
        gs = collect_stats_gmm(DiagonalGmm(np.full(12, 1 / 12), mono.means, mono.variances), X)
        assert hs.first.shape == gs.first.shape == (12, 2)
        np.testing.assert_allclose(hs.zeroth.sum(), 25.0, atol=1e-10)
        np.testing.assert_allclose(gs.zeroth.sum(), 25.0, atol=1e-10)
        # phone "b" is not in the phrase
        np.testing.assert_array_equal(hs.zeroth[4:8], 0.0)


class TestExtraction:
    def test_empty_stats_give_zero(self, rng):
        tv = random_tv(rng, 4, 3, 2)
        w = extract_ivector(tv, SufficientStats(np.zeros(4), np.zeros((4, 3)))).w
        assert np.all(w == 0.0)

    def test_zero_subspace_gives_zero(self, rng):
        tv = TotalVariabilityModel(np.zeros((12, 2)), np.ones((4, 3)))
        w = extract_ivector(tv, random_stats(rng, 4, 3)).w
        assert np.all(w == 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_numerical_maximization(self, seed):
        rng = np.random.default_rng(seed)
        ubm = random_ubm(rng, 4, 3)
        tv = TotalVariabilityModel(rng.standard_normal((12, 2)) * 0.5, ubm.variances)
        X = rng.standard_normal((15, 3)) * 2
        gamma = frame_posteriors(ubm, X)
        w = extract_ivector(tv, collect_stats_gmm(ubm, X)).w
        res = minimize(lambda v: -exact_log_posterior(v, tv, ubm, X, gamma), np.zeros(2),
                       method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
        np.testing.assert_allclose(w, res.x, atol=1e-4)

    def test_linear_in_first_order_stats(self, rng):
        tv = random_tv(rng, 4, 3, 3)
        n = rng.uniform(0, 10, 4)
        f1, f2 = rng.standard_normal((2, 4, 3))
        w1 = extract_ivector(tv, SufficientStats(n, f1)).w
        w2 = extract_ivector(tv, SufficientStats(n, f2)).w
        w12 = extract_ivector(tv, SufficientStats(n, f1 + f2)).w
        np.testing.assert_allclose(w12, w1 + w2, atol=1e-8)

    def test_precision_grows_with_counts(self, rng):
        tv = random_tv(rng, 4, 3, 3)
        st = random_stats(rng, 4, 3)
        small = np.linalg.eigvalsh(posterior_precision(tv, st))[0]
        big = np.linalg.eigvalsh(posterior_precision(
            tv, SufficientStats(2 * st.zeroth, 2 * st.first)))[0]
        assert big > small

    def test_batch_equals_single(self, rng):
        tv = random_tv(rng, 4, 3, 2)
        stats = [random_stats(rng, 4, 3) for _ in range(7)]
        batch = extract_ivectors(tv, stats)
        for st, iv in zip(stats, batch):
            np.testing.assert_allclose(iv.w, extract_ivector(tv, st).w, atol=1e-12)

    def test_layout_mismatch(self, rng):
        with pytest.raises(DimensionMismatchError):
            extract_ivector(random_tv(rng, 4, 3, 2), random_stats(rng, 3, 3))


class TestTraining:
    def test_recovers_one_factor_loading(self):
        rng = np.random.default_rng(0)
        # few frames per utterance keep plain EM's convergence fast
        loading, frames = 2.0, 5
        stats = []
        for _ in range(2000):
            w = rng.standard_normal()
            first = frames * loading * w + np.sqrt(frames) * rng.standard_normal()
            stats.append(SufficientStats(np.array([frames]), np.array([[first]])))
        tv = train_tv(stats, 1, iters=50, seed=1, variances=np.ones((1, 1)))
        np.testing.assert_allclose(abs(tv.T[0, 0]), loading, rtol=0.1)

    @pytest.mark.parametrize("seed", range(3))
    def test_objective_monotone(self, seed):
        rng = np.random.default_rng(seed)
        stats = [random_stats(rng, 4, 3, frames=40) for _ in range(30)]
        history = []
        train_tv(stats, 3, iters=8, seed=seed, variances=rng.uniform(0.5, 2, (4, 3)),
                 history=history)
        h = np.array(history)
        assert np.all(np.diff(h) >= -1e-8 * np.abs(h[:-1]))

    def test_zero_stats_leave_model_unchanged(self, rng):
        variances = rng.uniform(0.5, 2, (4, 3))
        stats = [SufficientStats(np.zeros(4), np.zeros((4, 3))) for _ in range(5)]
        start = init_tv(variances, 2, seed=3)
        new, _ = em_step(start, stats)
        np.testing.assert_array_equal(new.T, start.T)
        for st in stats:
            assert np.all(extract_ivector(start, st).w == 0.0)
            np.testing.assert_array_equal(posterior_precision(start, st), np.eye(2))

    def test_deterministic(self, rng):
        stats = [random_stats(rng, 3, 2) for _ in range(10)]
        v = np.ones((3, 2))
        a = train_tv(stats, 2, 3, seed=5, variances=v)
        b = train_tv(stats, 2, 3, seed=5, variances=v)
        assert a.T.tobytes() == b.T.tobytes()

    def test_needs_variances_and_data(self, rng):
        stats = [random_stats(rng, 3, 2)]
        with pytest.raises(ValueError):
            train_tv(stats, 1)
        with pytest.raises(InsufficientDataError):
            train_tv(stats, 4, variances=np.ones((3, 2)))


class TestSerialization:
    def test_stats_roundtrip(self, rng):
        st = random_stats(rng, 4, 3)
        parsed, b1, b2 = roundtrip(write_stats, read_stats, st)
        assert b1 == b2
        np.testing.assert_array_equal(parsed.first, st.first)

    def test_tv_roundtrip(self, rng):
        tv = random_tv(rng, 4, 3, 2)
        parsed, b1, b2 = roundtrip(write_tv, read_tv, tv)
        assert b1 == b2
        np.testing.assert_array_equal(parsed.T, tv.T)
        np.testing.assert_array_equal(parsed.variances, tv.variances)

    def test_ivector_archive_roundtrip(self, rng):
        archive = {f"utt{i}": IVector(rng.standard_normal(3)) for i in range(4)}
        archive["ütt|phr00"] = IVector(rng.standard_normal(3))
        parsed, b1, b2 = roundtrip(write_ivectors, read_ivectors, archive)
        assert b1 == b2
        assert list(parsed) == list(archive)
        for k in archive:
            np.testing.assert_array_equal(parsed[k].w, archive[k].w)

    def test_bad_magic(self, rng):
        buf = io.BytesIO()
        write_stats(random_stats(rng, 2, 2), buf)
        with pytest.raises(BadMagicError):
            read_tv(io.BytesIO(buf.getvalue()))
