import json

import numpy as np
import pytest

from phraseiv.errors import InsufficientDataError
from phraseiv.evaluation import (CLOSED_SET_WARNING, Trial, TrialScore, classification_error,
                                 closed_set_tags, compute_eer, format_report, make_trials,
                                 per_phrase_eer, read_scores, summarize, write_scores,
                                 write_summary)

from oracles import sweep_eer

FIXTURE_TAR = [0.9, 0.8, 0.3]
FIXTURE_NON = [0.7, 0.4, 0.2, 0.1]
# Hand sweep: the curves cross between thresholds 0.4 and 0.7 where miss
# stays 1/3 while false alarms fall from 1/2 to 1/4.
FIXTURE_EER = 1.0 / 3.0


def as_scores(tar, non):
    scores = [TrialScore(Trial(f"t{i}", "p", "target"), s) for i, s in enumerate(tar)]
    scores += [TrialScore(Trial(f"n{i}", "p", "nontarget"), s) for i, s in enumerate(non)]
    return scores


class TestTrials:
    def test_ten_phrases(self):
        phrases = [f"p{k}" for k in range(10)]
        utts = [(f"u{i}", phrases[i % 10]) for i in range(100)]
        trials = make_trials(utts, phrases)
        assert sum(t.is_target for t in trials) == 100
        assert sum(not t.is_target for t in trials) == 900

    def test_thirty_phrases(self):
        phrases = [f"p{k}" for k in range(30)]
        trials = make_trials([("u0", "p3"), ("u1", "p29")], phrases)
        for utt in ("u0", "u1"):
            mine = [t for t in trials if t.utterance == utt]
            assert sum(t.is_target for t in mine) == 1
            assert sum(not t.is_target for t in mine) == 29
        assert len(trials) == 2 * 30

    def test_single_phrase(self):
        trials = make_trials([("u", "p")], ["p"])
        assert [(t.claimed, t.label) for t in trials] == [("p", "target")]

    def test_unenrolled_phrase(self):
        with pytest.raises(ValueError):
            make_trials([("u", "q")], ["p"])


class TestEer:
    def test_perfect_separation(self):
        assert compute_eer(as_scores([0.9, 0.8], [0.2, 0.1])) == 0.0

    def test_same_multiset(self):
        s = [0.1, 0.5, 0.9]
        assert compute_eer(as_scores(s, s)) == pytest.approx(0.5, abs=1e-12)
        assert sweep_eer(s, s) == pytest.approx(0.5, abs=1e-12)

    def test_fixture(self):
        eer = compute_eer(as_scores(FIXTURE_TAR, FIXTURE_NON))
        assert abs(eer - FIXTURE_EER) <= 1e-9
        assert abs(sweep_eer(FIXTURE_TAR, FIXTURE_NON) - FIXTURE_EER) <= 1e-12

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_sweep_eer(self, seed):
        rng = np.random.default_rng(seed)
        nt, nn = rng.integers(1, 60, size=2)
        tar = list(np.round(rng.normal(1, 1, nt), 1))   # rounding creates ties
        non = list(np.round(rng.normal(0, 1, nn), 1))
        assert abs(compute_eer(as_scores(tar, non)) - sweep_eer(tar, non)) <= 1e-9

    def test_array_interface(self):
        scores = np.array(FIXTURE_TAR + FIXTURE_NON)
        labels = np.array([True] * 3 + [False] * 4)
        assert compute_eer(scores, labels) == pytest.approx(FIXTURE_EER, abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        s = rng.standard_normal(80)
        labels = rng.random(80) < 0.3
        np.testing.assert_allclose(compute_eer(s, labels),
                                   compute_eer(np.exp(3 * s) + 2, labels), atol=1e-12)

    def test_negation_label_swap(self, rng):
        s = rng.standard_normal(70)
        labels = rng.random(70) < 0.4
        np.testing.assert_allclose(compute_eer(s, labels), compute_eer(-s, ~labels),
                                   atol=1e-12)

    def test_reject_sentinel(self):
        eer = compute_eer(as_scores([1.0, -np.inf], [0.0, -1.0]))
        assert eer == pytest.approx(sweep_eer([1.0, -np.inf], [0.0, -1.0]))

    def test_needs_both_classes(self):
        with pytest.raises(InsufficientDataError):
            compute_eer(as_scores([0.5], []))

    def test_per_phrase(self):
        scores = [TrialScore(Trial("u1", "a", "target"), 1.0),
                  TrialScore(Trial("u2", "a", "nontarget"), 0.0),
                  TrialScore(Trial("u3", "b", "target"), 1.0)]
        assert per_phrase_eer(scores) == {"a": 0.0, "b": None}


class TestClassificationError:
    def test_all_correct(self):
        assert classification_error([("a", "a"), ("b", "b")]) == 0.0

    def test_all_wrong(self):
        assert classification_error([("a", "b"), ("b", "a")]) == 1.0

    def test_one_in_four_hundred(self):
        preds = [("a", "a")] * 399 + [("b", "a")]
        assert classification_error(preds) == 0.0025


class TestScoreFiles:
    def test_roundtrip_exact(self, tmp_path):
        scores = as_scores([0.1 + 0.2, -np.inf], [1e-300, 2.0 / 3.0])
        write_scores(tmp_path / "s.tsv", scores, "max-norm")
        back, header = read_scores(tmp_path / "s.tsv")
        assert header == {"normalization": "max-norm"}
        assert [s.score for s in back] == [s.score for s in scores]
        assert [s.trial for s in back] == [s.trial for s in scores]

    def test_format(self, tmp_path):
        write_scores(tmp_path / "s.tsv", as_scores([0.5], []))
        lines = (tmp_path / "s.tsv").read_text().splitlines()
        assert lines == ["# normalization=none", "t0\tp\ttarget\t0.5"]

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("a\tb\tmaybe\t1.0\n")
        with pytest.raises(ValueError):
            read_scores(tmp_path / "bad.tsv")


class TestReports:
    def test_closed_set_tags(self):
        assert closed_set_tags("none") == []
        for norm in ("max-norm", "posterior", "log-posterior"):
            assert closed_set_tags(norm) == [CLOSED_SET_WARNING]

    def test_summary_schema(self, tmp_path):
        scores = as_scores(FIXTURE_TAR, FIXTURE_NON)
        summary = summarize(scores, [("p", "p"), ("q", "p")], "none")
        assert summary["num_trials"] == 7
        assert summary["pooled_eer"] == pytest.approx(FIXTURE_EER)
        assert summary["classification_error"] == 0.5
        write_summary(tmp_path / "s.json", summary)
        assert json.loads((tmp_path / "s.json").read_text()) == summary
        text = format_report(summary)
        assert "pooled_eer = 0.333333" in text
        assert "tags = -" in text
