"""Trial lists, pooled EER, classification error and score-file I/O."""

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError

logger = logging.getLogger(__name__)

TARGET = "target"
NONTARGET = "nontarget"
CLOSED_SET_WARNING = "closed-set-normalized-scores"
CLOSED_SET_NORMALIZATIONS = ("max-norm", "posterior", "log-posterior")


@dataclass(frozen=True)
class Trial:
    utterance: str
    claimed: str
    label: str

    @property
    def is_target(self):
        return self.label == TARGET


@dataclass(frozen=True)
class TrialScore:
    trial: Trial
    score: float


def make_trials(eval_utterances, enrolled_phrases):
    """One target plus one non-target per other enrolled phrase, per utterance."""
    enrolled = list(enrolled_phrases)
    known = set(enrolled)
    trials = []
    for utt, true_phrase in eval_utterances:
        if true_phrase not in known:
            raise ValueError(f"utterance {utt!r} has unenrolled phrase {true_phrase!r}")
        trials.append(Trial(utt, true_phrase, TARGET))
        for phrase in enrolled:
            if phrase != true_phrase:
                trials.append(Trial(utt, phrase, NONTARGET))
    return trials


def _split_scores(scores, labels=None):
    if labels is None:
        tar = np.array([s.score for s in scores if s.trial.is_target], dtype=np.float64)
        non = np.array([s.score for s in scores if not s.trial.is_target], dtype=np.float64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=bool)
        tar, non = scores[labels], scores[~labels]
    if tar.size == 0 or non.size == 0:
        raise InsufficientDataError("EER needs at least one target and one non-target trial")
    return tar, non


def error_rates(tar, non):
    """Miss and false-alarm rates at every unique threshold (accept if >= t).

    Thresholds are the sorted unique scores followed by +inf.
    """
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    miss = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    fa = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return thresholds, miss, fa


def eer_from_rates(miss, fa):
    """Crossing of the miss and false-alarm curves.

    Linear interpolation between the two adjacent operating points that
    bracket the crossing.
    """
    diff = miss - fa
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return float(miss[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    return float(miss[k - 1] + alpha * (miss[k] - miss[k - 1]))


def compute_eer(scores, labels=None):
    """Pooled equal error rate.

    `scores` is a list of TrialScore, or a score array when `labels`
    (True for target) is given.  -inf scores count as rejections.
    """
    tar, non = _split_scores(scores, labels)
    _, miss, fa = error_rates(tar, non)
    return eer_from_rates(miss, fa)


def per_phrase_eer(scores):
    by_phrase = {}
    for s in scores:
        by_phrase.setdefault(s.trial.claimed, []).append(s)
    out = {}
    for phrase in sorted(by_phrase):
        try:
            out[phrase] = compute_eer(by_phrase[phrase])
        except InsufficientDataError:
            out[phrase] = None
    return out


def classification_error(predictions):
    """Fraction of (predicted, true) pairs that disagree."""
    predictions = list(predictions)
    if not predictions:
        raise ValueError("no predictions")
    wrong = sum(1 for pred, true in predictions if pred != true)
    return wrong / len(predictions)


def closed_set_tags(normalization):
    return [CLOSED_SET_WARNING] if normalization in CLOSED_SET_NORMALIZATIONS else []


# ---------------------------------------------------------------------------
# Score files: "trial-id<TAB>claimed<TAB>label<TAB>score" with optional
# "# key=value" header lines.


def _format_score(x):
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return repr(float(x))


def write_scores(path, scores, normalization="none"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# normalization={normalization}\n")
        for s in scores:
            t = s.trial
            fh.write(f"{t.utterance}\t{t.claimed}\t{t.label}\t{_format_score(s.score)}\n")


def read_scores(path):
    """Returns (list of TrialScore, header dict)."""
    header = {}
    scores = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[2] not in (TARGET, NONTARGET):
                raise ValueError(f"{path}:{lineno}: malformed score line")
            scores.append(TrialScore(Trial(parts[0], parts[1], parts[2]), float(parts[3])))
    return scores, header


# ---------------------------------------------------------------------------
# Reports


def summarize(scores, predictions=None, normalization="none"):
    """Metrics dictionary (the JSON summary schema)."""
    n_tar = sum(1 for s in scores if s.trial.is_target)
    summary = {
        "normalization": normalization,
        "num_trials": len(scores),
        "num_target": n_tar,
        "num_nontarget": len(scores) - n_tar,
        "pooled_eer": compute_eer(scores),
        "per_phrase_eer": per_phrase_eer(scores),
        "tags": closed_set_tags(normalization),
    }
    if predictions is not None:
        summary["classification_error"] = classification_error(predictions)
        summary["num_classified"] = len(predictions)
    return summary


def format_report(summary):
    lines = []
    for key, value in summary.items():
        if key == "per_phrase_eer":
            for phrase, eer in value.items():
                lines.append(f"eer[{phrase}] = {'nan' if eer is None else f'{eer:.6f}'}")
        elif key == "tags":
            lines.append(f"tags = {','.join(value) if value else '-'}")
        elif isinstance(value, float):
            lines.append(f"{key} = {value:.6f}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_summary(path, summary):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
