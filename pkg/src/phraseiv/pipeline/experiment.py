"""End-to-end experiment: corpus -> features -> alignment model -> stats ->
total-variability model -> i-vectors -> backend -> trials -> metrics.

Every stage writes its artifacts under ``work_dir`` and records a SHA-256
of each file.  Per-stage wall-clock timings go to a separate file so the
metric reports themselves stay bit-reproducible.
"""

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager

import numpy as np
from scipy.special import logsumexp

from .. import gmm as gmm_mod
from .. import hmm as hmm_mod
from .. import ivector as iv
from .. import scoring
from ..baselines import dev_statistics, fuse_scores, uv1_score, uv2_score, uv3_score
from ..errors import ConfigError, PhraseIvError, StageError
from ..evaluation import (TrialScore, format_report, make_trials, summarize,
                          write_scores, write_summary)
from ..frontend import extract_features, load_features, read_wav, save_features
from .manifest import read_manifest
from .synth import generate_synthetic_corpus

logger = logging.getLogger(__name__)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def eval_key(utt, phrase):
    return f"{utt}|{phrase}"


class Experiment:
    """Stage-by-stage pipeline with lazily computed, cached results."""

    def __init__(self, cfg):
        self.cfg = cfg.validate()
        self.work = os.path.abspath(cfg.work_dir)
        os.makedirs(self.work, exist_ok=True)
        self.timings = {}
        self.artifacts = {}
        self._cache = {}

    # -- bookkeeping -------------------------------------------------------

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (PhraseIvError, ValueError, OSError, np.linalg.LinAlgError) as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def path(self, *parts):
        full = os.path.join(self.work, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def record(self, path):
        self.artifacts[os.path.relpath(path, self.work)] = sha256_file(path)
        return path

    def preload(self, **items):
        """Seed the stage cache with externally loaded results.

        Keys: manifest, features, alignment, stats, extractor, ivectors.
        """
        self._cache.update(items)
        return self

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # -- stages ------------------------------------------------------------

    @property
    def manifest(self):
        return self._cached("manifest", self._load_manifest)

    def _load_manifest(self):
        with self.stage("corpus"):
            if self.cfg.manifest:
                return read_manifest(self.cfg.manifest)
            corpus_dir = os.path.join(self.work, "corpus")
            mpath = os.path.join(corpus_dir, "manifest.tsv")
            if os.path.exists(mpath):
                manifest = read_manifest(mpath)
            else:
                manifest = generate_synthetic_corpus(self.cfg.synth(), corpus_dir)
            self.record(mpath)
            return manifest

    @property
    def features(self):
        return self._cached("features", self._extract_features)

    def _feature_dir(self):
        mfcc = self.cfg.mfcc()
        tag = hashlib.sha256(repr(mfcc).encode()).hexdigest()[:12]
        return os.path.join(self.work, "features", tag)

    def _extract_features(self):
        manifest = self.manifest
        with self.stage("features"):
            out = {}
            fdir = self._feature_dir()
            os.makedirs(fdir, exist_ok=True)
            for row in manifest:
                src = manifest.resolve(row)
                if src.endswith(".pkft"):
                    out[row.utt_id] = load_features(src).frames
                    continue
                dst = os.path.join(fdir, row.utt_id + ".pkft")
                if not os.path.exists(dst):
                    audio = read_wav(src)
                    save_features(extract_features(audio, self.cfg.mfcc(audio.sample_rate)), dst)
                # always use the stored (f32) values so cached and fresh runs agree
                out[row.utt_id] = load_features(dst).frames
            return out

    def extractor_rows(self):
        splits = [s.strip() for s in self.cfg.extractor_splits.split(",") if s.strip()]
        return self.manifest.split(*splits)

    @property
    def alignment_model(self):
        return self._cached("alignment", self._train_alignment)

    def _train_alignment(self):
        feats = self.features
        rows = self.extractor_rows()
        cfg = self.cfg
        with self.stage("alignment-model"):
            data = [feats[r.utt_id] for r in rows]
            if cfg.alignment == "gmm":
                model = gmm_mod.train_ubm(data, cfg.ubm_components, cfg.ubm_em_iters, cfg.seed)
                self.record(_save(gmm_mod.save_gmm, model, self.path("models", "ubm.pkgm")))
            else:
                transcripts = [r.transcript for r in rows]
                if not all(transcripts):
                    raise ConfigError("HMM alignment needs transcripts for every utterance")
                model = hmm_mod.train_monophones(data, transcripts, cfg.mono_states,
                                                 cfg.mono_comps, cfg.mono_iters, cfg.seed)
                self.record(_save(hmm_mod.save_hmm, model, self.path("models", "mono.pkhm")))
            return model

    def alignment_variances(self):
        return self.alignment_model.variances

    def stats_for(self, utt_id, phrase=None):
        """Stats of one utterance; HMM mode aligns to `phrase` (default: its own)."""
        X = self.features[utt_id]
        model = self.alignment_model
        if self.cfg.alignment == "gmm":
            return iv.collect_stats_gmm(model, X)
        row = self.manifest[utt_id]
        transcript = row.transcript if phrase in (None, row.phrase) else self.transcripts[phrase]
        return iv.collect_stats_hmm(model, hmm_mod.compose_phrase_hmm(model, transcript), X)

    @property
    def transcripts(self):
        return self._cached("transcripts", self.manifest.phrase_transcripts)

    @property
    def stats(self):
        return self._cached("stats", self._collect_stats)

    def _collect_stats(self):
        manifest = self.manifest
        self.alignment_model
        with self.stage("stats"):
            out = {}
            target_phrases = manifest.phrases("enroll")
            for row in manifest:
                if row.split == "eval" and self.cfg.alignment == "hmm":
                    for phrase in target_phrases:
                        out[eval_key(row.utt_id, phrase)] = self.stats_for(row.utt_id, phrase)
                else:
                    out[row.utt_id] = self.stats_for(row.utt_id)
            if self.cfg.save_stats:
                for key, st in out.items():
                    name = key.replace("|", "__") + ".pkst"
                    self.record(_save(iv.save_stats, st, self.path("stats", name)))
            return out

    @property
    def extractor(self):
        return self._cached("extractor", self._train_extractor)

    def _train_extractor(self):
        stats = self.stats
        rows = self.extractor_rows()
        with self.stage("tv-model"):
            tv = iv.train_tv([stats[r.utt_id] for r in rows], self.cfg.tv_rank,
                             self.cfg.tv_iters, self.cfg.seed,
                             variances=self.alignment_variances())
            self.record(_save(iv.save_tv, tv, self.path("models", "tv.pktv")))
            return tv

    @property
    def ivectors(self):
        return self._cached("ivectors", self._extract_ivectors)

    def _extract_ivectors(self):
        stats = self.stats
        tv = self.extractor
        with self.stage("ivectors"):
            keys = list(stats)
            vecs = iv.extract_ivectors(tv, [stats[k] for k in keys],
                                       self.cfg.alignment, self.cfg.feature)
            archive = dict(zip(keys, vecs))
            self.record(_save(iv.save_ivectors, archive, self.path("ivectors", "ivectors.pkiv")))
            return archive

    # -- backend -----------------------------------------------------------

    def enrollment_rows(self, speakers=0, reps=0, seed=0):
        rows = self.manifest.split("enroll")
        if speakers:
            pool = sorted({r.speaker for r in rows})
            if speakers > len(pool):
                raise ConfigError(f"asked for {speakers} enrollment speakers, have {len(pool)}")
            rng = np.random.default_rng([seed])
            chosen = set(rng.choice(pool, size=speakers, replace=False).tolist())
            rows = [r for r in rows if r.speaker in chosen]
        if reps:
            kept, seen = [], {}
            for r in sorted(rows, key=lambda r: r.utt_id):
                key = (r.speaker, r.phrase)
                if seen.get(key, 0) < reps:
                    kept.append(r)
                    seen[key] = seen.get(key, 0) + 1
            rows = kept
        return rows

    def background_covariance(self, shrinkage=0.0):
        """Within-class covariance from the `train` split (non-target phrases)."""
        vecs = self.ivectors
        rows = [r for r in self.manifest.split("train")
                if r.phrase not in set(self.manifest.phrases("enroll"))]
        if not rows:
            raise ConfigError("no background-phrase utterances for the covariance")
        est = scoring.estimate_within_class_cov([r.phrase for r in rows],
                                                [vecs[r.utt_id] for r in rows], shrinkage)
        model = scoring.LgcModel(est.labels, est.means, est.covariance, None, est.counts)
        path = self.record(_save(scoring.save_backend, model,
                                 self.path("models", "background_cov.pklg")))
        return est.covariance, path

    def enroll(self, backend=None, speakers=None, reps=None, seed=None,
               covariance_source=None, shrinkage=None, save=True):
        cfg = self.cfg
        backend = backend or cfg.backend
        speakers = cfg.enroll_speakers if speakers is None else speakers
        reps = cfg.enroll_reps if reps is None else reps
        seed = cfg.enroll_seed if seed is None else seed
        covariance_source = covariance_source or cfg.covariance_source
        shrinkage = cfg.shrinkage if shrinkage is None else shrinkage
        vecs = self.ivectors
        with self.stage("enroll"):
            rows = self.enrollment_rows(speakers, reps, seed)
            labels = [r.phrase for r in rows]
            data = [vecs[r.utt_id] for r in rows]
            if backend == "cosine":
                model = scoring.enroll_cosine(labels, data)
            else:
                cov = None
                if covariance_source == "external":
                    cov = scoring.load_backend(cfg.covariance_file).covariance
                elif covariance_source == "background":
                    cov, _ = self.background_covariance()
                model = scoring.enroll_lgc(labels, data, covariance=cov, shrinkage=shrinkage)
            if save:
                ext = "pkcs" if backend == "cosine" else "pklg"
                self.record(_save(scoring.save_backend, model,
                                  self.path("models", f"backend.{ext}")))
            return model

    def score(self, model, normalization=None):
        normalization = normalization or self.cfg.normalization
        vecs = self.ivectors
        with self.stage("score"):
            return score_trials(model, vecs, self.manifest.split("eval"), normalization)

    # -- full run ----------------------------------------------------------

    def run(self):
        model = self.enroll()
        scores, predictions, tag = self.score(model)
        with self.stage("report"):
            write_scores(self.path("scores", "scores.tsv"), scores, tag)
            self.record(self.path("scores", "scores.tsv"))
            summary = summarize(scores, predictions, tag)
            summary["config"] = {"alignment": self.cfg.alignment, "backend": self.cfg.backend,
                                 "feature": self.cfg.feature,
                                 "ubm_components": self.cfg.ubm_components,
                                 "tv_rank": self.cfg.tv_rank, "seed": self.cfg.seed}
            with open(self.path("report", "metrics.txt"), "w", encoding="utf-8") as fh:
                fh.write(format_report(summary))
            write_summary(self.path("report", "summary.json"), summary)
            with open(self.path("report", "config.txt"), "w", encoding="utf-8") as fh:
                fh.write(self.cfg.dumps())
        for name in ("metrics.txt", "summary.json"):
            self.record(self.path("report", name))
        with open(self.path("report", "artifacts.json"), "w", encoding="utf-8") as fh:
            json.dump(self.artifacts, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(self.path("report", "timings.json"), "w", encoding="utf-8") as fh:
            json.dump({k: round(v, 3) for k, v in self.timings.items()}, fh, indent=2)
            fh.write("\n")
        return summary


def class_scores(model, ivectors, utt_id):
    """Raw per-class scores of one eval utterance.

    If the archive holds ``utt|phrase`` entries (HMM alignment), each
    class is scored with the i-vector aligned to its own phrase HMM.
    """
    per_class = eval_key(utt_id, model.labels[0]) in ivectors
    if isinstance(model, scoring.CosineModel):
        if not per_class:
            return scoring.cosine_scores(model, ivectors[utt_id])
        values = [scoring.cosine_scores(scoring.CosineModel((lab,), model.means[i:i + 1]),
                                        ivectors[eval_key(utt_id, lab)]).values[0]
                  for i, lab in enumerate(model.labels)]
        return scoring.ScoreVector(values, "none")
    if not per_class:
        return scoring.lgc_log_posteriors(model, ivectors[utt_id])
    joint = np.array([model.log_densities(ivectors[eval_key(utt_id, lab)].w)[i]
                      for i, lab in enumerate(model.labels)]) + np.log(model.priors)
    return scoring.ScoreVector(joint - logsumexp(joint), "log-posterior")


def score_trials(model, ivectors, eval_rows, normalization="none"):
    """Pooled trial scores, closed-set predictions and the score tag."""
    trials = make_trials([(r.utt_id, r.phrase) for r in eval_rows], model.labels)
    per_utt = {}
    predictions = []
    for r in eval_rows:
        sv = class_scores(model, ivectors, r.utt_id)
        if normalization == "max-norm":
            sv = scoring.max_norm(sv)
        per_utt[r.utt_id] = dict(zip(model.labels, sv.values))
        predictions.append((model.labels[scoring.classify(sv)], r.phrase))
    scores = [TrialScore(t, float(per_utt[t.utterance][t.claimed])) for t in trials]
    tag = normalization if normalization != "none" else (
        "log-posterior" if isinstance(model, scoring.LgcModel) else "none")
    return scores, predictions, tag


def _save(save_fn, obj, path):
    save_fn(obj, path)
    return path


def run_experiment(cfg):
    return Experiment(cfg).run()


# ---------------------------------------------------------------------------
# Baselines over the same manifest


def baseline_scores(exp, system, normalization="none", uv3_templates=3):
    """Trial scores for UV1 / UV2 / UV3 (or their equal-weight fusion)."""
    cfg = exp.cfg
    feats = exp.features
    manifest = exp.manifest
    if system == "fused":
        parts = [baseline_scores(exp, s, "none", uv3_templates)[0] for s in ("uv1", "uv2", "uv3")]
        stats = [dev_statistics([s.score for s in p]) for p in parts]
        fused = fuse_scores([[s.score if np.isfinite(s.score) else -1e9 for s in p]
                             for p in parts], stats)
        scores = [TrialScore(s.trial, float(v)) for s, v in zip(parts[0], fused)]
        return _maybe_max_norm(scores, normalization), normalization
    with exp.stage(f"baseline-{system}"):
        rows = exp.extractor_rows()
        ubm = exp._cached("uv-ubm", lambda: gmm_mod.train_ubm(
            [feats[r.utt_id] for r in rows], cfg.uv_components, cfg.ubm_em_iters, cfg.seed))
        enroll = exp.enrollment_rows(cfg.enroll_speakers, cfg.enroll_reps, cfg.enroll_seed)
        phrases = sorted({r.phrase for r in enroll})
        by_phrase = {p: [feats[r.utt_id] for r in enroll if r.phrase == p] for p in phrases}
        if system == "uv1":
            models = {p: gmm_mod.map_adapt_means(ubm, np.vstack(x), cfg.relevance_factor)
                      for p, x in by_phrase.items()}
            fn = lambda p, X: uv1_score(models[p], ubm, X)  # noqa: E731
        elif system == "uv2":
            models = {p: hmm_mod.train_uv2_model(ubm, x, cfg.uv2_states, cfg.relevance_factor,
                                                 cfg.uv2_iters)
                      for p, x in by_phrase.items()}
            fn = lambda p, X: uv2_score(models[p], ubm, X)  # noqa: E731
        elif system == "uv3":
            fn = lambda p, X: uv3_score(by_phrase[p][:uv3_templates], X)  # noqa: E731
        else:
            raise ConfigError(f"unknown baseline system {system!r}")
        eval_rows = manifest.split("eval")
        trials = make_trials([(r.utt_id, r.phrase) for r in eval_rows], phrases)
        scores = [TrialScore(t, float(fn(t.claimed, feats[t.utterance]))) for t in trials]
    return _maybe_max_norm(scores, normalization), normalization


def _maybe_max_norm(scores, normalization):
    if normalization != "max-norm":
        return scores
    by_utt = {}
    for s in scores:
        by_utt.setdefault(s.trial.utterance, []).append(s)
    out = []
    for group in by_utt.values():
        vals = np.array([s.score for s in group])
        normed = scoring.max_norm(scoring.ScoreVector(vals, "none")).values
        out.extend(TrialScore(s.trial, float(v)) for s, v in zip(group, normed))
    return out
