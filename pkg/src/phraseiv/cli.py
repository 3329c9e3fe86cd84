"""Command-line interface: ``phraseiv <subcommand> [--config FILE] [overrides]``.

Every subcommand reads the flat experiment config (``--config``), applies
``--set key=value`` pairs and its own targeted flags on top, and exits 0
on success.  Failures print a stage-tagged message to stderr and exit 1;
usage errors exit 2.
"""

import argparse
import glob
import logging
import os
import sys
from dataclasses import fields

from . import gmm as gmm_mod
from . import hmm as hmm_mod
from . import ivector as iv
from . import scoring
from .errors import ConfigError, PhraseIvError, StageError
from .evaluation import (CLOSED_SET_WARNING, closed_set_tags, format_report, read_scores,
                         summarize, write_scores, write_summary)
from .frontend import save_features
from .pipeline.config import ExperimentConfig, load_config
from .pipeline.experiment import Experiment, baseline_scores, score_trials
from .pipeline.export import export_ivectors_csv
from .pipeline.manifest import write_manifest
from .pipeline.synth import generate_synthetic_corpus

logger = logging.getLogger("phraseiv")

CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}


def _stats_name(key):
    return key.replace("|", "__") + ".pkst"


def _stats_key(path):
    return os.path.basename(path)[:-len(".pkst")].replace("__", "|")


def _config(args):
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key, value in vars(args).items():
        if key in CONFIG_KEYS and value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _experiment(args, **changes):
    cfg = _config(args)
    if changes:
        cfg = cfg.replace(**changes)
    return Experiment(cfg)


def _makedirs_for(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = _config(args)
    out_dir = args.out_dir or os.path.join(cfg.work_dir, "corpus")
    manifest = generate_synthetic_corpus(cfg.synth(), out_dir)
    print(f"wrote {len(manifest)} utterances to {os.path.join(out_dir, 'manifest.tsv')}")


def cmd_features(args):
    exp = _experiment(args)
    feats = exp.features
    out_dir = os.path.abspath(args.out_dir or os.path.join(exp.work, "feature-corpus"))
    os.makedirs(out_dir, exist_ok=True)
    mapping = {}
    for row in exp.manifest:
        rel = row.utt_id + ".pkft"
        save_features(feats[row.utt_id], os.path.join(out_dir, rel))
        mapping[row.utt_id] = rel
    write_manifest(exp.manifest.with_paths(mapping, out_dir), os.path.join(out_dir, "manifest.tsv"))
    print(f"wrote {len(mapping)} feature files to {out_dir}")


def cmd_train_ubm(args):
    exp = _experiment(args, alignment="gmm")
    model = exp.alignment_model
    if args.output:
        _makedirs_for(args.output)
        gmm_mod.save_gmm(model, args.output)
    print(f"UBM: {model.num_components} components, dim {model.dim}")


def cmd_train_mono(args):
    exp = _experiment(args, alignment="hmm")
    model = exp.alignment_model
    if args.output:
        _makedirs_for(args.output)
        hmm_mod.save_hmm(model, args.output)
    print(f"monophones: {len(model.phones)} phones x {model.num_states} states")


def cmd_train_uv2(args):
    exp = _experiment(args)
    cfg = exp.cfg
    ubm = gmm_mod.load_gmm(args.ubm)
    out_dir = args.out_dir or os.path.join(exp.work, "models", "uv2")
    os.makedirs(out_dir, exist_ok=True)
    feats = exp.features
    rows = exp.enrollment_rows(cfg.enroll_speakers, cfg.enroll_reps, cfg.enroll_seed)
    with exp.stage("train-uv2"):
        for phrase in sorted({r.phrase for r in rows}):
            data = [feats[r.utt_id] for r in rows if r.phrase == phrase]
            model = hmm_mod.train_uv2_model(ubm, data, cfg.uv2_states, cfg.relevance_factor,
                                            cfg.uv2_iters)
            hmm_mod.save_hmm(model, os.path.join(out_dir, phrase + ".pkhm"))
    print(f"wrote phrase HMMs to {out_dir}")


def _load_alignment(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == gmm_mod.GMM_MAGIC:
        return "gmm", gmm_mod.load_gmm(path)
    return "hmm", hmm_mod.load_hmm(path)


def cmd_stats(args):
    alignment, model = _load_alignment(args.model)
    exp = _experiment(args, alignment=alignment).preload(alignment=model)
    stats = exp.stats
    out_dir = args.out_dir or os.path.join(exp.work, "stats")
    os.makedirs(out_dir, exist_ok=True)
    for key, st in stats.items():
        iv.save_stats(st, os.path.join(out_dir, _stats_name(key)))
    print(f"wrote {len(stats)} stats files to {out_dir}")


def _read_stats_dir(stats_dir):
    paths = sorted(glob.glob(os.path.join(stats_dir, "*.pkst")))
    if not paths:
        raise ConfigError(f"no .pkst files in {stats_dir}")
    return {_stats_key(p): iv.load_stats(p) for p in paths}


def cmd_train_tv(args):
    alignment, model = _load_alignment(args.model)
    exp = _experiment(args, alignment=alignment)
    stats = _read_stats_dir(args.stats_dir)
    exp.preload(alignment=model, stats=stats)
    tv = exp.extractor
    if args.output:
        _makedirs_for(args.output)
        iv.save_tv(tv, args.output)
    print(f"TV model: {tv.num_components} x {tv.dim} -> rank {tv.rank}")


def cmd_extract(args):
    cfg = _config(args)
    tv = iv.load_tv(args.tv)
    stats = _read_stats_dir(args.stats_dir)
    keys = list(stats)
    vecs = iv.extract_ivectors(tv, [stats[k] for k in keys], cfg.alignment, cfg.feature)
    _makedirs_for(args.output)
    iv.save_ivectors(dict(zip(keys, vecs)), args.output)
    print(f"wrote {len(keys)} i-vectors to {args.output}")


def cmd_enroll(args):
    exp = _experiment(args).preload(ivectors=iv.load_ivectors(args.ivectors))
    model = exp.enroll(save=False)
    _makedirs_for(args.output)
    scoring.save_backend(model, args.output)
    print(f"enrolled {len(model.labels)} phrases ({exp.cfg.backend})")


def cmd_score(args):
    exp = _experiment(args)
    model = scoring.load_backend(args.model)
    vecs = iv.load_ivectors(args.ivectors)
    norm = exp.cfg.normalization
    if isinstance(model, scoring.LgcModel) and norm != "none":
        raise ConfigError("max-norm applies to cosine scores only")
    with exp.stage("score"):
        scores, _, tag = score_trials(model, vecs, exp.manifest.split("eval"), norm)
    _makedirs_for(args.output)
    write_scores(args.output, scores, tag)
    print(f"wrote {len(scores)} trial scores to {args.output}")


def cmd_baseline_score(args):
    exp = _experiment(args)
    scores, tag = baseline_scores(exp, args.system, exp.cfg.normalization)
    _makedirs_for(args.output)
    write_scores(args.output, scores, tag)
    print(f"wrote {len(scores)} {args.system} trial scores to {args.output}")


def cmd_evaluate(args):
    scores, header = read_scores(args.scores)
    norm = header.get("normalization", "none")
    summary = summarize(scores, None, norm)
    sys.stdout.write(format_report(summary))
    if CLOSED_SET_WARNING in closed_set_tags(norm):
        print(f"warning: {CLOSED_SET_WARNING}: scores were normalized against competing "
              "phrases, so verification is closed-set", file=sys.stderr)
    if args.summary:
        _makedirs_for(args.summary)
        write_summary(args.summary, summary)


def cmd_export_csv(args):
    exp = _experiment(args)
    archive = iv.load_ivectors(args.ivectors)
    _makedirs_for(args.output)
    export_ivectors_csv(archive, exp.manifest, args.output)
    print(f"wrote {len(archive)} rows to {args.output}")


def cmd_run(args):
    exp = _experiment(args)
    summary = exp.run()
    print(f"pooled EER = {summary['pooled_eer']:.6f}")
    print(f"classification error = {summary['classification_error']:.6f}")
    print(f"report written to {os.path.join(exp.work, 'report')}")


# ---------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--work-dir", dest="work_dir")
    p.add_argument("--manifest", help="corpus manifest (default: synthetic corpus)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="phraseiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate the synthetic pass-phrase corpus")
    p.add_argument("--out-dir")
    p.add_argument("--num-phrases", dest="synth_num_phrases", type=int)
    p.add_argument("--num-speakers", dest="synth_num_speakers", type=int)
    p.add_argument("--reps", dest="synth_reps", type=int)
    p.add_argument("--eval-speakers", dest="synth_num_eval_speakers", type=int)
    p.add_argument("--eval-reps", dest="synth_eval_reps", type=int)
    p.add_argument("--background-phrases", dest="synth_background_phrases", type=int)
    p.add_argument("--synth-seed", dest="synth_seed", type=int)

    p = add("features", cmd_features, "extract features and write a feature manifest")
    p.add_argument("--out-dir")

    p = add("train-ubm", cmd_train_ubm, "train the GMM-UBM alignment model")
    p.add_argument("--output")
    p.add_argument("--components", dest="ubm_components", type=int)
    p.add_argument("--iters", dest="ubm_em_iters", type=int)

    p = add("train-mono", cmd_train_mono, "train monophone HMMs (flat start, Viterbi)")
    p.add_argument("--output")
    p.add_argument("--states", dest="mono_states", type=int)
    p.add_argument("--comps", dest="mono_comps", type=int)
    p.add_argument("--iters", dest="mono_iters", type=int)

    p = add("train-uv2", cmd_train_uv2, "train one MAP-adapted phrase HMM per phrase")
    p.add_argument("--ubm", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--states", dest="uv2_states", type=int)

    p = add("stats", cmd_stats, "collect sufficient statistics")
    p.add_argument("--model", required=True, help=".pkgm (GMM) or .pkhm (monophone) file")
    p.add_argument("--out-dir")

    p = add("train-tv", cmd_train_tv, "train the total-variability model")
    p.add_argument("--model", required=True, help="alignment model used for the stats")
    p.add_argument("--stats-dir", required=True)
    p.add_argument("--output")
    p.add_argument("--rank", dest="tv_rank", type=int)
    p.add_argument("--iters", dest="tv_iters", type=int)

    p = add("extract", cmd_extract, "extract i-vectors from a stats directory")
    p.add_argument("--tv", required=True)
    p.add_argument("--stats-dir", required=True)
    p.add_argument("--output", required=True)

    p = add("enroll", cmd_enroll, "enroll phrase models (cosine or LGC)")
    p.add_argument("--ivectors", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--backend", choices=("cosine", "lgc"))
    p.add_argument("--covariance-file", dest="covariance_file")
    p.add_argument("--covariance-source", dest="covariance_source",
                   choices=("same", "external", "background"))
    p.add_argument("--shrinkage", type=float)
    p.add_argument("--enroll-speakers", dest="enroll_speakers", type=int)
    p.add_argument("--enroll-reps", dest="enroll_reps", type=int)
    p.add_argument("--enroll-seed", dest="enroll_seed", type=int)

    p = add("score", cmd_score, "score eval i-vectors against enrolled phrases")
    p.add_argument("--model", required=True, help=".pkcs or .pklg backend file")
    p.add_argument("--ivectors", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--normalization", choices=("none", "max-norm"))

    p = add("baseline-score", cmd_baseline_score, "score trials with UV1/UV2/UV3 or their fusion")
    p.add_argument("--system", required=True, choices=("uv1", "uv2", "uv3", "fused"))
    p.add_argument("--output", required=True)
    p.add_argument("--normalization", choices=("none", "max-norm"))

    p = add("evaluate", cmd_evaluate, "pooled EER of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--summary", help="also write the JSON summary here")

    p = add("export-csv", cmd_export_csv, "export raw i-vectors as CSV")
    p.add_argument("--ivectors", required=True)
    p.add_argument("--output", required=True)

    add("run", cmd_run, "run the full experiment and write the report")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"phraseiv {args.command}: {exc}", file=sys.stderr)
        return 1
    except (PhraseIvError, OSError, ValueError, KeyError) as exc:
        print(f"phraseiv {args.command}: {StageError(args.command, exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
