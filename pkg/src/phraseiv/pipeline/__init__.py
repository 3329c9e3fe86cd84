"""Corpus manifests, configuration, the synthetic corpus and the experiment runner."""

from .config import ExperimentConfig, load_config
from .experiment import Experiment, baseline_scores, run_experiment, score_trials
from .export import export_ivectors_csv
from .manifest import Manifest, ManifestRow, read_manifest, write_manifest
from .synth import SynthConfig, generate_synthetic_corpus

__all__ = [
    "Experiment", "ExperimentConfig", "Manifest", "ManifestRow", "SynthConfig",
    "baseline_scores", "export_ivectors_csv", "generate_synthetic_corpus", "load_config",
    "read_manifest", "run_experiment", "score_trials", "write_manifest",
]
