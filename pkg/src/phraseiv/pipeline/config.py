"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment; ``include <path>``
pulls in another file (relative to the including file), and later
assignments override earlier ones.
"""

import dataclasses
import os
from dataclasses import dataclass, fields

from ..errors import ConfigError
from ..frontend import MfccConfig
from .synth import SynthConfig


@dataclass
class ExperimentConfig:
    work_dir: str = "work"
    manifest: str = ""                 # empty: generate the synthetic corpus
    seed: int = 0

    # synthetic corpus
    synth_seed: int = 0
    synth_num_phrases: int = 10
    synth_num_speakers: int = 30
    synth_num_eval_speakers: int = 10
    synth_reps: int = 3
    synth_eval_reps: int = 2
    synth_background_phrases: int = 0
    synth_num_phone_types: int = 12
    synth_snr_db: float = 20.0

    # front end
    feature: str = "mfcc"
    window_length: float = 0.025
    frame_shift: float = 0.010
    num_mel_filters: int = 24
    num_cepstra: int = 20
    preemphasis: float = 0.97
    delta_window: int = 2
    apply_cmvn: bool = True
    energy_vad: bool = False

    # alignment model and extractor
    alignment: str = "gmm"             # gmm | hmm
    extractor_splits: str = "train,enroll"
    ubm_components: int = 64
    ubm_em_iters: int = 6
    mono_states: int = 3
    mono_comps: int = 8
    mono_iters: int = 5
    tv_rank: int = 50
    tv_iters: int = 10
    save_stats: bool = False

    # backend
    backend: str = "cosine"            # cosine | lgc
    normalization: str = "none"        # none | max-norm
    shrinkage: float = 0.0
    covariance_source: str = "same"    # same | external | background
    covariance_file: str = ""
    enroll_speakers: int = 0           # 0: all enrollment speakers
    enroll_reps: int = 0               # 0: all repetitions
    enroll_seed: int = 0               # speaker-subset selection

    # baselines
    relevance_factor: float = 16.0
    uv_components: int = 64
    uv2_states: int = 5
    uv2_iters: int = 3

    def validate(self):
        choices = {"alignment": ("gmm", "hmm"), "backend": ("cosine", "lgc"),
                   "normalization": ("none", "max-norm"),
                   "covariance_source": ("same", "external", "background")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.backend == "lgc" and self.normalization != "none":
            raise ConfigError("max-norm applies to cosine scores only")
        if self.covariance_source == "external" and not self.covariance_file:
            raise ConfigError("covariance_source=external needs covariance_file")
        if self.covariance_file and not os.path.exists(self.covariance_file):
            raise ConfigError(f"covariance_file {self.covariance_file!r} does not exist")
        if self.manifest and not os.path.exists(self.manifest):
            raise ConfigError(f"manifest {self.manifest!r} does not exist")
        return self

    def mfcc(self, sample_rate=16000):
        return MfccConfig(sample_rate=sample_rate, window_length=self.window_length,
                          frame_shift=self.frame_shift, num_mel_filters=self.num_mel_filters,
                          num_cepstra=self.num_cepstra, preemphasis=self.preemphasis,
                          delta_window=self.delta_window, apply_cmvn=self.apply_cmvn,
                          energy_vad=self.energy_vad)

    def synth(self):
        return SynthConfig(seed=self.synth_seed, num_phrases=self.synth_num_phrases,
                           num_speakers=self.synth_num_speakers,
                           reps_per_speaker=self.synth_reps,
                           num_eval_speakers=self.synth_num_eval_speakers,
                           eval_reps=self.synth_eval_reps,
                           num_background_phrases=self.synth_background_phrases,
                           num_phone_types=self.synth_num_phone_types,
                           snr_db=self.synth_snr_db)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def dumps(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name, raw):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind in (bool, "bool"):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw.strip()


def parse_config_file(path, _seen=None):
    """Key/value pairs from `path`, following includes."""
    path = os.path.abspath(path)
    seen = _seen or set()
    if path in seen:
        raise ConfigError(f"include cycle at {path}")
    seen = seen | {path}
    values = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include ") or line.startswith("include\t"):
                inc = line.split(None, 1)[1].strip()
                inc = inc if os.path.isabs(inc) else os.path.join(os.path.dirname(path), inc)
                values.update(parse_config_file(inc, seen))
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=None):
    values = parse_config_file(path) if path else {}
    values.update(overrides or {})
    kwargs = {k: _coerce(k, str(v)) for k, v in values.items()}
    return ExperimentConfig(**kwargs)
