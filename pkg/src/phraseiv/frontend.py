"""Audio decoding and MFCC feature extraction.

The chain is: pre-emphasis -> framing -> Hamming window -> power spectrum
-> triangular mel filterbank -> floored log -> DCT-II, followed by
optional delta/acceleration appendage and per-utterance CMVN.

Defaults (25 ms / 10 ms, 24 filters, c0..c19, deltas over +-2 frames,
CMVN on) give 60-dimensional frames.
"""

import logging
import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from . import binio
from .errors import (ChannelCountError, DimensionMismatchError,
                     InsufficientDataError, SampleRateError,
                     UnsupportedEncodingError, WavHeaderError)

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
CMVN_VAR_FLOOR = 1e-10
FEATURE_MAGIC = b"PKFT"


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("audio must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise SampleRateError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class FeatureMatrix:
    """Frames x dims feature matrix of one utterance."""

    frames: np.ndarray
    frame_shift: float = 0.01

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[:, None]
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError("feature matrix needs >= 1 frame and dim > 0")
        if not np.all(np.isfinite(frames)):
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    def __len__(self):
        return self.num_frames


def as_frames(features):
    """Return the (T, F) float array behind a FeatureMatrix or array."""
    if isinstance(features, FeatureMatrix):
        return features.frames
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    window_length: float = 0.025
    frame_shift: float = 0.010
    num_mel_filters: int = 24
    num_cepstra: int = 20
    preemphasis: float = 0.97
    delta_window: int = 2
    apply_cmvn: bool = True
    low_freq: float = 0.0
    high_freq: float = 0.0  # 0 means Nyquist
    energy_vad: bool = False
    vad_threshold_db: float = -40.0

    def __post_init__(self):
        if self.window_length < self.frame_shift:
            raise ValueError("window_length must be >= frame_shift")
        if self.num_cepstra > self.num_mel_filters:
            raise ValueError("num_cepstra must be <= num_mel_filters")
        if not 0.0 <= self.preemphasis < 1.0:
            raise ValueError("preemphasis must lie in [0, 1)")
        if self.delta_window < 1:
            raise ValueError("delta_window must be >= 1")

    @property
    def window_samples(self):
        return int(round(self.window_length * self.sample_rate))

    @property
    def shift_samples(self):
        return int(round(self.frame_shift * self.sample_rate))

    @property
    def nfft(self):
        n = 1
        while n < self.window_samples:
            n *= 2
        return n


# ---------------------------------------------------------------------------
# WAV input/output


def read_wav(path):
    """Read a mono 16-bit PCM RIFF/WAVE file into an AudioBuffer."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            nframes = wf.getnframes()
            raw = wf.readframes(nframes)
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedEncodingError(str(exc)) from exc
        raise WavHeaderError(str(exc)) from exc
    except EOFError as exc:
        raise WavHeaderError("truncated WAVE header") from exc
    if channels != 1:
        raise ChannelCountError(f"expected mono audio, got {channels} channels")
    if width != 2:
        raise UnsupportedEncodingError(
            f"expected 16-bit PCM, got {8 * width}-bit samples")
    if rate <= 0:
        raise WavHeaderError("sample rate must be positive")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise WavHeaderError("no audio samples in file")
    return AudioBuffer(samples, rate)


def write_wav(path, audio):
    """Write an AudioBuffer as mono 16-bit PCM (clipping to [-1, 1))."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters, nfft, sample_rate, low_freq=0.0, high_freq=0.0):
    """Triangular filters, equally spaced on the mel scale.

    Returns a (num_filters, nfft // 2 + 1) weight matrix and the filter
    center frequencies in Hz.  Triangles are evaluated at the exact bin
    frequencies rather than snapped to integer bins.
    """
    high_freq = high_freq or sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq),
                                  num_filters + 2))
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (mid - lo)
    falling = (hi - bins) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges[1:-1]


def num_frames_for(num_samples, window_samples, shift_samples):
    if num_samples < window_samples:
        return 0
    return (num_samples - window_samples) // shift_samples + 1


def _frame_signal(audio, cfg):
    if audio.sample_rate != cfg.sample_rate:
        raise SampleRateError(
            f"audio is {audio.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    x = audio.samples
    win, shift = cfg.window_samples, cfg.shift_samples
    n = num_frames_for(x.size, win, shift)
    if n < 1:
        raise InsufficientDataError(
            f"audio has {x.size} samples, shorter than one {win}-sample window")
    if cfg.preemphasis > 0:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    idx = np.arange(win)[None, :] + shift * np.arange(n)[:, None]
    return x[idx] * np.hamming(win)


def power_spectrum(audio, cfg):
    frames = _frame_signal(audio, cfg)
    spec = np.fft.rfft(frames, n=cfg.nfft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def filterbank_energies(audio, cfg):
    """Mel filterbank energies (linear, before the log) per frame."""
    fb, _ = mel_filterbank(cfg.num_mel_filters, cfg.nfft, cfg.sample_rate,
                           cfg.low_freq, cfg.high_freq)
    return power_spectrum(audio, cfg) @ fb.T


def compute_mfcc(audio, cfg=None):
    """Static cepstra c0..c{num_cepstra-1} for every analysis frame."""
    cfg = cfg or MfccConfig(sample_rate=audio.sample_rate)
    energies = filterbank_energies(audio, cfg)
    logfb = np.log(np.maximum(energies, LOG_FLOOR))
    ceps = dct(logfb, type=2, norm="ortho", axis=1)[:, :cfg.num_cepstra]
    return FeatureMatrix(ceps, cfg.frame_shift)


def _regression_deltas(x, window):
    T = x.shape[0]
    padded = np.concatenate([np.repeat(x[:1], window, axis=0), x,
                             np.repeat(x[-1:], window, axis=0)])
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(x)
    for n in range(1, window + 1):
        out += n * (padded[window + n:window + n + T] - padded[window - n:window - n + T])
    return out / denom


def append_deltas(feat, delta_window=2):
    """Stack [static, delta, acceleration]; edges are replicated."""
    x = as_frames(feat)
    d1 = _regression_deltas(x, delta_window)
    d2 = _regression_deltas(d1, delta_window)
    shift = feat.frame_shift if isinstance(feat, FeatureMatrix) else 0.01
    return FeatureMatrix(np.hstack([x, d1, d2]), shift)


def apply_cmvn(feat):
    """Per-utterance mean and variance normalization.

    Columns whose variance is below the floor are only mean-normalized;
    a single-frame input is mean-normalized only (and logged).
    """
    x = as_frames(feat)
    shift = feat.frame_shift if isinstance(feat, FeatureMatrix) else 0.01
    centered = x - x.mean(axis=0)
    if x.shape[0] < 2:
        logger.warning("CMVN on a single frame: mean normalization only")
        return FeatureMatrix(centered, shift)
    std = x.std(axis=0)
    ok = std ** 2 >= CMVN_VAR_FLOOR
    centered[:, ok] /= std[ok]
    return FeatureMatrix(centered, shift)


def energy_vad_mask(audio, cfg):
    """Frames whose log energy is within `vad_threshold_db` of the loudest."""
    frames = _frame_signal(audio, cfg)
    energy_db = 10.0 * np.log10(np.maximum((frames ** 2).sum(axis=1), LOG_FLOOR))
    mask = energy_db >= energy_db.max() + cfg.vad_threshold_db
    return mask


def extract_features(audio, cfg=None):
    """Full front end: MFCC, optional VAD, deltas, optional CMVN."""
    cfg = cfg or MfccConfig(sample_rate=audio.sample_rate)
    feat = compute_mfcc(audio, cfg)
    if cfg.energy_vad:
        mask = energy_vad_mask(audio, cfg)
        if mask.any():
            feat = FeatureMatrix(feat.frames[mask], cfg.frame_shift)
    feat = append_deltas(feat, cfg.delta_window)
    if cfg.apply_cmvn:
        feat = apply_cmvn(feat)
    return feat


# ---------------------------------------------------------------------------
# Feature files ("PKFT"): also the ingestion path for external features


def write_features(feat, fh):
    frames = as_frames(feat)
    shift = feat.frame_shift if isinstance(feat, FeatureMatrix) else 0.01
    w = binio.Writer(fh, FEATURE_MAGIC)
    w.u32(frames.shape[0], frames.shape[1])
    w.f32(shift)
    w.array(frames, "<f4")


def read_features(fh):
    r = binio.Reader(fh, FEATURE_MAGIC)
    num_frames, dim = r.u32(2)
    shift = r.f32()
    frames = r.array((num_frames, dim), "<f4")
    r.expect_eof()
    return FeatureMatrix(frames, float(shift))


def save_features(feat, path):
    binio.save(write_features, feat, path)


def load_features(path):
    return binio.load(read_features, path)


def check_dim(features, dim):
    x = as_frames(features)
    if x.shape[1] != dim:
        raise DimensionMismatchError(
            f"feature dim {x.shape[1]} does not match model dim {dim}")
    return x
