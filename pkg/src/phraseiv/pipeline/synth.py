"""Synthetic pass-phrase corpus.

A small inventory of "phones" is drawn first; each phone is a spectral
envelope (three resonances plus a tilt).  A phrase is a fixed sequence
of 4-8 phones with phrase-specific nominal durations, framed by short
"sil" segments.  A segment is white noise shaped by the phone envelope.
Speakers warp the resonance frequencies, speaking rate and tilt; every
utterance adds small jitter and white noise at the configured SNR.

All randomness is PCG64 (numpy ``default_rng``) seeded by integer
tuples ``(seed, stream, ...)``, so any single utterance can be
regenerated in isolation.
"""

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..frontend import AudioBuffer, write_wav
from .manifest import Manifest, ManifestRow, write_manifest

SIL = "sil"
STREAM_INVENTORY, STREAM_PHRASE, STREAM_SPEAKER, STREAM_UTTERANCE = 0, 1, 2, 3


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_phrases: int = 10
    num_speakers: int = 30
    reps_per_speaker: int = 3
    num_eval_speakers: int = 0
    eval_reps: int = 0            # 0 means reps_per_speaker
    num_background_phrases: int = 0
    num_phone_types: int = 12
    sample_rate: int = 16000
    snr_db: float = 20.0
    min_phrase_len: int = 4
    max_phrase_len: int = 8
    min_duration: float = 1.5
    max_duration: float = 3.0
    silence: float = 0.1


@lru_cache(maxsize=8)
def _phone_inventory(cfg):
    rng = np.random.default_rng([cfg.seed, STREAM_INVENTORY])
    phones = {}
    for k in range(cfg.num_phone_types):
        formants = np.sort(np.exp(rng.uniform(np.log(250.0), np.log(5000.0), size=3)))
        phones[f"ph{k:02d}"] = {
            "formants": formants,
            "bandwidths": rng.uniform(80.0, 300.0, size=3),
            "amps": rng.uniform(0.4, 1.0, size=3),
            "tilt": rng.uniform(-1.0, 1.0),
            "level": rng.uniform(0.5, 1.0),
        }
    phones[SIL] = {"formants": np.array([500.0, 1500.0, 2500.0]),
                   "bandwidths": np.array([400.0, 400.0, 400.0]),
                   "amps": np.array([0.05, 0.05, 0.05]), "tilt": 0.0, "level": 0.02}
    return phones


@lru_cache(maxsize=8)
def phrase_sequences(cfg):
    """Unique phone sequences (no immediate repeats) with nominal durations."""
    total = cfg.num_phrases + cfg.num_background_phrases
    names = sorted(p for p in _phone_inventory(cfg) if p != SIL)
    seen = set()
    out = []
    for p in range(total):
        rng = np.random.default_rng([cfg.seed, STREAM_PHRASE, p])
        while True:
            length = int(rng.integers(cfg.min_phrase_len, cfg.max_phrase_len + 1))
            seq = [names[int(rng.integers(len(names)))]]
            while len(seq) < length:
                nxt = names[int(rng.integers(len(names)))]
                if nxt != seq[-1]:
                    seq.append(nxt)
            if tuple(seq) not in seen:
                break
        seen.add(tuple(seq))
        speech = rng.uniform(cfg.min_duration + 0.1, cfg.max_duration - 0.4) - 2 * cfg.silence
        shares = rng.uniform(0.6, 1.4, size=length)
        out.append((tuple(seq), speech * shares / shares.sum()))
    return out


def phrase_id(p, cfg):
    if p < cfg.num_phrases:
        return f"phr{p:02d}"
    return f"bg{p - cfg.num_phrases:02d}"


def _speaker(cfg, spk):
    rng = np.random.default_rng([cfg.seed, STREAM_SPEAKER, spk])
    return {"warp": rng.uniform(0.9, 1.1), "rate": rng.uniform(0.88, 1.12),
            "tilt": rng.uniform(-0.3, 0.3), "gain": rng.uniform(0.5, 1.0)}


def _envelope(freqs, phone, speaker, jitter):
    env = np.full(freqs.shape, 0.02)
    for f0, bw, amp, j in zip(phone["formants"], phone["bandwidths"], phone["amps"], jitter):
        center = f0 * speaker["warp"] * j
        env += amp / (1.0 + ((freqs - center) / bw) ** 2)
    tilt = phone["tilt"] + speaker["tilt"]
    return env * (1.0 + freqs / 4000.0) ** tilt


def synthesize_utterance(cfg, phrase_index, speaker_index, rep):
    """Audio samples and transcript of one utterance."""
    phones = _phone_inventory(cfg)
    seq, durations = phrase_sequences(cfg)[phrase_index]
    spk = _speaker(cfg, speaker_index)
    rng = np.random.default_rng([cfg.seed, STREAM_UTTERANCE, phrase_index, speaker_index, rep])
    sr = cfg.sample_rate
    labels = [SIL, *seq, SIL]
    lengths = [cfg.silence] + list(durations / spk["rate"]) + [cfg.silence]
    pieces = []
    for label, dur in zip(labels, lengths):
        dur = dur * rng.uniform(0.9, 1.1)
        n = max(int(round(dur * sr)), 1)
        noise = rng.standard_normal(n)
        spec = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        env = _envelope(freqs, phones[label], spk, rng.uniform(0.98, 1.02, size=3))
        seg = np.fft.irfft(spec * env, n=n)
        rms = np.sqrt(np.mean(seg ** 2)) or 1.0
        pieces.append(seg / rms * phones[label]["level"])
    signal = np.concatenate(pieces) * spk["gain"]
    speech_power = np.mean(signal ** 2)
    noise_power = speech_power / (10.0 ** (cfg.snr_db / 10.0))
    signal = signal + rng.standard_normal(signal.size) * np.sqrt(noise_power)
    signal *= 0.5 / np.max(np.abs(signal))
    return AudioBuffer(signal, sr), tuple(labels)


def generate_synthetic_corpus(cfg, out_dir):
    """Write WAV files plus ``manifest.tsv`` into `out_dir`; return the Manifest.

    Non-eval speakers say every target phrase (split ``enroll``) and every
    background phrase (split ``train``); the last `num_eval_speakers`
    speakers say the target phrases only (split ``eval``).
    """
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    rows = []
    first_eval = cfg.num_speakers - cfg.num_eval_speakers
    eval_reps = cfg.eval_reps or cfg.reps_per_speaker
    total_phrases = cfg.num_phrases + cfg.num_background_phrases
    for spk in range(cfg.num_speakers):
        is_eval = spk >= first_eval
        for p in range(cfg.num_phrases if is_eval else total_phrases):
            split = "eval" if is_eval else ("enroll" if p < cfg.num_phrases else "train")
            for rep in range(eval_reps if is_eval else cfg.reps_per_speaker):
                pid = phrase_id(p, cfg)
                utt = f"{pid}_spk{spk:03d}_r{rep}"
                audio, transcript = synthesize_utterance(cfg, p, spk, rep)
                rel = os.path.join("wav", utt + ".wav")
                write_wav(os.path.join(out_dir, rel), audio)
                rows.append(ManifestRow(utt, rel, pid, f"spk{spk:03d}", split, transcript))
    manifest = Manifest(rows, out_dir)
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest
