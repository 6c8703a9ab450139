"""Synthetic paired ECoG/speech corpora with a known, learnable mapping.

Each word is a voiced, formant-shaped harmonic complex: a pitch contour whose
harmonics are amplitude-modulated by formant resonances. A word is a sequence
of syllables, each voicing a few formants from a shared inventory, so unseen
words reuse the "phonemes" of seen ones.
Pseudo-ECoG channels are FIR-filtered mixtures of the speech's sub-band
log-energy envelopes, each envelope amplitude-modulating its own carrier
(100-900 Hz, like high-gamma power tracking articulation), sampled at 2 kHz,
plus Gaussian noise at a set SNR.
"""

import json
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt, sosfiltfilt

from .dataio import ECOG_RATE, EcogRecording, ManifestEntry, SpeechWaveform, write_manifest, write_signal
from .dsp import SPEECH_RATE, hz_to_mel, mel_spectrogram, mel_to_hz

ENVELOPE_CUTOFF_HZ = 40.0
ENVELOPE_EPS = 1e-6
PEAK = 0.9
CARRIER_LO, CARRIER_HI = 100.0, 900.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_words: int = 12
    trials_per_word: int = 12
    duration_s: float = 0.8
    channels: int = 8
    snr_db: float = 20.0
    n_formants: int = 13
    syllables_per_word: int = 3
    formants_per_syllable: int = 2
    fir_taps: int = 12
    max_word_pcc: float = 0.9
    noise_floor: float = 1e-3
    timing_jitter_s: float = 0.05
    height_jitter: float = 0.3
    width_jitter: float = 0.25

    def __post_init__(self):
        if self.duration_s < 0.025:
            raise ValueError("duration_s must be at least one 25 ms window")
        if self.channels < 1 or self.n_words < 1 or self.trials_per_word < 1:
            raise ValueError("channels, n_words and trials_per_word must be >= 1")
        if self.formants_per_syllable > self.n_formants:
            raise ValueError("formants_per_syllable cannot exceed the formant inventory")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * SPEECH_RATE))


def word_label(word_id: int) -> str:
    return f"w{word_id:02d}"


BAND_LO, BAND_HI = 50.0, 7900.0
FORMANT_BW = 0.25


def formant_inventory(n: int) -> np.ndarray:
    """Formant centres evenly spaced on the mel scale strictly inside 0-8 kHz.

    With ``n`` equal to the mel bin count they sit on the filter centres, so
    the inventory covers every bin equally.
    """
    m = np.linspace(hz_to_mel(0.0), hz_to_mel(SPEECH_RATE / 2), n + 2)[1:-1]
    return mel_to_hz(m)


def band_edges(n: int) -> np.ndarray:
    """Sub-band edges halfway (in mel) between neighbouring formants."""
    m = hz_to_mel(formant_inventory(n))
    step = hz_to_mel(SPEECH_RATE / 2) / (n + 1)
    mid = (m[1:] + m[:-1]) / 2
    lo = max(m[0] - step / 2, hz_to_mel(BAND_LO))
    hi = min(m[-1] + step / 2, hz_to_mel(BAND_HI))
    return mel_to_hz(np.concatenate([[lo], mid, [hi]]))


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass(frozen=True)
class _Word:
    formants: tuple  # inventory indices
    f0: float
    f0_slope: float
    bumps: tuple  # per formant: ((centre_s, width_s, height), ...)


def _draw_word(rng, config: SynthConfig) -> _Word:
    """A word is a sequence of syllables; each syllable voices a few inventory formants."""
    dur = config.duration_s
    n_syl = config.syllables_per_word
    bumps = {}
    for _ in range(n_syl):
        # syllables anywhere in the utterance keep the corpus-average frame profile flat
        width = rng.uniform(0.3, 0.5) * 0.8 * dur / n_syl
        centre = rng.uniform(-width, dur + width)
        for f in rng.choice(config.n_formants, config.formants_per_syllable, replace=False):
            bumps.setdefault(int(f), []).append((float(centre), float(width), float(rng.uniform(0.5, 1.0))))
    formants = tuple(sorted(bumps))
    return _Word(formants, float(rng.uniform(100, 160)), float(rng.uniform(-30, 30)),
                 tuple(tuple(bumps[f]) for f in formants))


def _render(word: _Word, config: SynthConfig, rng=None) -> np.ndarray:
    """Waveform of one realisation; ``rng`` supplies the per-trial jitter (None = prototype)."""
    n = config.n_samples
    t = np.arange(n) / SPEECH_RATE
    freq_scale = rng.uniform(-0.02, 0.02) if rng is not None else 0.0
    centres = formant_inventory(config.n_formants)[list(word.formants)] * (1 + freq_scale)
    f0 = word.f0 * (1 + freq_scale) + word.f0_slope * (t - t.mean())
    phase = 2 * np.pi * np.cumsum(f0) / SPEECH_RATE

    envelopes = []
    for bumps in word.bumps:
        env = np.zeros(n)
        for centre, width, height in bumps:
            if rng is not None:
                centre += rng.uniform(-1, 1) * config.timing_jitter_s
                height *= 1 + rng.uniform(-1, 1) * config.height_jitter
                width *= 1 + rng.uniform(-1, 1) * config.width_jitter
            env += height * np.exp(-0.5 * ((t - centre) / width) ** 2)
        envelopes.append(env)

    y = np.zeros(n)
    f0_max = word.f0 * 1.02 + abs(word.f0_slope) * config.duration_s / 2
    n_harm = int(BAND_HI // f0_max)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = np.zeros(n)
        for centre, env in zip(centres, envelopes):
            # bandwidth tracks the mel filter width so every formant fills its bin alike
            bw = FORMANT_BW * (700.0 + centre)
            amp += env * np.exp(-0.5 * ((fh - centre) / bw) ** 2)
        y += amp * np.sin(h * phase)
    peak = np.max(np.abs(y))
    y = y * (PEAK / peak) if peak > 0 else y
    if rng is not None and config.noise_floor > 0:
        y = y + config.noise_floor * _mel_flat_noise(n, rng)
    return np.clip(y, -1.0, 1.0)


def _mel_flat_noise(n: int, rng) -> np.ndarray:
    # amplitude spectrum ~ 1 / (700 + f) offsets the growth of mel filter bandwidth
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / SPEECH_RATE)
    return np.fft.irfft(spec * 700.0 / (700.0 + f), n)


def _pcc(a, b) -> float:
    a, b = np.ravel(a) - np.mean(a), np.ravel(b) - np.mean(b)
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


@lru_cache(maxsize=16)
def word_prototypes(config: SynthConfig) -> tuple:
    """Word prototypes, drawn in order and redrawn until no two words' mels correlate >= max_word_pcc."""
    words, mels = [], []
    for w in range(config.n_words):
        for attempt in range(1000):
            cand = _draw_word(_rng(config.seed, w, attempt), config)
            mel = mel_spectrogram(_render(cand, config)).values if config.n_samples >= 400 else None
            if mel is None or all(_pcc(mel, m) < config.max_word_pcc for m in mels):
                break
        else:  # pragma: no cover - inventory far too small for n_words
            raise RuntimeError(f"could not draw a distinct prototype for word {w}")
        words.append(cand)
        if mel is not None:
            mels.append(mel)
    return tuple(words)


def generate_speech_like(word_id: int, trial: int, config: SynthConfig) -> SpeechWaveform:
    if not 0 <= word_id < config.n_words:
        raise ValueError(f"word_id {word_id} outside 0..{config.n_words - 1}")
    if trial < 0:
        raise ValueError("trial must be >= 0")
    word = word_prototypes(config)[word_id]
    return SpeechWaveform(_render(word, config, _rng(config.seed, word_id, trial, 1)), SPEECH_RATE)


def carrier_frequencies(n: int) -> np.ndarray:
    """Per-band carrier frequencies (Hz) inside the 2 kHz ECoG bandwidth."""
    return np.linspace(CARRIER_LO, CARRIER_HI, n)


@lru_cache(maxsize=16)
def mixing_filters(config: SynthConfig):
    """Non-negative FIR filters ``channels x bands x taps`` and carrier phases ``channels x bands``."""
    rng = _rng(config.seed, 2**31 - 1)
    shape = (config.channels, config.n_formants)
    decay = np.exp(-np.arange(config.fir_taps) / (config.fir_taps / 3))
    h = np.abs(rng.standard_normal(shape + (config.fir_taps,))) * decay
    h *= (rng.uniform(0.3, 1.0, shape) / h.sum(axis=-1))[..., None]
    phases = rng.uniform(0, 2 * np.pi, shape)
    h.setflags(write=False)
    phases.setflags(write=False)
    return h, phases


def subband_envelopes(speech: SpeechWaveform, n_bands: int) -> np.ndarray:
    """Log energy envelopes of the formant sub-bands relative to a fixed floor.

    Returns ``bands x samples`` at 2 kHz; values are >= 0.
    """
    x = np.asarray(speech.samples, dtype=np.float64)
    edges = band_edges(n_bands)
    lp = butter(4, ENVELOPE_CUTOFF_HZ, fs=SPEECH_RATE, output="sos")
    step = SPEECH_RATE // ECOG_RATE
    n_out = int(round(x.shape[0] * ECOG_RATE / SPEECH_RATE))
    out = np.empty((n_bands, n_out))
    for b in range(n_bands):
        bp = butter(4, [edges[b], min(edges[b + 1], SPEECH_RATE / 2 - 1)], btype="band",
                    fs=SPEECH_RATE, output="sos")
        energy = np.maximum(sosfiltfilt(lp, sosfilt(bp, x) ** 2), 0.0)
        out[b] = np.log1p(energy / ENVELOPE_EPS)[::step][:n_out]
    return out


def clean_ecog(speech: SpeechWaveform, config: SynthConfig) -> np.ndarray:
    """Noise-free channels: FIR-smeared envelopes, each riding on its band's carrier."""
    env = subband_envelopes(speech, config.n_formants)
    h, phases = mixing_filters(config)
    n = env.shape[1]
    t = np.arange(n) / ECOG_RATE
    carriers = carrier_frequencies(config.n_formants)
    clean = np.zeros((config.channels, n))
    for c in range(config.channels):
        for b in range(env.shape[0]):
            amp = np.convolve(env[b], h[c, b])[:n]
            clean[c] += amp * np.cos(2 * np.pi * carriers[b] * t + phases[c, b])
    return clean


def derive_ecog(speech: SpeechWaveform, config: SynthConfig, noise_rng=None) -> EcogRecording:
    clean = clean_ecog(speech, config)
    if np.isinf(config.snr_db):
        return EcogRecording(clean, ECOG_RATE)
    rng = noise_rng if noise_rng is not None else _rng(config.seed, 2**31 - 2)
    noise_std = np.sqrt(clean.var(axis=1, keepdims=True) / 10 ** (config.snr_db / 10))
    return EcogRecording(clean + noise_std * rng.standard_normal(clean.shape), ECOG_RATE)


def generate_pair(word_id: int, trial: int, config: SynthConfig):
    speech = generate_speech_like(word_id, trial, config)
    ecog = derive_ecog(speech, config, _rng(config.seed, word_id, trial, 2))
    return ecog, speech


def generate_corpus(config: SynthConfig, out_dir) -> Path:
    """Write every trial as float32 WAVs plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "ecog").mkdir(parents=True, exist_ok=True)
    (out / "speech").mkdir(parents=True, exist_ok=True)
    entries = []
    for w in range(config.n_words):
        for t in range(config.trials_per_word):
            ecog, speech = generate_pair(w, t, config)
            uid = f"{word_label(w)}_t{t:02d}"
            e = ManifestEntry(uid, word_label(w), t, str(out / "ecog" / f"{uid}.wav"),
                              str(out / "speech" / f"{uid}.wav"))
            write_signal(e.ecog_path, ecog.samples, ECOG_RATE)
            write_signal(e.speech_path, speech.samples, SPEECH_RATE)
            entries.append(e)
    (out / "synth_config.json").write_text(json.dumps(asdict(config), indent=2))
    return write_manifest(entries, out / "manifest.jsonl", relative_to=out)


def demodulate(ecog: EcogRecording, config: SynthConfig) -> np.ndarray:
    """Recover per-channel, per-carrier amplitude envelopes: ``(channels * bands) x samples``."""
    x = np.asarray(ecog.samples, dtype=np.float64)
    t = np.arange(x.shape[1]) / ECOG_RATE
    lp = butter(4, ENVELOPE_CUTOFF_HZ, fs=ECOG_RATE, output="sos")
    out = []
    for ch in x:
        for f in carrier_frequencies(config.n_formants):
            out.append(np.abs(sosfiltfilt(lp, ch * np.exp(-2j * np.pi * f * t))))
    return np.array(out)


def _frame_features(ecog: EcogRecording, config: SynthConfig, frames: int) -> np.ndarray:
    # average the demodulated envelopes over each 25 ms / 10 ms mel frame, plus a bias column
    env = demodulate(ecog, config)
    win, hop = ECOG_RATE * 25 // 1000, ECOG_RATE * 10 // 1000
    feats = np.array([env[:, i * hop:i * hop + win].mean(axis=1) for i in range(frames)])
    return np.hstack([feats, np.ones((frames, 1))])


def least_squares_oracle(train_pairs, test_pairs, config: SynthConfig, bins: int = 13):
    """Closed-form linear map from demodulated ECoG envelopes to mel frames.

    ``*_pairs`` are ``(EcogRecording, SpeechWaveform)`` tuples. Returns the
    per-utterance PCC on ``test_pairs``.
    """
    def design(pairs):
        xs, ys = [], []
        for ecog, speech in pairs:
            mel = mel_spectrogram(speech, bins).values.astype(np.float64)
            xs.append(_frame_features(ecog, config, mel.shape[0]))
            ys.append(mel)
        return xs, ys

    xs, ys = design(train_pairs)
    weights = np.linalg.lstsq(np.vstack(xs), np.vstack(ys), rcond=None)[0]
    xs, ys = design(test_pairs)
    return [_pcc(x @ weights, y) for x, y in zip(xs, ys)]
