"""Corpus manifests, recording I/O, corpus splitting and the ``.melbin`` exchange format.

Manifests are JSON lines, one object per utterance::

    {"id": "w03_t05", "word_label": "w03", "trial_index": 5,
     "ecog_path": "ecog/w03_t05.wav", "speech_path": "speech/w03_t05.wav"}

Relative paths resolve against the manifest's directory.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import SPEECH_RATE, MelSpectrogram

ECOG_RATE = 2000
MELBIN_SUFFIX = ".melbin"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    word_label: str
    trial_index: int
    ecog_path: str
    speech_path: str


@dataclass
class CorpusSplit:
    train: list = field(default_factory=list)
    seen_test: list = field(default_factory=list)
    unseen_test: list = field(default_factory=list)

    @property
    def heldout(self) -> list:
        return self.seen_test + self.unseen_test


@dataclass(frozen=True)
class EcogRecording:
    samples: np.ndarray  # channels x time
    sample_rate: int = ECOG_RATE

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise DataError(f"ECoG samples must be channels x time, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("ECoG samples contain non-finite values")

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


@dataclass(frozen=True)
class SpeechWaveform:
    samples: np.ndarray
    sample_rate: int = SPEECH_RATE

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise DataError(f"speech must be mono, got shape {self.samples.shape}")
        if self.sample_rate != SPEECH_RATE:
            raise DataError(f"expected {SPEECH_RATE} Hz speech, got {self.sample_rate} Hz")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("speech samples contain non-finite values")
        if np.max(np.abs(self.samples), initial=0.0) > 1.0:
            raise DataError("speech samples must lie in [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


# ---------------------------------------------------------------- manifests

def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def load_manifest(path) -> list:
    """Read a JSON-lines manifest; paths in the returned entries are absolute."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    entries, seen_ids, seen_trials = [], set(), set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = ManifestEntry(
                    id=str(rec["id"]),
                    word_label=str(rec["word_label"]),
                    trial_index=int(rec["trial_index"]),
                    ecog_path=str(_resolve(base, rec["ecog_path"])),
                    speech_path=str(_resolve(base, rec["speech_path"])),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest record ({exc})") from exc
            if entry.trial_index < 0:
                raise DataError(f"entry {entry.id!r}: negative trial_index")
            if entry.id in seen_ids:
                raise DataError(f"duplicate manifest id {entry.id!r}")
            key = (entry.word_label, entry.trial_index)
            if key in seen_trials:
                raise DataError(
                    f"entry {entry.id!r}: trial {entry.trial_index} repeated for word {entry.word_label!r}"
                )
            for p in (entry.ecog_path, entry.speech_path):
                if not os.access(p, os.R_OK):
                    raise DataError(f"entry {entry.id!r}: unreadable file {p}")
            seen_ids.add(entry.id)
            seen_trials.add(key)
            entries.append(entry)
    return entries


def write_manifest(entries, path, relative_to=None) -> Path:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else None
    with open(path, "w") as fh:
        for e in entries:
            rec = asdict(e)
            if base is not None:
                for k in ("ecog_path", "speech_path"):
                    rec[k] = os.path.relpath(rec[k], base)
            fh.write(json.dumps(rec) + "\n")
    return path


def split_corpus(entries, unseen_word: str, heldout_trial: int = 0) -> CorpusSplit:
    """Hold out every trial of ``unseen_word`` plus trial ``heldout_trial`` of each other word."""
    words = {e.word_label for e in entries}
    if unseen_word not in words:
        raise DataError(f"unseen word {unseen_word!r} does not occur in the corpus")
    trials = {}
    for e in entries:
        trials.setdefault(e.word_label, set()).add(e.trial_index)
    for word in sorted(words - {unseen_word}):
        if heldout_trial not in trials[word]:
            raise DataError(f"word {word!r} has no trial {heldout_trial} to hold out")

    split = CorpusSplit()
    for e in entries:
        if e.word_label == unseen_word:
            split.unseen_test.append(e)
        elif e.trial_index == heldout_trial:
            split.seen_test.append(e)
        else:
            split.train.append(e)
    return split


# ---------------------------------------------------------------- recordings

def _read_raw_f32(path: Path):
    sidecar = Path(str(path) + ".json")
    if not sidecar.is_file():
        raise DataError(f"raw recording {path} has no sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text())
    channels, rate = int(meta["channels"]), int(meta["sample_rate"])
    data = np.fromfile(path, dtype="<f4")
    if data.size % channels:
        raise DataError(f"{path}: payload of {data.size} floats is not divisible by {channels} channels")
    # time-major interleaving, as in a WAV payload
    return rate, data.reshape(-1, channels).T


def read_signal(path):
    """Return ``(sample_rate, channels x time float64 array)`` from a WAV or raw ``.f32`` file."""
    path = Path(path)
    if path.suffix == ".f32":
        rate, data = _read_raw_f32(path)
    else:
        rate, data = wavfile.read(path)
        data = np.atleast_2d(data.T) if data.ndim == 2 else data[None, :]
        if np.issubdtype(data.dtype, np.integer):
            data = data / float(np.iinfo(data.dtype).max)
    return int(rate), np.asarray(data, dtype=np.float64)


def write_signal(path, samples, sample_rate: int) -> None:
    """Write a float32 WAV; ``samples`` is a vector or ``channels x time``."""
    x = np.asarray(samples, dtype=np.float32)
    wavfile.write(path, sample_rate, x.T if x.ndim == 2 else x)


def write_raw_f32(path, samples, sample_rate: int) -> None:
    x = np.atleast_2d(np.asarray(samples, dtype="<f4"))
    x.T.tofile(path)
    Path(str(path) + ".json").write_text(
        json.dumps({"channels": x.shape[0], "sample_rate": sample_rate})
    )


def read_ecog(path, expected_rate: int = ECOG_RATE, expected_channels=None) -> EcogRecording:
    rate, data = read_signal(path)
    if rate != expected_rate:
        raise DataError(f"{path}: expected {expected_rate} Hz ECoG, got {rate} Hz")
    if expected_channels is not None and data.shape[0] != expected_channels:
        raise DataError(f"{path}: expected {expected_channels} channels, got {data.shape[0]}")
    return EcogRecording(data, rate)


def read_recording(entry: ManifestEntry, ecog_rate: int = ECOG_RATE, channels=None):
    ecog = read_ecog(entry.ecog_path, ecog_rate, channels)
    rate, speech = read_signal(entry.speech_path)
    if rate != SPEECH_RATE:
        raise DataError(f"{entry.speech_path}: expected {SPEECH_RATE} Hz speech, got {rate} Hz")
    if speech.shape[0] != 1:
        raise DataError(f"{entry.speech_path}: speech must be mono, got {speech.shape[0]} channels")
    return ecog, SpeechWaveform(speech[0], rate)


# ---------------------------------------------------------------- mel exchange

def _melbin_paths(path):
    path = Path(path)
    if path.suffix != MELBIN_SUFFIX:
        path = path.with_name(path.name + MELBIN_SUFFIX)
    return path, Path(str(path) + ".json")


def write_mel(mel, path) -> Path:
    """Write little-endian float32 row-major payload plus a JSON shape sidecar."""
    values = np.asarray(getattr(mel, "values", mel))
    if values.ndim != 2:
        raise DataError(f"mel must be frames x bins, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DataError("mel contains non-finite values")
    payload, sidecar = _melbin_paths(path)
    np.ascontiguousarray(values, dtype="<f4").tofile(payload)
    sidecar.write_text(json.dumps({
        "frames": int(values.shape[0]),
        "bins": int(values.shape[1]),
        "hop_ms": 10,
        "win_ms": 25,
        "log_base": "natural",
    }))
    return payload


def read_mel(path) -> MelSpectrogram:
    payload, sidecar = _melbin_paths(path)
    if not sidecar.is_file():
        raise DataError(f"missing mel sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    frames, bins = int(meta["frames"]), int(meta["bins"])
    data = np.fromfile(payload, dtype="<f4")
    if data.size != frames * bins:
        raise DataError(
            f"{payload}: sidecar declares {frames} x {bins} = {frames * bins} values, payload holds {data.size}"
        )
    return MelSpectrogram(data.reshape(frames, bins).astype(np.float32),
                          hop_ms=meta.get("hop_ms", 10), win_ms=meta.get("win_ms", 25))
