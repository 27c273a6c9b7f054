"""Audio and EEG preprocessing: 0 dB mixing, segmentation, EEG cleanup, envelopes."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

AUDIO_RATE = 8000
EEG_RATE = 128
EEG_CHANNELS = 64
BAND = (1.0, 32.0)
FILTER_ORDER = 4
NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = AUDIO_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"audio must be mono, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def power(self) -> float:
        return float(np.mean(self.samples**2))


@dataclass(frozen=True)
class EEGRecording:
    data: np.ndarray
    sample_rate: int = EEG_RATE

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"EEG must be [channels x time], got shape {data.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(data)):
            raise ValueError("EEG contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channel_count(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class SegmentExample:
    mixture: AudioSignal
    attended: AudioSignal
    unattended: AudioSignal
    eeg: EEGRecording
    subject_id: int = 0
    trial_id: int = 0
    offset_s: float = 0.0
    segment_index: int = 0


# -- mixing and segmentation -------------------------------------------------

def equalize_and_mix(attended: AudioSignal, unattended: AudioSignal) -> tuple[AudioSignal, AudioSignal]:
    """Scale ``unattended`` to the mean-square power of ``attended`` and sum them.

    Returns ``(mixture, scaled_unattended)``.
    """
    if len(attended) != len(unattended):
        raise ValueError(f"length mismatch: {len(attended)} vs {len(unattended)}")
    if attended.sample_rate != unattended.sample_rate:
        raise ValueError(f"sample rate mismatch: {attended.sample_rate} vs {unattended.sample_rate}")
    p_att, p_unatt = attended.power, unattended.power
    if p_att <= 0 or p_unatt <= 0:
        raise ValueError("silent source")
    scale = np.sqrt(p_att / p_unatt)
    scaled = AudioSignal(unattended.samples * scale, unattended.sample_rate)
    mixture = AudioSignal(attended.samples + scaled.samples, attended.sample_rate)
    return mixture, scaled


def segment_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def segment_trial(
    attended: AudioSignal,
    unattended: AudioSignal,
    eeg: EEGRecording,
    window_s: float = 4.0,
    hop_s: float = 1.0,
    subject_id: int = 0,
    trial_id: int = 0,
    mix: bool = True,
) -> list[SegmentExample]:
    """Cut a trial into time-aligned windows.

    The trial is mixed at 0 dB over its full length first (``mix=False``
    treats ``unattended`` as already scaled). Audio window ``k`` starts at
    ``k * hop_s * audio_rate`` and the EEG window at ``k * hop_s * eeg_rate``.
    A trial shorter than one window yields an empty list and a warning.
    """
    fs_a, fs_e = attended.sample_rate, eeg.sample_rate
    if abs(attended.duration_s - eeg.duration_s) > 1.0 / fs_e:
        raise ValueError(f"audio ({attended.duration_s:.4f} s) and EEG ({eeg.duration_s:.4f} s) durations differ")
    win_a, hop_a = _to_samples(window_s, fs_a), _to_samples(hop_s, fs_a)
    win_e, hop_e = _to_samples(window_s, fs_e), _to_samples(hop_s, fs_e)
    n = min(segment_count(len(attended), win_a, hop_a), segment_count(eeg.n_samples, win_e, hop_e))
    if n == 0:
        warnings.warn(f"trial of {attended.duration_s:.2f} s is shorter than the {window_s} s window", stacklevel=2)
        return []
    if mix:
        mixture, scaled = equalize_and_mix(attended, unattended)
    else:
        scaled = unattended
        mixture = AudioSignal(attended.samples + unattended.samples, fs_a)
    out = []
    for k in range(n):
        a0, e0 = k * hop_a, k * hop_e
        cut = lambda s: AudioSignal(s.samples[a0 : a0 + win_a], fs_a)  # noqa: E731
        out.append(
            SegmentExample(
                mixture=cut(mixture),
                attended=cut(attended),
                unattended=cut(scaled),
                eeg=EEGRecording(eeg.data[:, e0 : e0 + win_e], fs_e),
                subject_id=subject_id,
                trial_id=trial_id,
                offset_s=k * hop_s,
                segment_index=k,
            )
        )
    return out


def _to_samples(seconds: float, rate: int) -> int:
    n = seconds * rate
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"{seconds} s is not a whole number of samples at {rate} Hz")
    return int(round(n))


# -- EEG preprocessing -------------------------------------------------------

def rereference_average(data: np.ndarray) -> np.ndarray:
    return data - data.mean(axis=0, keepdims=True)


def bandpass(data: np.ndarray, fs: float, low: float = BAND[0], high: float = BAND[1], order: int = FILTER_ORDER) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    sos = signal.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, data, axis=-1)


def decimate_integer(data: np.ndarray, fs: int, target: int = EEG_RATE) -> np.ndarray:
    """Keep every ``fs/target``-th sample. Input must already be band-limited below ``target/2``."""
    if fs % target:
        raise ValueError("unsupported decimation ratio")
    return data[..., :: fs // target].copy()


def normalize_trial(data: np.ndarray) -> np.ndarray:
    """Per-channel z-score over time. Channels with (numerically) zero spread are only centred."""
    centred = data - data.mean(axis=-1, keepdims=True)
    std = centred.std(axis=-1, keepdims=True)
    scale = np.where(std > NORM_FLOOR, std, 1.0)
    out = centred / scale
    return np.where(std > NORM_FLOOR, out, 0.0)


def preprocess_eeg(raw: EEGRecording, target_rate: int = EEG_RATE) -> EEGRecording:
    """Average re-reference, 1-32 Hz zero-phase band-pass, decimate to 128 Hz, z-normalize."""
    fs = raw.sample_rate
    if fs < 2 * target_rate:
        raise ValueError(f"raw EEG rate {fs} Hz is below {2 * target_rate} Hz")
    if fs % target_rate:
        raise ValueError("unsupported decimation ratio")
    x = rereference_average(raw.data)
    x = bandpass(x, fs)
    x = decimate_integer(x, fs, target_rate)
    return EEGRecording(normalize_trial(x), target_rate)


# -- envelope ----------------------------------------------------------------

def envelope(speech: AudioSignal, out_rate: int = EEG_RATE, cutoff: float = 32.0) -> np.ndarray:
    """Magnitude envelope: |x|, zero-phase low-pass at ``cutoff``, polyphase resample to ``out_rate``."""
    mag = np.abs(speech.samples)
    if not mag.any():
        n_out = -(-len(mag) * out_rate // speech.sample_rate)
        return np.zeros(n_out)
    sos = signal.butter(FILTER_ORDER, cutoff, btype="lowpass", fs=speech.sample_rate, output="sos")
    smooth = signal.sosfiltfilt(sos, mag)
    g = gcd(out_rate, speech.sample_rate)
    env = signal.resample_poly(smooth, out_rate // g, speech.sample_rate // g, padtype="line")
    return np.maximum(env, 0.0)


# -- interchange formats -------------------------------------------------------

def write_wav(path: str | Path, audio: AudioSignal) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), audio.sample_rate, pcm)


def read_wav(path: str | Path) -> AudioSignal:
    rate, pcm = wavfile.read(str(path))
    if pcm.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if pcm.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got {pcm.dtype}")
    return AudioSignal(pcm.astype(np.float64) / 32767.0, int(rate))


def write_eeg(stem: str | Path, eeg: EEGRecording, subject_id: int, trial_id: int) -> None:
    """Write ``<stem>.f32`` (little-endian float32, row-major [channels x time]) and ``<stem>.json``."""
    stem = Path(stem)
    stem.with_suffix(".f32").write_bytes(np.ascontiguousarray(eeg.data, dtype="<f4").tobytes())
    sidecar = {
        "channels": eeg.channel_count,
        "sample_rate": eeg.sample_rate,
        "subject_id": subject_id,
        "trial_id": trial_id,
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_eeg(stem: str | Path) -> tuple[EEGRecording, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    flat = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
    channels = int(meta["channels"])
    if flat.size % channels:
        raise ValueError(f"{stem}: {flat.size} values do not divide into {channels} channels")
    data = flat.reshape(channels, -1).astype(np.float64)
    return EEGRecording(data, int(meta["sample_rate"])), meta
