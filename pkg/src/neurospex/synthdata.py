"""Synthetic two-talker corpus with EEG that tracks the attended talker.

Speech is a harmonic source with a drifting pitch contour, syllable-rate
amplitude modulation, pauses and a spectral tilt. EEG is a linear forward
model: every channel is a lagged filtering of the attended envelope plus a
weaker filtering of the unattended envelope plus Gaussian noise.

All randomness comes from Philox generators keyed by
``(global_seed, subject, trial, stream)``, so any trial can be regenerated on
its own and the corpus does not depend on generation order.

Trials ``2k`` and ``2k + 1`` of a subject replay the same two talker
recordings with attention swapped. Any audio-only cue to the target is
then balanced across the corpus, and only the EEG tells the talkers apart.
"""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from .signals import (
    AUDIO_RATE,
    EEG_CHANNELS,
    EEG_RATE,
    AudioSignal,
    EEGRecording,
    SegmentExample,
    envelope,
    equalize_and_mix,
    normalize_trial,
    read_eeg,
    read_wav,
    segment_trial,
    write_eeg,
    write_wav,
)

log = logging.getLogger(__name__)

LAG_TAPS = 32  # 0-242 ms at 128 Hz
PEAK = 0.9
SPLITS = ("train", "val", "test")

# stream ids for key derivation
_SPEECH, _EEG_NOISE, _FORWARD, _SPLIT, _SPEAKERS, _TRIAL, _CONTENT = range(7)


def make_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class SpeakerProfile:
    pitch_base: float  # Hz
    pitch_drift: float  # Hz/s declination within a phrase
    formant_tilt: float  # dB/octave over the harmonic series
    seed: int

    def __post_init__(self):
        if not 80.0 <= self.pitch_base <= 200.0:
            raise ValueError(f"pitch_base {self.pitch_base} Hz outside [80, 200]")


@dataclass
class ForwardModel:
    attended_kernels: np.ndarray  # [channels, lag_taps]
    unattended_kernels: np.ndarray
    attended_gain: float = 1.0
    unattended_gain: float = 0.3
    noise_sigma: float = 0.5
    subject_seed: int = 0

    def __post_init__(self):
        if not self.attended_gain > self.unattended_gain >= 0:
            raise ValueError("need attended_gain > unattended_gain >= 0")
        if self.attended_kernels.shape != self.unattended_kernels.shape:
            raise ValueError("kernel banks differ in shape")
        if self.attended_kernels.shape[1] > LAG_TAPS:
            raise ValueError(f"at most {LAG_TAPS} lag taps (250 ms at 128 Hz)")


# -- speech --------------------------------------------------------------------

def _syllable_envelope(rng: np.random.Generator, n: int, fs: int) -> tuple[np.ndarray, np.ndarray]:
    """Syllable bumps grouped in phrases; also returns time since phrase onset."""
    env = np.zeros(n)
    since_onset = np.zeros(n)
    t = int(rng.uniform(0.0, 0.3) * fs)
    while t < n:
        phrase_end = t + int(rng.uniform(1.0, 3.0) * fs)
        onset = t
        while t < min(phrase_end, n):
            dur = int(rng.uniform(0.10, 0.30) * fs)
            stop = min(t + dur, n)
            bump = np.hanning(dur + 2)[1:-1] ** 0.7 * rng.uniform(0.5, 1.0)
            env[t:stop] = bump[: stop - t]
            t = stop + int(rng.uniform(0.02, 0.08) * fs)
        stop = min(t, n)
        since_onset[onset:stop] = np.arange(stop - onset) / fs
        t += int(rng.uniform(0.15, 0.4) * fs)
    return env, since_onset


def gen_speaker_signal(profile: SpeakerProfile, duration_s: float, sample_rate: int = AUDIO_RATE) -> AudioSignal:
    """Speech-like harmonic signal; a pure function of ``profile``."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * sample_rate))
    rng = make_rng(profile.seed, _SPEECH)
    t = np.arange(n) / sample_rate

    knots = np.arange(0.0, duration_s + 0.5, 0.25)
    wander = np.tanh(CubicSpline(knots, rng.standard_normal(len(knots)))(t))
    env, since_onset = _syllable_envelope(rng, n, sample_rate)
    f0 = profile.pitch_base * (1.0 + 0.1 * wander) - profile.pitch_drift * since_onset
    f0 = np.maximum(f0, 0.7 * profile.pitch_base)

    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(0.45 * sample_rate / (1.15 * profile.pitch_base))
    voiced = np.zeros(n)
    for k in range(1, n_harm + 1):
        amp = 10.0 ** (profile.formant_tilt * np.log2(k) / 20.0)
        voiced += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # a little aspiration noise inside syllables
    sos = signal.butter(2, 1500, btype="highpass", fs=sample_rate, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    x = env * (voiced / np.sqrt(n_harm) + 0.05 * noise)
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= PEAK / peak
    return AudioSignal(x, sample_rate)


# -- EEG forward model ---------------------------------------------------------

def _response_bank(rng: np.random.Generator, channels: int, taps: int) -> np.ndarray:
    lag = np.arange(taps) / EEG_RATE
    latency = rng.uniform(0.04, 0.10)
    main = (lag / latency) * np.exp(1.0 - lag / latency)
    late = -0.5 * (lag / (2 * latency)) ** 2 * np.exp(2.0 - lag / latency)
    temporal = main + late
    temporal /= np.linalg.norm(temporal)
    # smooth spatial topography across the channel index
    spatial = np.convolve(rng.standard_normal(channels + 8), np.hanning(9), mode="valid")
    spatial /= np.sqrt(np.mean(spatial**2))
    jitter = 1.0 + 0.1 * rng.standard_normal((channels, 1))
    return spatial[:, None] * temporal[None, :] * jitter


def make_forward_model(
    subject_seed: int,
    channels: int = EEG_CHANNELS,
    taps: int = LAG_TAPS,
    attended_gain: float = 1.0,
    unattended_gain: float = 0.3,
    noise_sigma: float = 0.5,
) -> ForwardModel:
    rng = make_rng(subject_seed, _FORWARD)
    return ForwardModel(
        attended_kernels=_response_bank(rng, channels, taps),
        unattended_kernels=_response_bank(rng, channels, taps),
        attended_gain=attended_gain,
        unattended_gain=unattended_gain,
        noise_sigma=noise_sigma,
        subject_seed=subject_seed,
    )


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def _filter_bank(kernels: np.ndarray, env: np.ndarray) -> np.ndarray:
    return signal.oaconvolve(env[None, :], kernels, axes=1)[:, : len(env)]


def gen_eeg(att: AudioSignal, unatt: AudioSignal, fm: ForwardModel, seed: int | None = None) -> EEGRecording:
    """Simulated 128 Hz EEG, normalized per channel over the trial."""
    if len(att) != len(unatt) or att.sample_rate != unatt.sample_rate:
        raise ValueError("attended and unattended audio must have equal durations")
    env_a = _zscore(envelope(att))
    env_u = _zscore(envelope(unatt))
    eeg = fm.attended_gain * _filter_bank(fm.attended_kernels, env_a)
    eeg = eeg + fm.unattended_gain * _filter_bank(fm.unattended_kernels, env_u)
    if fm.noise_sigma > 0:
        rng = make_rng(fm.subject_seed if seed is None else seed, _EEG_NOISE)
        eeg = eeg + fm.noise_sigma * rng.standard_normal(eeg.shape)
    return EEGRecording(normalize_trial(eeg), EEG_RATE)


# -- corpus --------------------------------------------------------------------

@dataclass
class CorpusManifest:
    subjects: int = 4
    trials_per_subject: int = 4
    trial_duration_s: float = 60.0
    global_seed: int = 2024
    val_trials: int = 2
    attended_gain: float = 1.0
    unattended_gain: float = 0.3
    noise_sigma: float = 0.5
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.subjects < 1 or self.trials_per_subject < 1:
            raise ValueError("need at least one subject and one trial")
        if self.trial_duration_s <= 0:
            raise ValueError("trial duration must be positive")
        if not self.splits:
            self.splits = assign_splits(self)

    @classmethod
    def full_scale(cls, **overrides) -> "CorpusManifest":
        """16 subjects x 8 trials x 6 min, four validation trials."""
        base = dict(subjects=16, trials_per_subject=8, trial_duration_s=360.0, val_trials=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusManifest":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known - {"trials", "speakers", "total_hours"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in known})

    @property
    def n_trials(self) -> int:
        return self.subjects * self.trials_per_subject

    @property
    def total_hours(self) -> float:
        return self.n_trials * self.trial_duration_s / 3600.0

    def trials(self, split: str | None = None) -> list[tuple[int, int]]:
        keys = [(s, t) for s in range(self.subjects) for t in range(self.trials_per_subject)]
        if split is None:
            return keys
        return [k for k in keys if self.splits[trial_key(*k)] == split]


def trial_key(subject: int, trial: int) -> str:
    return f"subject_{subject}/trial_{trial}"


def assign_splits(manifest: CorpusManifest) -> dict[str, str]:
    """One random test trial per subject; ``val_trials`` random trials from the rest; others train.

    Validation trials alternate between the two attended talkers when the
    remaining trials allow it. The validation count is reduced when needed so
    that at least one training trial remains.
    """
    rng = make_rng(manifest.global_seed, _SPLIT)
    splits = {}
    remaining = []
    for s in range(manifest.subjects):
        test = int(rng.integers(manifest.trials_per_subject))
        for t in range(manifest.trials_per_subject):
            if t == test:
                splits[trial_key(s, t)] = "test"
            else:
                remaining.append((s, t))
    n_val = min(manifest.val_trials, max(len(remaining) - 1, 0))
    # walk the non-test trials in random order, alternating the attended talker where possible
    order = rng.permutation(len(remaining)).tolist()
    by_talker = [[i for i in order if attended_speaker(manifest.global_seed, *remaining[i]) == k] for k in (0, 1)]
    chosen = set()
    talker = int(rng.integers(2))
    while len(chosen) < n_val:
        pool = by_talker[talker] or by_talker[1 - talker]
        chosen.add(pool.pop(0))
        talker = 1 - talker
    for i, (s, t) in enumerate(remaining):
        splits[trial_key(s, t)] = "val" if i in chosen else "train"
    return splits


def corpus_speakers(global_seed: int) -> list[dict]:
    """Two talkers with distinct pitch ranges, fixed for a corpus."""
    rng = make_rng(global_seed, _SPEAKERS)
    return [
        dict(pitch_base=float(rng.uniform(95, 110)), pitch_drift=float(rng.uniform(4, 8)), formant_tilt=float(rng.uniform(-9, -6))),
        dict(pitch_base=float(rng.uniform(135, 150)), pitch_drift=float(rng.uniform(4, 8)), formant_tilt=float(rng.uniform(-7, -4))),
    ]


def attended_speaker(global_seed: int, subject: int, trial: int) -> int:
    """Attention alternates between the two talkers across a subject's trials, from a random start."""
    start = int(make_rng(global_seed, subject, _SPEAKERS).integers(2))
    return (start + trial) % 2


def trial_plan(manifest: CorpusManifest, subject: int, trial: int) -> dict:
    """Everything needed to regenerate one trial.

    ``content_seeds[i]`` drives talker ``i``'s speech and is shared by the
    trial pair ``(2k, 2k + 1)``, whose attended talkers differ.
    """
    rng = make_rng(manifest.global_seed, subject, trial, _TRIAL)
    attended = attended_speaker(manifest.global_seed, subject, trial)
    content = make_rng(manifest.global_seed, subject, trial // 2, _CONTENT)
    content_seeds = [int(x) for x in content.integers(0, 2**31 - 1, size=2)]
    return {
        "subject": subject,
        "trial": trial,
        "split": manifest.splits[trial_key(subject, trial)],
        "attended_speaker": attended,
        "content_seeds": content_seeds,
        "noise_seed": int(rng.integers(0, 2**31 - 1)),
        "subject_seed": int(make_rng(manifest.global_seed, subject, _FORWARD).integers(0, 2**31 - 1)),
    }


def generate_trial(manifest: CorpusManifest, subject: int, trial: int) -> tuple[AudioSignal, AudioSignal, AudioSignal, EEGRecording, dict]:
    """Returns ``(attended, scaled_unattended, mixture, eeg, plan)``."""
    plan = trial_plan(manifest, subject, trial)
    speakers = corpus_speakers(manifest.global_seed)
    a = plan["attended_speaker"]
    profiles = [SpeakerProfile(seed=plan["content_seeds"][i], **speakers[i]) for i in range(2)]
    att = gen_speaker_signal(profiles[a], manifest.trial_duration_s)
    unatt = gen_speaker_signal(profiles[1 - a], manifest.trial_duration_s)
    mixture, scaled = equalize_and_mix(att, unatt)
    gain = min(1.0, 0.98 / np.max(np.abs(mixture.samples)))
    att = AudioSignal(att.samples * gain)
    scaled = AudioSignal(scaled.samples * gain)
    mixture = AudioSignal(mixture.samples * gain)
    fm = make_forward_model(
        plan["subject_seed"],
        attended_gain=manifest.attended_gain,
        unattended_gain=manifest.unattended_gain,
        noise_sigma=manifest.noise_sigma,
    )
    eeg = gen_eeg(att, scaled, fm, seed=plan["noise_seed"])
    return att, scaled, mixture, eeg, plan


def _write_trial(args) -> dict:
    manifest_doc, out_dir, subject, trial = args
    manifest = CorpusManifest.from_dict(manifest_doc)
    final = Path(out_dir) / trial_key(subject, trial)
    tmp = final.with_name(final.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        att, unatt, mix, eeg, plan = generate_trial(manifest, subject, trial)
        write_wav(tmp / "attended.wav", att)
        write_wav(tmp / "unattended.wav", unatt)
        write_wav(tmp / "mixture.wav", mix)
        write_eeg(tmp / "eeg", eeg, subject, trial)
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return plan


def build_corpus(manifest: CorpusManifest, out_dir: str | Path, workers: int = 1) -> Path:
    """Write every trial plus ``manifest.json`` under ``out_dir``.

    Layout: ``subject_{i}/trial_{j}/{attended,unattended,mixture}.wav``,
    ``eeg.f32`` and ``eeg.json``. Trials are written to a ``.partial``
    directory and renamed when complete; a failure removes the partial
    directory and re-raises.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = asdict(manifest)
    jobs = [(doc, str(out_dir), s, t) for s, t in manifest.trials()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            plans = list(pool.map(_write_trial, jobs))
    else:
        plans = [_write_trial(job) for job in jobs]
    log.info("wrote %d trials (%.2f h) to %s", len(plans), manifest.total_hours, out_dir)
    record = dict(doc, trials=plans, speakers=corpus_speakers(manifest.global_seed), total_hours=manifest.total_hours)
    (out_dir / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return out_dir


# -- reading -------------------------------------------------------------------

def load_manifest(corpus_dir: str | Path) -> CorpusManifest:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus at {corpus_dir} (manifest.json missing)")
    return CorpusManifest.from_dict(json.loads(path.read_text()))


def load_trial(corpus_dir: str | Path, subject: int, trial: int) -> tuple[AudioSignal, AudioSignal, EEGRecording]:
    d = Path(corpus_dir) / trial_key(subject, trial)
    eeg, _ = read_eeg(d / "eeg")
    return read_wav(d / "attended.wav"), read_wav(d / "unattended.wav"), eeg


def load_segments(corpus_dir: str | Path, split: str, window_s: float = 4.0, hop_s: float = 1.0) -> list[SegmentExample]:
    """Segments of every trial in ``split``; the mixture is attended + (already scaled) unattended."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    manifest = load_manifest(corpus_dir)
    out = []
    for s, t in manifest.trials(split):
        att, unatt, eeg = load_trial(corpus_dir, s, t)
        out.extend(segment_trial(att, unatt, eeg, window_s, hop_s, subject_id=s, trial_id=t, mix=False))
    return out
