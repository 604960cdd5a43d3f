"""Audio I/O, log-mel features, utterance normalization, and energy VAD.

All functions are pure; parallel use across utterances is safe. Only 16 kHz
mono audio is accepted. Features are 80-dimensional log-mel filterbank
magnitudes over 25 ms frames at a 10 ms shift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.io import wavfile

from .errors import ArtifactError, ShapeError

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 80
FMIN = 20.0
FMAX = 7600.0
LOG_FLOOR = 1e-10

_FEAT_MAGIC = b"FEAT1"


@dataclass
class AudioUtterance:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int
    utterance_id: str
    speaker_id: str
    transcript: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise ArtifactError(f"sample rate {self.sample_rate}, only {SAMPLE_RATE} supported")
        if self.samples.size == 0:
            raise ShapeError(f"empty audio in utterance {self.utterance_id!r}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, d)
    frame_shift: float
    normalized: bool = False

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class VadMask:
    voiced: np.ndarray  # (T,) bool

    @property
    def num_voiced(self) -> int:
        return int(np.count_nonzero(self.voiced))

    @property
    def any_voiced(self) -> bool:
        return bool(self.voiced.any())


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


# width of one filter step on the mel axis
MEL_FILTER_STEP = float(hz_to_mel(FMAX) - hz_to_mel(FMIN)) / (N_MELS + 1)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Triangular unit-peak mel filters on rfft bins: (n_mels, n_fft//2 + 1)."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, bin_hz.size))
    for k in range(n_mels):
        lo, center, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[k] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


_FILTERBANK = mel_filterbank()
_WINDOW = _periodic_hann(FRAME_LEN)


def num_frames(n_samples: int) -> int:
    if n_samples < FRAME_LEN:
        raise ShapeError(f"audio of {n_samples} samples is shorter than one {FRAME_LEN}-sample frame")
    return 1 + (n_samples - FRAME_LEN) // FRAME_SHIFT


def _frame_signal(samples: np.ndarray) -> np.ndarray:
    T = num_frames(samples.size)
    windows = np.lib.stride_tricks.sliding_window_view(samples, FRAME_LEN)
    return windows[: (T - 1) * FRAME_SHIFT + 1 : FRAME_SHIFT]


def extract_logmel(utt: AudioUtterance) -> FeatureMatrix:
    """80-dim log-mel magnitudes: Hann window, 512-point rfft, ln with 1e-10 floor."""
    frames = _frame_signal(utt.samples) * _WINDOW
    spectrum = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    mel = spectrum @ _FILTERBANK.T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    return FeatureMatrix(frames=logmel, frame_shift=FRAME_SHIFT / SAMPLE_RATE, normalized=False)


def normalize(feat: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance, per-dimension zero mean / unit (population) variance.

    Dimensions with zero variance become all-zero rather than dividing by zero.
    """
    if feat.normalized:
        raise ValueError("feature matrix already normalized")
    mean = feat.frames.mean(axis=0)
    std = feat.frames.std(axis=0)
    out = np.where(std > 1e-12, (feat.frames - mean) / np.where(std > 1e-12, std, 1.0), 0.0)
    return replace(feat, frames=out, normalized=True)


def _audio_frame_levels_db(samples: np.ndarray) -> np.ndarray:
    frames = _frame_signal(samples)
    power = np.mean(frames * frames, axis=1)
    return 10.0 * np.log10(np.maximum(power, 1e-30))


def _feature_frame_levels_db(frames: np.ndarray) -> np.ndarray:
    # log-mel rows -> total mel magnitude per frame, expressed in dB
    m = frames.max(axis=1, keepdims=True)
    total = m[:, 0] + np.log(np.sum(np.exp(frames - m), axis=1))
    return (20.0 / np.log(10.0)) * total


# A frame of digital silence sits exactly at the log floor; anything at or
# below one dB above that level is never treated as voiced.
_FEATURE_SILENCE_DB = (20.0 / np.log(10.0)) * np.log(N_MELS * LOG_FLOOR) + 1.0

RELATIVE_THRESHOLD_DB = 30.0
ABSOLUTE_FLOOR_DBFS = -60.0


def energy_vad(x: AudioUtterance | FeatureMatrix) -> VadMask:
    """Frame voiced iff within 30 dB of the loudest frame and above an absolute floor.

    For raw audio the floor is -60 dB re full scale; for features it is the
    level of an all-floor (silent) frame. Digital silence yields an all-false
    mask; callers that need speech must treat that as a no-speech condition.
    """
    if isinstance(x, AudioUtterance):
        levels = _audio_frame_levels_db(x.samples)
        floor = ABSOLUTE_FLOOR_DBFS
    elif isinstance(x, FeatureMatrix):
        if x.normalized:
            raise ValueError("energy VAD needs unnormalized features")
        levels = _feature_frame_levels_db(x.frames)
        floor = _FEATURE_SILENCE_DB
    else:
        raise TypeError(f"energy_vad expects audio or features, got {type(x).__name__}")
    voiced = (levels > levels.max() - RELATIVE_THRESHOLD_DB) & (levels > floor)
    return VadMask(voiced=voiced)


# -- file formats ----------------------------------------------------------------


def read_wav(path, utterance_id: str = "", speaker_id: str = "", transcript: str = "") -> AudioUtterance:
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ArtifactError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ArtifactError(f"{path}: unsupported sample format {data.dtype}")
    return AudioUtterance(samples, rate, utterance_id or str(path), speaker_id, transcript)


def write_wav(path, utt: AudioUtterance) -> None:
    scaled = np.clip(np.rint(utt.samples * 32768.0), -32768, 32767)
    wavfile.write(path, utt.sample_rate, scaled.astype(np.int16))


def write_feat(path, feat: FeatureMatrix) -> None:
    """FEAT1 container: magic, u32 T, u32 d, row-major f64 (little-endian)."""
    T, d = feat.frames.shape
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<II", T, d))
        fh.write(feat.frames.astype("<f8").tobytes())


def read_feat(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(len(_FEAT_MAGIC))
        if magic != _FEAT_MAGIC:
            raise ArtifactError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise ArtifactError(f"{path}: truncated header")
        T, d = struct.unpack("<II", header)
        payload = fh.read(T * d * 8)
        if len(payload) != T * d * 8:
            raise ArtifactError(f"{path}: truncated payload")
        frames = np.frombuffer(payload, dtype="<f8").reshape(T, d).copy()
    return FeatureMatrix(frames=frames, frame_shift=FRAME_SHIFT / SAMPLE_RATE, normalized=False)
