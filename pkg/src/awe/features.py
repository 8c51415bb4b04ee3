"""MFCC front end: 13-dimensional static cepstra from mono PCM audio.

Pipeline: pre-emphasis, 25 ms Hamming windows every 10 ms, power spectrum
(FFT size = next power of two >= window length), 26 triangular mel filters
(mel = 2595*log10(1 + f/700)), log with a small floor, DCT-II with ortho
scaling keeping coefficients 0..12, optional per-utterance mean/variance
normalisation. Every step is deterministic; identical input and config give
byte-identical output.
"""

from __future__ import annotations

import wave as wavmod
from dataclasses import dataclass

import numpy as np

SUPPORTED_SAMPLE_RATES = (8000, 16000, 22050, 44100, 48000)


@dataclass(frozen=True)
class Waveform:
    """Mono audio, samples normalised to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D sample array")
        if self.sample_rate not in SUPPORTED_SAMPLE_RATES:
            raise ValueError(
                f"unsupported sample rate {self.sample_rate} Hz "
                f"(supported: {SUPPORTED_SAMPLE_RATES})"
            )

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MfccConfig:
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 26
    n_ceps: int = 13
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    cmvn: bool = True

    def __post_init__(self):
        if self.n_ceps > self.n_mels:
            raise ValueError("n_ceps must not exceed n_mels")
        if not 0.0 <= self.preemphasis < 1.0:
            raise ValueError("preemphasis must be in [0, 1)")
        if self.window_ms < self.shift_ms:
            raise ValueError("window_ms must be >= shift_ms")
        if self.log_floor <= 0.0:
            raise ValueError("log_floor must be positive")


@dataclass(frozen=True)
class FeatureSequence:
    """A (T, D) matrix of acoustic features for one utterance."""

    frames: np.ndarray
    frame_shift_ms: float
    utterance_id: str

    def __post_init__(self):
        frames = np.asarray(self.frames)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("frames must be a (T, D) matrix with T >= 1")
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"non-finite feature values in {self.utterance_id!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters evaluated at FFT bin frequencies, unit peak.

    Returns an (n_mels, n_fft // 2 + 1) weight matrix. Filter j rises from
    edge j to edge j+1 and falls to edge j+2, the edges being n_mels + 2
    mel-equidistant points between 0 Hz and Nyquist.
    """
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fbank = np.zeros((n_mels, n_fft // 2 + 1))
    for j in range(n_mels):
        left, centre, right = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        rising = (bin_hz - left) / (centre - left)
        falling = (right - bin_hz) / (right - centre)
        fbank[j] = np.maximum(0.0, np.minimum(rising, falling))
    return fbank


def dct_matrix(n_ceps: int, n_mels: int) -> np.ndarray:
    """DCT-II rows with ortho scaling, mapping n_mels log energies to n_ceps."""
    m = np.arange(n_mels)
    mat = np.cos(np.pi * np.outer(np.arange(n_ceps), 2 * m + 1) / (2 * n_mels))
    mat *= np.sqrt(2.0 / n_mels)
    mat[0] /= np.sqrt(2.0)
    return mat


def _window_params(wave: Waveform, cfg: MfccConfig) -> tuple[int, int]:
    win = int(wave.sample_rate * cfg.window_ms / 1000.0 + 0.5)
    shift = int(wave.sample_rate * cfg.shift_ms / 1000.0 + 0.5)
    if wave.samples.size < win:
        raise ValueError(
            f"utterance too short: {wave.samples.size} samples < one "
            f"{cfg.window_ms} ms window ({win} samples)"
        )
    return win, shift


def _frame(x: np.ndarray, win: int, shift: int) -> np.ndarray:
    n_frames = 1 + (x.size - win) // shift
    idx = np.arange(win)[None, :] + shift * np.arange(n_frames)[:, None]
    return x[idx]


def log_mel_energies(wave: Waveform, cfg: MfccConfig) -> np.ndarray:
    """(T, n_mels) log mel filterbank energies, the pre-DCT representation."""
    win, shift = _window_params(wave, cfg)
    x = wave.samples.astype(np.float64)
    if cfg.preemphasis > 0.0:
        x = np.concatenate(([x[0]], x[1:] - cfg.preemphasis * x[:-1]))
    frames = _frame(x, win, shift) * np.hamming(win)
    n_fft = next_pow2(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft)) ** 2
    fbank = mel_filterbank(cfg.n_mels, n_fft, wave.sample_rate)
    return np.log(np.maximum(power @ fbank.T, cfg.log_floor))


def compute_mfcc(wave: Waveform, cfg: MfccConfig = MfccConfig(),
                 utterance_id: str = "") -> FeatureSequence:
    """Compute (T, n_ceps) static MFCCs for one utterance.

    T = 1 + floor((N - window) / shift); the trailing partial window is
    dropped. With cfg.cmvn each coefficient is normalised to zero mean and
    unit variance over the utterance (variance floored at 1e-8).
    """
    logmel = log_mel_energies(wave, cfg)
    ceps = logmel @ dct_matrix(cfg.n_ceps, cfg.n_mels).T
    if cfg.cmvn:
        mean = ceps.mean(axis=0)
        var = np.maximum(ceps.var(axis=0), 1e-8)
        ceps = (ceps - mean) / np.sqrt(var)
    return FeatureSequence(
        frames=ceps.astype(np.float32),
        frame_shift_ms=cfg.shift_ms,
        utterance_id=utterance_id,
    )


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono RIFF WAV file into a normalised Waveform."""
    with wavmod.open(str(path), "rb") as handle:
        if handle.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got "
                             f"{handle.getnchannels()} channels")
        if handle.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got "
                             f"{8 * handle.getsampwidth()}-bit")
        rate = handle.getframerate()
        raw = handle.readframes(handle.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path, wave: Waveform) -> None:
    """Write a Waveform as 16-bit PCM mono WAV (test/CLI convenience)."""
    pcm = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype("<i2")
    with wavmod.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(wave.sample_rate)
        handle.writeframes(pcm.tobytes())
