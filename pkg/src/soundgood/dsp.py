"""Signal analysis shared by the losses and the artifact metrics.

Spectrograms hold squared magnitudes ("energy") of a centered, Hann-windowed
STFT: the signal is reflect-padded by ``fft_size // 2`` on both sides so
frame ``t`` is centered on sample ``t * hop``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .diffarray import ContractError, DiffArray, frame, matmul, pad_last, sqrt

SAMPLE_RATE = 16000
LOG_EPS = 1e-5
DB_FLOOR = -120.0


@dataclass
class AudioBuffer:
    """Mono audio. ``samples`` are floats, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ContractError(f"AudioBuffer is mono; got samples with shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class SpectrogramMatrix:
    energy: np.ndarray  # frames x bins
    hop: int
    fft_size: int
    window_size: int
    sample_rate: int = SAMPLE_RATE

    @property
    def frequencies(self) -> np.ndarray:
        return bin_frequencies(self.fft_size, self.sample_rate)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # n_mels x bins
    fmin: float
    fmax: float
    centers_hz: np.ndarray
    edges_hz: np.ndarray


@dataclass
class OnsetEnvelope:
    values: np.ndarray
    hop: int


@dataclass
class OnsetMatchCounts:
    tp: int
    fp: int
    fn: int
    f1: float


def bin_frequencies(fft_size: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.arange(fft_size // 2 + 1) * sample_rate / fft_size


@lru_cache(maxsize=None)
def hann_window(window_size: int, fft_size: int | None = None) -> np.ndarray:
    """Periodic Hann window, zero-padded (centered) to ``fft_size``."""
    fft_size = fft_size or window_size
    if window_size > fft_size:
        raise ContractError(f"window_size {window_size} exceeds fft_size {fft_size}")
    n = np.arange(window_size)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / window_size)
    lpad = (fft_size - window_size) // 2
    out = np.zeros(fft_size)
    out[lpad:lpad + window_size] = w
    out.setflags(write=False)
    return out


def _check_stft_args(n: int, fft_size: int, window_size: int, hop: int):
    if n == 0:
        raise ContractError("stft of empty audio")
    if window_size > fft_size:
        raise ContractError(f"window_size {window_size} exceeds fft_size {fft_size}")
    if hop < 1:
        raise ContractError(f"hop must be >= 1, got {hop}")


def frame_count(n: int, hop: int) -> int:
    return 1 + n // hop


def _centered_frames(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    half = fft_size // 2
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(half, half)], mode="reflect")
    view = np.lib.stride_tricks.sliding_window_view(padded, fft_size, axis=-1)
    return view[..., ::hop, :][..., : frame_count(x.shape[-1], hop), :]


def stft(audio: AudioBuffer, fft_size: int = 1024, window_size: int | None = None, hop: int = 256) -> SpectrogramMatrix:
    """Energy spectrogram of a centered Hann STFT."""
    window_size = window_size or fft_size
    _check_stft_args(len(audio), fft_size, window_size, hop)
    frames = _centered_frames(audio.samples, fft_size, hop) * hann_window(window_size, fft_size)
    spec = np.fft.rfft(frames, axis=-1)
    energy = spec.real ** 2 + spec.imag ** 2
    return SpectrogramMatrix(energy, hop, fft_size, window_size, audio.sample_rate)


@lru_cache(maxsize=None)
def dft_basis(fft_size: int, window_size: int) -> np.ndarray:
    """Windowed real DFT as a matrix: ``frames @ basis`` gives ``[re | im]``."""
    bins = fft_size // 2 + 1
    n = np.arange(fft_size)[:, None]
    k = np.arange(bins)[None, :]
    angle = 2 * np.pi * ((n * k) % fft_size) / fft_size
    w = hann_window(window_size, fft_size)[:, None]
    basis = np.concatenate([w * np.cos(angle), -w * np.sin(angle)], axis=1)
    basis.setflags(write=False)
    return basis


def stft_power_diff(x: DiffArray, fft_size: int, window_size: int | None = None, hop: int = 256) -> DiffArray:
    """Differentiable energy spectrogram: ``[..., n] -> [..., frames, bins]``."""
    window_size = window_size or fft_size
    _check_stft_args(x.shape[-1], fft_size, window_size, hop)
    half = fft_size // 2
    bins = half + 1
    framed = frame(pad_last(x, half, half, "reflect"), fft_size, hop)
    spec = matmul(framed, DiffArray(dft_basis(fft_size, window_size)))
    sq = spec.square()
    return sq[..., :bins] + sq[..., bins:]


def stft_magnitude_diff(x: DiffArray, fft_size: int, window_size: int | None = None, hop: int = 256,
                        eps: float = 1e-8) -> DiffArray:
    """Differentiable magnitude, ``sqrt(power + eps) - sqrt(eps)`` (exactly 0 on silence)."""
    power = stft_power_diff(x, fft_size, window_size, hop)
    return sqrt(power + eps) - float(np.sqrt(eps))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def triangle_response(freqs: np.ndarray, edges_hz: np.ndarray) -> np.ndarray:
    """Evaluate the triangular filters defined by ``edges_hz`` at arbitrary frequencies."""
    freqs = np.asarray(freqs, dtype=np.float64)
    lo, center, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


@lru_cache(maxsize=None)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, fft_size: int = 1024, n_mels: int = 128,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular filters with peaks evenly spaced on the mel scale."""
    fmax = sample_rate / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ContractError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got fmin={fmin}, fmax={fmax}")
    if n_mels < 2:
        raise ContractError(f"n_mels must be >= 2, got {n_mels}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    weights = triangle_response(bin_frequencies(fft_size, sample_rate), edges)
    empty = np.flatnonzero(weights.max(axis=1) == 0)
    if empty.size:
        raise ContractError(
            f"{empty.size} mel filters cover no FFT bin (n_mels={n_mels} too large for fft_size={fft_size})"
        )
    weights.setflags(write=False)
    return MelFilterbank(weights, float(fmin), float(fmax), edges[1:-1], edges)


def mel_spectrogram(audio: AudioBuffer, fft_size: int = 1024, window_size: int | None = None, hop: int = 256,
                    n_mels: int = 128) -> np.ndarray:
    """Frames x n_mels energies."""
    spec = stft(audio, fft_size, window_size, hop)
    fb = mel_filterbank(audio.sample_rate, fft_size, n_mels)
    return spec.energy @ fb.weights.T


def mel_spectrogram_diff(x: DiffArray, fft_size: int, window_size: int | None = None, hop: int = 256,
                         n_mels: int = 128, sample_rate: int = SAMPLE_RATE) -> DiffArray:
    fb = mel_filterbank(sample_rate, fft_size, n_mels)
    return matmul(stft_power_diff(x, fft_size, window_size, hop), DiffArray(fb.weights.T))


def spectral_rolloff(spec: SpectrogramMatrix, percent: float = 0.98) -> np.ndarray:
    """Per-frame frequency (Hz) of the lowest bin whose cumulative energy reaches ``percent``.

    Frames without energy get 0 Hz.
    """
    if not 0.0 < percent <= 1.0:
        raise ContractError(f"percent must lie in (0, 1], got {percent}")
    cum = np.cumsum(spec.energy, axis=-1)
    total = cum[..., -1:]
    idx = np.argmax(cum >= percent * total, axis=-1)
    hz = spec.frequencies[idx]
    return np.where(total[..., 0] > 0, hz, 0.0)


def cents_difference(x, y):
    """``1200 * (log2 x - log2 y)``; positive when ``x`` lies above ``y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("cents_difference needs positive frequencies")
    out = 1200.0 * (np.log2(x) - np.log2(y))
    return float(out) if out.ndim == 0 else out


def frame_rms_dbfs(audio: AudioBuffer, frame_size: int = 1024, hop: int = 512, center: bool = True) -> np.ndarray:
    """RMS level of each frame in dBFS, clamped below at -120 dB.

    With ``center`` the frames line up with :func:`stft` frames of the same hop.
    """
    if frame_size < 1:
        raise ContractError(f"frame_size must be >= 1, got {frame_size}")
    x = audio.samples
    if center:
        frames = _centered_frames(x, frame_size, hop)
    else:
        if len(x) < frame_size:
            x = np.pad(x, (0, frame_size - len(x)))
        frames = np.lib.stride_tricks.sliding_window_view(x, frame_size)[::hop]
    rms = np.sqrt(np.mean(frames ** 2, axis=-1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    return np.maximum(db, DB_FLOOR)


def rms_dbfs(samples: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.asarray(samples, dtype=np.float64) ** 2)))
    return max(20.0 * np.log10(rms), DB_FLOOR) if rms > 0 else DB_FLOOR


def power_to_db(power: np.ndarray, top_db: float = 80.0, amin: float = 1e-10) -> np.ndarray:
    """dB relative to the maximum of ``power``, floored ``top_db`` below it."""
    ref = max(float(np.max(power)), amin) if power.size else amin
    db = 10.0 * np.log10(np.maximum(power, amin)) - 10.0 * np.log10(ref)
    return np.maximum(db, -top_db)


def onset_strength(audio: AudioBuffer, n_mels: int = 128, fft_size: int = 1024, hop: int = 512) -> OnsetEnvelope:
    """Spectral-flux onset strength: mean positive frame-to-frame rise of mel dB."""
    mel = mel_spectrogram(audio, fft_size, fft_size, hop, n_mels)
    db = power_to_db(mel)
    flux = np.maximum(0.0, np.diff(db, axis=0)).mean(axis=1)
    return OnsetEnvelope(np.concatenate([[0.0], flux]), hop)


def onset_f1(est_env: OnsetEnvelope, ref_env: OnsetEnvelope, threshold: float = 0.75) -> OnsetMatchCounts:
    """Frame-level agreement of thresholded onset envelopes."""
    est, ref = np.asarray(est_env.values), np.asarray(ref_env.values)
    if est.shape != ref.shape:
        raise ContractError(f"onset envelopes differ in length: {est.shape[0]} vs {ref.shape[0]}")
    if est_env.hop != ref_env.hop:
        raise ContractError(f"onset envelopes differ in hop: {est_env.hop} vs {ref_env.hop}")
    e, r = est > threshold, ref > threshold
    return match_counts(int(np.sum(e & r)), int(np.sum(e & ~r)), int(np.sum(~e & r)))


def match_counts(tp: int, fp: int, fn: int) -> OnsetMatchCounts:
    denom = tp + 0.5 * (fp + fn)
    return OnsetMatchCounts(tp, fp, fn, tp / denom if denom > 0 else 1.0)
