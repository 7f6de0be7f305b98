"""Waveform <-> mel-spectrogram preprocessing.

Mels are 80-band, computed from 16 kHz audio with a 640-sample window
and 160-sample hop (100 Hz frame rate), log-scaled with a floor clamp
and affinely mapped into [-1, 1] using corpus-level bounds. Four
consecutive 10 ms frames stack into one 320-dim row at 25 Hz so audio
rows align one-to-one with video frames.

All functions here are pure and deterministic: identical inputs and
config give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class MelConfig:
    fft_window: int = 640
    hop: int = 160
    n_mels: int = 80
    stack_factor: int = 4
    log_floor: float = 1e-5
    # Corpus-level log-mel bounds for the [-1, 1] mapping; the dataset
    # generator computes the real ones and records them in the manifest.
    norm_lo: float = math.log(1e-5)
    norm_hi: float = 2.0

    def __post_init__(self):
        if self.fft_window != 4 * self.hop:
            raise ValidationError("fft_window must equal 4 * hop")
        if self.stack_factor * 25 != 100:
            raise ValidationError("stack_factor must stack 100 Hz frames to 25 Hz")
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be positive")
        if not self.norm_lo < self.norm_hi:
            raise ValidationError("norm_lo must be below norm_hi")


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    mels = freq / (200.0 / 3.0)
    log_step = math.log(6.4) / 27.0
    return np.where(freq >= 1000.0, 15.0 + np.log(np.maximum(freq, 1e-12) / 1000.0) / log_step, mels)


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    freq = mels * (200.0 / 3.0)
    log_step = math.log(6.4) / 27.0
    return np.where(mels >= 15.0, 1000.0 * np.exp(log_step * (mels - 15.0)), freq)


def mel_filterbank(cfg: MelConfig, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular mel filterbank (n_mels x fft bins), Slaney area-normalized."""
    n_bins = cfg.fft_window // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * SAMPLE_RATE / cfg.fft_window
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for k in range(cfg.n_mels):
        lo, center, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
        fb[k] *= 2.0 / (hi - lo)
    return fb


def _hann(n: int) -> np.ndarray:
    # Periodic Hann, as used for STFT analysis/synthesis.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame_count(n_samples: int, cfg: MelConfig) -> int:
    frames = n_samples // cfg.hop
    return frames - frames % cfg.stack_factor


def stft(w: np.ndarray, cfg: MelConfig, n_frames: int) -> np.ndarray:
    """Complex STFT (n_frames x bins) over a reflect-padded signal."""
    pad = cfg.fft_window // 2
    padded = np.pad(np.asarray(w, dtype=np.float64), pad, mode="reflect")
    window = _hann(cfg.fft_window)
    frames = np.stack(
        [padded[k * cfg.hop : k * cfg.hop + cfg.fft_window] for k in range(n_frames)]
    )
    return np.fft.rfft(frames * window, axis=1)


def istft(spec: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Overlap-add inverse of :func:`stft`; returns n_frames * hop samples."""
    n_frames = spec.shape[0]
    window = _hann(cfg.fft_window)
    pad = cfg.fft_window // 2
    total = (n_frames - 1) * cfg.hop + cfg.fft_window
    out = np.zeros(total, dtype=np.float64)
    norm = np.zeros(total, dtype=np.float64)
    frames = np.fft.irfft(spec, n=cfg.fft_window, axis=1)
    for k in range(n_frames):
        sl = slice(k * cfg.hop, k * cfg.hop + cfg.fft_window)
        out[sl] += frames[k] * window
        norm[sl] += window**2
    out /= np.maximum(norm, 1e-10)
    return out[pad : pad + n_frames * cfg.hop]


def _validate_waveform(w: np.ndarray, cfg: MelConfig) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(w)):
        raise ValidationError("waveform contains non-finite samples")
    if len(w) < cfg.fft_window:
        raise ValidationError(
            f"waveform too short: {len(w)} samples < window {cfg.fft_window}"
        )
    return w


def compute_log_mel(w: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Floor-clamped natural-log mel magnitudes (n_mels x S), unnormalized."""
    w = _validate_waveform(w, cfg)
    n_frames = _frame_count(len(w), cfg)
    if n_frames == 0:
        raise ValidationError("waveform yields no complete stacked frame group")
    mag = np.abs(stft(w, cfg, n_frames))
    mel = mel_filterbank(cfg) @ mag.T
    return np.log(np.maximum(mel, cfg.log_floor))


def normalize_log_mel(log_mel: np.ndarray, cfg: MelConfig) -> np.ndarray:
    scaled = 2.0 * (log_mel - cfg.norm_lo) / (cfg.norm_hi - cfg.norm_lo) - 1.0
    return np.clip(scaled, -1.0, 1.0).astype(np.float32)


def denormalize_mel(m: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Map a normalized mel back to the log-mel domain (float64)."""
    return cfg.norm_lo + (np.asarray(m, dtype=np.float64) + 1.0) / 2.0 * (
        cfg.norm_hi - cfg.norm_lo
    )


def compute_mel(w: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Normalized mel-spectrogram (n_mels x S, float32, values in [-1, 1]).

    S is len(w) // hop truncated to a multiple of the stack factor;
    trailing samples and frames are dropped.
    """
    return normalize_log_mel(compute_log_mel(w, cfg), cfg)


def _validate_mel(m: np.ndarray, cfg: MelConfig) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != cfg.n_mels:
        raise ValidationError(f"expected ({cfg.n_mels} x S) mel, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("mel contains non-finite values")
    return m


def stack_frames(m: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Stack groups of consecutive mel frames into rows: (S/4 x 4*n_mels).

    Row l is the concatenation of mel frames 4l..4l+3 in time order.
    """
    m = _validate_mel(m, cfg)
    if m.shape[1] % cfg.stack_factor != 0:
        raise ValidationError(
            f"frame count {m.shape[1]} not divisible by {cfg.stack_factor}"
        )
    length = m.shape[1] // cfg.stack_factor
    return np.ascontiguousarray(m.T).reshape(length, cfg.stack_factor * cfg.n_mels)


def unstack_frames(x: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Exact inverse of :func:`stack_frames`."""
    x = np.asarray(x)
    width = cfg.stack_factor * cfg.n_mels
    if x.ndim != 2 or x.shape[1] != width:
        raise ValidationError(f"expected (L x {width}) stacked mel, got shape {x.shape}")
    return np.ascontiguousarray(x.reshape(x.shape[0] * cfg.stack_factor, cfg.n_mels).T)


def invert_mel(m: np.ndarray, cfg: MelConfig, iters: int = 32) -> np.ndarray:
    """Best-effort waveform from a normalized mel via filterbank
    pseudo-inverse plus Griffin-Lim phase recovery.

    Returns S * hop float32 samples. Quality is demo-grade only; there
    is no exactness contract.
    """
    if iters < 1:
        raise ValidationError("invert_mel needs at least one iteration")
    m = _validate_mel(m, cfg)
    mel_mag = np.exp(denormalize_mel(m, cfg))
    fb = mel_filterbank(cfg)
    mag = np.maximum(np.linalg.pinv(fb) @ mel_mag, 0.0).T  # (S x bins)
    spec = mag.astype(np.complex128)  # zero-phase init keeps inversion deterministic
    n = m.shape[1] * cfg.hop
    wave = istft(spec, cfg)
    for _ in range(iters):
        phase = np.angle(stft(wave, cfg, m.shape[1]))
        wave = istft(mag * np.exp(1j * phase), cfg)
    return wave[:n].astype(np.float32)
