"""Toy latent-to-waveform renderer for listening checks.

Each latent channel drives one sinusoid in a fixed log-spaced bank;
per-frame amplitudes are linearly interpolated across samples and the mix
is peak-normalized before 16-bit PCM encoding. This is a debugging aid,
not part of any metric.
"""

from __future__ import annotations

import math
import wave

import numpy as np
import torch

from .errors import ShapeError

FREQ_LO = 110.0
FREQ_HI = 3520.0


def render_pcm(a0, latent_fps: float, sample_rate: int = 16000) -> np.ndarray:
    """Latents [s_a, d] -> float waveform in [-1, 1]."""
    a = torch.as_tensor(a0).detach().cpu().numpy().astype(np.float64)
    if a.ndim != 2:
        raise ShapeError(f"latents must be [s_a, d], got {a.shape}")
    s_a, d = a.shape
    n = int(round(s_a / latent_fps * sample_rate))
    if n < 1:
        return np.zeros(0, dtype=np.float64)
    ts = np.arange(n) / sample_rate
    freqs = FREQ_LO * (FREQ_HI / FREQ_LO) ** (np.arange(d) / max(d - 1, 1))
    # amplitude of channel c at sample i: linear interp of a[:, c] at frame time
    frame_pos = np.clip(ts * latent_fps, 0.0, s_a - 1.0)
    lo = np.floor(frame_pos).astype(np.int64)
    hi = np.minimum(lo + 1, s_a - 1)
    frac = frame_pos - lo
    amps = a[lo] * (1.0 - frac)[:, None] + a[hi] * frac[:, None]  # [n, d]
    phases = 2.0 * math.pi * ts[:, None] * freqs[None, :]
    signal = (amps * np.sin(phases)).sum(axis=1) / math.sqrt(d)
    peak = np.abs(signal).max()
    if peak > 0:
        signal = 0.9 * signal / peak
    return signal


def render_wav(a0, latent_fps: float, path: str, sample_rate: int = 16000) -> None:
    signal = render_pcm(a0, latent_fps, sample_rate=sample_rate)
    pcm = np.round(signal * 32767.0).astype(np.int16)
    with wave.open(path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
