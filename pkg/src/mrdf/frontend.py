"""Turn raw per-frame inputs into equal-length audio/visual sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class AlignedClip:
    audio_frames: np.ndarray  # [T, ratio * d_a]
    visual_frames: np.ndarray  # [T, ...]

    @property
    def T(self) -> int:
        return self.audio_frames.shape[0]


def align(audio: np.ndarray, visual: np.ndarray, ratio: int = 4) -> AlignedClip:
    """Stack ``ratio`` consecutive audio frames feature-wise, then truncate both
    streams to ``min(T_a // ratio, T_v)`` frames."""
    audio = np.asarray(audio)
    visual = np.asarray(visual)
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    if audio.ndim != 2:
        raise ValueError(f"audio must be [T_a x d], got shape {audio.shape}")
    t_a, t_v = audio.shape[0], visual.shape[0]
    if t_v < 1:
        raise ValueError("empty visual stream")
    if t_a < ratio:
        raise ValueError(f"audio stream has {t_a} frames, fewer than one block of {ratio}")
    t = min(t_a // ratio, t_v)
    stacked = audio[: t * ratio].reshape(t, ratio * audio.shape[1])
    return AlignedClip(stacked, visual[:t])


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-scale filters, shape [n_mels, n_fft // 2 + 1]."""
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def log_mel(
    waveform: np.ndarray,
    sample_rate: int = 16000,
    n_mels: int = 80,
    hop_ms: float = 10.0,
    win_ms: float = 25.0,
) -> np.ndarray:
    """Log mel filterbank frames [T_a, n_mels] of a mono waveform."""
    wav = torch.as_tensor(np.asarray(waveform, dtype=np.float32))
    if wav.ndim != 1 or wav.numel() == 0:
        raise ValueError("waveform must be a nonempty 1-D array")
    hop = int(round(sample_rate * hop_ms / 1000.0))
    win = int(round(sample_rate * win_ms / 1000.0))
    n_fft = 1 << (win - 1).bit_length()
    if wav.numel() < win:
        wav = torch.nn.functional.pad(wav, (0, win - wav.numel()))
    spec = torch.stft(
        wav,
        n_fft=n_fft,
        hop_length=hop,
        win_length=win,
        window=torch.hann_window(win),
        center=False,
        return_complex=True,
    )
    power = spec.abs().pow(2).numpy()  # [bins, T]
    fb = mel_filterbank(n_mels, n_fft, sample_rate)
    return np.log(fb @ power + 1e-6).T.astype(np.float32)
