"""Deterministic toy codecs between pixel/waveform space and model latents.

The video path is a lossless 2x2 space-to-channel rearrangement, so encode
followed by decode is bit-exact. The audio path summarizes non-overlapping
sample windows by log band energies of the window DFT; there is no waveform
decoder, the per-token energy envelope is the decode surrogate the metrics
read. Both directions are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CodecConfig:
    patch: int = 2
    sample_rate: int = 8000
    window: int = 250
    bands: int = 8
    energy_floor: float = 1e-8

    def __post_init__(self) -> None:
        if self.patch < 1 or self.window < 1 or self.bands < 1:
            raise ValueError("patch, window and bands must all be >= 1")
        if self.energy_floor <= 0:
            raise ValueError(f"energy_floor must be positive, got {self.energy_floor}")

    @property
    def video_channels(self) -> int:
        return self.patch * self.patch

    @property
    def window_duration(self) -> float:
        return self.window / self.sample_rate

    def audio_token_count(self, n_samples: int) -> int:
        return -(-n_samples // self.window)


def video_encode(pixels: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """[frames, H, W] grayscale -> [frames, H/p, W/p, p*p] latent, lossless."""
    if pixels.ndim != 3:
        raise ValueError(f"expected [frames, H, W], got shape {pixels.shape}")
    f, h, w = pixels.shape
    p = cfg.patch
    if h % p or w % p:
        raise ValueError(f"frame size {h}x{w} not divisible by patch {p}")
    latent = pixels.reshape(f, h // p, p, w // p, p)
    latent = latent.transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(latent.reshape(f, h // p, w // p, p * p))


def video_decode(latent: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Exact inverse of :func:`video_encode`."""
    if latent.ndim != 4:
        raise ValueError(f"expected [frames, H', W', C], got shape {latent.shape}")
    f, hp, wp, c = latent.shape
    p = cfg.patch
    if c != p * p:
        raise ValueError(f"latent has {c} channels, codec expects {p * p}")
    pixels = latent.reshape(f, hp, wp, p, p)
    pixels = pixels.transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(pixels.reshape(f, hp * p, wp * p))


def mask_to_latent(mask: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Pool a pixel-space boolean mask onto the latent grid.

    A latent cell is masked when ANY pixel of its patch is masked, so the
    pooled mask never loses coverage of the edit region.
    """
    if mask.ndim != 3:
        raise ValueError(f"expected [frames, H, W], got shape {mask.shape}")
    f, h, w = mask.shape
    p = cfg.patch
    if h % p or w % p:
        raise ValueError(f"mask size {h}x{w} not divisible by patch {p}")
    pooled = mask.reshape(f, h // p, p, w // p, p)
    return pooled.any(axis=(2, 4))


def _band_index(cfg: CodecConfig) -> np.ndarray:
    """Band id of each rfft bin; the Nyquist bin is clamped into the top band."""
    n_bins = cfg.window // 2 + 1
    freqs = np.arange(n_bins) * (cfg.sample_rate / cfg.window)
    band_width = (cfg.sample_rate / 2) / cfg.bands
    return np.minimum((freqs / band_width).astype(np.int64), cfg.bands - 1)


def audio_encode(signal: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """[n_samples] waveform -> [n_tokens, bands] log band-energy features.

    Each token covers one non-overlapping window (the tail window is
    zero-padded); its features are log band energies of the window DFT,
    floored before the log so silence maps to log(energy_floor) instead of
    -inf. Token j depends only on samples [j * window, (j + 1) * window).
    """
    if signal.ndim != 1:
        raise ValueError(f"expected a 1-d signal, got shape {signal.shape}")
    if signal.size == 0:
        raise ValueError("cannot encode an empty signal")
    n_tokens = cfg.audio_token_count(signal.size)
    padded = np.zeros(n_tokens * cfg.window, dtype=np.float64)
    padded[: signal.size] = signal.astype(np.float64)
    windows = padded.reshape(n_tokens, cfg.window)
    power = np.abs(np.fft.rfft(windows, axis=1)) ** 2
    band = _band_index(cfg)
    energies = np.zeros((n_tokens, cfg.bands), dtype=np.float64)
    for b in range(cfg.bands):
        energies[:, b] = power[:, band == b].sum(axis=1)
    features = np.log(np.maximum(energies, cfg.energy_floor))
    return features.astype(np.float32)


def audio_envelope(latent: np.ndarray) -> np.ndarray:
    """Per-token energy envelope: sum over bands of exp(feature).

    Doubling the waveform amplitude quadruples the envelope wherever the
    energies sit above the codec floor.
    """
    if latent.ndim != 2:
        raise ValueError(f"expected [n_tokens, bands], got shape {latent.shape}")
    return np.exp(latent.astype(np.float64)).sum(axis=1)


def band_center(cfg: CodecConfig, band: int) -> float:
    """Center frequency of a band in Hz."""
    if not 0 <= band < cfg.bands:
        raise ValueError(f"band {band} outside [0, {cfg.bands})")
    return (band + 0.5) * (cfg.sample_rate / 2) / cfg.bands
