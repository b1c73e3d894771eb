"""Temporal position assignment and rotary application.

The editing sequence holds four segments: reference frame tokens at temporal
position 0, condition (masked-video) tokens at their frame index, target
tokens at the SAME frame index as their condition twins, and audio tokens on
a fractional grid j * (n_frames / n_audio_tokens). Condition and target
share positions on purpose; the two copies are told apart by their timestep
conditioning, not by where they sit. A legacy mode appends target frames
after the condition range instead (target at n_frames + i, audio at integer
j), which keeps the old concatenation behaviour reachable for comparison.

Video tokens carry three rotary axes (time, height, width). Audio tokens sit
at height = width = 0, so under the shared chunking only their temporal
chunk actually rotates; this keeps the temporal frequency bands identical
across modalities, which is what lets cross-modal attention read sub-frame
offsets as relative phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

N_ROPE_AXES = 3

SEG_REFERENCE = 0
SEG_CONDITION = 1
SEG_TARGET = 2
SEG_AUDIO = 3

SEGMENT_NAMES = {
    SEG_REFERENCE: "reference",
    SEG_CONDITION: "condition",
    SEG_TARGET: "target",
    SEG_AUDIO: "audio",
}


@dataclass(frozen=True)
class SequenceLayout:
    """Token-count geometry of one editing sequence."""

    target_frames: int
    audio_tokens: int
    grid_h: int
    grid_w: int
    ref_frames: int = 1

    def __post_init__(self) -> None:
        for name in ("target_frames", "audio_tokens", "grid_h", "grid_w", "ref_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def frame_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def video_tokens(self) -> int:
        return (self.ref_frames + 2 * self.target_frames) * self.frame_tokens

    @property
    def target_token_count(self) -> int:
        return self.target_frames * self.frame_tokens

    @property
    def audio_spacing(self) -> float:
        return self.target_frames / self.audio_tokens


@dataclass
class PositionTable:
    """Per-token rotary coordinates for one full sequence.

    Token order is reference frames, condition frames, target frames (each
    frame row-major over the grid), then audio tokens. ``temporal`` is float
    because audio positions are fractional; ``height``/``width`` are zero for
    audio tokens.
    """

    temporal: np.ndarray
    height: np.ndarray
    width: np.ndarray
    segment: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.temporal.shape[0]

    def coords(self) -> np.ndarray:
        """[n_tokens, 3] float64 stack of (temporal, height, width)."""
        return np.stack(
            [self.temporal, self.height.astype(np.float64), self.width.astype(np.float64)],
            axis=1,
        )


def assign_positions(layout: SequenceLayout, naive: bool = False) -> PositionTable:
    """Build the per-token position table for a layout.

    ``naive=True`` selects the legacy assignment (targets appended after the
    condition range, audio on integer indices); the default shares positions
    between condition and target and spreads audio fractionally.
    """
    ft = layout.frame_tokens
    hh = np.repeat(np.arange(layout.grid_h), layout.grid_w)
    ww = np.tile(np.arange(layout.grid_w), layout.grid_h)

    temporal: list[np.ndarray] = []
    height: list[np.ndarray] = []
    width: list[np.ndarray] = []
    segment: list[np.ndarray] = []

    def add_frames(n: int, positions: np.ndarray, seg: int) -> None:
        temporal.append(np.repeat(positions.astype(np.float64), ft))
        height.append(np.tile(hh, n))
        width.append(np.tile(ww, n))
        segment.append(np.full(n * ft, seg, dtype=np.uint8))

    add_frames(layout.ref_frames, np.zeros(layout.ref_frames), SEG_REFERENCE)

    frame_idx = np.arange(1, layout.target_frames + 1)
    add_frames(layout.target_frames, frame_idx, SEG_CONDITION)
    target_pos = frame_idx + layout.target_frames if naive else frame_idx
    add_frames(layout.target_frames, target_pos, SEG_TARGET)

    j = np.arange(1, layout.audio_tokens + 1, dtype=np.float64)
    audio_pos = j if naive else j * (layout.target_frames / layout.audio_tokens)
    temporal.append(audio_pos)
    height.append(np.zeros(layout.audio_tokens, dtype=np.int64))
    width.append(np.zeros(layout.audio_tokens, dtype=np.int64))
    segment.append(np.full(layout.audio_tokens, SEG_AUDIO, dtype=np.uint8))

    return PositionTable(
        temporal=np.concatenate(temporal),
        height=np.concatenate(height),
        width=np.concatenate(width),
        segment=np.concatenate(segment),
    )


def rotary_chunk(head_dim: int) -> int:
    """Even per-axis chunk width for a three-axis rotary split.

    The remainder beyond 3 * chunk stays unrotated. head_dim must be even
    and large enough to give every axis at least one rotation pair.
    """
    if head_dim % 2:
        raise ValueError(f"head_dim must be even for rotary pairs, got {head_dim}")
    chunk = 2 * (head_dim // (2 * N_ROPE_AXES))
    if chunk == 0:
        raise ValueError(
            f"head_dim {head_dim} too small to split across {N_ROPE_AXES} rotary axes"
        )
    return chunk


def rotary_cos_sin(
    positions: torch.Tensor, head_dim: int, base: float = 10000.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Precompute (cos, sin) caches for ``apply_rotary_cached``.

    positions is [n_tokens, 3] (temporal, height, width). The caches cover
    the rotated prefix of the head dimension, one column per rotation pair,
    axis chunks laid out consecutively.
    """
    if positions.ndim != 2 or positions.shape[1] != N_ROPE_AXES:
        raise ValueError(f"positions must be [n, {N_ROPE_AXES}], got {tuple(positions.shape)}")
    chunk = rotary_chunk(head_dim)
    pairs = chunk // 2
    exponents = torch.arange(pairs, dtype=positions.dtype, device=positions.device)
    theta = base ** (-2.0 * exponents / chunk)
    angles = torch.cat([positions[:, a : a + 1] * theta for a in range(N_ROPE_AXES)], dim=1)
    return torch.cos(angles), torch.sin(angles)


def apply_rotary_cached(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate the leading pairs of the last axis by precomputed angles.

    x is [n_tokens, heads, head_dim]; cos/sin are [n_tokens, pairs]. Pair k
    occupies dims (2k, 2k+1); dims beyond 2 * pairs pass through unchanged.
    """
    pairs = cos.shape[1]
    rotated = x[..., : 2 * pairs]
    rest = x[..., 2 * pairs :]
    even = rotated[..., 0::2]
    odd = rotated[..., 1::2]
    c = cos.unsqueeze(1)
    s = sin.unsqueeze(1)
    out_even = even * c - odd * s
    out_odd = even * s + odd * c
    out = torch.stack([out_even, out_odd], dim=-1).flatten(-2)
    return torch.cat([out, rest], dim=-1)


def apply_rotary(
    x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0
) -> torch.Tensor:
    """Convenience wrapper: compute the caches and rotate in one call."""
    if x.ndim != 3:
        raise ValueError(f"expected [tokens, heads, head_dim], got {tuple(x.shape)}")
    cos, sin = rotary_cos_sin(positions.to(x.dtype), x.shape[-1], base)
    return apply_rotary_cached(x, cos, sin)
