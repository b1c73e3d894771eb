"""Euler sampling with two-stage classifier-free guidance.

The sampler integrates the learned velocity field along the straight path
from pure noise at t=1 down to t=0 in uniform steps. Guidance switches
contrast partway through. Early steps amplify the context direction: the
guided velocity extrapolates from the context-disabled branch toward the
full joint branch, two model forwards per step. Later steps switch to
per-stream synchrony contrast: the video velocity extrapolates away from an
"audio replaced by the muted anchor" branch and the audio velocity away
from a "video replaced by the static white anchor" branch, three forwards
per step with the joint forward shared. Setting every scale to 1 reduces
each formula to the plain joint prediction, which is the comparison run the
evaluation uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import ops
from .codecs import CodecConfig, audio_encode, video_encode
from .model import ConditionBundle, Prediction, StreamState
from .rope import SequenceLayout


@dataclass(frozen=True)
class GuidanceConfig:
    steps: int = 50
    stage_boundary: int = 10
    context_scale: float = 5.0
    video_sync_scale: float = 5.0
    audio_sync_scale: float = 5.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.stage_boundary <= self.steps:
            raise ValueError(
                f"stage_boundary must be in [0, {self.steps}], got {self.stage_boundary}"
            )


@dataclass
class Anchors:
    """Neutral stream contents used by the stage-two contrast branches."""

    audio_muted: torch.Tensor
    video_static: torch.Tensor


def make_anchors(codec: CodecConfig, layout: SequenceLayout) -> Anchors:
    """Muted audio is encoded digital silence; static video is encoded white."""
    silence = np.zeros(layout.audio_tokens * codec.window, dtype=np.float32)
    white = np.ones(
        (layout.target_frames, layout.grid_h * codec.patch, layout.grid_w * codec.patch),
        dtype=np.float32,
    )
    return Anchors(
        audio_muted=torch.from_numpy(audio_encode(silence, codec)),
        video_static=torch.from_numpy(video_encode(white, codec)),
    )


@dataclass
class PassAccounting:
    """Model forwards per sampling step, measured off the model's own counter."""

    steps: int
    stage_boundary: int
    per_step: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.per_step)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "stage_boundary": self.stage_boundary,
            "per_step": list(self.per_step),
            "total": self.total,
        }


def guide_stage1(model, state: StreamState, cond: ConditionBundle, scale: float) -> Prediction:
    """Context contrast: extrapolate from the context-off branch toward joint."""
    joint = model(state, cond, skip_context=False)
    ctx_off = model(state, cond, skip_context=True)
    return Prediction(
        video=ctx_off.video + scale * (joint.video - ctx_off.video),
        audio=ctx_off.audio + scale * (joint.audio - ctx_off.audio),
    )


def guide_stage2(
    model,
    state: StreamState,
    cond: ConditionBundle,
    anchors: Anchors,
    video_scale: float,
    audio_scale: float,
) -> Prediction:
    """Synchrony contrast with a shared joint forward.

    The video branch contrasts against a run whose audio stream is the clean
    muted anchor at t=0; the audio branch against a run whose video target is
    the clean static anchor at t=0. Conditioning is untouched in both.
    """
    joint = model(state, cond, skip_context=False)
    audio_anchor_state = StreamState(
        video=state.video, audio=anchors.audio_muted.to(state.audio.dtype),
        t_video=state.t_video, t_audio=0.0,
    )
    audio_driven = model(audio_anchor_state, cond, skip_context=False)
    video_anchor_state = StreamState(
        video=anchors.video_static.to(state.video.dtype), audio=state.audio,
        t_video=0.0, t_audio=state.t_audio,
    )
    video_driven = model(video_anchor_state, cond, skip_context=False)
    return Prediction(
        video=audio_driven.video + video_scale * (joint.video - audio_driven.video),
        audio=video_driven.audio + audio_scale * (joint.audio - video_driven.audio),
    )


@dataclass
class SampleResult:
    video_latent: torch.Tensor
    audio_latent: torch.Tensor
    accounting: PassAccounting


def sample(
    model,
    cond: ConditionBundle,
    layout: SequenceLayout,
    codec: CodecConfig,
    gcfg: GuidanceConfig = GuidanceConfig(),
    seed: int = 0,
) -> SampleResult:
    """Generate one scene's latents from noise. Deterministic per seed.

    ``model`` needs a ``forward_calls`` counter and the usual
    ``(state, cond, skip_context=...)`` call signature; the accounting in the
    result is measured from that counter, not assumed.
    """
    gen = ops.seeded_generator(seed)
    video_shape = (layout.target_frames, layout.grid_h, layout.grid_w, codec.video_channels)
    audio_shape = (layout.audio_tokens, codec.bands)
    z_video = torch.randn(video_shape, generator=gen)
    z_audio = torch.randn(audio_shape, generator=gen)
    anchors = make_anchors(codec, layout)

    accounting = PassAccounting(steps=gcfg.steps, stage_boundary=gcfg.stage_boundary)
    dt = 1.0 / gcfg.steps
    with torch.no_grad():
        for k in range(1, gcfg.steps + 1):
            t = 1.0 - (k - 1) * dt
            state = StreamState(video=z_video, audio=z_audio, t_video=t, t_audio=t)
            before = model.forward_calls
            if k <= gcfg.stage_boundary:
                pred = guide_stage1(model, state, cond, gcfg.context_scale)
            else:
                pred = guide_stage2(
                    model, state, cond, anchors,
                    gcfg.video_sync_scale, gcfg.audio_sync_scale,
                )
            accounting.per_step.append(model.forward_calls - before)
            z_video = z_video - dt * pred.video
            z_audio = z_audio - dt * pred.audio
            if not (torch.isfinite(z_video).all() and torch.isfinite(z_audio).all()):
                raise RuntimeError(f"sampling diverged at step {k} (t={t:.3f})")
    return SampleResult(video_latent=z_video, audio_latent=z_audio, accounting=accounting)
