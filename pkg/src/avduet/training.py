"""Four-mode rectified-flow training for the dual-stream model.

Every step draws one scene and one of four modes. Joint noises both streams
and regresses both velocity targets. Audio-driven hands the model clean
audio at t=0 and trains only the video head; video-driven is the mirror
image. Context-null trains both heads with the context pathway disabled and
the base audio withheld, which is the branch classifier-free context
guidance contrasts against at sampling time. Captions drop to the null
token with a small probability, base audio likewise (always, in
context-null).

Noising follows the straight path z_t = (1 - t) * z0 + t * noise with
velocity target noise - z0, a single shared t per step drawn uniformly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import ops
from .codecs import CodecConfig, audio_encode, mask_to_latent, video_encode
from .model import ConditionBundle, DualStreamDiT, Prediction, StreamState
from .world import Scene

logger = logging.getLogger(__name__)

MODE_JOINT = "joint"
MODE_AUDIO_DRIVEN = "audio_driven"
MODE_VIDEO_DRIVEN = "video_driven"
MODE_CONTEXT_NULL = "context_null"
MODES = (MODE_JOINT, MODE_AUDIO_DRIVEN, MODE_VIDEO_DRIVEN, MODE_CONTEXT_NULL)

MAX_MASK_DILATION = 20
BBOX_PROBABILITY = 0.3


@dataclass(frozen=True)
class ModeRouterConfig:
    p_joint: float = 0.4
    p_audio_driven: float = 0.2
    p_video_driven: float = 0.2
    p_context_null: float = 0.2
    text_drop: float = 0.1
    base_drop: float = 0.1

    def __post_init__(self) -> None:
        probs = self.probabilities
        if any(p < 0 for p in probs):
            raise ValueError(f"mode probabilities must be non-negative: {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"mode probabilities must sum to 1, got {sum(probs)}")
        for name in ("text_drop", "base_drop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def probabilities(self) -> tuple[float, float, float, float]:
        return (self.p_joint, self.p_audio_driven, self.p_video_driven, self.p_context_null)


def sample_mode(rng: np.random.Generator, router: ModeRouterConfig) -> str:
    u = rng.random()
    acc = 0.0
    for mode, p in zip(MODES, router.probabilities):
        acc += p
        if u < acc:
            return mode
    return MODES[-1]


def _dilate_direction(mask: np.ndarray, axis: int, amount: int, sign: int) -> np.ndarray:
    """OR of the mask with itself shifted 1..amount steps one way along an axis."""
    out = mask.copy()
    for s in range(1, amount + 1):
        if s >= mask.shape[axis]:  # shifted fully off the canvas
            break
        shifted = np.zeros_like(mask)
        src = [slice(None)] * mask.ndim
        dst = [slice(None)] * mask.ndim
        if sign > 0:
            src[axis] = slice(0, mask.shape[axis] - s)
            dst[axis] = slice(s, None)
        else:
            src[axis] = slice(s, None)
            dst[axis] = slice(0, mask.shape[axis] - s)
        shifted[tuple(dst)] = mask[tuple(src)]
        out |= shifted
    return out


def augment_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training-time mask augmentation.

    Each spatial side dilates by an independent uniform integer in
    [0, MAX_MASK_DILATION] pixels (clipped at the canvas), then with
    probability BBOX_PROBABILITY the mask is replaced by its per-frame tight
    bounding box. The result is always a superset of the input. Draw order
    is fixed (four pads, then the bbox coin) so replays are deterministic.
    """
    pads = rng.integers(0, MAX_MASK_DILATION + 1, size=4)  # top, bottom, left, right
    use_bbox = rng.random() < BBOX_PROBABILITY

    top, bottom, left, right = (int(p) for p in pads)
    out = _dilate_direction(mask, 1, top, -1)
    out = _dilate_direction(out, 1, bottom, 1)
    out = _dilate_direction(out, 2, left, -1)
    out = _dilate_direction(out, 2, right, 1)

    if use_bbox:
        boxed = np.zeros_like(out)
        for f in range(out.shape[0]):
            rows = np.flatnonzero(out[f].any(axis=1))
            cols = np.flatnonzero(out[f].any(axis=0))
            if rows.size:
                boxed[f, rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = True
        out = boxed
    return out


@dataclass
class EncodedScene:
    """Latents and caption tensors for one scene, encoded once up front."""

    scene: Scene
    video_latent: torch.Tensor
    audio_latent: torch.Tensor
    base_latent: torch.Tensor
    reference: torch.Tensor
    visual_caption: torch.Tensor
    audio_caption: torch.Tensor
    speech_caption: torch.Tensor


def encode_scene(scene: Scene, codec: CodecConfig) -> EncodedScene:
    video_latent = torch.from_numpy(video_encode(scene.video, codec))
    return EncodedScene(
        scene=scene,
        video_latent=video_latent,
        audio_latent=torch.from_numpy(audio_encode(scene.target_audio, codec)),
        base_latent=torch.from_numpy(audio_encode(scene.base_audio, codec)),
        reference=video_latent[:1].clone(),
        visual_caption=torch.from_numpy(scene.visual_caption.astype(np.int64)),
        audio_caption=torch.from_numpy(scene.audio_caption.astype(np.int64)),
        speech_caption=torch.from_numpy(scene.speech_caption.astype(np.int64)),
    )


def scene_condition(
    enc: EncodedScene, codec: CodecConfig, audio_caption: torch.Tensor | None = None
) -> ConditionBundle:
    """Inference-time conditioning for a scene: no mask augmentation, no drops.

    ``audio_caption`` overrides the scene's own caption, which is how band
    edits are requested at sampling time.
    """
    scene = enc.scene
    masked_pixels = scene.video * (1.0 - scene.mask.astype(np.float32))
    return ConditionBundle(
        visual_caption=enc.visual_caption,
        audio_caption=enc.audio_caption if audio_caption is None else audio_caption,
        speech_caption=enc.speech_caption,
        reference=enc.reference,
        masked_video=torch.from_numpy(video_encode(masked_pixels, codec)),
        mask=torch.from_numpy(mask_to_latent(scene.mask, codec)),
        base_audio=enc.base_latent,
    )


@dataclass
class TrainBatch:
    mode: str
    state: StreamState
    cond: ConditionBundle
    video_target: torch.Tensor | None
    audio_target: torch.Tensor | None

    @property
    def skip_context(self) -> bool:
        return self.mode == MODE_CONTEXT_NULL


def make_batch(
    enc: EncodedScene,
    mode: str,
    rng: np.random.Generator,
    gen: torch.Generator,
    router: ModeRouterConfig,
    codec: CodecConfig,
    augment: bool = True,
) -> TrainBatch:
    """Assemble one training example. Draw order is part of the replay contract:
    t, video noise, audio noise, text-drop coin, base-drop coin, then mask
    augmentation draws.
    """
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    scene = enc.scene
    t = float(rng.random())
    noise_v = torch.randn(enc.video_latent.shape, generator=gen)
    noise_a = torch.randn(enc.audio_latent.shape, generator=gen)
    drop_text = rng.random() < router.text_drop
    drop_base = rng.random() < router.base_drop or mode == MODE_CONTEXT_NULL

    pixel_mask = augment_mask(scene.mask, rng) if augment else scene.mask
    masked_pixels = scene.video * (1.0 - pixel_mask.astype(np.float32))
    masked_video = torch.from_numpy(video_encode(masked_pixels, codec))
    latent_mask = torch.from_numpy(mask_to_latent(pixel_mask, codec))

    z_v0, z_a0 = enc.video_latent, enc.audio_latent
    if mode == MODE_AUDIO_DRIVEN:
        t_v, t_a = t, 0.0
        video_in = (1 - t) * z_v0 + t * noise_v
        audio_in = z_a0.clone()
        video_target: torch.Tensor | None = noise_v - z_v0
        audio_target: torch.Tensor | None = None
    elif mode == MODE_VIDEO_DRIVEN:
        t_v, t_a = 0.0, t
        video_in = z_v0.clone()
        audio_in = (1 - t) * z_a0 + t * noise_a
        video_target = None
        audio_target = noise_a - z_a0
    else:  # joint and context_null share the noising recipe
        t_v = t_a = t
        video_in = (1 - t) * z_v0 + t * noise_v
        audio_in = (1 - t) * z_a0 + t * noise_a
        video_target = noise_v - z_v0
        audio_target = noise_a - z_a0

    if drop_text:
        null = torch.zeros_like(enc.visual_caption)
        captions = (null, null.clone(), null.clone())
    else:
        captions = (enc.visual_caption, enc.audio_caption, enc.speech_caption)

    cond = ConditionBundle(
        visual_caption=captions[0],
        audio_caption=captions[1],
        speech_caption=captions[2],
        reference=enc.reference,
        masked_video=masked_video,
        mask=latent_mask,
        base_audio=None if drop_base else enc.base_latent,
    )
    state = StreamState(video=video_in, audio=audio_in, t_video=t_v, t_audio=t_a)
    return TrainBatch(
        mode=mode, state=state, cond=cond,
        video_target=video_target, audio_target=audio_target,
    )


def compute_loss(model: DualStreamDiT, batch: TrainBatch) -> torch.Tensor:
    pred: Prediction = model(batch.state, batch.cond, skip_context=batch.skip_context)
    terms = []
    if batch.video_target is not None:
        terms.append(((pred.video - batch.video_target) ** 2).mean())
    if batch.audio_target is not None:
        terms.append(((pred.audio - batch.audio_target) ** 2).mean())
    if not terms:
        raise ValueError(f"batch mode {batch.mode!r} trains neither stream")
    loss = sum(terms[1:], start=terms[0])
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss in mode {batch.mode} "
            f"(t_video={batch.state.t_video:.4f}, t_audio={batch.state.t_audio:.4f})"
        )
    return loss


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    seed: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    cosine_decay: bool = True

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")


@dataclass
class TrainResult:
    curve: list[tuple[int, str, float]]
    clip_events: int


def train_loop(
    model: DualStreamDiT,
    scenes: list[Scene],
    codec: CodecConfig,
    cfg: TrainConfig,
    router: ModeRouterConfig = ModeRouterConfig(),
) -> TrainResult:
    """Single-example Adam training with cosine decay and gradient clipping.

    Deterministic given (cfg.seed, scenes, model init); zero steps leaves the
    model untouched. Divergence (non-finite loss) raises instead of limping on.
    """
    if not scenes and cfg.steps > 0:
        raise ValueError("cannot train on an empty scene list")
    rng = np.random.default_rng(cfg.seed)
    gen = ops.seeded_generator(cfg.seed + 1)
    encoded = [encode_scene(s, codec) for s in scenes]
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    curve: list[tuple[int, str, float]] = []
    clip_events = 0
    for step in range(1, cfg.steps + 1):
        idx = int(rng.integers(len(encoded)))
        mode = sample_mode(rng, router)
        batch = make_batch(encoded[idx], mode, rng, gen, router, codec)
        if cfg.cosine_decay:
            scale = 0.5 * (1.0 + math.cos(math.pi * (step - 1) / cfg.steps))
        else:
            scale = 1.0
        for group in opt.param_groups:
            group["lr"] = cfg.lr * scale
        opt.zero_grad(set_to_none=True)
        loss = compute_loss(model, batch)
        loss.backward()
        total_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        if float(total_norm) > cfg.clip_norm:
            clip_events += 1
            logger.debug("step %d: clipped gradient norm %.3f", step, float(total_norm))
        opt.step()
        curve.append((step, mode, loss.detach().item()))
    return TrainResult(curve=curve, clip_events=clip_events)


def write_loss_curve(path, curve: list[tuple[int, str, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("step,mode,loss\n")
        for step, mode, loss in curve:
            fh.write(f"{step},{mode},{loss:.8g}\n")
