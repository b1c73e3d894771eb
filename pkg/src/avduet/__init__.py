"""Desk-scale joint audio-visual editing with a dual-stream diffusion transformer."""

__version__ = "0.1.0"

from .codecs import (
    CodecConfig,
    audio_encode,
    audio_envelope,
    mask_to_latent,
    video_decode,
    video_encode,
)
from .metrics import IntervalSet, MetricsReport, band_dominance, ctx_f1, extract_onsets, sync_lag
from .model import (
    ConditionBundle,
    DualStreamDiT,
    ModelConfig,
    Prediction,
    StreamState,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .rope import PositionTable, SequenceLayout, apply_rotary, assign_positions
from .sampler import Anchors, GuidanceConfig, PassAccounting, make_anchors, sample
from .training import (
    ModeRouterConfig,
    TrainConfig,
    augment_mask,
    compute_loss,
    encode_scene,
    make_batch,
    sample_mode,
    scene_condition,
    train_loop,
)
from .world import Scene, WorldParams, generate_scene, read_dataset, write_dataset

__all__ = [
    "Anchors",
    "CodecConfig",
    "ConditionBundle",
    "DualStreamDiT",
    "GuidanceConfig",
    "IntervalSet",
    "MetricsReport",
    "ModeRouterConfig",
    "ModelConfig",
    "PassAccounting",
    "PositionTable",
    "Prediction",
    "Scene",
    "SequenceLayout",
    "StreamState",
    "TrainConfig",
    "WorldParams",
    "apply_rotary",
    "assign_positions",
    "audio_encode",
    "audio_envelope",
    "augment_mask",
    "band_dominance",
    "compute_loss",
    "ctx_f1",
    "encode_scene",
    "extract_onsets",
    "generate_scene",
    "init_model",
    "load_checkpoint",
    "make_anchors",
    "make_batch",
    "mask_to_latent",
    "read_dataset",
    "sample",
    "sample_mode",
    "save_checkpoint",
    "scene_condition",
    "sync_lag",
    "train_loop",
    "video_decode",
    "video_encode",
    "write_dataset",
]
