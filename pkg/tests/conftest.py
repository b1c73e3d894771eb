"""Shared fixtures: micro-scale worlds, models, and one small trained model.

The micro configurations here are deliberately tiny (2-4 frames, 4-8 px
frames, 12-32 hidden dims) so gradient checks and training-based assertions
stay in the seconds range on a single CPU core.
"""

import numpy as np
import pytest
import torch

from avduet import codecs, model as avmodel, rope, training, world

# one line per acceptance criterion, printed after the run so the verdicts
# survive pytest's output capture
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def layout_for(params: world.WorldParams, codec: codecs.CodecConfig) -> rope.SequenceLayout:
    return rope.SequenceLayout(
        target_frames=params.frames,
        audio_tokens=codec.audio_token_count(params.audio_samples),
        grid_h=params.height // codec.patch,
        grid_w=params.width // codec.patch,
    )


@pytest.fixture(scope="session")
def default_codec() -> codecs.CodecConfig:
    return codecs.CodecConfig()


@pytest.fixture(scope="session")
def micro_world() -> world.WorldParams:
    return world.WorldParams(frames=2, height=4, width=4, object_size=2,
                             max_events=1, caption_len=2)


@pytest.fixture(scope="session")
def micro_layout(micro_world, default_codec) -> rope.SequenceLayout:
    return layout_for(micro_world, default_codec)


def micro_model_config(layout: rope.SequenceLayout, **overrides) -> avmodel.ModelConfig:
    base = dict(layout=layout, blocks=1, hidden_dim=12, heads=2, text_vocab=16,
                caption_len=2, video_channels=4, audio_channels=8, mlp_ratio=2)
    base.update(overrides)
    return avmodel.ModelConfig(**base)


@pytest.fixture()
def micro_scene(micro_world) -> world.Scene:
    return world.generate_scene(3, micro_world)


@pytest.fixture()
def micro_enc(micro_scene, default_codec) -> training.EncodedScene:
    return training.encode_scene(micro_scene, default_codec)


@pytest.fixture()
def micro_cond(micro_enc, default_codec) -> avmodel.ConditionBundle:
    return training.scene_condition(micro_enc, default_codec)


def to_double(cond: avmodel.ConditionBundle) -> avmodel.ConditionBundle:
    """Float64 copy of a condition bundle (captions and mask stay integral)."""
    return avmodel.ConditionBundle(
        visual_caption=cond.visual_caption,
        audio_caption=cond.audio_caption,
        speech_caption=cond.speech_caption,
        reference=cond.reference.double(),
        masked_video=cond.masked_video.double(),
        mask=cond.mask,
        base_audio=None if cond.base_audio is None else cond.base_audio.double(),
    )


# Modules whose parameters live on the video side of the dual stream. Their
# hidden states reach the audio stream only through the v2a stop-gradient,
# which is what the detach assertions enumerate.
VIDEO_SIDE_TAGS = (
    "embed_ref", "embed_cond", "embed_target", "t_mlp_video",
    "head_mod_video", "head_video",
    ".v_self.", ".v_text.", ".a2v.", ".v_mlp.", ".video_mod.",
)


def is_video_side(param_name: str) -> bool:
    return any(tag in param_name for tag in VIDEO_SIDE_TAGS)


class SmallTrained:
    """A 500-step trained model plus everything needed to run it."""

    def __init__(self, model, scenes, codec, params, layout, result):
        self.model = model
        self.scenes = scenes
        self.codec = codec
        self.params = params
        self.layout = layout
        self.result = result


@pytest.fixture(scope="session")
def small_trained(default_codec) -> SmallTrained:
    params = world.WorldParams(frames=4, height=8, width=8, object_size=2,
                               max_events=2)
    layout = layout_for(params, default_codec)
    cfg = avmodel.ModelConfig(layout=layout, blocks=1, hidden_dim=32, heads=2,
                              caption_len=params.caption_len)
    model = avmodel.init_model(cfg, seed=7)
    scenes = [world.generate_scene(100 + i, params) for i in range(4)]
    result = training.train_loop(
        model, scenes, default_codec, training.TrainConfig(steps=500, seed=7)
    )
    return SmallTrained(model, scenes, default_codec, params, layout, result)
