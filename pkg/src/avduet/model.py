"""Dual-stream diffusion transformer for joint audio-visual editing.

One stream carries the video token sequence (reference, condition and target
segments over a spatial grid), the other carries audio tokens. Each block
runs the video phase then the audio phase:

  video: self-attn, text cross-attn, audio-to-video cross-attn, MLP
  audio: self-attn, text cross-attn, video-to-audio cross-attn,
         visual context attn, acoustic context attn, MLP

Cross-modal routing is asymmetric by design. Audio-to-video only writes into
masked target tokens, so everything outside the edit region passes through
bit-identical. Video-to-audio reads all target tokens but through a detach,
so no audio-side gradient ever reaches video-stream parameters. The two
context layers condition the audio stream directly on the raw masked-video
latent and the raw base-audio latent; their output projections start at
exactly zero, which makes a fresh model behave identically with the context
path on or off.

Timestep conditioning is per-stream adaptive layer norm. Video reference and
condition tokens are modulated at t=0, target tokens at the video timestep;
audio tokens use the audio timestep. The model predicts the rectified-flow
velocity for both streams.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import ops
from .rope import (
    SequenceLayout,
    assign_positions,
    rotary_chunk,
    rotary_cos_sin,
)

_CKPT_MAGIC = b"AVDT"
_CKPT_FORMAT = 1

# sublayer indices into the per-block modulation tables
_V_SELF, _V_TEXT, _V_A2V, _V_MLP = range(4)
_A_SELF, _A_TEXT, _A_V2A, _A_VIS, _A_AC, _A_MLP = range(6)


def _default_layout() -> SequenceLayout:
    return SequenceLayout(target_frames=8, audio_tokens=32, grid_h=8, grid_w=8)


@dataclass(frozen=True)
class ModelConfig:
    layout: SequenceLayout = field(default_factory=_default_layout)
    blocks: int = 2
    hidden_dim: int = 64
    heads: int = 4
    text_vocab: int = 64
    caption_len: int = 8
    a2v_group_size: float = 1.25
    a2v_window: int = 3
    v2a_group_size: float = 0.8
    v2a_window: int = 1
    acoustic_window: int = 8
    video_channels: int = 4
    audio_channels: int = 8
    mlp_ratio: int = 4
    # ablation switch: False removes the v2a stop-gradient so the whole
    # graph is differentiable end to end, which the gradient oracle needs
    detach_v2a: bool = True

    def __post_init__(self) -> None:
        if self.hidden_dim % self.heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        rotary_chunk(self.hidden_dim // self.heads)  # raises when heads cut too fine
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.caption_len < 1 or self.text_vocab < 2:
            raise ValueError("caption_len must be >= 1 and text_vocab >= 2")

    @property
    def a2v_half_width(self) -> float:
        return self.a2v_group_size * self.a2v_window / 2.0

    @property
    def v2a_half_width(self) -> float:
        return self.v2a_group_size * self.v2a_window / 2.0


def config_to_dict(cfg: ModelConfig) -> dict:
    out = asdict(cfg)
    out["layout"] = asdict(cfg.layout)
    return out


def config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    layout = data.pop("layout")
    return ModelConfig(layout=SequenceLayout(**layout), **data)


@dataclass
class ConditionBundle:
    """Everything the model is conditioned on for one scene."""

    visual_caption: torch.Tensor
    audio_caption: torch.Tensor
    speech_caption: torch.Tensor
    reference: torch.Tensor
    masked_video: torch.Tensor
    mask: torch.Tensor
    base_audio: torch.Tensor | None = None


@dataclass
class StreamState:
    """Noised latents and their timesteps for one denoising step."""

    video: torch.Tensor
    audio: torch.Tensor
    t_video: float
    t_audio: float


@dataclass
class Prediction:
    video: torch.Tensor
    audio: torch.Tensor


@dataclass
class _ForwardPass:
    """Precomputed per-forward context shared by every block."""

    temb_video: torch.Tensor
    temb_zero: torch.Tensor
    temb_audio: torch.Tensor
    target_rows: torch.Tensor
    video_rope: tuple[torch.Tensor, torch.Tensor]
    audio_rope: tuple[torch.Tensor, torch.Tensor]
    target_rope: tuple[torch.Tensor, torch.Tensor]
    video_text: torch.Tensor
    video_text_mask: torch.Tensor
    audio_text: torch.Tensor
    audio_text_mask: torch.Tensor
    mask_idx: torch.Tensor
    a2v_mask: torch.Tensor
    a2v_rope_q: tuple[torch.Tensor, torch.Tensor]
    v2a_mask: torch.Tensor
    ac_mask: torch.Tensor
    target_start: int
    target_slice: slice
    z_cond_flat: torch.Tensor
    base_audio: torch.Tensor | None
    skip_context: bool
    detach_v2a: bool


class _Attention(nn.Module):
    """Projection wrapper around the shared attention primitive.

    All projections are bias-free so zero inputs and zero-initialized output
    weights produce exactly-zero updates, which several routing invariants
    rely on. ``zero_out`` marks layers whose output projection starts at 0.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, zero_out: bool = False):
        super().__init__()
        self.heads = heads
        self.zero_out = zero_out
        kv_dim = dim if kv_dim is None else kv_dim
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(kv_dim, dim, bias=False)
        self.v = nn.Linear(kv_dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)

    def forward(self, x_q, x_kv, mask=None, rope_q=None, rope_k=None):
        out = ops.attention(
            self.q(x_q), self.k(x_kv), self.v(x_kv), self.heads,
            mask=mask, rope_q=rope_q, rope_k=rope_k,
        )
        return self.o(out)


class _Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.up = nn.Linear(dim, ratio * dim)
        self.down = nn.Linear(ratio * dim, dim)

    def forward(self, x):
        return self.down(torch.nn.functional.gelu(self.up(x)))


class DualStreamBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim, heads = cfg.hidden_dim, cfg.heads
        self.v_self = _Attention(dim, heads)
        self.v_text = _Attention(dim, heads)
        self.a2v = _Attention(dim, heads)
        self.v_mlp = _Mlp(dim, cfg.mlp_ratio)
        self.video_mod = nn.Linear(dim, 4 * 3 * dim)
        self.a_self = _Attention(dim, heads)
        self.a_text = _Attention(dim, heads)
        self.v2a = _Attention(dim, heads)
        self.vis_ctx = _Attention(dim, heads, kv_dim=cfg.video_channels, zero_out=True)
        self.ac_ctx = _Attention(dim, heads, kv_dim=cfg.audio_channels, zero_out=True)
        self.a_mlp = _Mlp(dim, cfg.mlp_ratio)
        self.audio_mod = nn.Linear(dim, 6 * 3 * dim)

    def forward(self, video: torch.Tensor, audio: torch.Tensor, fc: _ForwardPass):
        dim = video.shape[-1]
        mod_t = self.video_mod(fc.temb_video).view(4, 3, dim)
        mod_0 = self.video_mod(fc.temb_zero).view(4, 3, dim)
        mod_a = self.audio_mod(fc.temb_audio).view(6, 3, dim)

        def vmod(s: int):
            # reference/condition rows modulate at t=0, target rows at t_video
            return tuple(
                torch.where(fc.target_rows, mod_t[s, c], mod_0[s, c]) for c in range(3)
            )

        shift, scale, gate = vmod(_V_SELF)
        h = ops.stable_layer_norm(video) * (1 + scale) + shift
        video = video + gate * self.v_self(h, h, rope_q=fc.video_rope, rope_k=fc.video_rope)

        shift, scale, gate = vmod(_V_TEXT)
        h = ops.stable_layer_norm(video) * (1 + scale) + shift
        video = video + gate * self.v_text(h, fc.video_text, mask=fc.video_text_mask)

        if fc.mask_idx.numel():
            shift, scale, gate = vmod(_V_A2V)
            h = ops.stable_layer_norm(video) * (1 + scale) + shift
            queries = h[fc.target_slice][fc.mask_idx]
            rows = self.a2v(
                queries, ops.stable_layer_norm(audio),
                mask=fc.a2v_mask, rope_q=fc.a2v_rope_q, rope_k=fc.audio_rope,
            )
            update = video.new_zeros(video.shape)
            update[fc.target_start + fc.mask_idx] = rows
            video = video + gate * update

        shift, scale, gate = vmod(_V_MLP)
        h = ops.stable_layer_norm(video) * (1 + scale) + shift
        video = video + gate * self.v_mlp(h)

        def amod(s: int):
            return mod_a[s, 0], mod_a[s, 1], mod_a[s, 2]

        shift, scale, gate = amod(_A_SELF)
        h = ops.stable_layer_norm(audio) * (1 + scale) + shift
        audio = audio + gate * self.a_self(h, h, rope_q=fc.audio_rope, rope_k=fc.audio_rope)

        shift, scale, gate = amod(_A_TEXT)
        h = ops.stable_layer_norm(audio) * (1 + scale) + shift
        audio = audio + gate * self.a_text(h, fc.audio_text, mask=fc.audio_text_mask)

        shift, scale, gate = amod(_A_V2A)
        h = ops.stable_layer_norm(audio) * (1 + scale) + shift
        # detached keys/values: the audio loss must not steer the video stream
        src = video[fc.target_slice]
        kv = ops.stable_layer_norm(src.detach() if fc.detach_v2a else src)
        audio = audio + gate * self.v2a(
            h, kv, mask=fc.v2a_mask, rope_q=fc.audio_rope, rope_k=fc.target_rope
        )

        if not fc.skip_context:
            shift, scale, gate = amod(_A_VIS)
            h = ops.stable_layer_norm(audio) * (1 + scale) + shift
            audio = audio + gate * self.vis_ctx(h, fc.z_cond_flat)
            if fc.base_audio is not None:
                shift, scale, gate = amod(_A_AC)
                h = ops.stable_layer_norm(audio) * (1 + scale) + shift
                audio = audio + gate * self.ac_ctx(h, fc.base_audio, mask=fc.ac_mask)

        shift, scale, gate = amod(_A_MLP)
        h = ops.stable_layer_norm(audio) * (1 + scale) + shift
        audio = audio + gate * self.a_mlp(h)
        return video, audio


def _expect_shape(tensor: torch.Tensor, shape: tuple[int, ...], name: str) -> None:
    if tuple(tensor.shape) != shape:
        raise ValueError(f"{name} has shape {tuple(tensor.shape)}, expected {shape}")


class DualStreamDiT(nn.Module):
    def __init__(self, config: ModelConfig, naive_positions: bool = False):
        super().__init__()
        self.config = config
        self.naive_positions = naive_positions
        self.forward_calls = 0
        lay = config.layout
        dim = config.hidden_dim

        self.embed_ref = nn.Linear(config.video_channels, dim)
        self.embed_cond = nn.Linear(config.video_channels, dim)
        self.embed_target = nn.Linear(config.video_channels, dim)
        self.embed_audio = nn.Linear(config.audio_channels, dim)
        self.text_table = nn.Embedding(config.text_vocab, dim)
        self.t_mlp_video = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.t_mlp_audio = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(DualStreamBlock(config) for _ in range(config.blocks))
        self.head_mod_video = nn.Linear(dim, 2 * dim)
        self.head_mod_audio = nn.Linear(dim, 2 * dim)
        self.head_video = nn.Linear(dim, config.video_channels)
        self.head_audio = nn.Linear(dim, config.audio_channels)

        self._target_start = (lay.ref_frames + lay.target_frames) * lay.frame_tokens
        self._target_slice = slice(self._target_start, self._target_start + lay.target_token_count)

        table = assign_positions(lay, naive=naive_positions)
        coords = torch.from_numpy(table.coords())
        head_dim = dim // config.heads
        cos, sin = rotary_cos_sin(coords, head_dim)
        dt = torch.get_default_dtype()
        n_video = lay.video_tokens
        self.register_buffer("video_cos", cos[:n_video].to(dt), persistent=False)
        self.register_buffer("video_sin", sin[:n_video].to(dt), persistent=False)
        self.register_buffer("audio_cos", cos[n_video:].to(dt), persistent=False)
        self.register_buffer("audio_sin", sin[n_video:].to(dt), persistent=False)

        frame_pos = np.arange(1, lay.target_frames + 1, dtype=np.float64)
        audio_pos = np.arange(1, lay.audio_tokens + 1, dtype=np.float64) * lay.audio_spacing
        a2v = np.abs(audio_pos[None, :] - frame_pos[:, None]) <= config.a2v_half_width
        v2a = np.abs(frame_pos[None, :] - audio_pos[:, None]) <= config.v2a_half_width
        idx = np.arange(lay.audio_tokens)
        ac = np.abs(idx[None, :] - idx[:, None]) <= config.acoustic_window // 2
        frame_of_token = np.repeat(np.arange(lay.target_frames), lay.frame_tokens)
        self.register_buffer("a2v_frame_adm", torch.from_numpy(a2v), persistent=False)
        self.register_buffer(
            "v2a_adm", torch.from_numpy(v2a[:, frame_of_token]), persistent=False
        )
        self.register_buffer("ac_adm", torch.from_numpy(ac), persistent=False)
        self.register_buffer(
            "target_frame_idx", torch.from_numpy(frame_of_token), persistent=False
        )
        target_rows = torch.zeros(n_video, 1, dtype=torch.bool)
        target_rows[self._target_slice] = True
        self.register_buffer("target_rows", target_rows, persistent=False)

    def _timestep_embedding(self, mlp: nn.Module, t: float, dtype: torch.dtype) -> torch.Tensor:
        # t in [0, 1] is stretched so the high-frequency channels see it move
        scalar = torch.tensor(float(t) * 1000.0, dtype=dtype)
        return mlp(ops.sinusoidal_embedding(scalar, self.config.hidden_dim))

    def forward(
        self, state: StreamState, cond: ConditionBundle, skip_context: bool = False
    ) -> Prediction:
        self.forward_calls += 1
        cfg = self.config
        lay = cfg.layout
        c_v, c_a = cfg.video_channels, cfg.audio_channels
        grid = (lay.grid_h, lay.grid_w)
        _expect_shape(state.video, (lay.target_frames, *grid, c_v), "state.video")
        _expect_shape(state.audio, (lay.audio_tokens, c_a), "state.audio")
        _expect_shape(cond.reference, (lay.ref_frames, *grid, c_v), "reference")
        _expect_shape(cond.masked_video, (lay.target_frames, *grid, c_v), "masked_video")
        _expect_shape(cond.mask, (lay.target_frames, *grid), "mask")
        for name in ("visual_caption", "audio_caption", "speech_caption"):
            _expect_shape(getattr(cond, name), (cfg.caption_len,), name)
        base = cond.base_audio
        if skip_context:
            base = None
        if base is not None:
            _expect_shape(base, (lay.audio_tokens, c_a), "base_audio")

        dtype = self.head_video.weight.dtype
        video = torch.cat(
            [
                self.embed_ref(cond.reference.reshape(-1, c_v).to(dtype)),
                self.embed_cond(cond.masked_video.reshape(-1, c_v).to(dtype)),
                self.embed_target(state.video.reshape(-1, c_v).to(dtype)),
            ],
            dim=0,
        )
        audio = self.embed_audio(state.audio.to(dtype))

        n_video = video.shape[0]
        vis_ids = cond.visual_caption.long()
        aud_ids = torch.cat([cond.audio_caption.long(), cond.speech_caption.long()])
        video_text = ops.stable_layer_norm(self.text_table(vis_ids))
        audio_text = ops.stable_layer_norm(self.text_table(aud_ids))
        video_text_mask = (vis_ids != 0).unsqueeze(0).expand(n_video, -1)
        audio_text_mask = (aud_ids != 0).unsqueeze(0).expand(lay.audio_tokens, -1)

        mask_idx = cond.mask.reshape(-1).nonzero(as_tuple=False).squeeze(1)
        target_cos = self.video_cos[self._target_slice]
        target_sin = self.video_sin[self._target_slice]
        fc = _ForwardPass(
            temb_video=self._timestep_embedding(self.t_mlp_video, state.t_video, dtype),
            temb_zero=self._timestep_embedding(self.t_mlp_video, 0.0, dtype),
            temb_audio=self._timestep_embedding(self.t_mlp_audio, state.t_audio, dtype),
            target_rows=self.target_rows,
            video_rope=(self.video_cos, self.video_sin),
            audio_rope=(self.audio_cos, self.audio_sin),
            target_rope=(target_cos, target_sin),
            video_text=video_text,
            video_text_mask=video_text_mask,
            audio_text=audio_text,
            audio_text_mask=audio_text_mask,
            mask_idx=mask_idx,
            a2v_mask=self.a2v_frame_adm[self.target_frame_idx[mask_idx]],
            a2v_rope_q=(target_cos[mask_idx], target_sin[mask_idx]),
            v2a_mask=self.v2a_adm,
            ac_mask=self.ac_adm,
            target_start=self._target_start,
            target_slice=self._target_slice,
            z_cond_flat=cond.masked_video.reshape(-1, c_v).to(dtype),
            base_audio=None if base is None else base.to(dtype),
            skip_context=skip_context,
            detach_v2a=cfg.detach_v2a,
        )

        for block in self.blocks:
            video, audio = block(video, audio, fc)

        hm_v = self.head_mod_video(fc.temb_video).view(2, -1)
        h = ops.stable_layer_norm(video[self._target_slice]) * (1 + hm_v[1]) + hm_v[0]
        video_out = self.head_video(h).view(lay.target_frames, *grid, c_v)
        hm_a = self.head_mod_audio(fc.temb_audio).view(2, -1)
        h = ops.stable_layer_norm(audio) * (1 + hm_a[1]) + hm_a[0]
        audio_out = self.head_audio(h)
        return Prediction(video=video_out, audio=audio_out)


def init_model(config: ModelConfig, seed: int, naive_positions: bool = False) -> DualStreamDiT:
    """Deterministically initialized model.

    Weight matrices draw from seeded normal(0, 0.02); bias vectors start at
    zero. The two exceptions the architecture depends on: context-attention
    output projections are exactly zero, and the condition patch embedding
    starts as an elementwise copy of the target patch embedding.
    """
    model = DualStreamDiT(config, naive_positions=naive_positions)
    gen = ops.seeded_generator(seed)
    with torch.no_grad():
        for _, p in model.named_parameters():
            if p.ndim > 1:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
            else:
                p.zero_()
        for module in model.modules():
            if isinstance(module, _Attention) and module.zero_out:
                module.o.weight.zero_()
        model.embed_cond.weight.copy_(model.embed_target.weight)
        model.embed_cond.bias.copy_(model.embed_target.bias)
    model.forward_calls = 0
    return model


def save_checkpoint(
    model: DualStreamDiT, path, seed: int = 0, step: int = 0, codec: dict | None = None
) -> None:
    """Write a self-describing checkpoint: JSON header + flat f32 payload.

    ``codec`` optionally embeds the data codec settings so sampling can
    rebuild latent geometry from the checkpoint alone.
    """
    records = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": _CKPT_FORMAT,
        "config": config_to_dict(model.config),
        "naive_positions": model.naive_positions,
        "seed": int(seed),
        "step": int(step),
        "codec": codec,
        "payload_bytes": offset,
        "params": records,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[DualStreamDiT, dict]:
    """Rebuild a model from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        payload = fh.read()
    if header.get("format") != _CKPT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    if len(payload) != header["payload_bytes"]:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    config = config_from_dict(header["config"])
    model = DualStreamDiT(config, naive_positions=header.get("naive_positions", False))
    params = dict(model.named_parameters())
    seen = set()
    with torch.no_grad():
        for rec in header["params"]:
            name = rec["name"]
            if name not in params:
                raise ValueError(f"{path}: checkpoint parameter {name!r} not in model")
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = rec["offset"]
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
            params[name].copy_(torch.from_numpy(arr.reshape(shape).copy()))
            seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint missing parameters: {sorted(missing)[:3]}...")
    meta = {
        "seed": header["seed"],
        "step": header["step"],
        "config": header["config"],
        "codec": header.get("codec"),
    }
    return model, meta
