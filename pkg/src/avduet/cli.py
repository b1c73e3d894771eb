"""Command line for the desk-scale audio-visual editing pipeline.

Subcommands cover the whole loop: gen-data synthesizes a dataset, train
fits a model on it, sample generates an edited scene from a checkpoint,
eval scores interval files against a reference, and inspect prints what a
checkpoint contains. Exit codes: 0 on success, 1 on usage or configuration
errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .codecs import CodecConfig, audio_envelope, video_decode
from .metrics import IntervalSet, MetricsReport, ctx_f1, generated_intervals
from .model import (
    ModelConfig,
    config_to_dict,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .ops import configure_threads
from .rope import SequenceLayout
from .sampler import GuidanceConfig, sample
from .training import (
    ModeRouterConfig,
    TrainConfig,
    encode_scene,
    scene_condition,
    train_loop,
    write_loss_curve,
)
from .world import (
    WorldParams,
    band_token,
    generate_scene,
    read_dataset,
    read_scene,
    write_dataset,
    WORD_BEEP,
)


class ConfigError(ValueError):
    """Bad user-supplied configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


_CONFIG_SECTIONS = {
    "model": ("blocks", "hidden_dim", "heads", "text_vocab", "a2v_group_size",
              "a2v_window", "v2a_group_size", "v2a_window", "acoustic_window",
              "mlp_ratio", "detach_v2a"),
    "router": ("p_joint", "p_audio_driven", "p_video_driven", "p_context_null",
               "text_drop", "base_drop"),
    "train": ("lr", "beta1", "beta2", "weight_decay", "clip_norm", "cosine_decay"),
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {section: {} for section in _CONFIG_SECTIONS}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    out = {}
    for section in _CONFIG_SECTIONS:
        sub = raw.pop(section, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(sub) - set(_CONFIG_SECTIONS[section])
        if unknown:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
        out[section] = sub
    if raw:
        raise ConfigError(f"unknown top-level config keys: {sorted(raw)}")
    return out


def _apply_overrides(config: dict, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in _CONFIG_SECTIONS:
            raise ConfigError(f"override key {dotted!r} must be section.key with a known section")
        section, key = parts
        if key not in _CONFIG_SECTIONS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        config[section][key] = json.loads(value) if value not in ("", None) else value


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _write_pgm(path: Path, frame: np.ndarray) -> None:
    levels = np.clip(np.round(frame * 255), 0, 255).astype(int)
    h, w = levels.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in levels]
    path.write_text("\n".join(lines) + "\n")


def cmd_gen_data(args) -> int:
    params = WorldParams(turn_taking=not args.allow_overlap)
    codec = CodecConfig()
    scenes = [generate_scene(args.seed + i, params) for i in range(args.scenes)]
    write_dataset(scenes, args.out, codec, global_seed=args.seed)
    _write_json(
        Path(args.out) / "config_used.json",
        {
            "command": "gen-data",
            "scenes": args.scenes,
            "seed": args.seed,
            "world": asdict(params),
            "codec": asdict(codec),
        },
    )
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _layout_for(scene, codec: CodecConfig) -> SequenceLayout:
    frames, height, width = scene.video.shape
    return SequenceLayout(
        target_frames=frames,
        audio_tokens=codec.audio_token_count(scene.target_audio.size),
        grid_h=height // codec.patch,
        grid_w=width // codec.patch,
    )


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    _apply_overrides(config, args.set or [])
    scenes, manifest = read_dataset(args.data)
    if not scenes:
        raise ConfigError(f"dataset {args.data} holds no scenes")
    codec = CodecConfig(**manifest["codec"])
    layout = _layout_for(scenes[0], codec)
    try:
        model_cfg = ModelConfig(
            layout=layout,
            caption_len=scenes[0].visual_caption.size,
            video_channels=codec.video_channels,
            audio_channels=codec.bands,
            **config["model"],
        )
        router = ModeRouterConfig(**config["router"])
        train_cfg = TrainConfig(steps=args.steps, seed=args.seed, **config["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    model = init_model(model_cfg, args.seed)
    result = train_loop(model, scenes, codec, train_cfg, router)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, seed=args.seed, step=train_cfg.steps, codec=asdict(codec))
    write_loss_curve(f"{out}.loss.csv", result.curve)
    _write_json(
        Path(f"{out}.config.json"),
        {
            "command": "train",
            "data": str(args.data),
            "seed": args.seed,
            "steps": args.steps,
            "model": config_to_dict(model_cfg),
            "router": asdict(router),
            "train": asdict(train_cfg),
            "clip_events": result.clip_events,
        },
    )
    final = result.curve[-1][2] if result.curve else float("nan")
    print(f"trained {train_cfg.steps} steps, final loss {final:.4f}, checkpoint {out}")
    return 0


def cmd_sample(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    if meta.get("codec") is None:
        raise ConfigError(f"checkpoint {args.ckpt} carries no codec settings")
    codec = CodecConfig(**meta["codec"])
    scene = read_scene(args.scene)
    enc = encode_scene(scene, codec)
    caption = None
    if args.edit_band is not None:
        if not 0 <= args.edit_band < codec.bands:
            raise ConfigError(f"--edit-band must be in [0, {codec.bands})")
        edited = np.zeros_like(scene.audio_caption)
        edited[0] = WORD_BEEP
        edited[1] = band_token(args.edit_band)
        caption = torch.from_numpy(edited.astype(np.int64))
    cond = scene_condition(enc, codec, audio_caption=caption)
    gcfg = GuidanceConfig(
        steps=args.steps,
        stage_boundary=args.stage_boundary,
        context_scale=args.context_scale,
        video_sync_scale=args.video_sync_scale,
        audio_sync_scale=args.audio_sync_scale,
    )
    layout = model.config.layout
    result = sample(model, cond, layout, codec, gcfg, seed=args.seed)

    out = Path(args.out)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    video_latent = result.video_latent.numpy()
    audio_latent = result.audio_latent.numpy()
    from .world import write_arrays

    write_arrays(out / "latents.bin", {
        "video_latent": video_latent.astype("<f4"),
        "audio_latent": audio_latent.astype("<f4"),
    })
    pixels = video_decode(video_latent, codec)
    for f in range(pixels.shape[0]):
        _write_pgm(frames_dir / f"frame_{f:03d}.pgm", pixels[f])
    env = audio_envelope(audio_latent)
    with open(out / "envelope.csv", "w") as fh:
        fh.write("token,time_s,envelope\n")
        for j, e in enumerate(env):
            fh.write(f"{j},{j * codec.window_duration:.6f},{e:.8g}\n")
    intervals = generated_intervals(audio_latent, codec)
    _write_json(out / "intervals.json", {"intervals": intervals.intervals.tolist()})
    _write_json(out / "accounting.json", result.accounting.to_dict())
    _write_json(out / "ref" / "intervals.json",
                {"intervals": scene.target_intervals.tolist()})
    _write_json(out / "ref" / "protected.json",
                {"intervals": scene.protected_intervals.tolist()})
    _write_json(out / "config_used.json", {
        "command": "sample",
        "ckpt": str(args.ckpt),
        "scene": str(args.scene),
        "seed": args.seed,
        "edit_band": args.edit_band,
        "guidance": asdict(gcfg),
    })
    print(f"sampled {gcfg.steps} steps ({result.accounting.total} forwards) into {out}")
    return 0


def _read_intervals(path: Path) -> IntervalSet:
    if not path.exists():
        raise FileNotFoundError(f"missing interval file: {path}")
    data = json.loads(path.read_text())
    return IntervalSet(data["intervals"])


def cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    generated = _read_intervals(pred_dir / "intervals.json")
    reference = _read_intervals(ref_dir / "intervals.json")
    protected_path = ref_dir / "protected.json"
    protected = _read_intervals(protected_path) if protected_path.exists() else IntervalSet()
    precision, recall, f1 = ctx_f1(generated, protected, reference)
    accounting = None
    accounting_path = pred_dir / "accounting.json"
    if accounting_path.exists():
        accounting = json.loads(accounting_path.read_text())
    report = MetricsReport(
        precision=precision, recall=recall, f1=f1, accounting=accounting,
    )
    out = Path(args.out) if args.out else pred_dir / "report.json"
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    print(f"precision={precision:.4f} recall={recall:.4f} f1={f1:.4f} -> {out}")
    return 0


def cmd_inspect(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    print(json.dumps({"config": meta["config"], "seed": meta["seed"],
                      "step": meta["step"], "codec": meta.get("codec")}, indent=2))
    total = 0
    for name, p in model.named_parameters():
        arr = p.detach().numpy()
        total += arr.size
        print(f"{name:48s} {str(tuple(arr.shape)):16s} "
              f"mean {arr.mean():+.5f} std {arr.std():.5f}")
    print(f"total parameters: {total}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="avduet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"avduet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="synthesize a scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--allow-overlap", action="store_true",
                   help="let target and protected events share frames")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON with model/router/train sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate an edited scene from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--stage-boundary", type=int, default=10)
    p.add_argument("--context-scale", type=float, default=5.0)
    p.add_argument("--video-sync-scale", type=float, default=5.0)
    p.add_argument("--audio-sync-scale", type=float, default=5.0)
    p.add_argument("--edit-band", type=int, default=None,
                   help="swap the caption's band word before sampling")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score generated intervals against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", help="report path (default: PRED/report.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print checkpoint config and parameter stats")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        configure_threads()
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
