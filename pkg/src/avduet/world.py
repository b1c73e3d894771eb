"""Blinking-beeper micro-world: scene synthesis and the on-disk dataset.

A scene is one second of paired media on a 16x16 canvas. A small target
square blinks bright on a few event frames and each blink drops a short tone
burst into the target audio track, in the scene's frequency band. A second
distractor square does the same thing elsewhere on the canvas, in a
different band, into the BASE audio track, on top of a low noise floor. The
edit mask covers the target square in every frame. Captions name the object
and the band class; the speech channel stays null in this world.

By default the distractor blinks on frames the target leaves free
(turn-taking), which is what gives the context-attention pathway a learnable
avoidance signal; generation is still free to collide with protected
intervals at sampling time, and the metrics handle overlap either way.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .codecs import CodecConfig, band_center

NULL_TOKEN = 0
WORD_SQUARE = 1
WORD_BLINKS = 2
WORD_BEEP = 3
BAND_TOKEN_BASE = 8


def band_token(band: int) -> int:
    return BAND_TOKEN_BASE + band


@dataclass(frozen=True)
class WorldParams:
    frames: int = 8
    height: int = 16
    width: int = 16
    fps: int = 8
    sample_rate: int = 8000
    object_size: int = 4
    base_level: float = 0.2
    blink_level: float = 1.0
    min_events: int = 1
    max_events: int = 3
    tone_seconds: float = 0.1
    tone_amplitude: float = 0.8
    noise_floor_db: float = -30.0
    caption_len: int = 8
    n_bands: int = 8
    turn_taking: bool = True
    # None mirrors min/max_events; 0 means the distractor square never
    # blinks and the base track is pure noise floor
    max_distractor_events: int | None = None

    def __post_init__(self) -> None:
        if self.object_size > min(self.height, self.width) // 2:
            raise ValueError("object_size too large to place two disjoint squares")
        if not 1 <= self.min_events <= self.max_events:
            raise ValueError("need 1 <= min_events <= max_events")
        if self.max_distractor_events is not None and self.max_distractor_events < 0:
            raise ValueError("max_distractor_events must be >= 0 when given")
        if self.turn_taking and 2 * self.max_events > self.frames:
            raise ValueError("turn-taking needs max_events <= frames / 2")

    @property
    def audio_samples(self) -> int:
        return self.frames * self.sample_rate // self.fps

    @property
    def frame_samples(self) -> int:
        return self.sample_rate // self.fps


@dataclass(eq=False)
class Scene:
    video: np.ndarray
    target_audio: np.ndarray
    base_audio: np.ndarray
    mask: np.ndarray
    visual_caption: np.ndarray
    audio_caption: np.ndarray
    speech_caption: np.ndarray
    target_intervals: np.ndarray
    protected_intervals: np.ndarray
    band: int
    seed: int


def _place_square(rng: np.random.Generator, params: WorldParams) -> tuple[int, int]:
    y = int(rng.integers(0, params.height - params.object_size + 1))
    x = int(rng.integers(0, params.width - params.object_size + 1))
    return y, x


def _disjoint(a: tuple[int, int], b: tuple[int, int], size: int) -> bool:
    return abs(a[0] - b[0]) >= size or abs(a[1] - b[1]) >= size


def _tone_burst(band: int, params: WorldParams, codec_bands: int) -> np.ndarray:
    n = int(round(params.tone_seconds * params.sample_rate))
    cfg = CodecConfig(sample_rate=params.sample_rate, bands=codec_bands)
    freq = band_center(cfg, band)
    t = np.arange(n) / params.sample_rate
    return (params.tone_amplitude * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def generate_scene(seed: int, params: WorldParams = WorldParams()) -> Scene:
    """Deterministic scene synthesis; equal seeds give bit-identical scenes."""
    rng = np.random.default_rng(seed)
    band = int(rng.integers(params.n_bands))
    distractor_band = (band + int(rng.integers(1, params.n_bands))) % params.n_bands

    target_pos = _place_square(rng, params)
    for attempt in range(100):
        distractor_pos = _place_square(rng, params)
        if _disjoint(target_pos, distractor_pos, params.object_size):
            break
    else:
        raise RuntimeError(f"could not place disjoint squares after 100 tries (seed {seed})")

    n_target = int(rng.integers(params.min_events, params.max_events + 1))
    all_frames = np.arange(params.frames)
    target_frames = np.sort(rng.choice(all_frames, size=n_target, replace=False))
    if params.turn_taking:
        free = np.setdiff1d(all_frames, target_frames)
    else:
        free = all_frames
    if params.max_distractor_events == 0:
        n_distractor = 0
    else:
        hi = (params.max_events if params.max_distractor_events is None
              else params.max_distractor_events)
        n_distractor = int(rng.integers(min(params.min_events, hi), hi + 1))
    n_distractor = min(n_distractor, free.size)
    distractor_frames = np.sort(rng.choice(free, size=n_distractor, replace=False))

    video = np.zeros((params.frames, params.height, params.width), dtype=np.float32)
    size = params.object_size

    def paint(pos: tuple[int, int], frames: np.ndarray) -> None:
        y, x = pos
        video[:, y : y + size, x : x + size] = params.base_level
        for f in frames:
            video[f, y : y + size, x : x + size] = params.blink_level

    paint(target_pos, target_frames)
    paint(distractor_pos, distractor_frames)

    mask = np.zeros((params.frames, params.height, params.width), dtype=bool)
    ty, tx = target_pos
    mask[:, ty : ty + size, tx : tx + size] = True

    samples = params.audio_samples
    target_audio = np.zeros(samples, dtype=np.float32)
    burst = _tone_burst(band, params, params.n_bands)
    for f in target_frames:
        start = int(f) * params.frame_samples
        end = min(start + burst.size, samples)
        target_audio[start:end] += burst[: end - start]

    noise_std = 10.0 ** (params.noise_floor_db / 20.0)
    base_audio = rng.normal(0.0, noise_std, samples).astype(np.float32)
    d_burst = _tone_burst(distractor_band, params, params.n_bands)
    for f in distractor_frames:
        start = int(f) * params.frame_samples
        end = min(start + d_burst.size, samples)
        base_audio[start:end] += d_burst[: end - start]

    def intervals(frames: np.ndarray) -> np.ndarray:
        out = np.zeros((frames.size, 2), dtype=np.float32)
        out[:, 0] = frames / params.fps
        out[:, 1] = frames / params.fps + params.tone_seconds
        return out

    def caption(words: list[int]) -> np.ndarray:
        out = np.full(params.caption_len, NULL_TOKEN, dtype=np.int32)
        out[: len(words)] = words
        return out

    return Scene(
        video=video,
        target_audio=target_audio,
        base_audio=base_audio,
        mask=mask,
        visual_caption=caption([WORD_SQUARE, WORD_BLINKS]),
        audio_caption=caption([WORD_BEEP, band_token(band)]),
        speech_caption=caption([]),
        target_intervals=intervals(target_frames),
        protected_intervals=intervals(distractor_frames),
        band=band,
        seed=int(seed),
    )


def scenes_equal(a: Scene, b: Scene) -> bool:
    for name in (
        "video", "target_audio", "base_audio", "mask", "visual_caption",
        "audio_caption", "speech_caption", "target_intervals", "protected_intervals",
    ):
        if not np.array_equal(getattr(a, name), getattr(b, name)):
            return False
    return a.band == b.band and a.seed == b.seed


# ---------------------------------------------------------------------------
# typed array records, used for scene files and latent dumps

_BLOB_MAGIC = b"AVWD"
_DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<i4"),
    2: np.dtype("uint8"),
    3: np.dtype("<i8"),
}
_CODE_FOR_KIND = {("f", 4): 0, ("i", 4): 1, ("u", 1): 2, ("i", 8): 3}


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named typed arrays: f32 media, i32/i64 integers, u8 flags."""
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            key = (arr.dtype.kind, arr.dtype.itemsize)
            if key not in _CODE_FOR_KIND:
                raise ValueError(f"unsupported dtype {arr.dtype} for record {name!r}")
            code = _CODE_FOR_KIND[key]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(_DTYPE_CODES[code]).tobytes())


def read_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _BLOB_MAGIC:
            raise ValueError(f"{path}: not an array record file")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            dtype = _DTYPE_CODES[code]
            n = int(np.prod(shape)) if ndim else 1
            data = fh.read(n * dtype.itemsize)
            out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return out


def write_scene(path, scene: Scene) -> None:
    write_arrays(
        path,
        {
            "video": scene.video.astype("<f4"),
            "target_audio": scene.target_audio.astype("<f4"),
            "base_audio": scene.base_audio.astype("<f4"),
            "mask": scene.mask.astype(np.uint8),
            "visual_caption": scene.visual_caption.astype("<i4"),
            "audio_caption": scene.audio_caption.astype("<i4"),
            "speech_caption": scene.speech_caption.astype("<i4"),
            "target_intervals": scene.target_intervals.astype("<f4"),
            "protected_intervals": scene.protected_intervals.astype("<f4"),
            "band": np.array([scene.band], dtype="<i4"),
            "seed": np.array([scene.seed], dtype="<i8"),
        },
    )


def read_scene(path) -> Scene:
    rec = read_arrays(path)
    return Scene(
        video=rec["video"],
        target_audio=rec["target_audio"],
        base_audio=rec["base_audio"],
        mask=rec["mask"].astype(bool),
        visual_caption=rec["visual_caption"],
        audio_caption=rec["audio_caption"],
        speech_caption=rec["speech_caption"],
        target_intervals=rec["target_intervals"],
        protected_intervals=rec["protected_intervals"],
        band=int(rec["band"][0]),
        seed=int(rec["seed"][0]),
    )


MANIFEST_NAME = "manifest.json"


def write_dataset(scenes: list[Scene], out_dir, codec: CodecConfig, global_seed: int) -> dict:
    """Write scenes plus a manifest; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.bin"
        write_scene(out / name, scene)
        files.append(name)
    manifest = {
        "format": 1,
        "scene_count": len(scenes),
        "global_seed": int(global_seed),
        "codec": asdict(codec),
        "files": files,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest


def read_dataset(path, expect_codec: CodecConfig | None = None) -> tuple[list[Scene], dict]:
    """Load a dataset directory; optionally insist on a codec config match."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    manifest = json.loads(manifest_path.read_text())
    if len(manifest["files"]) != manifest["scene_count"]:
        raise ValueError(
            f"{manifest_path}: scene_count {manifest['scene_count']} "
            f"does not match {len(manifest['files'])} files"
        )
    if expect_codec is not None:
        stored = manifest.get("codec", {})
        wanted = asdict(expect_codec)
        if stored != wanted:
            diff = {k: (stored.get(k), wanted[k]) for k in wanted if stored.get(k) != wanted[k]}
            raise ValueError(f"dataset codec config mismatch (stored, expected): {diff}")
    scenes = [read_scene(root / name) for name in manifest["files"]]
    return scenes, manifest
