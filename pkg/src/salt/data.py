"""Synthetic moving-shape video corpus, its on-disk format, and tubelet patchify.

Each clip shows one shape (square, disc, triangle, cross) translating in one of
four directions over a noisy flat background.  The motion label needs temporal
information, the shape label only spatial information.

On disk a dataset is ``manifest.json`` plus ``clips.bin``, the concatenation of
fixed-header clip records (little-endian float32 payload).  The manifest stores
offset, length and SHA-256 of every record.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, DimensionError

DIRECTIONS = ("right", "left", "down", "up")
_DIR_VEC = {"right": (0.0, 1.0), "left": (0.0, -1.0), "down": (1.0, 0.0), "up": (-1.0, 0.0)}
SHAPES = ("square", "disc", "triangle", "cross")
IMPOSSIBLE_KINDS = ("teleport", "color_swap", "reversal")

CLIP_MAGIC = b"CLIP"
_HEADER = struct.Struct("<4sIHHHH")
FORMAT_VERSION = 1
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class DatasetSpec:
    clip_count: int = 2000
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    tubelet: tuple[int, int, int] = (2, 4, 4)
    shape_size: tuple[float, float] = (7.0, 10.0)
    speeds: tuple[float, ...] = (0.75, 1.0)
    noise_std: float = 0.03
    background: tuple[float, float] = (0.1, 0.3)
    foreground: tuple[float, float] = (0.6, 0.9)
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tubelet", tuple(int(v) for v in self.tubelet))
        object.__setattr__(self, "shape_size", tuple(float(v) for v in self.shape_size))
        object.__setattr__(self, "speeds", tuple(float(v) for v in self.speeds))
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        object.__setattr__(self, "foreground", tuple(float(v) for v in self.foreground))
        self.validate()

    def validate(self) -> None:
        tt, ph, pw = self.tubelet
        if self.clip_count < 1:
            raise ConfigError("clip_count must be positive")
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError("clip extents must be positive")
        if self.frames % tt or self.height % ph or self.width % pw:
            raise ConfigError(
                f"clip {self.frames}x{self.height}x{self.width} not divisible by tubelet {self.tubelet}"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        travel = max(self.speeds) * (self.frames - 1)
        if self.shape_size[1] + travel + 2 > min(self.height, self.width):
            raise ConfigError("shape plus trajectory does not fit inside the frame")

    @property
    def grid(self) -> tuple[int, int, int]:
        tt, ph, pw = self.tubelet
        return self.frames // tt, self.height // ph, self.width // pw

    @property
    def num_tokens(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def token_dim(self) -> int:
        tt, ph, pw = self.tubelet
        return tt * ph * pw * self.channels

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, C, H, W] float32 in [0, 1]
    label: int
    id: int
    shape: int = 0
    meta: dict = field(default_factory=dict)


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [N, p]
    grid_dims: tuple[int, int, int]
    positions: np.ndarray  # [N, 3] int (t, h, w)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, size: float) -> np.ndarray:
    r = size / 2.0
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        # apex up, base at the bottom edge of the bounding box
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "cross":
        arm = r / 2.5
        return ((np.abs(dy) <= r) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= r) & (np.abs(dy) <= arm))
    raise ValueError(f"unknown shape {kind}")


def _render_frame(kind: str, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    """Anti-aliased coverage of one shape, supersampled on a regular sub-grid."""
    s = _SUPERSAMPLE
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    cover = _shape_mask(kind, yy, xx, cy, cx, size).astype(np.float64)
    return cover.reshape(h, s, w, s).mean(axis=(1, 3))


def clip_rng(seed: int, clip_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(clip_id), int(stream)]))


def sample_clip_params(spec: DatasetSpec, clip_id: int) -> dict:
    """Stratified class assignment plus per-clip nuisance parameters."""
    rng = clip_rng(spec.seed, clip_id)
    direction = clip_id % len(DIRECTIONS)
    shape = (clip_id // len(DIRECTIONS)) % len(SHAPES)
    speed = float(spec.speeds[(clip_id // (len(DIRECTIONS) * len(SHAPES))) % len(spec.speeds)])
    size = float(rng.uniform(*spec.shape_size))
    travel = speed * (spec.frames - 1)
    dy, dx = _DIR_VEC[DIRECTIONS[direction]]
    margin = size / 2.0 + 1.0
    starts = []
    for extent, d in ((spec.height, dy), (spec.width, dx)):
        lo, hi = margin, extent - margin
        if d > 0:
            hi -= travel
        elif d < 0:
            lo += travel
        starts.append(float(rng.uniform(lo, hi)))
    return {
        "direction": direction,
        "shape": shape,
        "speed": speed,
        "size": size,
        "start": starts,
        "background": float(rng.uniform(*spec.background)),
        "foreground": float(rng.uniform(*spec.foreground)),
        "noise_seed": int(rng.integers(0, 2**31 - 1)),
    }


def trajectory(params: dict, frames: int) -> np.ndarray:
    """Shape centre (y, x) per frame for smooth constant-velocity motion."""
    dy, dx = _DIR_VEC[DIRECTIONS[params["direction"]]]
    t = np.arange(frames, dtype=np.float64)
    y0, x0 = params["start"]
    return np.stack([y0 + dy * params["speed"] * t, x0 + dx * params["speed"] * t], axis=1)


def render(spec: DatasetSpec, params: dict, centres: np.ndarray | None = None,
           intensities: np.ndarray | None = None) -> np.ndarray:
    if centres is None:
        centres = trajectory(params, spec.frames)
    if intensities is None:
        intensities = np.full(spec.frames, params["foreground"])
    kind = SHAPES[params["shape"]]
    noise_rng = np.random.default_rng(params["noise_seed"])
    bg = params["background"]
    out = np.empty((spec.frames, spec.channels, spec.height, spec.width), dtype=np.float32)
    for f in range(spec.frames):
        cover = _render_frame(kind, spec.height, spec.width, centres[f, 0], centres[f, 1], params["size"])
        img = bg + (intensities[f] - bg) * cover
        for c in range(spec.channels):
            noisy = img + spec.noise_std * noise_rng.standard_normal(img.shape)
            out[f, c] = np.clip(noisy, 0.0, 1.0)
    return out


def make_clip(spec: DatasetSpec, clip_id: int) -> VideoClip:
    params = sample_clip_params(spec, clip_id)
    return VideoClip(render(spec, params), params["direction"], clip_id, params["shape"], params)


def make_impossible(spec: DatasetSpec, clip_id: int, kind: str) -> tuple[VideoClip, VideoClip]:
    """A (possible, impossible) pair sharing every nuisance parameter.

    The violation starts at a frame in the second half of the clip so the early
    context windows see normal motion.
    """
    if kind not in IMPOSSIBLE_KINDS:
        raise ConfigError(f"unknown violation kind {kind!r}")
    params = sample_clip_params(spec, clip_id)
    possible = VideoClip(render(spec, params), params["direction"], clip_id, params["shape"], dict(params))
    rng = clip_rng(spec.seed, clip_id, stream=1)
    tt = spec.tubelet[0]
    slots = spec.frames // tt
    if slots < 2:
        raise ConfigError("impossible clips need at least two temporal token slots")
    lo = max(1, slots // 2)
    event = int(rng.integers(lo, max(lo + 1, slots - 1))) * tt
    centres = trajectory(params, spec.frames)
    intensities = np.full(spec.frames, params["foreground"])
    if kind == "teleport":
        r = params["size"] / 2.0 + 1.0
        shift = np.array([rng.uniform(r, spec.height - r), rng.uniform(r, spec.width - r)])
        far = np.abs(shift - centres[event]).max()
        if far < params["size"]:
            shift = np.array([spec.height, spec.width]) - centres[event]
        centres[event:] += shift - centres[event]
    elif kind == "color_swap":
        intensities[event:] = params["background"] + 0.4 * (params["foreground"] - params["background"])
    else:  # reversal
        centres[event:] = centres[event] - (centres[event:] - centres[event])
    centres[:, 0] = np.clip(centres[:, 0], params["size"] / 2, spec.height - params["size"] / 2)
    centres[:, 1] = np.clip(centres[:, 1], params["size"] / 2, spec.width - params["size"] / 2)
    meta = dict(params, violation=kind, event_frame=event)
    impossible = VideoClip(render(spec, params, centres, intensities), params["direction"], clip_id,
                           params["shape"], meta)
    return possible, impossible


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def encode_clip(clip: VideoClip) -> bytes:
    t, c, h, w = clip.frames.shape
    header = _HEADER.pack(CLIP_MAGIC, clip.id, t, c, h, w)
    return header + clip.frames.astype("<f4", copy=False).tobytes()


def decode_clip(blob: bytes, label: int, shape: int = 0, meta: dict | None = None) -> VideoClip:
    if len(blob) < _HEADER.size:
        raise CorruptionError("clip record shorter than its header")
    magic, clip_id, t, c, h, w = _HEADER.unpack_from(blob)
    if magic != CLIP_MAGIC:
        raise CorruptionError("bad clip magic")
    expected = _HEADER.size + 4 * t * c * h * w
    if len(blob) != expected:
        raise CorruptionError(f"clip record has {len(blob)} bytes, expected {expected}")
    frames = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(t, c, h, w)
    return VideoClip(frames.astype(np.float32), label, clip_id, shape, meta or {})


def split_of(spec: DatasetSpec, clip_id: int) -> str:
    """Deterministic train/eval assignment; balanced because labels cycle with period 4."""
    return "train" if clip_id % 10 < round(spec.train_fraction * 10) else "eval"


def _write(out_dir: Path, entries: list[dict], blobs: list[bytes], header: dict, force: bool) -> Path:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force=True to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    offset = 0
    for entry, blob in zip(entries, blobs):
        entry["offset"] = offset
        entry["length"] = len(blob)
        entry["sha256"] = hashlib.sha256(blob).hexdigest()
        offset += len(blob)
    with open(out_dir / "clips.bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    manifest = dict(header, format_version=FORMAT_VERSION, clips=entries)
    text = json.dumps(manifest, indent=1, sort_keys=True)
    manifest_path.write_text(text + "\n")
    return manifest_path


def generate_dataset(spec: DatasetSpec, out_dir: str | os.PathLike, force: bool = False) -> Path:
    """Render every clip and persist them. Output bytes depend only on ``spec``."""
    spec.validate()
    entries, blobs = [], []
    for i in range(spec.clip_count):
        clip = make_clip(spec, i)
        blobs.append(encode_clip(clip))
        entries.append({
            "id": i,
            "label": clip.label,
            "shape": clip.shape,
            "speed": clip.meta["speed"],
            "split": split_of(spec, i),
        })
    return _write(Path(out_dir), entries, blobs, {"kind": "clips", "spec": spec.to_dict()}, force)


def generate_pairs(spec: DatasetSpec, pair_count: int, out_dir: str | os.PathLike,
                   force: bool = False) -> Path:
    """Persist ``pair_count`` (possible, impossible) pairs, cycling violation kinds."""
    spec.validate()
    entries, blobs = [], []
    for p in range(pair_count):
        kind = IMPOSSIBLE_KINDS[p % len(IMPOSSIBLE_KINDS)]
        possible, impossible = make_impossible(spec, p, kind)
        for role, clip in (("possible", possible), ("impossible", impossible)):
            clip.id = len(blobs)
            blobs.append(encode_clip(clip))
            entries.append({"id": clip.id, "pair": p, "role": role, "violation": kind,
                            "label": clip.label, "shape": clip.shape})
    return _write(Path(out_dir), entries, blobs, {"kind": "pairs", "spec": spec.to_dict()}, force)


class Dataset:
    """Read-only view over a persisted corpus, verifying checksums on access."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        try:
            manifest = json.loads((self.root / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise CorruptionError(f"no manifest in {self.root}") from exc
        except json.JSONDecodeError as exc:
            raise CorruptionError(f"unreadable manifest: {exc}") from exc
        self.manifest = manifest
        self.kind = manifest.get("kind", "clips")
        self.spec = DatasetSpec.from_dict(manifest["spec"])
        self.entries = manifest["clips"]
        blob_path = self.root / "clips.bin"
        if not blob_path.exists():
            raise CorruptionError(f"missing {blob_path}")
        self._blob = blob_path.read_bytes()

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self, task: str = "motion") -> np.ndarray:
        key = "label" if task == "motion" else "shape"
        return np.array([e[key] for e in self.entries], dtype=np.int64)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.entries) if e.get("split") == split], dtype=np.int64)

    def load(self, index: int) -> VideoClip:
        if not 0 <= index < len(self.entries):
            raise IndexError(f"clip index {index} out of range [0, {len(self.entries)})")
        e = self.entries[index]
        blob = self._blob[e["offset"]: e["offset"] + e["length"]]
        if len(blob) != e["length"] or hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CorruptionError(f"checksum mismatch for clip {index}")
        return decode_clip(blob, e["label"], e.get("shape", 0), e)

    def frames(self, indices) -> np.ndarray:
        return np.stack([self.load(int(i)).frames for i in indices])


def load_clip(dataset: Dataset | str | os.PathLike, index: int) -> VideoClip:
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    return dataset.load(index)


# ---------------------------------------------------------------------------
# tubelets
# ---------------------------------------------------------------------------

def grid_positions(grid: tuple[int, int, int]) -> np.ndarray:
    t, h, w = grid
    tt, hh, ww = np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([tt.ravel(), hh.ravel(), ww.ravel()], axis=1).astype(np.int64)


def patchify_frames(frames: np.ndarray, tubelet: tuple[int, int, int]) -> np.ndarray:
    """[..., T, C, H, W] -> [..., N, tt*C*ph*pw]; tokens in (t', h', w') scan order.

    Voxels inside a token are ordered (dt, c, dh, dw).
    """
    tt, ph, pw = tubelet
    *lead, t, c, h, w = frames.shape
    if t % tt or h % ph or w % pw:
        raise DimensionError(f"frames {frames.shape[-4:]} not divisible by tubelet {tubelet}")
    g = (t // tt, h // ph, w // pw)
    nl = len(lead)
    x = frames.reshape(*lead, g[0], tt, c, g[1], ph, g[2], pw)
    perm = list(range(nl)) + [nl + i for i in (0, 3, 5, 1, 2, 4, 6)]
    x = x.transpose(perm)
    return np.ascontiguousarray(x.reshape(*lead, g[0] * g[1] * g[2], tt * c * ph * pw))


def unpatchify_frames(tokens: np.ndarray, grid: tuple[int, int, int], tubelet: tuple[int, int, int],
                      channels: int) -> np.ndarray:
    tt, ph, pw = tubelet
    *lead, n, p = tokens.shape
    if n != grid[0] * grid[1] * grid[2] or p != tt * ph * pw * channels:
        raise DimensionError(f"tokens {tokens.shape} do not match grid {grid} / tubelet {tubelet}")
    nl = len(lead)
    x = tokens.reshape(*lead, grid[0], grid[1], grid[2], tt, channels, ph, pw)
    # axes now (T', H', W', tt, C, ph, pw) -> (T', tt, C, H', ph, W', pw)
    perm = list(range(nl)) + [nl + i for i in (0, 3, 4, 1, 5, 2, 6)]
    x = x.transpose(perm)
    return np.ascontiguousarray(x.reshape(*lead, grid[0] * tt, channels, grid[1] * ph, grid[2] * pw))


def patchify(clip: VideoClip, tubelet: tuple[int, int, int]) -> TokenGrid:
    t, c, h, w = clip.frames.shape
    tubelet = tuple(tubelet)
    if t % tubelet[0] or h % tubelet[1] or w % tubelet[2]:
        raise DimensionError(f"clip {clip.frames.shape} not divisible by tubelet {tubelet}")
    grid = (t // tubelet[0], h // tubelet[1], w // tubelet[2])
    return TokenGrid(patchify_frames(clip.frames, tubelet), grid, grid_positions(grid))


def unpatchify(tokens: TokenGrid, tubelet: tuple[int, int, int], channels: int) -> np.ndarray:
    return unpatchify_frames(tokens.tokens, tokens.grid_dims, tubelet, channels)


def image_to_clip(image: np.ndarray, frames: int = 16, label: int = 0, clip_id: int = 0) -> VideoClip:
    """Replicate a still [C, H, W] image into a clip of identical frames."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise DimensionError(f"image must be C x H x W, got {image.shape}")
    return VideoClip(np.repeat(image[None], frames, axis=0), label, clip_id)


def normalize_tubelets(tokens: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-token standardisation used as the pixel-reconstruction target."""
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return ((tokens - mu) / np.sqrt(var + eps)).astype(tokens.dtype, copy=False)
