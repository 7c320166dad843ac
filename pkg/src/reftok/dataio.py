"""Video clip I/O, reference splitting, padding and the synthetic clip source."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import _accel


class DataError(ValueError):
    """Bad clip data, missing files or unusable sampling requests."""


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    frame_interval: int = 1
    source_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise DataError(f"frames must be (T, H, W, C), got shape {f.shape}")
        if f.shape[0] < 1:
            raise DataError("clip needs at least one frame")
        if self.frame_interval < 1:
            raise DataError("frame_interval must be >= 1")
        self.frames = f.astype(np.float32, copy=False)

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self):
        return self.frames.shape[0]

    def validate(self) -> "VideoClip":
        t, h, w, c = self.frames.shape
        if h < 8 or w < 8:
            raise DataError(f"frames must be at least 8x8, got {h}x{w}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("clip contains non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise DataError("clip values must lie in [0, 1]")
        return self

    def to_uint8(self) -> np.ndarray:
        return to_uint8(self.frames)


@dataclass
class ClipSplit:
    reference_frames: VideoClip
    target_frames: VideoClip

    @property
    def n_ref(self) -> int:
        return len(self.reference_frames)


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# loading

def _frame_files(path: Path) -> list[Path]:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no PNG frames in {path}")
    return files


def count_frames(path) -> int:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such clip source: {path}")
    if path.is_dir():
        return len(_frame_files(path))
    return read_rvc_header(path)[0]


def load_clip(path, start: int = 0, length: int = 16, stride: int = 1) -> VideoClip:
    """Read ``length`` frames ``start, start+stride, ...`` from a PNG frame
    directory or an ``.rvc`` file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such clip source: {path}")
    if length < 1 or stride < 1 or start < 0:
        raise DataError("length and stride must be >= 1 and start >= 0")
    last = start + (length - 1) * stride
    if path.is_dir():
        files = _frame_files(path)
        if last >= len(files):
            raise DataError(
                f"insufficient frames: need index {last}, source has {len(files)}")
        frames = []
        for f in files[start:last + 1:stride]:
            with Image.open(f) as im:
                frames.append(np.asarray(im.convert("RGB")))
        if len({fr.shape for fr in frames}) != 1:
            raise DataError(f"non-uniform frame sizes in {path}")
        arr = np.stack(frames)
    else:
        arr = read_rvc(path)
        if last >= arr.shape[0]:
            raise DataError(
                f"insufficient frames: need index {last}, source has {arr.shape[0]}")
        arr = arr[start:last + 1:stride]
    return VideoClip(from_uint8(arr), frame_interval=stride, source_id=str(path)).validate()


def save_frame_dir(frames_u8: np.ndarray, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames_u8):
        Image.fromarray(fr).save(path / f"{i:06d}.png")


# ---------------------------------------------------------------------------
# .rvc raw clip files

RVC_MAGIC = b"RVC1"
_RVC_HDR = struct.Struct("<4sIIII")


def write_rvc_bytes(frames_u8: np.ndarray) -> bytes:
    arr = np.asarray(frames_u8)
    if arr.dtype != np.uint8 or arr.ndim != 4:
        raise DataError("rvc payload must be a uint8 (T, H, W, C) array")
    return _RVC_HDR.pack(RVC_MAGIC, *arr.shape) + np.ascontiguousarray(arr).tobytes()


def read_rvc_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _RVC_HDR.size:
        raise DataError("truncated rvc header")
    magic, t, h, w, c = _RVC_HDR.unpack_from(buf)
    if magic != RVC_MAGIC:
        raise DataError(f"bad rvc magic {magic!r}")
    n = t * h * w * c
    body = buf[_RVC_HDR.size:]
    if len(body) != n:
        raise DataError(f"rvc body has {len(body)} bytes, expected {n}")
    return np.frombuffer(body, dtype=np.uint8).reshape(t, h, w, c).copy()


def write_rvc(path, frames_u8: np.ndarray) -> None:
    Path(path).write_bytes(write_rvc_bytes(frames_u8))


def read_rvc(path) -> np.ndarray:
    return read_rvc_bytes(Path(path).read_bytes())


def read_rvc_header(path):
    with open(path, "rb") as fh:
        head = fh.read(_RVC_HDR.size)
    if len(head) < _RVC_HDR.size:
        raise DataError("truncated rvc header")
    magic, t, h, w, c = _RVC_HDR.unpack(head)
    if magic != RVC_MAGIC:
        raise DataError(f"bad rvc magic {magic!r}")
    return t, h, w, c


# ---------------------------------------------------------------------------
# reference handling

def split_reference(clip: VideoClip, n_ref_frames: int) -> ClipSplit:
    t = len(clip)
    if not 1 <= n_ref_frames < t:
        raise DataError(f"n_ref_frames must be in [1, {t - 1}], got {n_ref_frames}")
    ref = replace(clip, frames=clip.frames[:n_ref_frames])
    tgt = replace(clip, frames=clip.frames[n_ref_frames:])
    return ClipSplit(ref, tgt)


def padded_length(n: int, t_patch: int) -> int:
    return -(-n // t_patch) * t_patch


def replicate_pad_reference(ref: VideoClip, t_patch: int) -> VideoClip:
    """Append copies of the last frame until T is a multiple of ``t_patch``."""
    if t_patch < 1:
        raise DataError("t_patch must be >= 1")
    t = len(ref)
    extra = padded_length(t, t_patch) - t
    if extra == 0:
        return ref
    tail = np.repeat(ref.frames[-1:], extra, axis=0)
    return replace(ref, frames=np.concatenate([ref.frames, tail], axis=0))


# ---------------------------------------------------------------------------
# synthetic redundant clips

@dataclass(frozen=True)
class SynthConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    n_glyphs: int = 3
    glyph_min: int = 6
    glyph_max: int = 11
    motion: float = 0.75  # max |velocity| per axis, pixels per source frame
    blur: float = 1.0  # gaussian sigma (pixels) of the camera blur; 0 keeps hard edges


@dataclass
class GlyphTrack:
    """Placement of one glyph: its bitmap/colour patch and per-frame offsets."""
    patch: np.ndarray  # (gh, gw, 3)
    alpha: np.ndarray  # (gh, gw) bool
    y0: float
    x0: float
    vy: float
    vx: float

    def offset(self, t: float):
        return int(round(self.y0 + self.vy * t)), int(round(self.x0 + self.vx * t))


@dataclass
class SynthLayout:
    background: np.ndarray
    glyphs: list[GlyphTrack] = field(default_factory=list)
    height: int = 0
    width: int = 0
    blur: float = 0.0


_LETTERS = [
    "01110 10001 11111 10001 10001",  # A
    "11110 10001 11110 10001 11110",  # B
    "01111 10000 10000 10000 01111",  # C
    "10001 11011 10101 10001 10001",  # M
    "11111 00100 00100 00100 00100",  # T
    "10001 10001 10101 11011 10001",  # W
    "11111 10000 11110 10000 11111",  # E
    "10001 01010 00100 01010 10001",  # X
]


def _glyph_texture(rng: np.random.Generator, gh: int, gw: int):
    kind = rng.integers(3)
    yy, xx = np.mgrid[0:gh, 0:gw]
    if kind == 0:
        cell = int(rng.integers(3, 5))
        pattern = ((yy // cell + xx // cell) % 2).astype(bool)
    elif kind == 1:
        period = int(rng.integers(3, 6))
        axis = yy if rng.integers(2) else xx
        pattern = (axis // period % 2).astype(bool)
    else:
        rows = _LETTERS[int(rng.integers(len(_LETTERS)))].split()
        bm = np.array([[c == "1" for c in r] for r in rows])
        ys = np.minimum(yy * 5 // gh, 4)
        xs = np.minimum(xx * 5 // gw, 4)
        pattern = bm[ys, xs]
    c_on = rng.uniform(0.0, 1.0, 3)
    c_off = rng.uniform(0.0, 1.0, 3)
    # keep the two colours visibly distinct
    if np.abs(c_on - c_off).max() < 0.4:
        c_off = 1.0 - c_on
    patch = np.where(pattern[..., None], c_on, c_off)
    alpha = np.ones((gh, gw), dtype=bool)
    if kind == 2:
        alpha = pattern | (rng.random() < 0.5)
    return patch, alpha


def make_synth_layout(seed: int, cfg: SynthConfig) -> SynthLayout:
    if cfg.glyph_max > min(cfg.height, cfg.width) or cfg.glyph_min > cfg.glyph_max or cfg.glyph_min < 1:
        raise DataError("degenerate synth config: glyph size does not fit the frame")
    if cfg.frames < 1 or cfg.height < 8 or cfg.width < 8:
        raise DataError("degenerate synth config: clip shape too small")
    if cfg.blur < 0:
        raise DataError("degenerate synth config: negative blur")
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c0, c1, c2 = rng.uniform(0.1, 0.9, (3, 3))
    bg = c0 + np.multiply.outer(yy, c1 - c0) * 0.6 + np.multiply.outer(xx, c2 - c0) * 0.6
    layout = SynthLayout(np.clip(bg, 0, 1), height=h, width=w, blur=cfg.blur)
    for _ in range(cfg.n_glyphs):
        gh = int(rng.integers(cfg.glyph_min, cfg.glyph_max + 1))
        gw = int(rng.integers(cfg.glyph_min, cfg.glyph_max + 1))
        patch, alpha = _glyph_texture(rng, gh, gw)
        vy, vx = rng.uniform(-cfg.motion, cfg.motion, 2)
        layout.glyphs.append(GlyphTrack(
            patch, alpha,
            y0=float(rng.uniform(0, h - gh)), x0=float(rng.uniform(0, w - gw)),
            vy=float(vy), vx=float(vx)))
    return layout


def glyph_mask(layout: SynthLayout, glyph: int, t: float) -> np.ndarray:
    """Pixels covered by glyph ``glyph`` at time ``t`` (toroidal placement)."""
    g = layout.glyphs[glyph]
    oy, ox = g.offset(t)
    gh, gw = g.alpha.shape
    ys = (oy + np.arange(gh)) % layout.height
    xs = (ox + np.arange(gw)) % layout.width
    m = np.zeros((layout.height, layout.width), dtype=bool)
    m[np.ix_(ys, xs)] = g.alpha
    return m


def render_layout(layout: SynthLayout, times) -> np.ndarray:
    frames = np.empty((len(times), layout.height, layout.width, 3), dtype=np.float32)
    for i, t in enumerate(times):
        fr = layout.background.copy()
        for g in layout.glyphs:
            oy, ox = g.offset(t)
            gh, gw = g.alpha.shape
            ys = (oy + np.arange(gh)) % layout.height
            xs = (ox + np.arange(gw)) % layout.width
            region = fr[np.ix_(ys, xs)]
            region[g.alpha] = g.patch[g.alpha]
            fr[np.ix_(ys, xs)] = region
        frames[i] = fr
    if layout.blur > 0:
        frames = _soften(frames, layout.blur)
    return frames


def _soften(frames: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur per channel, wrapping at the borders like the glyphs do."""
    r = max(1, int(np.ceil(3 * sigma)))
    g = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    t, h, w, c = frames.shape
    planes = np.pad(frames.transpose(0, 3, 1, 2).reshape(t * c, h, w), ((0, 0), (r, r), (r, r)), mode="wrap")
    out = _accel.filter2d_valid(planes.astype(np.float64), g)
    out = out.reshape(t, c, h, w).transpose(0, 2, 3, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synth_redundant_clip(seed: int, cfg: SynthConfig = SynthConfig(), stride: int = 1,
                         start: int = 0) -> VideoClip:
    """Deterministic clip of textured glyphs translating rigidly over a smooth
    background. ``stride`` samples every ``stride``-th source frame."""
    layout = make_synth_layout(seed, cfg)
    times = [start + i * stride for i in range(cfg.frames)]
    return VideoClip(render_layout(layout, times), frame_interval=stride,
                     source_id=f"synth:{seed}")


@dataclass
class SynthSource:
    """Clip source backed by the synthesizer: source ``i`` is a
    ``length``-frame synthetic video with seed ``base_seed + i``."""
    cfg: SynthConfig = SynthConfig()
    length: int = 64
    base_seed: int = 0
    n_videos: int = 1 << 30

    def frame_count(self, i: int) -> int:
        return self.length

    def clip(self, i: int, start: int, length: int, stride: int) -> VideoClip:
        layout = make_synth_layout(self.base_seed + i, self.cfg)
        times = [start + k * stride for k in range(length)]
        return VideoClip(render_layout(layout, times), frame_interval=stride,
                         source_id=f"synth:{self.base_seed + i}")


@dataclass
class DirectorySource:
    """Clip source over a list of frame directories or ``.rvc`` files."""
    paths: list

    def __post_init__(self):
        self.paths = [Path(p) for p in self.paths]
        self.n_videos = len(self.paths)
        if not self.paths:
            raise DataError("empty clip source")
        self._counts = [count_frames(p) for p in self.paths]

    def frame_count(self, i: int) -> int:
        return self._counts[i]

    def clip(self, i: int, start: int, length: int, stride: int) -> VideoClip:
        return load_clip(self.paths[i], start, length, stride)


def sample_training_clip(source, length: int, interval_range=(1, 1), rng=None,
                         max_retries: int = 16) -> VideoClip:
    """Draw a clip with a stride drawn uniformly from ``interval_range``.

    The video index and start are drawn from ``rng`` too; videos too short for
    the drawn stride are re-drawn up to ``max_retries`` times.
    """
    lo, hi = interval_range
    if lo < 1 or hi < lo:
        raise DataError(f"bad interval range {interval_range}")
    rng = np.random.default_rng(rng)
    for _ in range(max_retries):
        stride = int(rng.integers(lo, hi + 1))
        vid = int(rng.integers(source.n_videos))
        span = (length - 1) * stride + 1
        n = source.frame_count(vid)
        if n < span:
            continue
        start = int(rng.integers(0, n - span + 1))
        return source.clip(vid, start, length, stride)
    raise DataError(
        f"source too short for length={length} at intervals {interval_range}")
