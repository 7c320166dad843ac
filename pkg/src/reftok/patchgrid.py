"""3D patchification between pixel clips and token lattices."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import VideoClip


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    t: int = 2
    h: int = 8
    w: int = 8

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise PatchError(f"patch extents must be >= 1, got {self}")

    @property
    def volume(self) -> int:
        return self.t * self.h * self.w

    def token_dim(self, channels: int = 3) -> int:
        return self.volume * channels

    def grid_shape(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        if t % self.t or h % self.h or w % self.w:
            raise PatchError(
                f"clip dims {(t, h, w)} not divisible by patch {(self.t, self.h, self.w)}")
        return t // self.t, h // self.h, w // self.w

    def as_tuple(self):
        return (self.t, self.h, self.w)


@dataclass
class TokenGrid:
    """A tau x eta x omega lattice of continuous vectors or discrete indices.

    ``payload`` has shape (tau, eta, omega, D) when continuous and
    (tau, eta, omega) when discrete.
    """
    payload: np.ndarray
    discrete: bool = False
    codebook_size: int | None = None

    def __post_init__(self):
        want = 3 if self.discrete else 4
        if self.payload.ndim != want:
            raise PatchError(f"payload rank {self.payload.ndim}, expected {want}")
        if self.discrete and self.codebook_size is not None:
            if self.payload.size and (self.payload.min() < 0 or self.payload.max() >= self.codebook_size):
                raise PatchError("discrete index outside codebook range")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.payload.shape[:3])

    @property
    def n_tokens(self) -> int:
        a, b, c = self.shape
        return a * b * c

    def flat(self) -> np.ndarray:
        """Row-major (t, y, x) sequence of sites."""
        if self.discrete:
            return self.payload.reshape(-1)
        return self.payload.reshape(self.n_tokens, -1)


def patchify_array(frames: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """(..., T, H, W, C) -> (..., tau, eta, omega, t*h*w*C), cuboid flattened (t, y, x, c)."""
    *lead, T, H, W, C = frames.shape
    tau, eta, omg = spec.grid_shape(T, H, W)
    nl = len(lead)
    x = frames.reshape(*lead, tau, spec.t, eta, spec.h, omg, spec.w, C)
    order = list(range(nl)) + [nl + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.transpose(order)
    return x.reshape(*lead, tau, eta, omg, spec.volume * C)


def unpatchify_array(tokens: np.ndarray, spec: PatchSpec, channels: int = 3) -> np.ndarray:
    """Exact inverse of :func:`patchify_array`."""
    *lead, tau, eta, omg, d = tokens.shape
    if d != spec.volume * channels:
        raise PatchError(f"token dim {d} != t*h*w*C = {spec.volume * channels}")
    nl = len(lead)
    x = tokens.reshape(*lead, tau, eta, omg, spec.t, spec.h, spec.w, channels)
    order = list(range(nl)) + [nl + i for i in (0, 3, 1, 4, 2, 5, 6)]
    x = x.transpose(order)
    return x.reshape(*lead, tau * spec.t, eta * spec.h, omg * spec.w, channels)


def patchify(clip: VideoClip, spec: PatchSpec) -> TokenGrid:
    return TokenGrid(patchify_array(clip.frames, spec))


def unpatchify(grid: TokenGrid, spec: PatchSpec, channels: int = 3,
               frame_interval: int = 1, source_id: str = "") -> VideoClip:
    if grid.discrete:
        raise PatchError("cannot unpatchify a discrete grid; look up codes first")
    return VideoClip(unpatchify_array(grid.payload, spec, channels),
                     frame_interval=frame_interval, source_id=source_id)


def compression_ratio(spec: PatchSpec) -> str:
    """Pixels represented per discrete token, formatted ``"N:1"``."""
    return f"{spec.volume}:1"


def bits_per_pixel(spec: PatchSpec, codebook_size: int, channels: int = 3,
                   bits_per_channel: int = 8) -> tuple[float, float]:
    """Secondary readout: (index bits per pixel, raw bits per pixel)."""
    return math.log2(codebook_size) / spec.volume, float(channels * bits_per_channel)


def rgb_space_size(spec: PatchSpec, levels: int = 256, channels: int = 3) -> float:
    """log10 of the number of distinct h x w x C spatial patches with ``levels`` values."""
    if levels <= 1:
        return 0.0
    return spec.h * spec.w * channels * math.log10(levels)
