"""Binary file formats. All integers little-endian, no padding between fields.

``.rtk`` token stream::

    "RTK1" u16 version u8 n_ref u8 reserved
    u32 tau eta omega  u32 K  u32 t h w  u32 H W
    reference payload: n_ref*H*W*3 bytes u8
    tau*eta*omega indices, u16 if K <= 65536 else u32

checkpoint::

    "RTKC" u16 version u32 json_len <json>
    u32 n_tensors, each: u32 name_len <name> u32 rank u32 dims[rank] f32 data
    optional codebook block: "RTKB" u32 K u32 D f32 vectors[K*D] f32 usage[K]

token dataset (concatenated records)::

    "RTKG" u32 tau eta omega u32 n_ref_tokens u32 D u16 id_len <id>
    u32 indices[tau*eta*omega] f32 h_r[n_ref_tokens*D]
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vq import Codebook


class FormatError(ValueError):
    """Corrupt, truncated or mismatched file content."""


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}, "
                              f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(np.dtype(dtype).newbyteorder("="))

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


# ---------------------------------------------------------------------------
# token stream

STREAM_MAGIC = b"RTK1"
STREAM_VERSION = 1
_STREAM_HDR = struct.Struct("<4sHBB9I")


def index_dtype(k: int):
    return np.dtype("<u2") if k <= 65536 else np.dtype("<u4")


@dataclass
class TokenStream:
    grid: tuple[int, int, int]
    codebook_size: int
    patch: tuple[int, int, int]
    height: int
    width: int
    reference: np.ndarray  # (n_ref, H, W, 3) uint8
    indices: np.ndarray  # (tau*eta*omega,)
    version: int = STREAM_VERSION

    @property
    def n_ref(self) -> int:
        return self.reference.shape[0]

    def to_bytes(self) -> bytes:
        ref = np.asarray(self.reference)
        if ref.dtype != np.uint8 or ref.shape[1:] != (self.height, self.width, 3):
            raise FormatError("reference payload must be uint8 (n_ref, H, W, 3)")
        if not 1 <= ref.shape[0] <= 255:
            raise FormatError("n_ref must fit in a u8 and be >= 1")
        idx = np.asarray(self.indices).reshape(-1)
        tau, eta, omg = self.grid
        if idx.size != tau * eta * omg:
            raise FormatError(f"{idx.size} indices for grid {self.grid}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.codebook_size):
            raise FormatError("index outside codebook range")
        head = _STREAM_HDR.pack(STREAM_MAGIC, self.version, ref.shape[0], 0, tau, eta, omg,
                                self.codebook_size, *self.patch, self.height, self.width)
        return head + ref.tobytes() + idx.astype(index_dtype(self.codebook_size)).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "TokenStream":
        r = _Reader(buf, "token stream")
        magic, version, n_ref, _res, tau, eta, omg, k, pt, ph, pw, h, w = r.unpack("4sHBB9I")
        if magic != STREAM_MAGIC:
            raise FormatError(f"bad token stream magic {magic!r}")
        if version != STREAM_VERSION:
            raise FormatError(f"unsupported token stream version {version}")
        if n_ref < 1:
            raise FormatError("token stream carries no reference payload")
        ref = r.array(np.uint8, n_ref * h * w * 3).reshape(n_ref, h, w, 3)
        dt = index_dtype(k)
        idx = r.array(dt, tau * eta * omg).astype(np.int64)
        if r.remaining:
            raise FormatError(f"{r.remaining} trailing bytes in token stream")
        if idx.size and idx.max() >= k:
            raise FormatError("index outside codebook range")
        return cls((tau, eta, omg), k, (pt, ph, pw), h, w, ref, idx, version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TokenStream":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# codebook block

CODEBOOK_MAGIC = b"RTKB"


def codebook_to_bytes(book: Codebook) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<4sII", CODEBOOK_MAGIC, book.K, book.D))
    out.write(np.asarray(book.vectors, dtype="<f4").tobytes())
    out.write(np.asarray(book.usage, dtype="<f4").tobytes())
    return out.getvalue()


def _read_codebook(r: _Reader) -> Codebook:
    magic, k, d = r.unpack("4sII")
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"bad codebook magic {magic!r}")
    vec = r.array(np.float32, k * d).reshape(k, d)
    usage = r.array(np.float32, k)
    return Codebook(vec, usage.astype(np.float64))


def codebook_from_bytes(buf: bytes) -> Codebook:
    r = _Reader(buf, "codebook")
    book = _read_codebook(r)
    if r.remaining:
        raise FormatError("trailing bytes after codebook block")
    return book


# ---------------------------------------------------------------------------
# checkpoint

CKPT_MAGIC = b"RTKC"
CKPT_VERSION = 1


def checkpoint_to_bytes(config: dict, tensors: dict, codebook: Codebook | None) -> bytes:
    out = io.BytesIO()
    meta = json.dumps(config, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.write(a.tobytes())
    if codebook is not None:
        out.write(codebook_to_bytes(codebook))
    return out.getvalue()


def checkpoint_from_bytes(buf: bytes):
    """Return (config dict, {name: float32 array}, Codebook or None)."""
    r = _Reader(buf, "checkpoint")
    magic, version, n_meta = r.unpack("4sHI")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(r.take(n_meta).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint config block: {exc}") from exc
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("I")
        dims = r.unpack(f"{rank}I") if rank else ()
        tensors[name] = r.array(np.float32, int(np.prod(dims, dtype=np.int64))).reshape(dims)
    book = None
    if r.remaining:
        book = _read_codebook(r)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes in checkpoint")
    return config, tensors, book


def write_checkpoint(path, config: dict, tensors: dict, codebook: Codebook | None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(config, tensors, codebook))


def read_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# token dataset

RECORD_MAGIC = b"RTKG"


@dataclass
class TokenDatasetRecord:
    h_r: np.ndarray  # (n_ref_tokens, D) float32
    indices: np.ndarray  # (tau, eta, omega) int
    source_id: str = ""

    @property
    def grid(self):
        return tuple(self.indices.shape)

    def to_bytes(self) -> bytes:
        tau, eta, omg = self.indices.shape
        h = np.asarray(self.h_r, dtype="<f4")
        sid = self.source_id.encode("utf-8")
        return (struct.pack("<4s5IH", RECORD_MAGIC, tau, eta, omg, h.shape[0], h.shape[1], len(sid))
                + sid + np.asarray(self.indices, dtype="<u4").tobytes() + h.tobytes())


def records_to_bytes(records) -> bytes:
    return b"".join(rec.to_bytes() for rec in records)


def records_from_bytes(buf: bytes) -> list[TokenDatasetRecord]:
    r = _Reader(buf, "token dataset")
    out = []
    while r.remaining:
        magic, tau, eta, omg, n_r, d, n_id = r.unpack("4s5IH")
        if magic != RECORD_MAGIC:
            raise FormatError(f"bad token record magic {magic!r}")
        sid = r.take(n_id).decode("utf-8")
        idx = r.array(np.uint32, tau * eta * omg).astype(np.int64).reshape(tau, eta, omg)
        h = r.array(np.float32, n_r * d).reshape(n_r, d)
        out.append(TokenDatasetRecord(h, idx, sid))
    return out


def write_records(path, records) -> None:
    Path(path).write_bytes(records_to_bytes(records))


def read_records(path) -> list[TokenDatasetRecord]:
    return records_from_bytes(Path(path).read_bytes())
