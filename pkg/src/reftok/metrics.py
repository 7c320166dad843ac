"""Reconstruction metrics and evaluation reports. All metrics assume range [0, 1]."""
from __future__ import annotations

import json
import math
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .dataio import split_reference, to_uint8, write_rvc
from .patchgrid import compression_ratio

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])
CONVENTION = "metrics over target frames only; reference frames excluded"


def _frames(x) -> np.ndarray:
    return np.asarray(getattr(x, "frames", x), dtype=np.float64)


def _check(a, b):
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def l1_error(a, b) -> float:
    a, b = _check(a, b)
    return float(np.mean(np.abs(a - b)))


def format_l1(value: float) -> str:
    """Ablation-table convention: L1 reported in units of 1e-2."""
    return f"{value * 100:.2f}"


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def to_luma(frames: np.ndarray) -> np.ndarray:
    if frames.shape[-1] == 1:
        return frames[..., 0]
    return frames @ LUMA


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over luma frames with a Gaussian window ("valid" positions only)."""
    a, b = _check(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    ya, yb = to_luma(a), to_luma(b)
    if ya.shape[-1] < window or ya.shape[-2] < window:
        raise ValueError(f"frames {ya.shape[-2:]} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    stack = np.concatenate([ya, yb, ya * ya, yb * yb, ya * yb], axis=0)
    f = _accel.filter2d_valid(stack, g)
    n = ya.shape[0]
    mu_a, mu_b = f[:n], f[n:2 * n]
    var_a = f[2 * n:3 * n] - mu_a ** 2
    var_b = f[3 * n:4 * n] - mu_b ** 2
    cov = f[4 * n:] - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    per_frame = s.reshape(n, -1).mean(axis=1)
    return float(per_frame.mean())


def lpips_plugin(command: list[str], a, b) -> float:
    """External LPIPS hook: run ``command + [a.rvc, b.rvc]`` and parse one float."""
    with tempfile.TemporaryDirectory() as tmp:
        pa, pb = Path(tmp) / "a.rvc", Path(tmp) / "b.rvc"
        write_rvc(pa, to_uint8(_frames(a)))
        write_rvc(pb, to_uint8(_frames(b)))
        res = subprocess.run(list(command) + [str(pa), str(pb)], capture_output=True, text=True, check=True)
    return float(res.stdout.strip().split()[-1])


@dataclass
class ClipMetrics:
    source_id: str
    psnr: float
    ssim: float
    l1: float
    lpips: float | None = None


@dataclass
class EvalReport:
    name: str
    compression: str
    clip_count: int
    psnr: float
    ssim: float
    l1: float
    lpips: float | None = None
    per_clip: list = field(default_factory=list)
    convention: str = CONVENTION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def aggregate(name: str, compression: str, per_clip: list[ClipMetrics]) -> EvalReport:
    if not per_clip:
        raise ValueError("empty evaluation set")
    lp = [c.lpips for c in per_clip if c.lpips is not None]
    return EvalReport(
        name=name, compression=compression, clip_count=len(per_clip),
        psnr=float(np.mean([c.psnr for c in per_clip])),
        ssim=float(np.mean([c.ssim for c in per_clip])),
        l1=float(np.mean([c.l1 for c in per_clip])),
        lpips=float(np.mean(lp)) if lp else None,
        per_clip=[asdict(c) for c in per_clip])


def evaluate(model, clips, n_ref_frames: int = 1, name: str = "model", lpips_cmd=None,
             batch_size: int = 16) -> EvalReport:
    """Encode, quantize and decode every clip; score target frames only.

    ``model`` needs ``reconstruct(ref, tgt)`` over float tensors and a
    ``patch`` attribute (a PatchSpec).
    """
    import torch

    clips = list(clips)
    if not clips:
        raise ValueError("empty evaluation set")
    per_clip = []
    dtype = torch.float32
    params = list(getattr(model, "parameters", lambda: [])())
    if params:
        dtype = params[0].dtype
    for s in range(0, len(clips), batch_size):
        chunk = clips[s:s + batch_size]
        splits = [split_reference(c, n_ref_frames) for c in chunk]
        ref = torch.as_tensor(np.stack([sp.reference_frames.frames for sp in splits]), dtype=dtype)
        tgt = torch.as_tensor(np.stack([sp.target_frames.frames for sp in splits]), dtype=dtype)
        out = model.reconstruct(ref, tgt).detach().cpu().numpy()
        for clip, sp, rec in zip(chunk, splits, out):
            truth = sp.target_frames.frames
            lp = lpips_plugin(lpips_cmd, truth, rec) if lpips_cmd else None
            per_clip.append(ClipMetrics(clip.source_id, psnr(truth, rec), ssim(truth, rec),
                                        l1_error(truth, rec), lp))
    return aggregate(name, compression_ratio(model.patch), per_clip)


def format_table(reports: list[EvalReport]) -> str:
    """Aligned text table with the reconstruction-table columns."""
    head = ["Method", "Compress.", "PSNR", "SSIM", "LPIPS", "L1 (x1e-2)", "Clips"]
    rows = [[r.name, r.compression, f"{r.psnr:.2f}", f"{r.ssim:.3f}",
             "--" if r.lpips is None else f"{r.lpips:.3f}", format_l1(r.l1), str(r.clip_count)]
            for r in reports]
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths))
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines) + f"\n({CONVENTION})\n"
