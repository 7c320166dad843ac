"""Joint reference/target transformer encoder with a one-way attention barrier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .layers import Block, gather_tokens, init_weights, sincos_3d
from .patchgrid import PatchSpec

MASK_MODES = ("oneway", "ref_only", "none")


@dataclass
class EncoderConfig:
    embed_dim: int = 192
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: PatchSpec = field(default_factory=PatchSpec)
    channels: int = 3
    max_grid: tuple[int, int, int] = (8, 4, 4)
    code_dim: int = 64
    prune_max: int = 12
    mask_mode: str = "oneway"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")


@dataclass
class LatentBundle:
    """Encoder output: continuous reference tokens, (pruned) target latents and
    the pruned target positions.

    ``h_r`` is (B, N_ref, D); ``h_t`` is (B, N_kept, code_dim); ``prune_indices``
    is (B, n_pruned) sorted per row. ``ref_grid``/``tgt_grid`` are lattice shapes.
    """
    h_r: torch.Tensor | None
    h_t: torch.Tensor
    prune_indices: torch.Tensor
    ref_grid: tuple[int, int, int]
    tgt_grid: tuple[int, int, int]

    @property
    def n_tgt(self) -> int:
        a, b, c = self.tgt_grid
        return a * b * c


def build_reference_attention_mask(n_ref: int, n_tgt: int, mode: str = "oneway") -> np.ndarray:
    """Boolean (n, n) matrix; entry [i, j] allows query i to attend to key j.

    Rows/columns list reference tokens first, then targets.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    n = n_ref + n_tgt
    if mode == "none":
        return np.ones((n, n), dtype=bool)
    m = np.zeros((n, n), dtype=bool)
    m[:n_ref, :n_ref] = True
    if mode == "oneway":
        m[n_ref:, :] = True
    else:
        m[n_ref:, :n_ref] = True
        m[np.arange(n_ref, n), np.arange(n_ref, n)] = True
    return m


def prune_tokens(h_t, count: int, rng=None):
    """Remove ``count`` tokens chosen uniformly without replacement.

    Works on a (N, ...) array or tensor. Returns (survivors, sorted indices of
    the removed positions); survivors keep their original order.
    """
    n = len(h_t)
    if not 0 <= count < n:
        raise ValueError(f"prune count must be in [0, {n - 1}], got {count}")
    rng = np.random.default_rng(rng)
    idx = np.sort(rng.choice(n, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    keep = np.setdiff1d(np.arange(n), idx)
    if isinstance(h_t, torch.Tensor):
        return h_t[torch.as_tensor(keep, dtype=torch.long)], idx.astype(np.int64)
    return np.asarray(h_t)[keep], idx.astype(np.int64)


def draw_prune_indices(batch: int, n_tgt: int, prune_max: int, gen: torch.Generator) -> torch.Tensor:
    """Per-batch count in [0, prune_max], per-sample uniform positions."""
    if prune_max >= n_tgt:
        raise ValueError(f"prune_max {prune_max} must be below the target token count {n_tgt}")
    count = int(torch.randint(0, prune_max + 1, (1,), generator=gen))
    if count == 0:
        return torch.zeros(batch, 0, dtype=torch.long)
    scores = torch.rand(batch, n_tgt, generator=gen)
    return scores.argsort(dim=1)[:, :count].sort(dim=1).values


def keep_from_pruned(prune_indices: torch.Tensor, n_tgt: int) -> torch.Tensor:
    """Complement of each row of ``prune_indices`` in [0, n_tgt), ascending."""
    b = prune_indices.shape[0]
    flag = torch.ones(b, n_tgt, dtype=torch.bool)
    if prune_indices.numel():
        flag.scatter_(1, prune_indices, False)
    n_keep = n_tgt - prune_indices.shape[1]
    return flag.nonzero()[:, 1].reshape(b, n_keep)


class RefEncoder(nn.Module):
    """Shared-weight ViT encoder over [reference; target] patch tokens."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch.token_dim(cfg.channels), d)
        self.segment = nn.Embedding(2, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        tau, eta, omg = cfg.max_grid
        pos = sincos_3d(tau, eta, omg, d).reshape(tau, eta, omg, d)
        self.register_buffer("pos", torch.as_tensor(pos, dtype=torch.float32), persistent=False)
        self.apply(init_weights)
        # a wider patch embedding keeps pixel content from being swamped by the positions
        nn.init.xavier_uniform_(self.patch_embed.weight)

    def positions(self, t0: int, grid) -> torch.Tensor:
        tau, eta, omg = grid
        if t0 + tau > self.pos.shape[0] or (eta, omg) != tuple(self.pos.shape[1:3]):
            raise ValueError(f"grid {grid} at t0={t0} exceeds position table {tuple(self.pos.shape[:3])}")
        return self.pos[t0:t0 + tau].reshape(-1, self.pos.shape[-1])

    def forward(self, ref_tokens, tgt_tokens, ref_grid, tgt_grid, mask_mode=None, keep=None):
        """Encode jointly.

        ref_tokens: (B, N_r, P) or None; tgt_tokens: (B, N_t, P); ``keep``:
        (B, N_kept) target positions surviving pruning. Returns
        (h_ref (B, N_r, D) or None, h_tgt (B, N_kept, D)).
        """
        mode = mask_mode or self.cfg.mask_mode
        parts = []
        n_ref = 0
        t0 = 0
        dtype = self.patch_embed.weight.dtype
        if ref_tokens is not None:
            n_ref = ref_tokens.shape[1]
            r = self.patch_embed(ref_tokens) + self.positions(0, ref_grid).to(dtype) + self.segment.weight[0]
            parts.append(r)
            t0 = ref_grid[0]
        if tgt_tokens is not None and tgt_tokens.shape[1]:
            t = self.patch_embed(tgt_tokens) + self.positions(t0, tgt_grid).to(dtype) + self.segment.weight[1]
            if keep is not None:
                t = gather_tokens(t, keep)
            parts.append(t)
        x = torch.cat(parts, dim=1)
        n_tgt = x.shape[1] - n_ref
        mask = None
        if mode != "none" and n_ref and n_tgt:
            mask = torch.as_tensor(build_reference_attention_mask(n_ref, n_tgt, mode), device=x.device)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        return (x[:, :n_ref] if n_ref else None), x[:, n_ref:]
