"""Transformer decoder: quantized target tokens conditioned on continuous reference tokens."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .layers import Block, init_weights, sincos_3d
from .patchgrid import PatchSpec


@dataclass
class DecoderConfig:
    embed_dim: int = 192
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: PatchSpec = field(default_factory=PatchSpec)
    channels: int = 3
    max_grid: tuple[int, int, int] = (8, 4, 4)
    code_dim: int = 64
    ref_dim: int = 192
    ref_inject: bool = True


def insert_mask_tokens(pruned: torch.Tensor, indices: torch.Tensor, full_len: int,
                       mask_token: torch.Tensor) -> torch.Tensor:
    """Re-expand (B, N_kept, D) survivors to (B, full_len, D).

    ``indices`` (B, n_pruned) are the sorted removed positions; each receives
    ``mask_token``. Survivors fill the remaining positions in order.
    """
    b, n_keep, d = pruned.shape
    n_pruned = indices.shape[1] if indices.numel() else 0
    if n_keep + n_pruned != full_len:
        raise ValueError(f"{n_keep} survivors + {n_pruned} pruned != {full_len}")
    if n_pruned == 0:
        return pruned
    if int(indices.min()) < 0 or int(indices.max()) >= full_len:
        raise ValueError("prune index out of range")
    flag = torch.ones(b, full_len, dtype=torch.bool, device=pruned.device)
    flag.scatter_(1, indices, False)
    if int(flag.sum()) != b * n_keep:
        raise ValueError("prune index collision")
    out = mask_token.to(pruned.dtype).expand(b, full_len, d).clone()
    out[flag] = pruned.reshape(-1, d)
    return out


class RefDecoder(nn.Module):
    """Joint self-attention over [adapted h_r; adapted z_t], pixel head on targets.

    With ``ref_inject`` each target token also receives a projection of the
    reference token at the same spatial site (last reference time slice),
    and the pixel head gets a zero-initialised linear readout of that token.
    Copying then has a direct path instead of one learned through attention. Without a reference it decodes a plain
    token sequence (the reference-less ablation, where every token came
    through the quantizer).
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.code_adapter = nn.Linear(cfg.code_dim, d)
        self.ref_adapter = nn.Linear(cfg.ref_dim, d)
        self.inject = nn.Linear(cfg.ref_dim, d) if cfg.ref_inject else None
        self.readout = nn.Linear(cfg.ref_dim, cfg.patch.token_dim(cfg.channels)) if cfg.ref_inject else None
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.segment = nn.Embedding(2, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.patch.token_dim(cfg.channels))
        tau, eta, omg = cfg.max_grid
        pos = sincos_3d(tau, eta, omg, d).reshape(tau, eta, omg, d)
        self.register_buffer("pos", torch.as_tensor(pos, dtype=torch.float32), persistent=False)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        if self.readout is not None:
            nn.init.zeros_(self.readout.weight)

    def positions(self, t0, grid):
        tau, eta, omg = grid
        if t0 + tau > self.pos.shape[0] or (eta, omg) != tuple(self.pos.shape[1:3]):
            raise ValueError(f"grid {grid} at t0={t0} exceeds position table")
        return self.pos[t0:t0 + tau].reshape(-1, self.pos.shape[-1])

    def forward(self, z_t, h_r, prune_indices, tgt_grid, ref_grid, z_ref=None):
        """Return raw (unclamped) pixel tokens for the target sites, (B, N_t, P).

        z_t: (B, N_kept, code_dim) target codes; h_r: (B, N_r, ref_dim)
        continuous reference tokens or None; ``z_ref`` (reference-less mode):
        quantized reference codes, decoded alongside and returned first.
        """
        tau, eta, omg = tgt_grid
        n_tgt = tau * eta * omg
        dtype = self.head.weight.dtype
        zt = self.code_adapter(z_t)
        zt = insert_mask_tokens(zt, prune_indices, n_tgt, self.mask_token)
        if zt.shape[1] != n_tgt:
            raise ValueError(f"target tokens {zt.shape[1]} do not fill grid {tgt_grid}")
        zt = zt + self.positions(ref_grid[0], tgt_grid).to(dtype) + self.segment.weight[1]
        skip = None
        if self.inject is not None and h_r is not None and z_ref is None:
            last = h_r.reshape(h_r.shape[0], ref_grid[0], eta * omg, -1)[:, -1]
            zt = zt + self.inject(last).repeat(1, tau, 1)
            skip = self.readout(last).repeat(1, tau, 1)
        if z_ref is not None:
            r = self.code_adapter(z_ref)
        elif h_r is not None:
            r = self.ref_adapter(h_r)
        else:
            r = None
        if r is not None:
            r = r + self.positions(0, ref_grid).to(dtype) + self.segment.weight[0]
            x = torch.cat([r, zt], dim=1)
        else:
            x = zt
        for blk in self.blocks:
            x = blk(x)
        x = self.head(self.norm(x))
        if z_ref is not None:
            return x
        x = x[:, x.shape[1] - n_tgt:]
        return x if skip is None else x + skip
