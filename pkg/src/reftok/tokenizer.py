"""The reference-based tokenizer: encoder, bottleneck and decoder wired together.

Clips enter as float tensors (B, T, H, W, C) in [0, 1]. In ``reftok`` mode the
reference tokens skip the quantizer and condition the decoder directly; in
``reference_less`` mode every token is quantized and decoded jointly.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .dataio import ClipSplit, padded_length
from .patchgrid import PatchSpec
from .refdecoder import DecoderConfig, RefDecoder
from .refencoder import EncoderConfig, LatentBundle, RefEncoder, draw_prune_indices, keep_from_pruned
from .vq import VectorQuantizer


class BypassViolation(AssertionError):
    """Reference tokens reached the quantizer in reftok mode."""


def patchify_torch(frames: torch.Tensor, spec: PatchSpec) -> torch.Tensor:
    """(B, T, H, W, C) -> (B, N, t*h*w*C) in (t, y, x) site order; mirrors patchgrid."""
    b, T, H, W, C = frames.shape
    tau, eta, omg = spec.grid_shape(T, H, W)
    x = frames.reshape(b, tau, spec.t, eta, spec.h, omg, spec.w, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, tau * eta * omg, spec.volume * C)


def unpatchify_torch(tokens: torch.Tensor, spec: PatchSpec, grid, channels: int = 3) -> torch.Tensor:
    b = tokens.shape[0]
    tau, eta, omg = grid
    x = tokens.reshape(b, tau, eta, omg, spec.t, spec.h, spec.w, channels)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, tau * spec.t, eta * spec.h, omg * spec.w, channels)


def pad_reference_torch(ref: torch.Tensor, t_patch: int) -> torch.Tensor:
    t = ref.shape[1]
    extra = padded_length(t, t_patch) - t
    if extra == 0:
        return ref
    return torch.cat([ref, ref[:, -1:].expand(-1, extra, -1, -1, -1)], dim=1)


def splits_to_tensors(splits, dtype=torch.float32):
    if isinstance(splits, ClipSplit):
        splits = [splits]
    ref = torch.as_tensor(np.stack([s.reference_frames.frames for s in splits]), dtype=dtype)
    tgt = torch.as_tensor(np.stack([s.target_frames.frames for s in splits]), dtype=dtype)
    return ref, tgt


class Tokenizer(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        m, v, d = cfg.model, cfg.vq, cfg.data
        self.patch = PatchSpec(*m.patch)
        self.reference_less = cfg.train.mode == "reference_less"
        eta, omg = d.height // self.patch.h, d.width // self.patch.w
        max_grid = (m.max_tau, eta, omg)
        self.encoder = RefEncoder(EncoderConfig(
            embed_dim=m.enc_dim, depth=m.enc_depth, heads=m.enc_heads, mlp_ratio=m.mlp_ratio,
            patch=self.patch, channels=m.channels, max_grid=max_grid, code_dim=v.code_dim,
            prune_max=cfg.train.prune_max, mask_mode="none" if self.reference_less else m.mask_mode))
        self.to_code = nn.Linear(m.enc_dim, v.code_dim)
        nn.init.trunc_normal_(self.to_code.weight, std=0.02)
        nn.init.zeros_(self.to_code.bias)
        k0 = v.split_start if v.split else v.codebook_size
        self.quantizer = VectorQuantizer(k0, v.code_dim, decay=v.decay, beta=v.beta)
        self.quantizer.init_seed = cfg.train.seed
        self.decoder = RefDecoder(DecoderConfig(
            embed_dim=m.dec_dim, depth=m.dec_depth, heads=m.dec_heads, mlp_ratio=m.mlp_ratio,
            patch=self.patch, channels=m.channels, max_grid=max_grid, code_dim=v.code_dim,
            ref_dim=m.enc_dim, ref_inject=m.ref_inject))
        self.check_bypass = True

    # -- lattice bookkeeping ------------------------------------------------

    def grids(self, n_ref_frames: int, n_tgt_frames: int, height: int, width: int):
        ref_t = padded_length(n_ref_frames, self.patch.t)
        return (self.patch.grid_shape(ref_t, height, width),
                self.patch.grid_shape(n_tgt_frames, height, width))

    def tokens(self, ref: torch.Tensor, tgt: torch.Tensor | None):
        ref_p = pad_reference_torch(ref, self.patch.t)
        ref_grid = self.patch.grid_shape(*ref_p.shape[1:4])
        # the encoder sees pixels centred to [-1, 1]
        ref_tok = patchify_torch(ref_p, self.patch) * 2.0 - 1.0
        if tgt is None:
            return ref_tok, None, ref_grid, None
        tgt_grid = self.patch.grid_shape(*tgt.shape[1:4])
        return ref_tok, patchify_torch(tgt, self.patch) * 2.0 - 1.0, ref_grid, tgt_grid

    # -- pipeline pieces ----------------------------------------------------

    def encode(self, ref: torch.Tensor, tgt: torch.Tensor, prune_indices=None,
               generator: torch.Generator | None = None, prune_max: int | None = None) -> LatentBundle:
        """h_r, h_t = E(x_r, x_t). With ``generator`` and ``prune_max`` the
        target tokens are randomly pruned; explicit ``prune_indices`` override."""
        ref_tok, tgt_tok, ref_grid, tgt_grid = self.tokens(ref, tgt)
        b, n_tgt = tgt_tok.shape[:2]
        if prune_indices is None:
            if generator is not None and prune_max:
                prune_indices = draw_prune_indices(b, n_tgt, prune_max, generator)
            else:
                prune_indices = torch.zeros(b, 0, dtype=torch.long)
        keep = keep_from_pruned(prune_indices, n_tgt) if prune_indices.shape[1] else None
        h_ref, h_tgt = self.encoder(ref_tok, tgt_tok, ref_grid, tgt_grid, keep=keep)
        if self.reference_less:
            h_t = self.project(torch.cat([h_ref, h_tgt], dim=1))
            return LatentBundle(None, h_t, prune_indices, ref_grid, tgt_grid)
        return LatentBundle(h_ref, self.project(h_tgt), prune_indices, ref_grid, tgt_grid)

    def project(self, h: torch.Tensor) -> torch.Tensor:
        """Encoder features -> quantizer inputs, optionally on the unit sphere."""
        h = self.to_code(h)
        return F.normalize(h, dim=-1) if self.cfg.model.code_norm else h

    def encode_reference(self, ref: torch.Tensor) -> torch.Tensor:
        """Reference tokens alone; equal to the joint pass under the one-way mask."""
        ref_tok, _, ref_grid, _ = self.tokens(ref, None)
        h_ref, _ = self.encoder(ref_tok, None, ref_grid, None)
        return h_ref

    def quantize(self, bundle: LatentBundle, offset=None):
        before = self.quantizer.calls
        z, idx, commit, cb = self.quantizer(bundle.h_t, offset=offset)
        if self.check_bypass and not self.reference_less:
            n_kept = bundle.n_tgt - bundle.prune_indices.shape[1]
            if (self.quantizer.calls != before + 1
                    or self.quantizer.last_input_tokens != bundle.h_t.shape[0] * n_kept):
                raise BypassViolation("quantizer saw tokens other than the target latents")
        return z, idx, commit, cb

    def decode_tokens(self, z: torch.Tensor, h_r, prune_indices, ref_grid, tgt_grid) -> torch.Tensor:
        """Raw pixel frames for the targets (reftok) or [reference; targets]."""
        if self.reference_less:
            n_ref = ref_grid[0] * ref_grid[1] * ref_grid[2]
            out = self.decoder(z[:, n_ref:], None, prune_indices, tgt_grid, ref_grid, z_ref=z[:, :n_ref])
            grid = (ref_grid[0] + tgt_grid[0], tgt_grid[1], tgt_grid[2])
        else:
            out = self.decoder(z, h_r, prune_indices, tgt_grid, ref_grid)
            grid = tgt_grid
        # the head predicts centred pixels; map back to [0, 1]
        return unpatchify_torch(out * 0.5 + 0.5, self.patch, grid, self.cfg.model.channels)

    def decode(self, z_t, h_r, prune_indices, ref_grid, tgt_grid) -> torch.Tensor:
        """x_hat_t = D(z_t | h_r), target frames only, clamped to [0, 1]."""
        out = self.decode_tokens(z_t, h_r, prune_indices, ref_grid, tgt_grid)
        if self.reference_less:
            out = out[:, ref_grid[0] * self.patch.t:]
        return out.clamp(0.0, 1.0)

    def forward(self, ref, tgt, generator=None, prune_max=None, offset=None):
        """Training forward. Returns a dict with raw reconstructions and VQ terms.

        ``recon`` covers the targets (reftok) or [padded reference; targets]
        (reference-less); ``recon_target`` always covers the targets only.
        """
        bundle = self.encode(ref, tgt, generator=generator, prune_max=prune_max)
        z, idx, commit, cb = self.quantize(bundle, offset=offset)
        recon = self.decode_tokens(z, bundle.h_r, bundle.prune_indices, bundle.ref_grid, bundle.tgt_grid)
        n_ref_slots = bundle.ref_grid[0] * self.patch.t
        recon_target = recon[:, n_ref_slots:] if self.reference_less else recon
        return {"recon": recon, "recon_target": recon_target, "indices": idx,
                "commitment": commit, "codebook": cb, "bundle": bundle}

    # -- codec --------------------------------------------------------------

    @torch.no_grad()
    def compress(self, ref: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        """Discrete indices (B, N) of every quantized token; no pruning."""
        was = self.training
        self.eval()
        try:
            bundle = self.encode(ref, tgt)
            _, idx, _, _ = self.quantize(bundle)
        finally:
            self.train(was)
        return idx

    @torch.no_grad()
    def decompress(self, indices: torch.Tensor, ref: torch.Tensor, n_tgt_frames: int,
                   h_r: torch.Tensor | None = None) -> torch.Tensor:
        """Rebuild target frames from indices and the raw reference frames."""
        was = self.training
        self.eval()
        try:
            b, _, height, width, _ = ref.shape
            ref_grid, tgt_grid = self.grids(ref.shape[1], n_tgt_frames, height, width)
            z = self.quantizer.lookup(indices).to(self.to_code.weight.dtype)
            if not self.reference_less and h_r is None:
                h_r = self.encode_reference(ref)
            empty = torch.zeros(b, 0, dtype=torch.long)
            return self.decode(z, h_r, empty, ref_grid, tgt_grid)
        finally:
            self.train(was)

    @torch.no_grad()
    def reconstruct(self, ref: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        return self.decompress(self.compress(ref, tgt), ref, tgt.shape[1])

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
