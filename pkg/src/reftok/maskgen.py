"""Toy masked-token generator over quantized target grids, conditioned on h_r.

A bidirectional transformer reads [adapted h_r; target index embeddings] and
predicts codebook indices at masked target sites. Sampling fills the grid in a
fixed number of parallel steps following a cosine mask schedule.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GenerateConfig
from .dataio import split_reference
from .formats import TokenDatasetRecord, read_checkpoint, write_checkpoint
from .layers import Block, init_weights, sincos_3d
from .tokenizer import splits_to_tensors


def mask_fraction(step: float, total: float) -> float:
    """Fraction of sites still masked after ``step`` of ``total`` steps."""
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total and total > 0, got {step}/{total}")
    return math.cos(math.pi / 2 * step / total)


@dataclass
class GenSchedule:
    total_steps: int = 8
    temperature: float = 1.0

    def fraction(self, step: int) -> float:
        return mask_fraction(step, self.total_steps)

    def n_unmasked(self, step: int, n: int) -> int:
        return int(round(n * (1.0 - self.fraction(step))))


@dataclass
class GeneratorSpec:
    codebook_size: int
    grid: tuple[int, int, int]
    ref_grid: tuple[int, int, int]
    ref_dim: int
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0


class MaskGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        k = spec.codebook_size
        self.mask_id = k
        self.tok_embed = nn.Embedding(k + 1, spec.dim)
        self.ref_adapter = nn.Linear(spec.ref_dim, spec.dim)
        self.segment = nn.Embedding(2, spec.dim)
        self.blocks = nn.ModuleList(Block(spec.dim, spec.heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.dim)
        self.head = nn.Linear(spec.dim, k)
        rt, eta, omg = spec.ref_grid
        tau = spec.grid[0]
        pos = sincos_3d(rt + tau, eta, omg, spec.dim)
        self.register_buffer("pos", torch.as_tensor(pos, dtype=torch.float32), persistent=False)
        self.n_ref = rt * eta * omg
        self.apply(init_weights)

    @property
    def n_sites(self) -> int:
        a, b, c = self.spec.grid
        return a * b * c

    def forward(self, h_r: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Logits (B, N, K) for every target site."""
        r = self.ref_adapter(h_r) + self.pos[:self.n_ref] + self.segment.weight[0]
        t = self.tok_embed(tokens) + self.pos[self.n_ref:] + self.segment.weight[1]
        x = torch.cat([r, t], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x[:, self.n_ref:]))


# ---------------------------------------------------------------------------
# data

def export_token_dataset(tokenizer, clips, n_ref_frames: int = 1) -> list[TokenDatasetRecord]:
    """Frozen-tokenizer export: continuous h_r plus the target index grid."""
    if tokenizer.reference_less:
        raise ValueError("token export needs a reftok-mode tokenizer (h_r must exist)")
    splits = [split_reference(c, n_ref_frames) for c in clips]
    ref, tgt = splits_to_tensors(splits)
    with torch.no_grad():
        idx = tokenizer.compress(ref, tgt)
        h_r = tokenizer.encode_reference(ref)
    _, tgt_grid = tokenizer.grids(ref.shape[1], tgt.shape[1], ref.shape[2], ref.shape[3])
    return [TokenDatasetRecord(h_r[i].numpy().astype(np.float32),
                               idx[i].numpy().reshape(tgt_grid), c.source_id)
            for i, c in enumerate(clips)]


def stack_records(records):
    if not records:
        raise ValueError("empty token dataset")
    h = torch.as_tensor(np.stack([r.h_r for r in records]), dtype=torch.float32)
    idx = torch.as_tensor(np.stack([r.indices.reshape(-1) for r in records]), dtype=torch.long)
    return h, idx


def random_mask(batch: int, n: int, gen: torch.Generator) -> torch.Tensor:
    """Boolean (B, N) mask; per-sample ratio cos(pi/2 * u), at least one site."""
    u = torch.rand(batch, generator=gen)
    n_mask = torch.clamp(torch.ceil(torch.cos(math.pi / 2 * u) * n), min=1).long()
    scores = torch.rand(batch, n, generator=gen)
    ranks = scores.argsort(dim=1).argsort(dim=1)
    return ranks < n_mask[:, None]


def masked_loss(gen_model: MaskGenerator, h_r, idx, mask):
    inp = idx.masked_fill(mask, gen_model.mask_id)
    logits = gen_model(h_r, inp)
    return F.cross_entropy(logits[mask], idx[mask]), logits


# ---------------------------------------------------------------------------
# training / evaluation

def build_generator(records, cfg: GenerateConfig, codebook_size: int, ref_grid) -> MaskGenerator:
    r0 = records[0]
    spec = GeneratorSpec(codebook_size, tuple(r0.indices.shape), tuple(ref_grid), r0.h_r.shape[1],
                         cfg.dim, cfg.depth, cfg.heads, cfg.mlp_ratio)
    torch.manual_seed(cfg.seed)
    return MaskGenerator(spec)


def train_generator(records, cfg: GenerateConfig, codebook_size: int, ref_grid,
                    steps: int | None = None, model: MaskGenerator | None = None):
    """Random-ratio mask prediction with cross-entropy on masked sites only.

    Returns (generator, loss history).
    """
    if not records:
        raise ValueError("empty token dataset")
    h_all, idx_all = stack_records(records)
    if int(idx_all.max()) >= codebook_size:
        raise ValueError("record index outside codebook range")
    model = model or build_generator(records, cfg, codebook_size, ref_grid)
    steps = cfg.steps if steps is None else steps
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.95), weight_decay=0.0)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    model.train()
    for step in range(steps):
        lr = cfg.lr * min(1.0, (step + 1) / max(cfg.warmup, 1))
        lr *= 0.5 * (1 + math.cos(math.pi * step / max(steps, 1))) if step >= cfg.warmup else 1.0
        for g in opt.param_groups:
            g["lr"] = lr
        pick = torch.randint(0, len(records), (cfg.batch_size,), generator=gen)
        mask = random_mask(cfg.batch_size, model.n_sites, gen)
        loss, _ = masked_loss(model, h_all[pick], idx_all[pick], mask)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        history.append(float(loss.detach()))
    model.eval()
    return model, history


@torch.no_grad()
def masked_accuracy(model: MaskGenerator, records, seed: int = 0, trials: int = 4,
                    shuffle_reference: bool = False) -> float:
    """Argmax accuracy on masked sites under random-ratio masks.

    ``shuffle_reference`` pairs each grid with another record's h_r (a
    derangement), which removes the conditioning signal.
    """
    h, idx = stack_records(records)
    gen = torch.Generator().manual_seed(seed)
    if shuffle_reference:
        if len(records) < 2:
            raise ValueError("need at least two records to shuffle references")
        h = torch.roll(h, 1, dims=0)
    model.eval()
    hits = total = 0
    for _ in range(trials):
        mask = random_mask(len(records), model.n_sites, gen)
        logits = model(h, idx.masked_fill(mask, model.mask_id))
        pred = logits.argmax(-1)
        hits += int((pred[mask] == idx[mask]).sum())
        total += int(mask.sum())
    return hits / total


def _gumbel(shape, gen):
    u = torch.rand(shape, generator=gen).clamp_(1e-20, 1.0)
    return -torch.log((-torch.log(u)).clamp_min(1e-20))


@torch.no_grad()
def generate_tokens(h_r: torch.Tensor, model: MaskGenerator, schedule: GenSchedule,
                    rng: int = 0, trace: list | None = None) -> torch.Tensor:
    """Iterative parallel decoding from an all-masked grid.

    After step s (1-based) exactly round(N * (1 - fraction(s))) sites are
    fixed. Token choice and confidence both carry Gumbel noise scaled by
    temperature * (1 - s/S), so the last step (and a one-step schedule) is a
    plain argmax.
    """
    if schedule.total_steps < 1:
        raise ValueError("schedule needs at least one step")
    if h_r.dim() == 2:
        h_r = h_r[None]
    model.eval()
    gen = torch.Generator().manual_seed(int(rng))
    b, n = h_r.shape[0], model.n_sites
    tokens = torch.full((b, n), model.mask_id, dtype=torch.long)
    fixed = torch.zeros(b, n, dtype=torch.bool)
    for s in range(1, schedule.total_steps + 1):
        temp = schedule.temperature * (1.0 - s / schedule.total_steps)
        logits = model(h_r.to(model.head.weight.dtype), tokens).float()
        logp = F.log_softmax(logits, dim=-1)
        if temp > 0:
            choice = (logp + temp * _gumbel(logp.shape, gen)).argmax(-1)
        else:
            choice = logp.argmax(-1)
        conf = logp.gather(-1, choice[..., None])[..., 0]
        if temp > 0:
            conf = conf + temp * _gumbel(conf.shape, gen)
        conf = conf.masked_fill(fixed, float("inf"))
        n_keep = schedule.n_unmasked(s, n)
        order = conf.argsort(dim=1, descending=True)
        keep = torch.zeros_like(fixed)
        keep.scatter_(1, order[:, :n_keep], True)
        new = keep & ~fixed
        tokens = torch.where(new, choice, tokens)
        fixed = keep
        if trace is not None:
            trace.append(int(fixed[0].sum()))
    return tokens.reshape(b, *model.spec.grid)


# ---------------------------------------------------------------------------
# persistence (same container as tokenizer checkpoints, no codebook block)

def save_generator(model: MaskGenerator, path, gen_cfg: GenerateConfig | None = None) -> None:
    spec = asdict(model.spec)
    meta = {"kind": "generator", "spec": spec, "generate": asdict(gen_cfg) if gen_cfg else None}
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_checkpoint(path, meta, tensors, None)


def load_generator(path) -> MaskGenerator:
    meta, tensors, _ = read_checkpoint(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    s = meta["spec"]
    spec = GeneratorSpec(s["codebook_size"], tuple(s["grid"]), tuple(s["ref_grid"]), s["ref_dim"],
                         s["dim"], s["depth"], s["heads"], s["mlp_ratio"])
    model = MaskGenerator(spec)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    model.eval()
    return model
