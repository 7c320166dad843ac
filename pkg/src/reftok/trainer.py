"""Training loop, codebook maintenance schedule, diagnostics and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import vq as vqmod
from .config import RunConfig
from .dataio import (DataError, DirectorySource, SynthConfig, SynthSource, VideoClip,
                     sample_training_clip, split_reference, synth_redundant_clip)
from .formats import read_checkpoint, write_checkpoint
from .losses import FeatureStack, PatchDiscriminator, adversarial_losses, perceptual_loss, reconstruction_loss
from .tokenizer import Tokenizer, splits_to_tensors

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    """Loss became NaN/Inf."""


@dataclass
class TrainState:
    model: Tokenizer
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)
    feature_stack: FeatureStack | None = None
    disc: PatchDiscriminator | None = None
    disc_optimizer: torch.optim.Optimizer | None = None
    latent_pool: list = field(default_factory=list)

    @property
    def cfg(self) -> RunConfig:
        return self.model.cfg


def make_optimizer(params, cfg: RunConfig, lr=None):
    return torch.optim.AdamW(params, lr=lr or cfg.train.lr, betas=(0.9, 0.95),
                             weight_decay=cfg.train.weight_decay)


def init_state(cfg: RunConfig, dtype=torch.float32) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    model = Tokenizer(cfg).to(dtype)
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    state = TrainState(model, opt)
    if cfg.train.w_perceptual > 0:
        state.feature_stack = FeatureStack(cfg.model.channels, seed=cfg.train.seed + 1234).to(dtype)
    if cfg.train.w_adversarial > 0:
        state.disc = PatchDiscriminator(cfg.model.channels).to(dtype)
        state.disc_optimizer = make_optimizer(state.disc.parameters(), cfg)
    return state


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr``."""
    t = cfg.train
    if t.warmup and step < t.warmup:
        return t.lr * (step + 1) / t.warmup
    span = max(t.steps - t.warmup, 1)
    frac = min(max(step - t.warmup, 0) / span, 1.0)
    return t.min_lr + 0.5 * (t.lr - t.min_lr) * (1 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# data

def clip_source(cfg: RunConfig):
    d = cfg.data
    if d.source == "synth":
        return SynthSource(synth_config(cfg, d.video_length), length=d.video_length,
                           base_seed=d.train_seed_base, n_videos=d.eval_seed_base - d.train_seed_base)
    root = Path(d.source)
    if not root.is_dir():
        raise DataError(f"data.source {root} is not a directory")
    paths = sorted(p for p in root.iterdir() if p.is_dir() or p.suffix == ".rvc")
    return DirectorySource(paths)


def synth_config(cfg: RunConfig, frames: int | None = None, motion: float | None = None) -> SynthConfig:
    d = cfg.data
    return SynthConfig(frames=frames or d.clip_frames, height=d.height, width=d.width,
                       n_glyphs=d.n_glyphs, glyph_min=d.glyph_min, glyph_max=d.glyph_max,
                       motion=d.motion if motion is None else motion, blur=d.blur)


def sample_batch(cfg: RunConfig, step: int, source=None):
    """Deterministic batch of ClipSplits for ``step``."""
    source = source if source is not None else clip_source(cfg)
    rng = np.random.default_rng([cfg.train.seed, step])
    splits = []
    for _ in range(cfg.train.batch_size):
        clip = sample_training_clip(source, cfg.data.clip_frames,
                                    (cfg.data.interval_min, cfg.data.interval_max), rng)
        splits.append(split_reference(clip, cfg.data.n_ref_frames))
    return splits


def eval_clips(cfg: RunConfig, n: int | None = None, motion: float | None = None,
               seed_base: int | None = None) -> list[VideoClip]:
    """Held-out synthetic clips at stride 1."""
    base = cfg.data.eval_seed_base if seed_base is None else seed_base
    sc = synth_config(cfg, motion=motion)
    return [synth_redundant_clip(base + i, sc) for i in range(n or cfg.data.eval_clips)]


# ---------------------------------------------------------------------------
# one step

def compute_losses(state: TrainState, ref, tgt, generator=None, prune=True, offset=None):
    cfg = state.cfg
    t = cfg.train
    model = state.model
    out = model(ref, tgt, generator=generator,
                prune_max=t.prune_max if (prune and t.prune) else None, offset=offset)
    if model.reference_less:
        # joint tokenization: loss over the reference frames and the targets
        n_ref = ref.shape[1]
        n_slots = out["recon"].shape[1] - tgt.shape[1]
        recon = torch.cat([out["recon"][:, :n_ref], out["recon"][:, n_slots:]], dim=1)
        truth = torch.cat([ref, tgt], dim=1)
    else:
        # reference pixels never enter the reconstruction loss
        recon, truth = out["recon_target"], tgt
    terms = {"recon": reconstruction_loss(truth, recon, t.recon_kind)}
    total = t.w_recon * terms["recon"] + t.w_commitment * out["commitment"]
    if t.w_perceptual > 0 and state.feature_stack is not None:
        terms["perceptual"] = perceptual_loss(truth, recon, state.feature_stack)
        total = total + t.w_perceptual * terms["perceptual"]
    if t.w_adversarial > 0 and state.disc is not None:
        g_loss, d_loss = adversarial_losses(truth, recon, state.disc)
        terms["g_loss"], terms["d_loss"] = g_loss, d_loss
        total = total + t.w_adversarial * g_loss
    terms["commitment"] = out["commitment"]
    terms["total"] = total
    return terms, out


def _maintain_codebook(state: TrainState, step: int, indices: np.ndarray) -> None:
    v = state.cfg.vq
    if not v.split:
        return
    q = state.model.quantizer
    pool = np.concatenate(state.latent_pool) if state.latent_pool else None
    if step in set(v.split_steps) and 2 * q.K <= v.codebook_size:
        book = vqmod.split_codebook(q.codebook(), "double", eps=v.lbg_eps, k_max=v.codebook_size)
        if pool is not None and v.refine_iters:
            refined = vqmod.refine_assignments(pool, book, v.refine_iters)
            book = vqmod.Codebook(refined.vectors.astype(np.float32), book.usage)
        q.load_codebook(book)
        log.info("step %d: codebook split to K=%d", step, q.K)
    elif v.dead_every and step % v.dead_every == 0 and step > 0:
        rng = np.random.default_rng([state.cfg.train.seed, step, 7])
        book = vqmod.split_codebook(q.codebook(), "dead_replace", eps=v.lbg_eps,
                                    threshold=v.dead_threshold, rng=rng,
                                    protected=np.unique(indices))
        q.load_codebook(book)


def train_step(state: TrainState, batch, cfg: RunConfig | None = None) -> dict:
    """One optimizer update. ``batch`` is a list of ClipSplits."""
    cfg = cfg or state.cfg
    model = state.model
    model.train()
    dtype = next(model.parameters()).dtype
    ref, tgt = splits_to_tensors(batch, dtype)
    lr = lr_at(state.step, cfg)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    gen = torch.Generator().manual_seed(cfg.train.seed * 1_000_003 + state.step)
    try:
        terms, out = compute_losses(state, ref, tgt, generator=gen)
    except vqmod.NonFiniteLatents as exc:
        raise NumericFailure(f"step {state.step}: {exc}") from exc
    total = terms["total"]
    if not torch.isfinite(total):
        raise NumericFailure(f"non-finite loss at step {state.step}: "
                             + ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items()))
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.train.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
    state.optimizer.step()
    if state.disc is not None:
        state.disc_optimizer.zero_grad(set_to_none=True)
        terms["d_loss"].backward()
        state.disc_optimizer.step()

    idx = out["indices"].reshape(-1).cpu().numpy()
    h = out["bundle"].h_t.detach().reshape(-1, cfg.vq.code_dim).cpu().numpy()
    state.latent_pool = (state.latent_pool + [h])[-4:]
    batch_counts = np.bincount(idx, minlength=model.quantizer.K)
    state.step += 1
    _maintain_codebook(state, state.step, idx)
    metrics = {
        "step": state.step,
        "recon": float(terms["recon"].detach()),
        "total": float(total.detach()),
        "perplexity": vqmod.perplexity(batch_counts),
        "utilization": vqmod.utilization(model.quantizer.usage.cpu().numpy(), cfg.vq.dead_threshold),
        "codebook_size": model.quantizer.K,
        "lr": lr,
    }
    state.history.append(metrics)
    return metrics


def train(cfg: RunConfig, steps: int | None = None, state: TrainState | None = None,
          metrics_path=None, batches=None, progress: bool = False) -> TrainState:
    """Run until ``state.step == steps`` (default ``cfg.train.steps``).

    ``batches`` (optional) is a callable step -> list[ClipSplit] overriding
    the configured source, e.g. a fixed batch for overfitting.
    """
    state = state or init_state(cfg)
    steps = cfg.train.steps if steps is None else steps
    source = None if batches is not None else clip_source(cfg)
    fh = open(metrics_path, "a") if metrics_path else None
    try:
        while state.step < steps:
            batch = batches(state.step) if batches else sample_batch(cfg, state.step, source)
            m = train_step(state, batch, cfg)
            if fh and (m["step"] % cfg.train.log_every == 0):
                fh.write(json.dumps({k: m[k] for k in ("step", "recon", "perplexity", "utilization", "lr")}) + "\n")
            if progress and m["step"] % 100 == 0:
                log.info("step %d recon %.4f ppl %.1f util %.2f", m["step"], m["recon"],
                         m["perplexity"], m["utilization"])
    finally:
        if fh:
            fh.close()
    return state


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class CollapseReport:
    utilization: float
    model_loss: float
    copy_loss: float
    copy_gap: float
    collapsed: bool
    code_counts: np.ndarray


def probe_code_counts(model: Tokenizer, clips, n_ref: int) -> np.ndarray:
    splits = [split_reference(c, n_ref) for c in clips]
    ref, tgt = splits_to_tensors(splits, next(model.parameters()).dtype)
    idx = model.compress(ref, tgt).reshape(-1).cpu().numpy()
    return np.bincount(idx, minlength=model.quantizer.K)


def detect_posterior_collapse(model: Tokenizer, clips, n_ref: int = 1,
                              threshold: float = 0.01, eps: float = 1e-3) -> CollapseReport:
    """Utilization on the probe clips plus the copy-gap against predicting
    every target frame as the last reference frame (mean L1)."""
    splits = [split_reference(c, n_ref) for c in clips]
    ref, tgt = splits_to_tensors(splits, next(model.parameters()).dtype)
    counts = np.bincount(model.compress(ref, tgt).reshape(-1).cpu().numpy(), minlength=model.quantizer.K)
    util = vqmod.utilization(counts, threshold)
    recon = model.reconstruct(ref, tgt)
    model_loss = float((recon - tgt).abs().mean())
    copy_loss = float((ref[:, -1:] - tgt).abs().mean())
    gap = model_loss - copy_loss
    return CollapseReport(util, model_loss, copy_loss, gap, util < 0.10 and gap >= -eps, counts)


# ---------------------------------------------------------------------------
# checkpoints

def _optimizer_tensors(prefix: str, named_params, optimizer) -> tuple[dict, dict]:
    tensors, meta = {}, {}
    for name, p in named_params:
        st = optimizer.state.get(p)
        if not st:
            continue
        for key, val in st.items():
            if key == "step":
                meta[f"{prefix}{name}"] = float(val)
            else:
                tensors[f"{prefix}{name}/{key}"] = val.detach().cpu().numpy()
    return tensors, meta


def _load_optimizer(prefix, named_params, optimizer, tensors, steps):
    for name, p in named_params:
        key = f"{prefix}{name}"
        if key not in steps:
            continue
        st = {"step": torch.tensor(steps[key], dtype=torch.float32)}
        for sub in ("exp_avg", "exp_avg_sq"):
            st[sub] = torch.as_tensor(tensors[f"{key}/{sub}"], dtype=p.dtype).clone()
        optimizer.state[p] = st


def state_tensors(state: TrainState) -> tuple[dict, dict]:
    tensors = {f"model/{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()
               if not k.startswith("quantizer.")}
    named = [(n, p) for n, p in state.model.named_parameters() if p.requires_grad]
    opt_t, opt_steps = _optimizer_tensors("optim/", named, state.optimizer)
    tensors.update(opt_t)
    if state.disc is not None:
        tensors.update({f"disc/{k}": v.detach().cpu().numpy() for k, v in state.disc.state_dict().items()})
        dt, ds = _optimizer_tensors("doptim/", list(state.disc.named_parameters()), state.disc_optimizer)
        tensors.update(dt)
        opt_steps.update(ds)
    # latents kept for refining the codebook at the next split
    for i, h in enumerate(state.latent_pool):
        tensors[f"pool/{i}"] = h
    return tensors, opt_steps


def save_checkpoint(state: TrainState, path) -> None:
    tensors, opt_steps = state_tensors(state)
    meta = {"kind": "tokenizer", "config": state.cfg.to_dict(),
            "state": {"step": state.step, "optimizer_steps": opt_steps,
                      "codebook_initialized": bool(state.model.quantizer.initialized)}}
    write_checkpoint(path, meta, tensors, state.model.quantizer.codebook())


def load_checkpoint(path, dtype=torch.float32) -> TrainState:
    meta, tensors, book = read_checkpoint(path)
    if meta.get("kind") != "tokenizer":
        raise DataError(f"{path} is not a tokenizer checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    state = init_state(cfg, dtype)
    model = state.model
    if book is not None:
        model.quantizer.load_codebook(book)
        model.quantizer.initialized.fill_(bool(meta["state"].get("codebook_initialized", True)))
    sd = {k[len("model/"):]: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()
          if k.startswith("model/")}
    missing, unexpected = model.load_state_dict(sd, strict=False)
    missing = [m for m in missing if not m.startswith("quantizer.")]
    if missing or unexpected:
        raise DataError(f"checkpoint/config mismatch: missing={missing} unexpected={unexpected}")
    steps = meta["state"].get("optimizer_steps", {})
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    _load_optimizer("optim/", named, state.optimizer, tensors, steps)
    if state.disc is not None:
        state.disc.load_state_dict({k[len("disc/"):]: torch.as_tensor(v) for k, v in tensors.items()
                                    if k.startswith("disc/")})
        _load_optimizer("doptim/", list(state.disc.named_parameters()), state.disc_optimizer, tensors, steps)
    state.latent_pool = [tensors[f"pool/{i}"] for i in range(4) if f"pool/{i}" in tensors]
    state.step = int(meta["state"]["step"])
    model.eval()
    return state
