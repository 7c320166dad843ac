"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, RunConfig
from .dataio import (DataError, VideoClip, from_uint8, load_clip, read_rvc, split_reference,
                     synth_redundant_clip, to_uint8, write_rvc)
from .formats import FormatError, TokenStream, read_records, write_records
from .maskgen import (GenSchedule, export_token_dataset, generate_tokens, load_generator,
                      masked_accuracy, save_generator, train_generator)
from .metrics import evaluate, format_table
from .patchgrid import bits_per_pixel, compression_ratio
from .trainer import NumericFailure, eval_clips, load_checkpoint, save_checkpoint, synth_config, train

log = logging.getLogger("reftok")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


# ---------------------------------------------------------------------------
# codec

def encode_to_stream(model, clip: VideoClip, n_ref: int) -> TokenStream:
    """Quantize a clip's targets; the stream keeps the raw u8 reference frames."""
    ref_u8 = to_uint8(clip.frames[:n_ref])
    frames = clip.frames.copy()
    frames[:n_ref] = from_uint8(ref_u8)
    sp = split_reference(VideoClip(frames, clip.frame_interval, clip.source_id), n_ref)
    dtype = next(model.parameters()).dtype
    ref = torch.as_tensor(sp.reference_frames.frames[None], dtype=dtype)
    tgt = torch.as_tensor(sp.target_frames.frames[None], dtype=dtype)
    idx = model.compress(ref, tgt)[0].numpy()
    ref_grid, tgt_grid = model.grids(n_ref, tgt.shape[1], *ref.shape[2:4])
    grid = tgt_grid
    if model.reference_less:
        grid = (ref_grid[0] + tgt_grid[0], tgt_grid[1], tgt_grid[2])
    _, h, w, _ = clip.frames.shape
    return TokenStream(grid, model.quantizer.K, model.patch.as_tuple(), h, w, ref_u8, idx)


def stream_target_frames(model, stream: TokenStream) -> int:
    tau = stream.grid[0]
    if model.reference_less:
        tau -= -(-stream.n_ref // model.patch.t)
    return tau * model.patch.t


def decode_stream(model, stream: TokenStream, reference: np.ndarray | None = None) -> np.ndarray:
    """Decode target frames (T_t, H, W, 3) from a stream, optionally swapping
    in an edited reference (u8 or float frames of the same H, W)."""
    if stream.codebook_size > model.quantizer.K:
        raise FormatError(f"stream codebook size {stream.codebook_size} exceeds checkpoint K={model.quantizer.K}")
    if tuple(stream.patch) != model.patch.as_tuple():
        raise FormatError(f"stream patch {stream.patch} does not match checkpoint {model.patch.as_tuple()}")
    ref = from_uint8(stream.reference)
    if reference is not None:
        reference = np.asarray(reference)
        ref = from_uint8(reference) if reference.dtype == np.uint8 else reference.astype(np.float32)
        if ref.shape[1:3] != (stream.height, stream.width):
            raise DataError(f"reference override is {ref.shape[1:3]}, stream frames are "
                            f"{(stream.height, stream.width)}")
        if len(ref) < stream.n_ref:
            raise DataError(f"reference override has {len(ref)} frames, stream needs {stream.n_ref}")
        ref = ref[:stream.n_ref]
    dtype = next(model.parameters()).dtype
    ref_t = torch.as_tensor(ref[None], dtype=dtype)
    idx = torch.as_tensor(stream.indices[None], dtype=torch.long)
    out = model.decompress(idx, ref_t, stream_target_frames(model, stream))
    return out[0].numpy()


def contact_sheet(rows: list[np.ndarray], path) -> None:
    """Save rows of frames (each (T, H, W, 3) in [0, 1]) as one PNG grid."""
    t = max(len(r) for r in rows)
    h, w = rows[0].shape[1:3]
    sheet = np.ones((len(rows) * (h + 2), t * (w + 2), 3), dtype=np.float32)
    for i, r in enumerate(rows):
        for j, fr in enumerate(r):
            sheet[i * (h + 2):i * (h + 2) + h, j * (w + 2):j * (w + 2) + w] = fr
    Image.fromarray(to_uint8(sheet)).save(path)


def _read_clip_file(path) -> VideoClip:
    path = Path(path)
    if path.is_dir():
        from .dataio import count_frames
        return load_clip(path, 0, count_frames(path), 1)
    if not path.exists():
        raise DataError(f"no such clip: {path}")
    arr = read_rvc(path)
    return VideoClip(from_uint8(arr), 1, str(path)).validate()


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(args.resume) if args.resume else None
    if state is not None and state.cfg.to_dict() != cfg.to_dict():
        log.warning("resume checkpoint config differs from %s; continuing with the checkpoint's", args.config)
    steps = args.steps if args.steps is not None else cfg.train.steps
    state = train(state.cfg if state else cfg, steps=steps, state=state,
                  metrics_path=out / "metrics.jsonl", progress=True)
    save_checkpoint(state, out / "checkpoint.rtkc")
    print(f"trained to step {state.step}; checkpoint {out / 'checkpoint.rtkc'}")
    return 0


def cmd_encode(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    clip = _read_clip_file(args.clip)
    n_ref = args.n_ref or model.cfg.data.n_ref_frames
    stream = encode_to_stream(model, clip, n_ref)
    stream.save(args.out)
    n = stream.indices.size
    idx_bits, raw_bits = bits_per_pixel(model.patch, stream.codebook_size)
    print(f"tokens: {n}  grid: {stream.grid}  pixels-per-token: {compression_ratio(model.patch)}  "
          f"index bits: {n * math.ceil(math.log2(stream.codebook_size))}  "
          f"({idx_bits:.4f} vs {raw_bits:.0f} raw bits/pixel)")
    return 0


def cmd_decode(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    stream = TokenStream.load(args.stream)
    override = read_rvc(args.reference) if args.reference else None
    frames = decode_stream(model, stream, override)
    write_rvc(args.out, to_uint8(frames))
    if args.reference:
        base = decode_stream(model, stream)
        diff = np.abs(frames - base).mean(axis=-1)
        print(f"edit propagation: mean |delta| {diff.mean():.4f}, max {diff.max():.4f}")
    if args.png:
        ref = from_uint8(override if override is not None else stream.reference)
        contact_sheet([ref, frames], args.png)
    print(f"decoded {frames.shape[0]} target frames to {args.out}")
    return 0


def _eval_set(cfg: RunConfig, eval_dir):
    if eval_dir is None:
        return eval_clips(cfg)
    root = Path(eval_dir)
    if not root.is_dir():
        raise DataError(f"eval dir not found: {root}")
    items = sorted(p for p in root.iterdir() if p.is_dir() or p.suffix == ".rvc")
    clips = [_read_clip_file(p) for p in items]
    if not clips:
        raise DataError(f"no clips in {root}")
    return clips


def cmd_evaluate(args) -> int:
    reports = []
    for ck in args.checkpoint:
        state = load_checkpoint(ck)
        cfg = state.cfg
        clips = _eval_set(cfg, args.eval_dir)
        clen = cfg.data.clip_frames
        clips = [VideoClip(c.frames[:clen], c.frame_interval, c.source_id) for c in clips]
        name = f"{Path(ck).stem}[{cfg.train.mode}]"
        reports.append(evaluate(state.model, clips, args.n_ref or cfg.data.n_ref_frames, name=name,
                                lpips_cmd=args.lpips_cmd.split() if args.lpips_cmd else None))
    text = format_table(reports)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
        (out / "report.txt").write_text(text)
    return 0


def cmd_train_generator(args) -> int:
    state = load_checkpoint(args.tokenizer)
    cfg = state.cfg
    model = state.model
    if args.records:
        records = read_records(args.records)
    else:
        clips = eval_clips(cfg, n=args.clips, seed_base=cfg.data.train_seed_base)
        records = export_token_dataset(model, clips, cfg.data.n_ref_frames)
    if args.export:
        write_records(args.export, records)
    ref_grid, _ = model.grids(cfg.data.n_ref_frames, cfg.data.clip_frames - cfg.data.n_ref_frames,
                              cfg.data.height, cfg.data.width)
    gen, hist = train_generator(records, cfg.generate, model.quantizer.K, ref_grid,
                                steps=args.steps)
    acc = masked_accuracy(gen, records)
    save_generator(gen, args.out, cfg.generate)
    print(f"generator trained: final loss {hist[-1]:.4f}, masked accuracy {acc:.3f}")
    return 0


def cmd_generate(args) -> int:
    state = load_checkpoint(args.tokenizer)
    model = state.model
    gen = load_generator(args.generator)
    clip = _read_clip_file(args.reference)
    cfg = state.cfg
    n_ref = cfg.data.n_ref_frames
    ref = torch.as_tensor(clip.frames[None, :n_ref])
    h_r = model.encode_reference(ref).detach()
    sched = GenSchedule(args.schedule_steps or cfg.generate.schedule_steps,
                        cfg.generate.temperature if args.temperature is None else args.temperature)
    grid = generate_tokens(h_r, gen, sched, rng=args.seed)
    n_tgt = grid.shape[1] * model.patch.t
    frames = model.decompress(grid.reshape(1, -1), ref, n_tgt, h_r=h_r)[0].numpy()
    write_rvc(args.out, to_uint8(frames))
    if args.png:
        contact_sheet([clip.frames[:n_ref], frames], args.png)
    print(f"generated {frames.shape[0]} frames to {args.out}")
    return 0


def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    sc = synth_config(cfg, frames=args.frames, motion=args.motion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        clip = synth_redundant_clip(args.seed + i, sc)
        write_rvc(out / f"clip_{i:05d}.rvc", clip.to_uint8())
    print(f"wrote {args.count} clips to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reftok", description="Reference-based video tokenizer")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a tokenizer from a TOML config")
    s.add_argument("config")
    s.add_argument("--out", default="runs/train")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--steps", type=int, help="train until this step (default: train.steps)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="clip -> .rtk token stream")
    s.add_argument("checkpoint")
    s.add_argument("clip", help=".rvc file or PNG frame directory")
    s.add_argument("out")
    s.add_argument("--n-ref", type=int)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help=".rtk token stream -> .rvc clip")
    s.add_argument("checkpoint")
    s.add_argument("stream")
    s.add_argument("out")
    s.add_argument("--reference", help="alternate (edited) reference .rvc")
    s.add_argument("--png", help="write a contact sheet here")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("evaluate", help="reconstruction metrics for one or more checkpoints")
    s.add_argument("checkpoint", nargs="+")
    s.add_argument("--eval-dir", help="directory of .rvc clips (default: synthetic held-out set)")
    s.add_argument("--n-ref", type=int)
    s.add_argument("--out", help="directory for report.json / report.txt")
    s.add_argument("--lpips-cmd", help="external LPIPS command; called with two .rvc paths")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("train-generator", help="train the masked-token generator")
    s.add_argument("tokenizer")
    s.add_argument("out")
    s.add_argument("--records", help="existing token dataset file")
    s.add_argument("--export", help="also write the exported token dataset here")
    s.add_argument("--clips", type=int, default=8)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_generator)

    s = sub.add_parser("generate", help="sample target frames for a reference clip")
    s.add_argument("tokenizer")
    s.add_argument("generator")
    s.add_argument("reference", help=".rvc whose first n_ref frames are the reference")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--schedule-steps", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--png")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("synth", help="write synthetic .rvc clips")
    s.add_argument("out")
    s.add_argument("--config")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--seed", type=int, default=1 << 24)
    s.add_argument("--frames", type=int)
    s.add_argument("--motion", type=float)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
