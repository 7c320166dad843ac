"""Reference-based video tokenization at desk scale."""
from .config import RunConfig
from .dataio import ClipSplit, VideoClip, replicate_pad_reference, split_reference, synth_redundant_clip
from .patchgrid import PatchSpec, TokenGrid, compression_ratio, patchify, unpatchify
from .tokenizer import Tokenizer

__all__ = [
    "ClipSplit", "PatchSpec", "RunConfig", "TokenGrid", "Tokenizer", "VideoClip",
    "compression_ratio", "patchify", "replicate_pad_reference", "split_reference",
    "synth_redundant_clip", "unpatchify",
]
__version__ = "0.1.0"
