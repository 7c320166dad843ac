"""Run configuration: TOML sections [data], [model], [vq], [train], [generate]."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    clip_frames: int = 7  # raw frames per clip: n_ref_frames + targets
    n_ref_frames: int = 1
    interval_min: int = 1
    interval_max: int = 2
    source: str = "synth"  # "synth" or a directory of .rvc files / frame dirs
    video_length: int = 32
    n_glyphs: int = 3
    glyph_min: int = 6
    glyph_max: int = 11
    motion: float = 0.75
    blur: float = 1.0
    train_seed_base: int = 0
    eval_seed_base: int = 1 << 24
    eval_clips: int = 32


@dataclass
class ModelConfig:
    patch: list = field(default_factory=lambda: [2, 8, 8])
    channels: int = 3
    enc_dim: int = 160
    enc_depth: int = 3
    enc_heads: int = 4
    dec_dim: int = 160
    dec_depth: int = 3
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    max_tau: int = 8
    mask_mode: str = "oneway"
    ref_inject: bool = True  # add spatially aligned h_r to each target token in the decoder
    code_norm: bool = False  # l2-normalise target latents before quantization


@dataclass
class VQConfig:
    codebook_size: int = 128
    code_dim: int = 64
    decay: float = 0.99
    beta: float = 0.25
    split: bool = True
    split_start: int = 32  # initial K when splitting is on
    split_steps: list = field(default_factory=lambda: [500, 1500])
    dead_every: int = 250
    dead_threshold: float = 0.01
    lbg_eps: float = 1e-3
    refine_iters: int = 5


@dataclass
class TrainConfig:
    mode: str = "reftok"  # or "reference_less"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    min_lr: float = 0.0
    warmup: int = 100
    weight_decay: float = 0.01
    recon_kind: str = "l1"
    w_recon: float = 1.0
    w_perceptual: float = 0.1
    w_adversarial: float = 0.0
    w_commitment: float = 0.25
    prune: bool = True
    prune_max: int = 12
    seed: int = 0
    log_every: int = 1
    grad_clip: float = 1.0


@dataclass
class GenerateConfig:
    dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    warmup: int = 50
    schedule_steps: int = 8
    temperature: float = 1.0
    seed: int = 0


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "vq": VQConfig,
    "train": TrainConfig,
    "generate": GenerateConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def validate(self) -> "RunConfig":
        d, m, t = self.data, self.model, self.train
        if t.mode not in ("reftok", "reference_less"):
            raise ConfigError(f"train.mode must be 'reftok' or 'reference_less', got {t.mode!r}")
        if m.mask_mode not in ("oneway", "ref_only", "none"):
            raise ConfigError(f"model.mask_mode invalid: {m.mask_mode!r}")
        if len(m.patch) != 3 or min(m.patch) < 1:
            raise ConfigError("model.patch must be three positive ints")
        pt, ph, pw = m.patch
        if d.height % ph or d.width % pw:
            raise ConfigError("data.height/width must be divisible by the patch")
        n_tgt = d.clip_frames - d.n_ref_frames
        if not 1 <= d.n_ref_frames < d.clip_frames:
            raise ConfigError("data.n_ref_frames must be in [1, clip_frames)")
        if n_tgt % pt:
            raise ConfigError(f"target frame count {n_tgt} not divisible by temporal patch {pt}")
        ref_tau = -(-d.n_ref_frames // pt)
        if ref_tau + n_tgt // pt > m.max_tau:
            raise ConfigError("model.max_tau too small for the clip length")
        if m.enc_dim % m.enc_heads or m.dec_dim % m.dec_heads:
            raise ConfigError("embed dims must be divisible by heads")
        if self.vq.codebook_size < 2:
            raise ConfigError("vq.codebook_size must be >= 2")
        if self.vq.split:
            k0 = self.vq.split_start
            if k0 < 1 or k0 > self.vq.codebook_size:
                raise ConfigError("vq.split_start must be in [1, codebook_size]")
            if k0 * 2 ** len(self.vq.split_steps) != self.vq.codebook_size:
                raise ConfigError("vq.split_start doubled once per split step must reach codebook_size")
        for name in ("w_recon", "w_perceptual", "w_adversarial", "w_commitment"):
            if getattr(t, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if t.recon_kind not in ("l1", "l2"):
            raise ConfigError("train.recon_kind must be 'l1' or 'l2'")
        if d.interval_min < 1 or d.interval_max < d.interval_min:
            raise ConfigError("data interval range invalid")
        n_tgt_tokens = (n_tgt // pt) * (d.height // ph) * (d.width // pw)
        if t.prune and t.prune_max >= n_tgt_tokens:
            raise ConfigError("train.prune_max must be below the target token count")
        return self

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        kwargs = {}
        for section, value in raw.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(value, dict):
                raise ConfigError(f"config section [{section}] must be a table")
            klass = SECTIONS[section]
            known = {f.name for f in fields(klass)}
            for key in value:
                if key not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
            kwargs[section] = klass(**value)
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = tomli.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        return cls.from_dict(raw)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(train={"steps": 10})``."""
        raw = self.to_dict()
        for name, upd in sections.items():
            raw[name].update(upd)
        return RunConfig.from_dict(raw)
