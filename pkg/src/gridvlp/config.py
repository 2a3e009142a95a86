"""Run configuration: defaults < key=value file < command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .fusion import FusionConfig

MODES = ("gen-data", "pretrain-cnn", "pretrain", "finetune", "eval", "bench")
LR_SCHEDULES = ("constant", "linear")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "pretrain"
    seed: int = 0
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"
    # data
    image_h: int = 64
    image_w: int = 96
    resize_shorter: int = 64
    resize_longer: int = 96
    n_train: int = 4000
    n_val: int = 2000
    n_cnn: int = 2000
    n_cnn_val: int = 200
    # grid encoder
    cnn_channels: str = "16,32,64,96,128"
    cnn_blocks: int = 1
    cnn_epochs: int = 8
    cnn_lr: float = 1e-3
    cnn_hidden: int = 128
    cnn_batch_size: int = 32
    cnn_checkpoint: str = ""
    # fusion model
    layers: int = 2
    width: int = 64
    heads: int = 4
    ff_mult: int = 4
    max_text_len: int = 20
    grid_sample_k: int = 16
    grid_sampling: Optional[bool] = None
    grid_pos_emb: bool = False
    dropout: float = 0.0
    tie_mlm: bool = True
    # optimisation
    lr: float = 1.5e-3
    warmup_steps: int = 300
    lr_schedule: str = "linear"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    steps: int = 3000
    mask_prob: float = 0.15
    corrupt_prob: float = 0.5
    # fine-tuning / evaluation
    init_checkpoint: str = ""
    checkpoint: str = ""
    finetune_steps: int = 3000
    finetune_lr: float = 1e-3
    eval_every: int = 50
    qa_threshold: float = 0.8
    stop_at_threshold: bool = False
    eval_split: str = "val"
    # benchmark
    bench_sizes: str = "64x64,64x96,96x160"
    bench_depths: str = "1,2,3"
    bench_reps: int = 50
    bench_warmup: int = 3
    bench_regions: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        positive = ["image_h", "image_w", "resize_shorter", "resize_longer", "n_train", "n_val",
                    "n_cnn", "n_cnn_val", "cnn_blocks", "cnn_hidden", "cnn_batch_size", "width",
                    "heads", "ff_mult", "max_text_len", "grid_sample_k", "batch_size",
                    "eval_every", "bench_reps", "bench_regions"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("layers", "steps", "finetune_steps", "cnn_epochs", "bench_warmup", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("dropout", "mask_prob", "corrupt_prob", "qa_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        for name in ("lr", "cnn_lr", "finetune_lr", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.image_h % 32 or self.image_w % 32:
            raise ConfigError("image_h and image_w must be multiples of 32")
        if self.resize_shorter > self.resize_longer:
            raise ConfigError("resize_shorter must not exceed resize_longer")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.mode == "finetune" and self.grid_sampling:
            raise ConfigError("fine-tuning uses the complete grid set; grid_sampling must be off")
        if self.batch_size < 2 and self.corrupt_prob > 0:
            raise ConfigError("ITM corruption needs batch_size >= 2")
        try:
            chans = self.channels()
        except ValueError:
            raise ConfigError(f"cnn_channels must be 5 comma-separated ints, got {self.cnn_channels!r}") from None
        if len(chans) != 5 or min(chans) <= 0:
            raise ConfigError("cnn_channels must list 5 positive stage widths")
        try:
            self.sizes()
            self.depths()
        except ValueError:
            raise ConfigError("malformed bench_sizes / bench_depths") from None

    @property
    def sampling_enabled(self) -> bool:
        """Random grid sampling runs in pre-training only."""
        if self.mode != "pretrain":
            return False
        return True if self.grid_sampling is None else bool(self.grid_sampling)

    def channels(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.cnn_channels.split(","))

    def sizes(self) -> list[tuple[int, int]]:
        out = []
        for item in self.bench_sizes.split(","):
            h, w = item.lower().split("x")
            out.append((int(h), int(w)))
        return out

    def depths(self) -> list[int]:
        return [int(d) for d in self.bench_depths.split(",")]

    def fusion(self) -> FusionConfig:
        return FusionConfig(layers=self.layers, width=self.width, heads=self.heads,
                            ff_mult=self.ff_mult, max_text_len=self.max_text_len,
                            grid_sample_k=self.grid_sample_k, dropout=self.dropout)

    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name

    def cnn_path(self) -> Path:
        return Path(self.cnn_checkpoint) if self.cnn_checkpoint else self.path("cnn.ckpt")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw):
    f = _FIELDS[name]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if "bool" in kind:
            low = text.lower()
            if kind.startswith("Optional") and low in ("", "none", "auto"):
                return None
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return text


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    values: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value)
    return RunConfig(**values)


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return RunConfig(**d)
