"""Run configuration: nested JSON with defaults, strict keys, full validation."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .vit import BackboneConfig


@dataclass
class DataSection:
    image_size: list = field(default_factory=lambda: [64, 64])
    batch_size: int = 32


@dataclass
class AugSection:
    crop: bool = True
    crop_scale: list = field(default_factory=lambda: [0.6, 1.0])
    rotate: bool = True
    max_rotation: float = 10.0
    jitter: bool = True
    brightness: float = 0.2
    contrast: float = 0.2


@dataclass
class BackboneSection:
    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    dropout: float = 0.0


@dataclass
class MaskSection:
    ratio: float = 0.7
    mean_block_side: float = 3.0


@dataclass
class HeadSection:
    K: int = 8192
    bottleneck: int = 256
    hidden: int = 2048


@dataclass
class DecoderSection:
    hidden: int = 2048
    bottleneck: int = 256


@dataclass
class LossSection:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    raw: bool = False


@dataclass
class TempSection:
    student: float = 0.1
    teacher_start: float = 0.04
    teacher_end: float = 0.07
    warmup_epochs: int = 30


@dataclass
class CenterSection:
    momentum: float = 0.9


@dataclass
class OptimSection:
    lr: float = 5e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.04
    warmup_epochs: int = 10
    ema_start: float = 0.996
    ema_end: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 100
    max_steps: int = 0
    checkpoint_every: int = 10


@dataclass
class ProbeSection:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class FinetuneSection:
    epochs: int = 20
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 32
    augment: bool = False


@dataclass
class SegSection:
    taps: list = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    channels: list = field(default_factory=lambda: [64, 32, 16])
    classes: int = 2
    epochs: int = 20
    lr_backbone: float = 1e-4
    lr_decoder: float = 1e-3
    batch_size: int = 16


@dataclass
class ClusterSection:
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    device: str = "cpu"
    data: DataSection = field(default_factory=DataSection)
    aug: AugSection = field(default_factory=AugSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    mask: MaskSection = field(default_factory=MaskSection)
    head: HeadSection = field(default_factory=HeadSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    loss: LossSection = field(default_factory=LossSection)
    temp: TempSection = field(default_factory=TempSection)
    center: CenterSection = field(default_factory=CenterSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    seg: SegSection = field(default_factory=SegSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(b.patch_size, b.embed_dim, b.depth, b.heads, b.mlp_ratio,
                              tuple(self.data.image_size), b.dropout)

    def replace(self, **dotted):
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"head.K": 64})``."""
        data = self.to_dict()
        for key, value in dotted.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return parse_config(data)


def _type_ok(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _build(cls, data, prefix, errors):
    obj = cls()
    if not isinstance(data, dict):
        errors.append(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
        return obj
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            errors.append(f"{path}: unknown key")
            continue
        default = getattr(obj, key)
        if dataclasses.is_dataclass(default):
            setattr(obj, key, _build(type(default), value, path + ".", errors))
        elif not _type_ok(value, default):
            errors.append(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
        else:
            setattr(obj, key, float(value) if isinstance(default, float) else copy.deepcopy(value))
    return obj


def _constraints(c: RunConfig):
    def check(cond, msg):
        if not cond:
            errors.append(msg)

    errors = []
    check(len(c.data.image_size) == 2 and all(isinstance(v, int) and v > 0 for v in c.data.image_size),
          "data.image_size: must be two positive integers [H, W]")
    check(c.data.batch_size >= 1, "data.batch_size: must be >= 1")
    check(len(c.aug.crop_scale) == 2 and 0 < c.aug.crop_scale[0] <= c.aug.crop_scale[1] <= 1,
          "aug.crop_scale: must satisfy 0 < lo <= hi <= 1")
    check(0 <= c.aug.max_rotation <= 180, "aug.max_rotation: must lie in [0, 180]")
    check(c.aug.brightness >= 0, "aug.brightness: must be >= 0")
    check(0 <= c.aug.contrast < 1, "aug.contrast: must lie in [0, 1)")
    b = c.backbone
    check(b.patch_size >= 1, "backbone.patch_size: must be >= 1")
    check(b.embed_dim >= 1 and b.heads >= 1 and b.embed_dim % max(b.heads, 1) == 0,
          "backbone.embed_dim: must be divisible by backbone.heads")
    check(b.depth >= 1, "backbone.depth: must be >= 1")
    check(b.mlp_ratio > 0, "backbone.mlp_ratio: must be > 0")
    check(0 <= b.dropout < 1, "backbone.dropout: must lie in [0, 1)")
    if len(c.data.image_size) == 2 and b.patch_size >= 1:
        check(all(isinstance(v, int) and v % b.patch_size == 0 for v in c.data.image_size),
              "data.image_size: H and W must be divisible by backbone.patch_size")
    check(0.0 <= c.mask.ratio <= 1.0, "mask.ratio: must lie in [0, 1]")
    check(c.mask.mean_block_side >= 1.0, "mask.mean_block_side: must be >= 1")
    check(c.head.K >= 2, "head.K: must be >= 2")
    check(c.head.bottleneck >= 1 and c.head.hidden >= 1, "head.hidden/bottleneck: must be >= 1")
    check(c.decoder.bottleneck >= 1 and c.decoder.hidden >= 1, "decoder.hidden/bottleneck: must be >= 1")
    check(min(c.loss.alpha1, c.loss.alpha2, c.loss.alpha3) >= 0, "loss.alpha1..3: must be >= 0")
    check(c.temp.student > 0, "temp.student: must be > 0")
    check(0 < c.temp.teacher_start < c.temp.student and 0 < c.temp.teacher_end < c.temp.student,
          "temp.teacher_start/teacher_end: must satisfy 0 < teacher < student")
    check(c.temp.warmup_epochs >= 0, "temp.warmup_epochs: must be >= 0")
    check(0 <= c.center.momentum < 1, "center.momentum: must lie in [0, 1)")
    o = c.optim
    check(o.lr > 0 and 0 <= o.min_lr <= o.lr, "optim.lr/min_lr: must satisfy 0 <= min_lr <= lr, lr > 0")
    check(o.weight_decay >= 0, "optim.weight_decay: must be >= 0")
    check(o.warmup_epochs >= 0, "optim.warmup_epochs: must be >= 0")
    check(0 <= o.ema_start <= o.ema_end <= 1, "optim.ema_start/ema_end: must satisfy 0 <= start <= end <= 1")
    check(c.train.epochs >= 1, "train.epochs: must be >= 1")
    check(c.train.max_steps >= 0, "train.max_steps: must be >= 0")
    check(c.train.checkpoint_every >= 0, "train.checkpoint_every: must be >= 0")
    check(c.probe.epochs >= 1 and c.probe.lr > 0 and c.probe.batch_size >= 1,
          "probe: epochs, lr and batch_size must be positive")
    f = c.finetune
    check(f.epochs >= 1 and f.lr_backbone >= 0 and f.lr_head > 0 and f.batch_size >= 1,
          "finetune: epochs, lr_head and batch_size must be positive")
    s = c.seg
    check(len(s.taps) >= 1 and all(0 < t <= 1 for t in s.taps)
          and all(a < b for a, b in zip(s.taps, s.taps[1:])),
          "seg.taps: depth fractions must be strictly increasing within (0, 1]")
    check(len(s.channels) >= 1 and all(isinstance(ch, int) and ch >= 1 for ch in s.channels),
          "seg.channels: must be positive integers")
    check(s.classes >= 2, "seg.classes: must be >= 2")
    check(s.epochs >= 1 and s.batch_size >= 1, "seg: epochs and batch_size must be positive")
    check(c.cluster.restarts >= 1 and c.cluster.max_iter >= 1 and c.cluster.tol >= 0,
          "cluster: restarts and max_iter must be positive, tol >= 0")
    return errors


def parse_config(source=None) -> RunConfig:
    """Build a RunConfig from a JSON file path, a dict, or None (defaults).

    Every violation is collected before raising, so one error lists them all.
    """
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text()
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    errors = []
    cfg = _build(RunConfig, data, "", errors)
    if not errors:
        errors.extend(_constraints(cfg))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors), errors)
    return cfg


def save_config(cfg: RunConfig, path):
    Path(path).write_text(cfg.to_json() + "\n")
