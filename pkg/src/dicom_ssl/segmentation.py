"""2-D UNETR-style segmentation on the pre-trained encoder; Dice and HD95."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .classification import EvalReport
from .config import RunConfig
from .data import Dataset
from .errors import ConfigError, UndefinedMetricError
from .vit import VisionTransformer, depth_fraction_taps

# ---------------------------------------------------------------- metrics


def dice(pred, truth, cls=1):
    a = np.asarray(pred) == cls
    b = np.asarray(truth) == cls
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary(mask):
    """Foreground pixels with a 4-neighbour outside the mask (image edge counts
    as outside)."""
    m = np.asarray(mask, dtype=bool)
    pad = np.pad(m, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~interior


def hd95(pred, truth, cls=1):
    """Symmetric 95th-percentile boundary distance in pixels: the larger of
    the two directed 95th percentiles."""
    a = np.asarray(pred) == cls
    b = np.asarray(truth) == cls
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError(f"HD95 undefined: class {cls} absent from a mask")
    pa = np.argwhere(boundary(a)).astype(np.int64)
    pb = np.argwhere(boundary(b)).astype(np.int64)
    d_ab = kernels.directed_min_dist(pa, pb)
    d_ba = kernels.directed_min_dist(pb, pa)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


# ---------------------------------------------------------------- model


def _norm(ch):
    return nn.GroupNorm(math.gcd(8, ch), ch)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), _norm(cout), nn.GELU(),
            nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.GELU(),
        )


class UpBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.ConvTranspose2d(cin, cout, 2, stride=2), _norm(cout), nn.GELU())


class UNETR2D(nn.Module):
    """Token grids from several encoder depths are reshaped to 2-D maps and
    merged by a transposed-convolution decoder with skip connections.

    The decoder has log2(p) x2 upsampling stages. The deepest tap feeds the
    bottleneck, shallower taps join stages 1.. (extra taps share the
    second-to-last stage), and the full-resolution stage joins a direct
    convolution of the input image.
    """

    def __init__(self, backbone: VisionTransformer, tap_fractions=(0.25, 0.5, 0.75, 1.0),
                 channels=(64, 32, 16), classes=2):
        super().__init__()
        cfg = backbone.cfg
        p = cfg.patch_size
        n_stages = int(round(math.log2(p))) if p > 1 else 0
        if p < 2 or 2 ** n_stages != p:
            raise ConfigError(f"UNETR decoder needs a power-of-two patch size >= 2, got {p}")
        self.backbone = backbone
        self.grid = cfg.grid
        self.taps = depth_fraction_taps(cfg.depth, tap_fractions)
        skips = self.taps[:-1][::-1]
        self.stage_of = {t: min(i + 1, max(n_stages - 1, 1)) for i, t in enumerate(skips)}
        ch = [channels[min(s, len(channels) - 1)] for s in range(n_stages)]
        d = cfg.embed_dim
        self.bottleneck = ConvBlock(d, ch[0])
        self.skip_paths = nn.ModuleDict()
        for t, s in self.stage_of.items():
            layers, cin = [], d
            for k in range(s):
                layers.append(UpBlock(cin, ch[k]))
                cin = ch[k]
            self.skip_paths[str(t)] = nn.Sequential(*layers)
        self.image_path = ConvBlock(1, ch[-1])
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        prev = ch[0]
        for s in range(1, n_stages + 1):
            cout = ch[s - 1]
            self.ups.append(UpBlock(prev, cout))
            cin = cout + sum(ch[s - 1] for t, st in self.stage_of.items() if st == s)
            if s == n_stages:
                cin += ch[-1]
            self.fuse.append(ConvBlock(cin, cout))
            prev = cout
        self.out = nn.Conv2d(prev, classes, 1)

    def _grid(self, tokens):
        gh, gw = self.grid
        return tokens[:, 1:].transpose(1, 2).reshape(tokens.shape[0], -1, gh, gw)

    def forward(self, images):
        """N x H x W images -> N x classes x H x W scores."""
        if images.dim() == 3:
            images = images.unsqueeze(1)
        final, cache = self.backbone(images, cache_layers=True)
        last = self.taps[-1]
        deep = final if last == len(cache) else cache[last - 1]
        x = self.bottleneck(self._grid(deep))
        for s, (up, fuse) in enumerate(zip(self.ups, self.fuse), start=1):
            parts = [up(x)]
            for t, st in self.stage_of.items():
                if st == s:
                    parts.append(self.skip_paths[str(t)](self._grid(cache[t - 1])))
            if s == len(self.ups):
                parts.append(self.image_path(images))
            x = fuse(torch.cat(parts, dim=1))
        return self.out(x)


def unetr_forward(images, model: UNETR2D):
    """Per-pixel class scores laid out N x H x W x classes."""
    x = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
    return model(x).permute(0, 2, 3, 1)


def soft_dice_loss(logits, target, classes):
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, classes).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum((0, 2, 3))
    denom = probs.sum((0, 2, 3)) + onehot.sum((0, 2, 3))
    return 1.0 - ((2 * inter + 1.0) / (denom + 1.0))[1:].mean()


def segmentation_loss(logits, target, classes):
    return F.cross_entropy(logits, target) + soft_dice_loss(logits, target, classes)


# ---------------------------------------------------------------- harness


@torch.no_grad()
def predict_masks(model: UNETR2D, images, batch_size=32):
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    return torch.cat([model(x[i:i + batch_size]).argmax(1)
                      for i in range(0, len(x), batch_size)]).numpy()


def mask_metrics(preds, truths, cls=1):
    dices = [dice(p, t, cls) for p, t in zip(preds, truths)]
    hds = []
    for p, t in zip(preds, truths):
        try:
            hds.append(hd95(p, t, cls))
        except UndefinedMetricError:
            continue
    return {"dice": float(np.mean(dices)),
            "hd95": float(np.mean(hds)) if hds else None,
            "hd95_defined": len(hds), "n": len(dices)}


def train_segmentation(backbone: VisionTransformer, dataset: Dataset, cfg: RunConfig,
                       seed=None) -> EvalReport:
    """Fine-tune encoder + UNETR decoder on the dataset's masks."""
    if dataset.masks is None:
        raise ConfigError("segmentation needs a manifest with a mask column")
    s = cfg.seg
    if dataset.masks.max() >= s.classes:
        raise ConfigError(f"mask label {int(dataset.masks.max())} >= seg.classes={s.classes}")
    seed = cfg.seed if seed is None else seed
    train, val, test = (dataset.split(x) for x in ("train", "val", "test"))
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("dataset needs non-empty train and test splits")
    val = val if len(val) else test
    torch.manual_seed(seed)
    for p in backbone.parameters():
        p.requires_grad_(True)
    model = UNETR2D(backbone, s.taps, s.channels, s.classes)
    decoder_params = [p for n, p in model.named_parameters() if not n.startswith("backbone.")]
    opt = torch.optim.AdamW([
        {"params": model.backbone.parameters(), "lr": s.lr_backbone, "base_lr": s.lr_backbone},
        {"params": decoder_params, "lr": s.lr_decoder, "base_lr": s.lr_decoder},
    ], weight_decay=0.01)
    bs = min(s.batch_size, len(train))
    total_steps = s.epochs * math.ceil(len(train) / bs)
    report = EvalReport("segment", s.classes, config_fingerprint=cfg.fingerprint())
    step = 0
    dtype = next(model.parameters()).dtype
    for epoch in range(s.epochs):
        model.train()
        total = 0.0
        for batch in train.batches(bs, seed=seed, epoch=epoch):
            scale = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for g in opt.param_groups:
                g["lr"] = g["base_lr"] * scale
            logits = model(torch.as_tensor(batch.images, dtype=dtype))
            loss = segmentation_loss(logits, torch.as_tensor(batch.masks), s.classes)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            step += 1
        m = mask_metrics(predict_masks(model, val.images), val.masks)
        report.epochs.append({"epoch": epoch + 1, "train_loss": total / len(train),
                              "val_dice": m["dice"], "val_hd95": m["hd95"]})
    report.final = mask_metrics(predict_masks(model, test.images), test.masks)
    report.extra = {"taps": model.taps}
    return report
