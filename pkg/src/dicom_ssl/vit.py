"""Patch tokenization and the ViT encoder (class token + n data tokens)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    image_size: tuple = (64, 64)
    dropout: float = 0.0

    def __post_init__(self):
        h, w = self.image_size
        problems = []
        if h % self.patch_size or w % self.patch_size:
            problems.append(f"image size {h}x{w} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            problems.append(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if problems:
            raise ConfigError("; ".join(problems), problems)

    @property
    def grid(self):
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_tokens(self):
        gh, gw = self.grid
        return gh * gw


def patchify(images, p):
    """(..., H, W) -> (..., n, p*p) in row-major patch order.

    Works on numpy arrays and torch tensors alike.
    """
    h, w = images.shape[-2:]
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    lead = images.shape[:-2]
    x = images.reshape(*lead, h // p, p, w // p, p).swapaxes(-3, -2)
    return x.reshape(*lead, (h // p) * (w // p), p * p)


def unpatchify(patches, p, image_size):
    h, w = image_size
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, h // p, w // p, p, p).swapaxes(-3, -2)
    return x.reshape(*lead, h, w)


class Attention(nn.Module):
    def __init__(self, dim, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        attn = F.dropout(attn, self.dropout, self.training)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return F.dropout(self.proj(x), self.dropout, self.training)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0, dropout=0.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dropout = dropout

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        h = F.gelu(self.fc1(self.norm2(x)))
        return x + F.dropout(self.fc2(h), self.dropout, self.training)


class VisionTransformer(nn.Module):
    """Encoder E(.) over single-channel images.

    Masked patches arrive already zeroed in pixel space, so there is no mask
    token: they go through the same patch projection as everything else.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(1, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_tokens + 1, d))
        self.blocks = nn.ModuleList(
            [Block(d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        w = self.patch_embed.weight
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        nn.init.zeros_(self.patch_embed.bias)
        for m in self.blocks.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def embed(self, images):
        if images.dim() == 3:
            images = images.unsqueeze(1)
        h, w = images.shape[-2:]
        if (h, w) != tuple(self.cfg.image_size):
            raise ConfigError(f"input {h}x{w} does not match backbone image size "
                              f"{self.cfg.image_size[0]}x{self.cfg.image_size[1]}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def forward(self, images, cache_layers=False):
        """N x H x W (or N x 1 x H x W) -> N x (n+1) x d, final-norm applied.

        With ``cache_layers`` the per-block outputs (pre final norm) are also
        returned, index i holding the output of block i+1.
        """
        x = self.embed(images)
        cache = []
        for blk in self.blocks:
            x = blk(x)
            if cache_layers:
                cache.append(x)
        x = self.norm(x)
        return (x, cache) if cache_layers else x


def encode(images, model: VisionTransformer, cache_layers=False):
    """Run the encoder on a float image tensor or array."""
    x = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
    return model(x, cache_layers=cache_layers)


def depth_fraction_taps(depth, fractions=(0.25, 0.5, 0.75, 1.0)):
    """Block indices (1-based) at the given depth fractions, deduplicated."""
    taps = []
    for f in fractions:
        t = min(depth, max(1, math.ceil(depth * f - 1e-9)))
        if not taps or t > taps[-1]:
            taps.append(t)
    return taps
