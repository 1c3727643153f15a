"""Loss terms: masked l1 reconstruction, teacher centering, temperature
sharpening, local (per-token) and global (class-token) distillation."""
from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_FLOOR = 1e-8
STD_FLOOR = 1e-5


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def recon_loss(x, x_bar, mask, mode="sum"):
    """Masked l1 loss. ``sum`` adds |x - x_bar| over masked pixels; ``mean``
    divides that by max(#masked, 1)."""
    x, x_bar, mask = _t(x), _t(x_bar), _t(mask)
    if x.shape != x_bar.shape or x.shape != mask.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, x_bar {tuple(x_bar.shape)}, "
                         f"mask {tuple(mask.shape)}")
    mask = mask.to(x_bar.dtype)
    total = (mask * (x - x_bar).abs()).sum()
    if mode == "sum":
        return total
    if mode == "mean":
        return total / mask.sum().clamp(min=1.0)
    raise ValueError(f"unknown reduction {mode!r}")


class CenterStats:
    """Non-adaptive batch normalisation of teacher logits with running stats."""

    def __init__(self, dim, momentum=0.9, eps=STD_FLOOR, dtype=torch.float32):
        self.momentum = momentum
        self.eps = eps
        self.mean = torch.zeros(dim, dtype=dtype)
        self.std = torch.ones(dim, dtype=dtype)

    @property
    def dim(self):
        return self.mean.shape[0]

    @torch.no_grad()
    def update(self, z):
        flat = z.reshape(-1, z.shape[-1]).to(self.mean.dtype)
        m = self.momentum
        self.mean.mul_(m).add_(flat.mean(0), alpha=1 - m)
        self.std.mul_(m).add_(flat.std(0, unbiased=False), alpha=1 - m)


def center(z_t, stats: CenterStats, training=False):
    """(z_t - mean) / max(std, eps); in training the stats absorb this batch
    only after the output has been computed. No gradient flows back."""
    z_t = _t(z_t).detach()
    if z_t.shape[-1] != stats.dim:
        raise ValueError(f"logit dim {z_t.shape[-1]} != center dim {stats.dim}")
    mean = stats.mean.to(z_t.dtype)
    std = stats.std.to(z_t.dtype).clamp(min=stats.eps)
    out = (z_t - mean) / std
    if training:
        stats.update(z_t)
    return out


def sharpen(logits, tau):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return torch.softmax(_t(logits) / tau, dim=-1)


def _check_rows(p, name):
    sums = p.detach().sum(-1)
    if sums.numel() and (sums - 1).abs().max() > 1e-4:
        raise ValueError(f"{name} rows must sum to 1 (max deviation "
                         f"{float((sums - 1).abs().max()):.3g})")


def cross_entropy(p_t, p_s):
    """-sum_j p_t log p_s along the last axis, logs floored at LOG_FLOOR."""
    return -(p_t * torch.log(p_s.clamp(min=LOG_FLOOR))).sum(-1)


def local_loss(p_t, p_s, token_mask, normalize=False):
    """Token-level distillation over masked tokens.

    ``p_t``, ``p_s``: N x n x K probabilities; ``token_mask``: N x n (1 = masked).
    With ``normalize`` the sum is divided by the masked-token count.
    """
    p_t, p_s = _t(p_t), _t(p_s)
    token_mask = _t(token_mask).to(p_s.dtype)
    if p_t.shape != p_s.shape or p_t.shape[:-1] != token_mask.shape:
        raise ValueError(f"shape mismatch: p_t {tuple(p_t.shape)}, p_s {tuple(p_s.shape)}, "
                         f"mask {tuple(token_mask.shape)}")
    _check_rows(p_t, "teacher")
    _check_rows(p_s, "student")
    total = (token_mask * cross_entropy(p_t, p_s)).sum()
    if normalize:
        total = total / token_mask.sum().clamp(min=1.0)
    return total


def global_loss(p_t1, p_s2, p_t2, p_s1, normalize=False):
    """Cross-view class-token loss: teacher view 1 vs student view 2 plus
    teacher view 2 vs student view 1, summed over the batch (N x K inputs)."""
    p_t1, p_s2, p_t2, p_s1 = (_t(p) for p in (p_t1, p_s2, p_t2, p_s1))
    for name, p in (("p_t1", p_t1), ("p_s2", p_s2), ("p_t2", p_t2), ("p_s1", p_s1)):
        if p.shape != p_t1.shape:
            raise ValueError(f"{name} shape {tuple(p.shape)} != {tuple(p_t1.shape)}")
        _check_rows(p, name)
    total = cross_entropy(p_t1, p_s2).sum() + cross_entropy(p_t2, p_s1).sum()
    if normalize:
        total = total / p_t1.shape[0]
    return total


@dataclass
class LossBundle:
    recons: torch.Tensor
    local: torch.Tensor
    glob: torch.Tensor
    total: torch.Tensor
    alphas: tuple = (1.0, 1.0, 1.0)

    def as_floats(self):
        vals = (self.recons, self.local, self.glob, self.total)
        return {k: float(torch.as_tensor(v).detach())
                for k, v in zip(("L_recons", "L_l", "L_g", "L"), vals)}

    def is_finite(self):
        return all(torch.isfinite(torch.as_tensor(v)).all()
                   for v in (self.recons, self.local, self.glob, self.total))


def total_loss(recons, local, glob, alphas=(1.0, 1.0, 1.0)) -> LossBundle:
    a1, a2, a3 = alphas
    recons, local, glob = _t(recons), _t(local), _t(glob)
    return LossBundle(recons, local, glob, a1 * recons + a2 * local + a3 * glob, tuple(alphas))


def teacher_temperature(epoch, start=0.04, end=0.07, warmup_epochs=30):
    """Linear warm-up of the teacher temperature, constant afterwards."""
    if warmup_epochs <= 0 or epoch >= warmup_epochs:
        return end
    return start + (end - start) * epoch / warmup_epochs
