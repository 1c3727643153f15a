"""Student-teacher pre-training loop: views, masks, losses, optimizer, EMA."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .config import RunConfig, parse_config
from .corruption import apply_mask, sample_batch_masks, target_count
from .data import AugPolicy, Dataset, ImageBatch, two_views
from .errors import CheckpointError, NonFiniteLossError
from .heads import ProjectionHead, ReconstructionDecoder
from .objective import (CenterStats, LossBundle, center, global_loss, local_loss,
                        recon_loss, teacher_temperature, total_loss)
from .vit import VisionTransformer, patchify

log = logging.getLogger(__name__)

CURVE_FIELDS = ["step", "epoch", "L_recons", "L_l", "L_g", "L"]


class EncoderNetwork(nn.Module):
    """Backbone + projection head (+ decoder for the student)."""

    def __init__(self, cfg: RunConfig, with_decoder=True, role="student"):
        super().__init__()
        bcfg = cfg.backbone_config()
        self.role = role
        self.backbone = VisionTransformer(bcfg)
        self.projection = ProjectionHead(bcfg.embed_dim, cfg.head.K, cfg.head.hidden,
                                         cfg.head.bottleneck)
        self.decoder = (ReconstructionDecoder(bcfg.embed_dim, bcfg.patch_size, bcfg.grid,
                                              cfg.decoder.hidden, cfg.decoder.bottleneck)
                        if with_decoder else None)

    def shared_parameters(self):
        """(name, param) for backbone + projection, the part mirrored by the teacher."""
        for prefix, mod in (("backbone.", self.backbone), ("projection.", self.projection)):
            for name, p in mod.named_parameters():
                yield prefix + name, p


def make_teacher(student: EncoderNetwork) -> EncoderNetwork:
    teacher = copy.deepcopy(student)
    teacher.decoder = None
    teacher.role = "teacher"
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


@torch.no_grad()
def ema_update(student, teacher, lam):
    """teacher <- lam * teacher + (1 - lam) * student, elementwise.

    Accepts EncoderNetworks (backbone + projection are updated) or plain
    tensors / lists of tensors.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1], got {lam}")
    if isinstance(student, EncoderNetwork):
        pairs = list(zip(student.shared_parameters(), teacher.shared_parameters()))
        for (ns, _), (nt, _) in pairs:
            if ns != nt:
                raise ValueError(f"parameter mismatch: {ns} vs {nt}")
        pairs = [(s, t) for (_, s), (_, t) in pairs]
    elif isinstance(student, torch.Tensor):
        pairs = [(student, teacher)]
    else:
        pairs = list(zip(student, teacher))
    for s, t in pairs:
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch: student {tuple(s.shape)} vs teacher {tuple(t.shape)}")
    for s, t in pairs:
        t.mul_(lam).add_(s.detach(), alpha=1.0 - lam)
    return teacher


def aug_policy(cfg: RunConfig) -> AugPolicy:
    a = cfg.aug
    return AugPolicy(crop=a.crop, crop_scale=tuple(a.crop_scale), rotate=a.rotate,
                     max_rotation=a.max_rotation, jitter=a.jitter,
                     brightness=a.brightness, contrast=a.contrast)


def cosine(step, total, start, end):
    if total <= 0:
        return end
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class TrainState:
    config: RunConfig
    student: EncoderNetwork
    teacher: EncoderNetwork
    center: CenterStats
    optimizer: torch.optim.Optimizer
    steps_per_epoch: int
    step: int = 0

    @property
    def epoch(self):
        return self.step // self.steps_per_epoch

    @property
    def seed(self):
        return self.config.seed

    @property
    def total_steps(self):
        total = self.config.train.epochs * self.steps_per_epoch
        if self.config.train.max_steps:
            total = min(total, self.config.train.max_steps)
        return total

    def lr(self, step=None):
        step = self.step if step is None else step
        o = self.config.optim
        warm = min(o.warmup_epochs * self.steps_per_epoch, self.total_steps)
        if step < warm:
            return o.lr * (step + 1) / warm
        return cosine(step - warm, self.total_steps - warm, o.lr, o.min_lr)

    def ema_momentum(self, step=None):
        step = self.step if step is None else step
        o = self.config.optim
        return cosine(step, self.total_steps, o.ema_start, o.ema_end)

    def teacher_temp(self):
        t = self.config.temp
        return teacher_temperature(self.epoch, t.teacher_start, t.teacher_end, t.warmup_epochs)


def _param_groups(student):
    decay, no_decay = [], []
    for name, p in student.named_parameters():
        if p.ndim < 2 or name.endswith(("pos_embed", "cls_token")):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "name": "decay"},
            {"params": no_decay, "name": "no_decay", "weight_decay": 0.0}]


def make_optimizer(student, cfg):
    return torch.optim.AdamW(_param_groups(student), lr=cfg.optim.lr,
                             weight_decay=cfg.optim.weight_decay)


def steps_per_epoch(n_train, batch_size):
    return max(1, n_train // batch_size)


def _centers(cfg):
    return (CenterStats(cfg.head.K, cfg.center.momentum),)


def init_state(cfg: RunConfig, n_train: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    student = EncoderNetwork(cfg, with_decoder=True)
    teacher = make_teacher(student)
    return TrainState(cfg, student, teacher, *_centers(cfg), make_optimizer(student, cfg),
                      steps_per_epoch(n_train, cfg.data.batch_size))


def step_rng(seed, step):
    """Generator for one training step; a pure function of (seed, step)."""
    return np.random.default_rng([int(seed), int(step), 0xD1C0])


def prepare_views(batch: ImageBatch, cfg: RunConfig, rng):
    """Two augmented clean views and their independently masked copies."""
    bcfg = cfg.backbone_config()
    views = two_views(batch, aug_policy(cfg), rng)
    out = []
    for view in (views.view1, views.view2):
        t = sample_batch_masks(len(view), bcfg.grid, cfg.mask.ratio, rng, cfg.mask.mean_block_side)
        out.append((view, apply_mask(view, t, bcfg.patch_size)))
    return out


def _gather(tokens, idx):
    return torch.gather(tokens, 1, idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


def compute_losses(state: TrainState, views, teacher_temp=None) -> tuple[LossBundle, dict]:
    """Forward pass of the full objective on prepared views.

    Only the class token and the masked data tokens go through the heads:
    both distillation terms and the masked reconstruction term ignore every
    other token, so the result equals the full-sequence computation.
    """
    cfg = state.config
    p = cfg.backbone.patch_size
    dtype = next(state.student.parameters()).dtype
    (v1, m1), (v2, m2) = views
    n_img = len(v1)
    clean = torch.from_numpy(np.concatenate([v1.images, v2.images])).to(dtype)
    masked = torch.from_numpy(np.concatenate([m1.corrupted.images, m2.corrupted.images])).to(dtype)
    tmask = np.concatenate([m1.token_mask, m2.token_mask])
    n_masked = int(tmask[0].sum())
    idx = torch.from_numpy(np.stack([np.flatnonzero(row) for row in tmask]).reshape(len(tmask), n_masked))
    sel = torch.cat([torch.zeros(len(tmask), 1, dtype=torch.int64), idx + 1], dim=1)

    tau_t = state.teacher_temp() if teacher_temp is None else teacher_temp
    tau_s = cfg.temp.student
    with torch.no_grad():
        z_t = state.teacher.projection(_gather(state.teacher.backbone(clean), sel))
        p_t = torch.softmax(center(z_t, state.center, state.student.training) / tau_t, dim=-1)

    tokens_s = _gather(state.student.backbone(masked), sel)
    z_s = state.student.projection(tokens_s)
    p_s = torch.softmax(z_s / tau_s, dim=-1)

    raw = cfg.loss.raw
    ones = torch.ones(len(tmask), n_masked, dtype=dtype)
    l_local = local_loss(p_t[:, 1:], p_s[:, 1:], ones, normalize=not raw)
    l_global = global_loss(p_t[:n_img, 0], p_s[n_img:, 0], p_t[n_img:, 0], p_s[:n_img, 0],
                           normalize=not raw)
    target = _gather(patchify(clean, p), idx)
    pred = state.student.decoder.patch_pixels(tokens_s[:, 1:])
    pix = torch.ones_like(pred)
    if raw:
        # literal masked sum per view, averaged over the two views
        l_recons = recon_loss(target, pred, pix, "sum") / 2.0
    else:
        l_recons = recon_loss(target, pred, pix, "mean")
    a = (cfg.loss.alpha1, cfg.loss.alpha2, cfg.loss.alpha3)
    extras = {"teacher_probs": p_t, "student_probs": p_s, "n_masked": n_masked}
    return total_loss(l_recons, l_local, l_global, a), extras


def train_step(batch: ImageBatch, state: TrainState) -> tuple[TrainState, LossBundle]:
    """One optimizer step on the student, then one EMA step on the teacher."""
    cfg = state.config
    rng = step_rng(cfg.seed, state.step)
    torch.manual_seed(int(rng.integers(2 ** 31)))
    state.student.train()
    views = prepare_views(batch, cfg, rng)
    bundle, _ = compute_losses(state, views)
    if not bundle.is_finite():
        raise NonFiniteLossError(bundle.as_floats())

    if any(a > 0 for a in bundle.alphas):
        lr = state.lr()
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        state.optimizer.zero_grad(set_to_none=True)
        bundle.total.backward()
        state.optimizer.step()
        state.student.projection.renormalize_()
    ema_update(state.student, state.teacher, state.ema_momentum())
    state.step += 1
    return state, bundle


# ---------------------------------------------------------------- checkpoints

def _state_tensors(state: TrainState) -> dict:
    tensors = {}
    for name, t in state.student.state_dict().items():
        tensors["student." + name] = t
    for name, t in state.teacher.state_dict().items():
        tensors["teacher." + name] = t
    tensors["center.mean"] = state.center.mean
    tensors["center.std"] = state.center.std
    names = {id(p): n for n, p in state.student.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if st:
                tensors[f"optim.{names[id(p)]}.exp_avg"] = st["exp_avg"]
                tensors[f"optim.{names[id(p)]}.exp_avg_sq"] = st["exp_avg_sq"]
    return tensors


def save_checkpoint(state: TrainState, path):
    names = {id(p): n for n, p in state.student.named_parameters()}
    optim_steps = {}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if st:
                optim_steps[names[id(p)]] = int(st["step"])
    meta = {
        "counters": {"step": state.step, "epoch": state.epoch,
                     "steps_per_epoch": state.steps_per_epoch, "optim_steps": optim_steps},
        "rng": {"seed": state.config.seed,
                "scheme": "numpy.default_rng([seed, step, 0xD1C0]) per step"},
        "config": state.config.to_dict(),
    }
    return ckpt.write_tensors(path, _state_tensors(state), meta)


def load_checkpoint(path, config: RunConfig | None = None) -> TrainState:
    """Rebuild a TrainState. With ``config`` given, architecture mismatches
    between it and the stored tensors are reported all at once."""
    manifest = ckpt.read_manifest(path)
    stored_cfg = parse_config(manifest["config"])
    cfg = config or stored_cfg
    counters = manifest["counters"]
    torch.manual_seed(cfg.seed)
    student = EncoderNetwork(cfg, with_decoder=True)
    teacher = make_teacher(student)
    state = TrainState(cfg, student, teacher, *_centers(cfg), make_optimizer(student, cfg),
                       counters["steps_per_epoch"], counters["step"])
    expected = {k: tuple(v.shape) for k, v in _state_tensors(state).items()}
    names = {n: p for n, p in student.named_parameters()}
    for pname in counters.get("optim_steps", {}):
        if pname in names:
            expected[f"optim.{pname}.exp_avg"] = tuple(names[pname].shape)
            expected[f"optim.{pname}.exp_avg_sq"] = tuple(names[pname].shape)
    found = {r["name"]: r["shape"] for r in manifest["tensors"]}
    ckpt.check_shapes(expected, found)
    _, tensors = ckpt.read_tensors(path)

    def sub(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    student.load_state_dict(sub("student."))
    teacher.load_state_dict(sub("teacher."))
    state.center.mean.copy_(tensors["center.mean"])
    state.center.std.copy_(tensors["center.std"])
    for pname, n in counters.get("optim_steps", {}).items():
        p = names[pname]
        state.optimizer.state[p] = {
            "step": torch.tensor(float(n)),
            "exp_avg": tensors[f"optim.{pname}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"optim.{pname}.exp_avg_sq"].clone(),
        }
    return state


# ---------------------------------------------------------------- full loop

def _rewrite_curve(path, upto_step):
    rows = []
    if path.is_file():
        with path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= upto_step]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def pretrain(dataset: Dataset, cfg: RunConfig, out_dir, resume=None, max_steps=None,
             on_step=None) -> TrainState:
    """Run pre-training on the train split; writes checkpoints and loss_curve.csv.

    ``max_steps`` stops early (for tests) without changing the schedules.
    Resuming from a checkpoint continues bit-identically, since every step's
    randomness is derived from (seed, step).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = dataset.split("train")
    if len(train) == 0:
        train = dataset
    if resume is not None:
        state = load_checkpoint(resume, cfg)
        if state.steps_per_epoch != steps_per_epoch(len(train), cfg.data.batch_size):
            raise CheckpointError("checkpoint steps_per_epoch does not match this dataset/batch size")
    else:
        state = init_state(cfg, len(train))
    curve_path = out / "loss_curve.csv"
    _rewrite_curve(curve_path, state.step)
    stop = state.total_steps if max_steps is None else min(state.total_steps, max_steps)
    bs = min(cfg.data.batch_size, len(train))
    every = cfg.train.checkpoint_every

    with curve_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        while state.step < stop:
            epoch, pos = state.epoch, state.step % state.steps_per_epoch
            batches = list(train.batches(bs, seed=cfg.seed, epoch=epoch, drop_last=True))
            for batch in batches[pos:state.steps_per_epoch]:
                state, bundle = train_step(batch, state)
                f = bundle.as_floats()
                writer.writerow([state.step, epoch, f["L_recons"], f["L_l"], f["L_g"], f["L"]])
                if on_step is not None:
                    on_step(state, bundle)
                if state.step >= stop:
                    break
            fh.flush()
            if every and state.step % state.steps_per_epoch == 0 and state.epoch % every == 0:
                save_checkpoint(state, out / "checkpoints" / f"epoch_{state.epoch:04d}")
            log.info("epoch %d step %d loss %.4f", epoch, state.step, f["L"])
    save_checkpoint(state, out / "checkpoint")
    return state


def load_student_backbone(path, config: RunConfig | None = None) -> tuple[VisionTransformer, RunConfig]:
    """Student encoder E(.) from any conforming checkpoint; decoder not needed."""
    manifest = ckpt.read_manifest(path)
    stored = parse_config(manifest["config"])
    cfg = config or stored
    model = VisionTransformer(cfg.backbone_config())
    ckpt.load_module(model, path, "student.backbone.")
    return model, cfg


@torch.no_grad()
def teacher_class_entropy(state: TrainState, images) -> float:
    """Mean entropy (nats) of centred + sharpened teacher class-token
    distributions on clean images; running centre stats are left untouched."""
    dtype = next(state.teacher.parameters()).dtype
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    z = state.teacher.projection(state.teacher.backbone(x)[:, 0])
    p = torch.softmax(center(z, state.center, training=False) / state.teacher_temp(), dim=-1)
    return float(-(p * torch.log(p.clamp(min=1e-30))).sum(-1).mean())
