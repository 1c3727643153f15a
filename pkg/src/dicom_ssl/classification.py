"""Linear probing, fine-tuning, and the threshold-free classification metrics."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .config import RunConfig
from .data import Dataset, augment
from .errors import ConfigError, UndefinedMetricError
from .vit import VisionTransformer

# ---------------------------------------------------------------- metrics


def accuracy(preds, labels):
    preds, labels = np.asarray(preds).ravel(), np.asarray(labels).ravel()
    if len(preds) != len(labels) or len(labels) == 0:
        raise ValueError("preds and labels must be non-empty and equally long")
    return float(np.mean(preds == labels))


def _ranked_counts(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if len(scores) != len(labels) or len(labels) == 0:
        raise ValueError("scores and labels must be non-empty and equally long")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("binary metrics need labels in {0, 1}")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("metric undefined for a single-class label vector")
    order = np.argsort(-scores, kind="mergesort")
    tp, fp = kernels.tie_grouped_counts(np.ascontiguousarray(scores[order]),
                                        np.ascontiguousarray(labels[order], dtype=np.int64))
    return tp, fp, n_pos, n_neg


def _one_vs_rest(metric, scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    values = []
    for c in range(scores.shape[1]):
        try:
            values.append(metric(scores[:, c], (labels == c).astype(np.int64)))
        except UndefinedMetricError:
            continue
    if not values:
        raise UndefinedMetricError("no class has both positives and negatives")
    return float(np.mean(values))


def aupr(scores, labels):
    """Average precision: descending-score sweep, tied scores form one step.

    2-D ``scores`` (N x C) give the one-vs-rest macro average.
    """
    if np.ndim(scores) == 2:
        return _one_vs_rest(aupr, scores, labels)
    tp, fp, n_pos, _ = _ranked_counts(scores, labels)
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.concatenate([[0], tp])) / n_pos
    return float(np.sum(precision * recall_gain))


def auc(scores, labels):
    """ROC AUC (Mann-Whitney statistic, ties count one half)."""
    if np.ndim(scores) == 2:
        return _one_vs_rest(auc, scores, labels)
    tp, fp, n_pos, n_neg = _ranked_counts(scores, labels)
    tp = np.concatenate([[0], tp]).astype(np.float64)
    fp = np.concatenate([[0], fp]).astype(np.float64)
    return float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])) / (2.0 * n_pos * n_neg))


def _maybe(metric, *args):
    try:
        return metric(*args)
    except UndefinedMetricError:
        return None


def classification_metrics(logits, labels, n_classes):
    """ACC, AUPR, AUC (macro one-vs-rest beyond two classes) and confusion counts."""
    logits = torch.as_tensor(logits)
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    labels = np.asarray(labels)
    preds = probs.argmax(1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    scores = probs[:, 1] if n_classes == 2 else probs
    return {"acc": accuracy(preds, labels), "aupr": _maybe(aupr, scores, labels),
            "auc": _maybe(auc, scores, labels), "confusion": confusion.tolist()}


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    task: str
    n_classes: int
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    soc: float | None = None
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write(self, path, **meta):
        payload = {**self.to_dict(), **meta}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def curve(self, key="val_aupr"):
        return [e[key] for e in self.epochs]


def soc(aupr_by_epoch):
    """Speed of convergence: normalised trapezoidal area under the running
    maximum of the per-epoch AUPR curve."""
    seq = np.asarray(list(aupr_by_epoch), dtype=np.float64)
    if seq.size == 0:
        raise ValueError("SoC needs at least one epoch")
    if np.any(np.isnan(seq)) or seq.min() < 0 or seq.max() > 1:
        raise ValueError("SoC inputs must lie in [0, 1]")
    run = np.maximum.accumulate(seq)
    if len(run) == 1:
        return float(run[0])
    return float(np.sum((run[1:] + run[:-1]) / 2.0) / (len(run) - 1))


# ---------------------------------------------------------------- harness


def module_digest(module: nn.Module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def class_token_features(backbone: VisionTransformer, images, batch_size=64):
    """Final-layer (post-norm) class-token embeddings in eval mode."""
    was_training = backbone.training
    backbone.eval()
    dtype = next(backbone.parameters()).dtype
    images = torch.as_tensor(np.asarray(images), dtype=dtype)
    out = [backbone(images[i:i + batch_size])[:, 0] for i in range(0, len(images), batch_size)]
    backbone.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, backbone.cfg.embed_dim, dtype=dtype)


class Classifier(nn.Module):
    def __init__(self, backbone: VisionTransformer, n_classes):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.cfg.embed_dim, n_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, images):
        return self.head(self.backbone(images)[:, 0])


def _check_classes(dataset: Dataset):
    n_classes = dataset.manifest.n_classes
    labels = dataset.labels[dataset.labels >= 0]
    if n_classes < 2:
        raise ConfigError(f"classification needs >= 2 classes, manifest has {n_classes}")
    if labels.size and labels.max() >= n_classes:
        raise ConfigError(f"label {int(labels.max())} exceeds the {n_classes}-class table")
    return n_classes


def _splits(dataset: Dataset):
    train, val, test = (dataset.split(s) for s in ("train", "val", "test"))
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("dataset needs non-empty train and test splits")
    return train, (val if len(val) else test), test


def probe_on_features(features: dict, n_classes: int, cfg: RunConfig, seed=None,
                      task="probe") -> tuple[nn.Linear, EvalReport]:
    """Fit a linear layer on fixed embeddings.

    ``features`` maps ``train``/``val``/``test`` to ``(N x d tensor, labels)``.
    Validation metrics are logged per epoch; ``final`` holds test metrics.
    """
    seed = cfg.seed if seed is None else seed
    f_train, y_train = features["train"]
    y_train = torch.as_tensor(np.asarray(y_train))
    torch.manual_seed(seed)
    head = nn.Linear(f_train.shape[1], n_classes).to(f_train.dtype)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.probe.lr, weight_decay=0.0)
    report = EvalReport(task, n_classes, config_fingerprint=cfg.fingerprint())
    bs = cfg.probe.batch_size
    for epoch in range(cfg.probe.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(f_train))
        total = 0.0
        for start in range(0, len(order), bs):
            idx = torch.as_tensor(order[start:start + bs])
            loss = F.cross_entropy(head(f_train[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        with torch.no_grad():
            m = classification_metrics(head(features["val"][0]), features["val"][1], n_classes)
        report.epochs.append({"epoch": epoch + 1, "train_loss": total / len(f_train),
                              "val_acc": m["acc"], "val_aupr": m["aupr"], "val_auc": m["auc"]})
    with torch.no_grad():
        report.final = classification_metrics(head(features["test"][0]), features["test"][1],
                                              n_classes)
    report.soc = _soc_or_none(report.curve())
    return head, report


def linear_probe(backbone: VisionTransformer, dataset: Dataset, cfg: RunConfig,
                 seed=None) -> EvalReport:
    """Train a linear layer on frozen class-token features."""
    n_classes = _check_classes(dataset)
    splits = dict(zip(("train", "val", "test"), _splits(dataset)))
    for p in backbone.parameters():
        p.requires_grad_(False)
    before = module_digest(backbone)
    features = {name: (class_token_features(backbone, ds.images), ds.labels)
                for name, ds in splits.items()}
    _, report = probe_on_features(features, n_classes, cfg, seed)
    after = module_digest(backbone)
    if before != after:
        raise RuntimeError("frozen backbone changed during probing")
    report.extra = {"backbone_sha256_before": before, "backbone_sha256_after": after}
    return report


def _soc_or_none(curve):
    if any(v is None for v in curve):
        return None
    return soc(curve)


def fine_tune(backbone: VisionTransformer, dataset: Dataset, cfg: RunConfig,
              seed=None) -> EvalReport:
    """Train backbone and linear head end to end; per-epoch validation metrics."""
    n_classes = _check_classes(dataset)
    seed = cfg.seed if seed is None else seed
    f = cfg.finetune
    train, val, test = _splits(dataset)
    torch.manual_seed(seed)
    for p in backbone.parameters():
        p.requires_grad_(True)
    model = Classifier(backbone, n_classes).to(next(backbone.parameters()).dtype)
    opt = torch.optim.AdamW([
        {"params": model.backbone.parameters(), "lr": f.lr_backbone, "base_lr": f.lr_backbone},
        {"params": model.head.parameters(), "lr": f.lr_head, "base_lr": f.lr_head},
    ], weight_decay=f.weight_decay)
    bs = min(f.batch_size, len(train))
    spe = math.ceil(len(train) / bs)
    total_steps = f.epochs * spe
    policy = None
    if f.augment:
        from .pretrain import aug_policy
        policy = aug_policy(cfg)
    dtype = next(model.parameters()).dtype
    report = EvalReport("finetune", n_classes, config_fingerprint=cfg.fingerprint())
    step = 0
    for epoch in range(f.epochs):
        model.train()
        total = 0.0
        rng = np.random.default_rng([seed, epoch, 7])
        for batch in train.batches(bs, seed=seed, epoch=epoch):
            if policy is not None:
                batch, _ = augment(batch, policy, rng)
            scale = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for g in opt.param_groups:
                g["lr"] = g["base_lr"] * scale
            x = torch.as_tensor(batch.images, dtype=dtype)
            loss = F.cross_entropy(model(x), torch.as_tensor(batch.labels))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            step += 1
        m = _evaluate(model, val)
        report.epochs.append({"epoch": epoch + 1, "train_loss": total / len(train),
                              "val_acc": m["acc"], "val_aupr": m["aupr"], "val_auc": m["auc"]})
    report.final = _evaluate(model, test)
    report.soc = _soc_or_none(report.curve())
    return report


@torch.no_grad()
def _evaluate(model: Classifier, ds: Dataset):
    model.eval()
    dtype = next(model.parameters()).dtype
    logits = torch.cat([model(torch.as_tensor(b.images, dtype=dtype))
                        for b in ds.batches(64, shuffle=False)])
    return classification_metrics(logits, ds.labels, model.head.out_features)
