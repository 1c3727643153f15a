"""Single entry point: ``dicom-ssl <subcommand>``.

Reports are JSON, curves CSV. Every artifact-producing run also writes the
resolved config and the package version next to its outputs. Failures exit
1 with a JSON error record on stderr; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, parse_config, save_config
from .errors import ConfigError, DataError, DicomSSLError

log = logging.getLogger("dicom_ssl")


def version_string():
    return f"dicom-ssl {__version__}"


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _snapshot(out_dir, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved.json")
    (out / "VERSION").write_text(version_string() + "\n")


def _report_path(args):
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_data(args, cfg):
    from .data import load_dataset
    return load_dataset(args.data, cfg.data.image_size, cfg.backbone.patch_size)


def _backbone(args, cfg):
    from .pretrain import load_student_backbone
    if args.ckpt is None:
        import torch
        from .vit import VisionTransformer
        torch.manual_seed(cfg.seed)
        return VisionTransformer(cfg.backbone_config()), cfg
    user_cfg = cfg if args.config else None
    backbone, ckpt_cfg = load_student_backbone(args.ckpt, user_cfg)
    if user_cfg is None:
        # architecture comes from the checkpoint; task settings from defaults/flags
        cfg = cfg.replace(backbone=ckpt_cfg.to_dict()["backbone"],
                          **{"data.image_size": ckpt_cfg.data.image_size})
    return backbone, cfg


def cmd_gen_synth(args):
    from .data import generate_synthetic
    manifest = generate_synthetic(args.out, args.per_class, args.classes, args.size, args.seed or 0)
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(json.dumps({"out": str(args.out), "images": len(manifest.entries), **counts}))
    (Path(args.out) / "VERSION").write_text(version_string() + "\n")


def cmd_pretrain(args):
    from .pretrain import pretrain
    cfg = _load_config(args)
    if args.data is None:
        raise ConfigError("pretrain needs --data MANIFEST")
    data = _load_data(args, cfg)
    _snapshot(args.out, cfg)
    state = pretrain(data, cfg, args.out, resume=args.resume, max_steps=args.max_steps)
    print(json.dumps({"checkpoint": str(Path(args.out) / "checkpoint"), "step": state.step}))


def _report_cmd(task):
    def run(args):
        cfg = _load_config(args)
        backbone, cfg = _backbone(args, cfg)
        data = _load_data(args, cfg)
        if task == "probe":
            from .classification import linear_probe
            report = linear_probe(backbone, data, cfg)
        elif task == "finetune":
            from .classification import fine_tune
            report = fine_tune(backbone, data, cfg)
        else:
            from .segmentation import train_segmentation
            report = train_segmentation(backbone, data, cfg)
        path = _report_path(args)
        report.write(path, version=version_string(), config=cfg.to_dict())
        save_config(cfg, path.with_suffix(".config.json"))
        print(json.dumps({"report": str(path), "final": report.final, "soc": report.soc}))
    return run


def cmd_cluster_eval(args):
    from .representation import cluster_eval, export_embeddings
    cfg = _load_config(args)
    backbone, cfg = _backbone(args, cfg)
    data = _load_data(args, cfg)
    if args.split != "all":
        data = data.split(args.split)
        if len(data) < 2:
            raise DataError(f"split {args.split!r} has fewer than 2 images")
    report, emb = cluster_eval(backbone, data, cfg)
    path = _report_path(args)
    payload = {**report, "split": args.split, "version": version_string(),
               "config": cfg.to_dict(), "config_fingerprint": cfg.fingerprint()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    save_config(cfg, path.with_suffix(".config.json"))
    if args.embeddings:
        export_embeddings(args.embeddings, emb)
    print(json.dumps({"report": str(path), "rand_index": report["rand_index"],
                      "silhouette": report["silhouette"]}))


def cmd_soc(args):
    from .classification import soc
    path = Path(args.curve)
    if not path.is_file():
        raise DataError(f"curve file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if args.column not in (reader.fieldnames or []):
            raise DataError(f"{path}: no column {args.column!r} (have {reader.fieldnames})")
        values = [float(row[args.column]) for row in reader if row[args.column] != ""]
    result = {"soc": soc(values), "column": args.column, "epochs": len(values),
              "curve": str(path), "version": version_string()}
    if args.out:
        _report_path(args).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults fill the rest)")
    common.add_argument("--seed", type=int, help="override the config seed")

    parser = argparse.ArgumentParser(prog="dicom-ssl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", parents=[common], help="student-teacher pre-training")
    p.add_argument("--data", help="manifest CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many steps in total")
    p.set_defaults(func=cmd_pretrain)

    for name, task, text in (("probe", "probe", "linear probe on a frozen encoder"),
                             ("finetune", "finetune", "fine-tune encoder + linear head"),
                             ("segment", "segment", "UNETR segmentation transfer")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ckpt", help="checkpoint directory (omit for random init)")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=_report_cmd(task))

    p = sub.add_parser("cluster-eval", parents=[common], help="Rand index + silhouette")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--embeddings", help="also export embeddings CSV here")
    p.set_defaults(func=cmd_cluster_eval)

    p = sub.add_parser("soc", parents=[common], help="speed of convergence of a metric curve")
    p.add_argument("--curve", required=True)
    p.add_argument("--column", default="AUPR")
    p.add_argument("--out")
    p.set_defaults(func=cmd_soc)
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("DICOM_SSL_LOG", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except DicomSSLError as exc:
        record = {"error": exc.code, "message": str(exc)}
        if isinstance(exc, ConfigError):
            record["violations"] = exc.violations
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
