"""Command-line entry point: ``fusionseg <command> ...``.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data.dataset import DataIOError, build_dataset, read_image, write_image
from .evaluate import fusion_csv, fusion_summary, seg_csv, seg_summary, write_json
from .metrics import fusion_report, seg_report
from .models.seg import predict_mask
from .nn import from_windows
from .pipeline import run_pretrain, run_train
from .tensor import Tensor, no_grad
from .train.hypergrad import verify_hypergrad
from .train.stages import NonFiniteLoss, load_models

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DEMO_CKPT = "assets/demo.f4sg"


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _models(ckpt: str):
    """Load a checkpoint path; ``demo`` names the small checkpoint shipped with the package."""
    if ckpt == "demo":
        from importlib import resources
        return load_models(checkpoint.loads(resources.files("fusionseg").joinpath(DEMO_CKPT).read_bytes()))
    return load_models(checkpoint.load(ckpt))


def _load_pair(m1, m2) -> tuple[np.ndarray, np.ndarray]:
    a, b = read_image(m1), read_image(m2)
    if a.shape != b.shape:
        raise UsageError(f"input sizes differ: {m1} is {a.shape}, {m2} is {b.shape}")
    _check_size(a.shape, m1)
    return a, b


def _check_size(shape, path) -> None:
    if shape[0] % 8 or shape[1] % 8:
        raise UsageError(f"{path}: image size {shape} must be a multiple of 8")


def attention_heatmap(maps, n: int, h: int, w: int) -> np.ndarray:
    """Mean attention each low-band position receives, upsampled to image size and scaled to [0, 1]."""
    a = maps[0].data                               # [N * windows, T, T]
    hl, wl = h // 4, w // 4
    ws = int(round(np.sqrt(a.shape[-1])))
    recv = a.mean(axis=1)[..., None]               # [N * windows, T, 1]
    grid = from_windows(Tensor(recv), n, hl, wl, ws).data[:, 0]
    up = np.kron(grid, np.ones((4, 4)))
    lo, hi = up.min(axis=(1, 2), keepdims=True), up.max(axis=(1, 2), keepdims=True)
    return (up - lo) / np.where(hi > lo, hi - lo, 1.0)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    if args.size % 8 or args.size < 32:
        raise UsageError(f"--size must be a multiple of 8 and >= 32, got {args.size}")
    if args.cases < 1:
        raise UsageError("--cases must be positive")
    build_dataset(args.cases, args.seed, args.out, size=args.size)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    res = run_pretrain(_config(args), args.data, args.out)
    print(json.dumps(res))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.init is None and cfg.seg_input == "fused":
        raise UsageError("train needs --init <pretrain checkpoint> (or seg_input = m1 / m2)")
    summary = run_train(cfg, args.data, args.out, init=args.init)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_fuse(args) -> int:
    models = _models(args.ckpt)
    a, b = _load_pair(args.m1, args.m2)
    with no_grad():
        fused = models.fusion.fuse(Tensor(a[None, None]), Tensor(b[None, None]))
    write_image(args.out, fused.image.data[0, 0])
    if args.attn_out:
        if fused.attn_maps is None:
            raise UsageError("checkpoint has no cross-attention (no_cross_attention ablation)")
        write_image(args.attn_out, attention_heatmap(fused.attn_maps, 1, *a.shape)[0])
    print(args.out)
    return EXIT_OK


def cmd_segment(args) -> int:
    models = _models(args.ckpt)
    if args.fused:
        if args.m1 or args.m2:
            raise UsageError("give either --fused or --m1/--m2, not both")
        img = read_image(args.fused)
        _check_size(img.shape, args.fused)
    else:
        if not (args.m1 and args.m2):
            raise UsageError("segment needs --fused or both --m1 and --m2")
        a, b = _load_pair(args.m1, args.m2)
        if models.seg_input == "m1":
            img = a
        elif models.seg_input == "m2":
            img = b
        else:
            with no_grad():
                img = models.fusion.fuse(Tensor(a[None, None]), Tensor(b[None, None])).image.data[0, 0]
    with no_grad():
        labels = predict_mask(models.seg(Tensor(img[None, None])))[0]
    write_image(args.out, labels, raw=True)
    print(args.out)
    return EXIT_OK


def _same_len(**lists) -> None:
    lens = {k: len(v) for k, v in lists.items()}
    if len(set(lens.values())) != 1:
        raise UsageError(f"file lists differ in length: {lens}")


def cmd_eval_fusion(args) -> int:
    _same_len(fused=args.fused, m1=args.m1, m2=args.m2)
    ids, rows = [], []
    for f, a, b in zip(args.fused, args.m1, args.m2):
        fi, ai, bi = read_image(f), read_image(a), read_image(b)
        if not fi.shape == ai.shape == bi.shape:
            raise UsageError(f"{f}: shape {fi.shape} does not match sources {ai.shape} / {bi.shape}")
        ids.append(Path(f).stem)
        rows.append(fusion_report(fi, ai, bi))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fusion_metrics.csv").write_text(fusion_csv(ids, rows))
    write_json(out / "fusion_summary.json", fusion_summary(rows))
    print(out / "fusion_metrics.csv")
    return EXIT_OK


def cmd_eval_seg(args) -> int:
    _same_len(pred=args.pred, ref=args.ref)
    ids, rows = [], []
    for p, r in zip(args.pred, args.ref):
        pm, rm = read_image(p, raw=True), read_image(r, raw=True)
        if pm.shape != rm.shape:
            raise UsageError(f"{p}: shape {pm.shape} does not match {r} {rm.shape}")
        ids.append(Path(p).stem)
        rows.append(seg_report(pm, rm, n_classes=args.classes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "seg_metrics.csv").write_text(seg_csv(ids, rows))
    write_json(out / "seg_summary.json", seg_summary(rows))
    print(out / "seg_metrics.csv")
    return EXIT_OK


def cmd_verify(args) -> int:
    damping = 1e6 if args.corrupt_damping else args.damping
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report, ok = verify_hypergrad(args.seed, damping=damping, mode=args.mode)
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if ok else EXIT_FAIL


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusionseg", description="Fusion-guided segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic two-modality phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, default=200)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--size", type=int, default=32)
    g.set_defaults(fn=cmd_gen_data)

    for name, fn in (("pretrain", cmd_pretrain), ("train", cmd_train)):
        t = sub.add_parser(name, help=f"{name} stage; writes checkpoint, epoch log and reports to --out")
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if name == "train":
            t.add_argument("--init", help="checkpoint from the pretrain stage")
        t.set_defaults(fn=fn)

    f = sub.add_parser("fuse", help="fuse two registered slices")
    f.add_argument("--ckpt", required=True, help="checkpoint path, or 'demo' for the shipped one")
    f.add_argument("--m1", required=True)
    f.add_argument("--m2", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--attn-out", dest="attn_out")
    f.set_defaults(fn=cmd_fuse)

    s = sub.add_parser("segment", help="label a fused image or a source pair")
    s.add_argument("--ckpt", required=True, help="checkpoint path, or 'demo' for the shipped one")
    s.add_argument("--m1")
    s.add_argument("--m2")
    s.add_argument("--fused")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_segment)

    ef = sub.add_parser("eval-fusion", help="fusion metrics report")
    ef.add_argument("--fused", nargs="+", required=True)
    ef.add_argument("--m1", nargs="+", required=True)
    ef.add_argument("--m2", nargs="+", required=True)
    ef.add_argument("--out", required=True)
    ef.set_defaults(fn=cmd_eval_fusion)

    es = sub.add_parser("eval-seg", help="segmentation metrics report")
    es.add_argument("--pred", nargs="+", required=True)
    es.add_argument("--ref", nargs="+", required=True)
    es.add_argument("--classes", type=int, default=3)
    es.add_argument("--out", required=True)
    es.set_defaults(fn=cmd_eval_seg)

    v = sub.add_parser("verify", help="hypergradient validation on the toy bi-level problem")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--damping", type=float, default=0.0)
    v.add_argument("--mode", choices=("exact", "gauss_newton"), default="exact")
    v.add_argument("--corrupt-damping", dest="corrupt_damping", action="store_true",
                   help="debug: force damping 1e6 so the check must fail")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, NonFiniteLoss, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (DataIOError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
