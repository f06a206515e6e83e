"""Inference over a split and the report files (CSV rows + JSON summary)."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import FUSION_COLUMNS, SEG_COLUMNS, fusion_report, seg_report
from .metrics.seg import dice
from .models.seg import predict_mask
from .tensor import Tensor, no_grad
from .train.stages import Models

LESION = 2
TISSUE = 1


def fuse_images(models: Models, x: np.ndarray, y: np.ndarray, batch: int = 16) -> np.ndarray:
    """[N,1,H,W] pairs -> fused [N,H,W]."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch):
            out.append(models.fusion.fuse(Tensor(x[i:i + batch]), Tensor(y[i:i + batch])).image.data[:, 0])
    return np.concatenate(out)


def segment_images(models: Models, imgs: np.ndarray, batch: int = 16) -> np.ndarray:
    """[N,H,W] -> label maps [N,H,W]."""
    out = []
    with no_grad():
        for i in range(0, len(imgs), batch):
            out.append(predict_mask(models.seg(Tensor(imgs[i:i + batch, None]))))
    return np.concatenate(out)


def seg_inputs(models: Models, x: np.ndarray, y: np.ndarray):
    """What the segmenter sees for this model's route, plus fused images (None if unfused)."""
    if models.seg_input == "m1":
        return x[:, 0], None
    if models.seg_input == "m2":
        return y[:, 0], None
    fused = fuse_images(models, x, y)
    return fused, fused


def pooled_dice(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """Dice over all pixels of the split at once (robust for small structures)."""
    return dice(pred.ravel(), gt.ravel(), k)


def _mean_finite(vals) -> float | None:
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


@dataclass
class Evaluation:
    case_ids: list
    fusion_rows: list = field(default_factory=list)   # per-case FusionMetricsReport (may be empty)
    seg_rows: list = field(default_factory=list)      # per-case SegMetricsReport
    summary: dict = field(default_factory=dict)
    fused: np.ndarray | None = None
    pred: np.ndarray | None = None


def evaluate(models: Models, x: np.ndarray, y: np.ndarray, gt: np.ndarray, case_ids) -> Evaluation:
    seg_in, fused = seg_inputs(models, x, y)
    pred = segment_images(models, seg_in)
    ev = Evaluation(case_ids=list(case_ids), fused=fused, pred=pred)
    ev.seg_rows = [seg_report(p, g) for p, g in zip(pred, gt)]
    if fused is not None:
        ev.fusion_rows = [fusion_report(f, a[0], b[0]) for f, a, b in zip(fused, x, y)]
    ev.summary = summarize(ev, pred, gt)
    return ev


def summarize(ev: Evaluation, pred: np.ndarray, gt: np.ndarray) -> dict:
    hd = [r.hd95 for r in ev.seg_rows]
    s = {
        "n_cases": len(ev.case_ids),
        "lesion_dice": pooled_dice(pred, gt, LESION),
        "tissue_dice": pooled_dice(pred, gt, TISSUE),
        "dice": float(np.mean([r.dice for r in ev.seg_rows])),
        "miou": float(np.mean([r.miou for r in ev.seg_rows])),
        "hd95": _mean_finite(hd),
        "hd95_empty": int(sum(not math.isfinite(v) for v in hd)),
    }
    if ev.fusion_rows:
        for i, col in enumerate(FUSION_COLUMNS):
            s[col] = float(np.mean([r.row()[i] for r in ev.fusion_rows]))
    return s


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(round(v, 10))
    return str(v)


def fusion_csv(ids, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", *FUSION_COLUMNS])
    for cid, r in zip(ids, rows):
        w.writerow([cid, *(_fmt(v) for v in r.row())])
    return buf.getvalue()


def seg_csv(ids, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", *SEG_COLUMNS])
    for cid, r in zip(ids, rows):
        w.writerow([cid, *(_fmt(v) for v in r.row())])
    return buf.getvalue()


def fusion_summary(rows) -> dict:
    return {col: float(np.mean([r.row()[i] for r in rows])) for i, col in enumerate(FUSION_COLUMNS)}


def seg_summary(rows) -> dict:
    return {"dice": float(np.mean([r.dice for r in rows])), "miou": float(np.mean([r.miou for r in rows])),
            "hd95": _mean_finite([r.hd95 for r in rows]),
            "hd95_empty": int(sum(not math.isfinite(r.hd95) for r in rows))}


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_reports(out_dir, ev: Evaluation, prefix: str = "val") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{prefix}_seg.csv").write_text(seg_csv(ev.case_ids, ev.seg_rows))
    if ev.fusion_rows:
        (out_dir / f"{prefix}_fusion.csv").write_text(fusion_csv(ev.case_ids, ev.fusion_rows))
    write_json(out_dir / f"{prefix}_summary.json", ev.summary)
