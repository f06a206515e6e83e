"""End-to-end runs: pretrain / train into a run directory (config echo, epoch log, checkpoint, reports)."""
from __future__ import annotations

from pathlib import Path

from . import checkpoint
from .config import RunConfig
from .data.dataset import Dataset, ingest_slices
from .evaluate import evaluate, write_reports
from .train.stages import EpochLog, Models, build_models, cooperative_stage, load_into, pretrain_stage

CONFIG_ECHO = "config.cfg"
EPOCH_LOG = "epochs.jsonl"
CKPT_NAME = "model.f4sg"


def _prepare(out_dir, cfg: RunConfig) -> tuple[Path, EpochLog]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfg.dumps())
    logp = out / EPOCH_LOG
    if logp.exists():
        logp.unlink()
    return out, EpochLog(logp)


def load_data(data) -> Dataset:
    ds = data if isinstance(data, Dataset) else ingest_slices(data)
    if not ds.split("train"):
        raise ValueError(f"no loadable training cases in {ds.root} (errors: {ds.errors[:3]})")
    return ds


def _finish(out: Path, models: Models, ds: Dataset, split: str = "val") -> dict:
    checkpoint.save(out / CKPT_NAME, models.state())
    (x, y), gt = ds.arrays(split)
    ids = [c.case_id for c in ds.split(split)]
    ev = evaluate(models, x, y, gt, ids)
    write_reports(out, ev, prefix=split)
    return ev.summary


def run_pretrain(cfg: RunConfig, data, out_dir, on_epoch=None) -> dict:
    ds = load_data(data)
    out, log = _prepare(out_dir, cfg)
    models = pretrain_stage(ds.split("train"), cfg, log=log, modalities=ds.modalities[:2], on_epoch=on_epoch)
    checkpoint.save(out / CKPT_NAME, models.state())
    return {"checkpoint": str(out / CKPT_NAME), "epochs": len(log.records)}


def run_train(cfg: RunConfig, data, out_dir, init=None) -> dict:
    """Cooperative stage. Fused routes need a pre-trained ``init``; single-modality routes do not."""
    ds = load_data(data)
    if init is None and cfg.seg_input == "fused":
        raise ValueError("train: an --init checkpoint from pretrain is required for fused segmentation")
    out, log = _prepare(out_dir, cfg)
    models = build_models(cfg)
    if init is not None:
        state = checkpoint.load(init)
        state = {k: v for k, v in state.items() if not k.startswith(("seg.", "meta."))}
        load_into(models, state, strict_heads=False)
    cooperative_stage(ds.split("train"), cfg, models, log=log, modalities=ds.modalities[:2])
    return _finish(out, models, ds)
