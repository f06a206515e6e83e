"""Pre-training and cooperative (joint-loss) training of the fusion / segmentation pair."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import losses as L
from ..config import RunConfig
from ..data.dataset import sample_batch
from ..models.fusion import DiscriminatorPair, FeaturePair, FusionNet
from ..models.seg import SegConfig, SegNet
from ..rng import stream
from ..tensor import Tensor, backward, flat_grad, no_grad, ops
from .optim import SGD, Adam, step_lr

SEG_INPUT_CODES = {"fused": 0, "m1": 1, "m2": 2}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float, stage: str, epoch: int):
        super().__init__(f"{stage} epoch {epoch}: non-finite loss term {term!r} = {value}")
        self.term = term


@dataclass
class Models:
    fusion: FusionNet
    disc: DiscriminatorPair
    seg: SegNet
    seg_input: str = "fused"

    def state(self) -> dict:
        out = {}
        for prefix, mod in (("fusion", self.fusion), ("disc", self.disc), ("seg", self.seg)):
            out.update({f"{prefix}.{k}": v for k, v in mod.state_dict().items()})
        out["meta.seg_input"] = np.array([SEG_INPUT_CODES[self.seg_input]], dtype=np.float64)
        return out

    def zero_grad(self) -> None:
        for m in (self.fusion, self.disc, self.seg):
            m.zero_grad()


def build_models(cfg: RunConfig) -> Models:
    return Models(
        fusion=FusionNet(cfg.fusion(), stream(cfg.seed, "init/fusion")),
        disc=DiscriminatorPair(stream(cfg.seed, "init/disc")),
        seg=SegNet(cfg.seg(), stream(cfg.seed, "init/seg")),
        seg_input=cfg.seg_input,
    )


def load_models(state: dict, cfg: RunConfig | None = None, strict_heads: bool = True) -> Models:
    """Rebuild networks from a checkpoint; architecture is read off the tensor names and shapes."""
    fusion_cfg, seg_input = infer_architecture(state)
    base = cfg or RunConfig(seed=0)
    if cfg is not None:
        fusion_cfg = cfg.fusion()
        seg_input = cfg.seg_input
    models = Models(
        fusion=FusionNet(fusion_cfg, stream(base.seed, "init/fusion")),
        disc=DiscriminatorPair(stream(base.seed, "init/disc")),
        seg=SegNet(SegConfig(), stream(base.seed, "init/seg")),
        seg_input=seg_input,
    )
    load_into(models, state, strict_heads=strict_heads)
    return models


def infer_architecture(state: dict):
    from ..models.fusion import FusionConfig
    stem = state.get("fusion.encoder.stem.weight")
    low = state.get("fusion.encoder.low_in.weight")
    if stem is None or low is None:
        raise KeyError("checkpoint has no fusion encoder")
    cfg = FusionConfig(c_low=low.shape[0], c_high=stem.shape[0],
                       cross_attention=any(".xattn." in k for k in state),
                       decoder="fusion.decoder.conv1.weight" in state)
    code = int(state["meta.seg_input"][0]) if "meta.seg_input" in state else 0
    seg_input = {v: k for k, v in SEG_INPUT_CODES.items()}[code]
    return cfg, seg_input


def load_into(models: Models, state: dict, strict_heads: bool = True) -> None:
    """Load whatever sections the checkpoint has.

    The encoder / decoder must match exactly. Fusion-head tensors (``fuse_*``)
    may be absent or surplus when ``strict_heads`` is off: a pre-training
    checkpoint never updates them, so it can seed any head variant.
    """
    from ..checkpoint import section
    fus = section(state, "fusion")
    if fus:
        own = models.fusion.params()
        body = {k for k in own if not k.startswith("fuse_")}
        missing = body - set(fus)
        if missing:
            raise KeyError(f"checkpoint lacks fusion tensors {sorted(missing)[:4]}")
        if strict_heads:
            models.fusion.load_state_dict(fus, strict=True)
        else:
            models.fusion.load_state_dict({k: v for k, v in fus.items() if k in own}, strict=False)
    for prefix, mod in (("disc", models.disc), ("seg", models.seg)):
        sec = section(state, prefix)
        if sec:
            mod.load_state_dict(sec, strict=True)


# ------------------------------------------------------------------ logging

@dataclass
class EpochLog:
    path: Path | None = None
    records: list = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def _check_finite(terms: dict, stage: str, epoch: int) -> None:
    for k, v in terms.items():
        if not np.isfinite(v):
            raise NonFiniteLoss(k, v, stage, epoch)


def _split_pair(t: Tensor, n: int) -> tuple[Tensor, Tensor]:
    return t[:n], t[n:]


def _batches(n: int, batch: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch):
        yield perm[i:i + batch]


# ------------------------------------------------------------------ pre-training

def pretrain_terms(models: Models, x: Tensor, y: Tensor, w: L.LossWeights) -> dict:
    n = x.shape[0]
    recon, feats = models.fusion.reconstruct(ops.concat([x, y], axis=0))
    rx, ry = _split_pair(recon, n)
    fx = FeaturePair(feats.low[:n], feats.high[:n])
    fy = FeaturePair(feats.low[n:], feats.high[n:])
    corr = L.loss_correlation(fx, fy)
    content = ops.add(L.loss_content_pretrain(x, rx), L.loss_content_pretrain(y, ry))
    if w.lambda_adv > 0:
        adv = L.loss_adv_generator(models.disc.discriminate(rx, 1), models.disc.discriminate(ry, 2))
    else:
        adv = Tensor(0.0)
    return {"adv": adv, "corr": corr, "content": content,
            "total": L.loss_enc_total(adv, corr, content, w), "recon": (rx, ry)}


def disc_loss(models: Models, x: Tensor, y: Tensor, fake_x: Tensor, fake_y: Tensor) -> Tensor:
    d = models.disc
    return ops.add(L.loss_discriminator(d.discriminate(x, 1), d.discriminate(fake_x.detach(), 1)),
                   L.loss_discriminator(d.discriminate(y, 2), d.discriminate(fake_y.detach(), 2)))


def pretrain_stage(cases, cfg: RunConfig, models: Models | None = None, log: EpochLog | None = None,
                   modalities=None, on_epoch=None) -> Models:
    """Alternating generator / discriminator steps on reconstructions of both modalities.

    ``on_epoch(epoch, models)`` is called after every epoch (evaluation hooks).
    """
    if not cases:
        raise ValueError("pretrain_stage: empty dataset")
    models = models or build_models(cfg)
    log = log or EpochLog()
    tc = cfg.train()
    w = cfg.weights("pretrain")
    mods = modalities or list(cases[0].images)[:2]
    gen_params = {k: p for k, p in models.fusion.params().items() if not k.startswith("fuse_")}
    opt_g = Adam(gen_params, lr=tc.lr_fusion)
    opt_d = Adam(models.disc.params(), lr=tc.lr_fusion)
    for epoch in range(tc.epochs_pretrain):
        lr = step_lr(tc.lr_fusion, epoch, tc.lr_every, tc.lr_factor)
        opt_g.lr = opt_d.lr = lr
        t0 = time.perf_counter()
        rng = stream(cfg.seed, "data/pretrain", epoch)
        sums, steps = {}, 0
        for idx in _batches(len(cases), tc.batch, rng):
            (xa, ya), _ = sample_batch(cases, idx, tc.patch, rng, mods)
            x, y = Tensor(xa), Tensor(ya)
            models.zero_grad()
            terms = pretrain_terms(models, x, y, w)
            vals = {k: terms[k].item() for k in ("adv", "corr", "content", "total")}
            _check_finite(vals, "pretrain", epoch)
            backward(terms["total"])
            opt_g.step()
            if w.lambda_adv > 0:
                models.zero_grad()
                d = disc_loss(models, x, y, *terms["recon"])
                vals["disc"] = d.item()
                _check_finite({"disc": vals["disc"]}, "pretrain", epoch)
                backward(d)
                opt_d.step()
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        models.zero_grad()
        log.append({"stage": "pretrain", "epoch": epoch, "lr": lr,
                    **{k: v / steps for k, v in sums.items()},
                    "wall_time": round(time.perf_counter() - t0, 3)})
        if on_epoch is not None:
            on_epoch(epoch, models)
    return models


# ------------------------------------------------------------------ cooperative stage

@dataclass
class Optimizers:
    fusion: Adam | None
    seg: SGD
    disc: Adam | None

    def set_lr(self, lr_fusion: float) -> None:
        for o in (self.fusion, self.disc):
            if o is not None:
                o.lr = lr_fusion


def fusion_trainable(cfg: RunConfig) -> bool:
    return cfg.seg_input == "fused" and not cfg.freeze_fusion


def make_optimizers(models: Models, cfg: RunConfig) -> Optimizers:
    tc = cfg.train()
    train_f = fusion_trainable(cfg)
    return Optimizers(
        fusion=Adam(models.fusion.params(), lr=tc.lr_fusion) if train_f else None,
        seg=SGD(models.seg.params(), lr=tc.lr_seg, momentum=tc.momentum_seg, weight_decay=tc.weight_decay_seg),
        disc=Adam(models.disc.params(), lr=tc.lr_fusion) if train_f and cfg.weights().lambda_adv > 0 else None,
    )


def fusion_terms(models: Models, fused, x: Tensor, y: Tensor, w: L.LossWeights) -> dict:
    theta = fused.image
    fx, fy, _ = fused.features
    corr = L.loss_correlation(fx, fy)
    text = L.loss_text(theta, x, y)
    if w.lambda_adv > 0:
        adv = L.loss_adv_generator(models.disc.discriminate(theta, 1), models.disc.discriminate(theta, 2))
    else:
        adv = Tensor(0.0)
    return {"adv": adv, "corr": corr, "text": text, "fusion": L.loss_fusion_total(adv, corr, text, w)}


def seg_source(models: Models, x: Tensor, y: Tensor, frozen: bool):
    """Segmenter input for the configured route, plus the fusion result when there is one."""
    if models.seg_input == "m1":
        return x, None
    if models.seg_input == "m2":
        return y, None
    if frozen:
        with no_grad():
            fused = models.fusion.fuse(x, y)
        return fused.image, fused
    fused = models.fusion.fuse(x, y)
    return fused.image, fused


def joint_objective(models: Models, x: Tensor, y: Tensor, gt: np.ndarray, w: L.LossWeights,
                    train_fusion: bool = True) -> dict:
    """Forward fuse -> segment -> L = L^s + lambda * L^f (L^s alone when fusion is not trained)."""
    seg_in, fused = seg_source(models, x, y, frozen=not train_fusion)
    ls = L.loss_seg(models.seg(seg_in), gt, w)
    terms = {"seg": ls}
    if train_fusion and fused is not None:
        terms.update(fusion_terms(models, fused, x, y, w))
        terms["total"] = L.loss_joint(ls, terms["fusion"], w)
    else:
        terms["total"] = ls
    terms["_fused"] = fused
    return terms


def cooperative_step(batch, models: Models, opts: Optimizers, w: L.LossWeights, epoch: int = 0) -> dict:
    """One joint update: a single backward feeds both parameter sets, then each optimizer steps."""
    (xa, ya), gt = batch
    x, y = Tensor(xa), Tensor(ya)
    train_f = opts.fusion is not None
    models.zero_grad()
    terms = joint_objective(models, x, y, gt, w, train_fusion=train_f)
    vals = {k: v.item() for k, v in terms.items() if isinstance(v, Tensor)}
    _check_finite(vals, "cooperative", epoch)
    backward(terms["total"])
    opts.seg.step()
    if train_f:
        opts.fusion.step()
    if opts.disc is not None:
        models.zero_grad()
        theta = terms["_fused"].image
        d = disc_loss(models, x, y, theta, theta)
        vals["disc"] = d.item()
        _check_finite({"disc": vals["disc"]}, "cooperative", epoch)
        backward(d)
        opts.disc.step()
    models.zero_grad()
    return vals


def cooperative_stage(cases, cfg: RunConfig, models: Models, log: EpochLog | None = None,
                      modalities=None, on_epoch=None) -> Models:
    if not cases:
        raise ValueError("cooperative_stage: empty dataset")
    log = log or EpochLog()
    tc = cfg.train()
    w = cfg.weights("coop")
    mods = modalities or list(cases[0].images)[:2]
    models.seg_input = cfg.seg_input
    opts = make_optimizers(models, cfg)
    for epoch in range(tc.epochs_fusion):
        lr = step_lr(tc.lr_fusion, epoch, tc.lr_every, tc.lr_factor)
        opts.set_lr(lr)
        t0 = time.perf_counter()
        rng = stream(cfg.seed, "data/coop", epoch)
        sums, steps = {}, 0
        for idx in _batches(len(cases), tc.batch, rng):
            vals = cooperative_step(sample_batch(cases, idx, tc.patch, rng, mods), models, opts, w, epoch)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        log.append({"stage": "cooperative", "epoch": epoch, "lr": lr, "lr_seg": tc.lr_seg,
                    **{k: v / steps for k, v in sums.items()},
                    "wall_time": round(time.perf_counter() - t0, 3)})
        if on_epoch is not None:
            on_epoch(epoch, models)
    return models


# ------------------------------------------------------------------ two-chain check

def two_chain_gradients(models: Models, x: np.ndarray, y: np.ndarray, gt: np.ndarray,
                        w: L.LossWeights) -> tuple[np.ndarray, np.ndarray]:
    """d(L^s + lambda L^f)/d(omega_f): tape result vs explicit assembly of the two chains.

    Chain 1 pulls dL^s/dtheta back through theta(omega_f); chain 2 is lambda times
    the total derivative of L^f. Returns (tape, assembled) flat vectors.
    """
    fparams = list(models.fusion.params().values())
    xt, yt = Tensor(x), Tensor(y)

    models.zero_grad()
    terms = joint_objective(models, xt, yt, gt, w, train_fusion=True)
    backward(terms["total"])
    tape = flat_grad(fparams)

    # chain 1: dL^s/dtheta at a detached theta, then a vector-Jacobian product through the fusion net
    models.zero_grad()
    fused = models.fusion.fuse(xt, yt)
    theta_leaf = Tensor(fused.image.data.copy(), requires_grad=True)
    backward(L.loss_seg(models.seg(theta_leaf), gt, w))
    backward(fused.image, theta_leaf.grad)
    chain1 = flat_grad(fparams)

    # chain 2: lambda * dL^f/domega_f
    models.zero_grad()
    fused = models.fusion.fuse(xt, yt)
    backward(fusion_terms(models, fused, xt, yt, w)["fusion"])
    chain2 = w.lambda_fuse * flat_grad(fparams)
    models.zero_grad()
    return tape, chain1 + chain2
