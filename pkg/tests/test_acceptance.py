"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance.

The desk experiments (criteria 6-8) train on a freshly generated 200-case
phantom set with configs/desk.cfg. Ablations that only change the cooperative
stage reuse the full model's pre-training checkpoint; ablations that change
pre-training (no_adv_pretrain, no_decoder) get their own.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import report
from fusionseg import checkpoint
from fusionseg.cli import main
from fusionseg.config import load_config
from fusionseg.data import build_dataset, ingest_slices
from fusionseg.evaluate import evaluate
from fusionseg.metrics import en, hd95, mi, qabf, scd, sd, sf, ssim
from fusionseg.metrics import fusion_report
from fusionseg.models.fusion import InvertibleStack
from fusionseg.pipeline import CKPT_NAME, run_pretrain, run_train
from fusionseg.tensor import Tensor, gradcheck, no_grad, rel_error
from fusionseg.tensor.gradcases import OP_CASES
from fusionseg.train.hypergrad import verify_hypergrad
from fusionseg.train.stages import build_models, load_models, two_chain_gradients
from fusionseg.data import sample_batch
from oracles import entropy_oracle, mi_oracle, pearson_oracle, sd_oracle, sf_oracle, ssim_oracle

DESK_CFG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


# ------------------------------------------------------------------ 1-5: oracle criteria

def test_c1_autodiff_gradchecks():
    t0 = time.perf_counter()
    worst, worst_op = 0.0, None
    for name, (fn, make) in sorted(OP_CASES.items()):
        for i in range(10):
            e = gradcheck(fn, make(np.random.default_rng(i)))
            if not e < worst:
                worst, worst_op = e, name
    dt = time.perf_counter() - t0
    report("1", worst < 1e-5 and dt < 120,
           f"{len(OP_CASES)} ops x 10 instances, worst rel err {worst:.2e} ({worst_op}) < 1e-5; {dt:.1f}s < 120s")


def test_c2_hypergradient_oracle():
    t0 = time.perf_counter()
    rep, _ = verify_hypergrad(0)
    dt = time.perf_counter() - t0
    ok = rep.rel_err_analytic < 1e-4 and rep.rel_err_fd < 1e-3 and dt < 10
    report("2", ok, f"toy quadratic: vs closed form {rep.rel_err_analytic:.2e} < 1e-4, "
                    f"vs FD-through-argmin {rep.rel_err_fd:.2e} < 1e-3; {dt:.2f}s < 10s")


def test_c3_two_chain_consistency(tiny_ds):
    cfg = load_config(DESK_CFG)
    models = build_models(cfg)
    cases = tiny_ds.split("train")
    errs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(cases), cfg.batch, replace=False)
        (x, y), gt = sample_batch(cases, idx, cfg.patch, rng, ["A", "B"])
        tape, assembled = two_chain_gradients(models, x, y, gt, cfg.weights("coop"))
        errs.append(rel_error(tape, assembled))
    report("3", max(errs) < 1e-6, f"tape vs two-chain assembly on 5 batches, max rel err {max(errs):.2e} < 1e-6")


def test_c4_inn_invertibility():
    rng = np.random.default_rng(0)
    stack = InvertibleStack(16, 4, rng)
    # zero-initialised couplings are the identity, so draw fan-in scaled random weights
    for p in stack.parameters():
        scale = 1 / np.sqrt(np.prod(p.shape[1:])) if p.data.ndim > 1 else 0.1
        p.data = rng.standard_normal(p.shape) * scale
    worst = 0.0
    with no_grad():
        for i in range(100):
            x = Tensor(np.random.default_rng(100 + i).standard_normal((1, 16, 8, 8)))
            worst = max(worst, float(np.abs(stack.inverse(stack(x)).data - x.data).max()))
    report("4", worst < 1e-8, f"4-block 16-channel round trip on 100 random-weight inputs, max abs err {worst:.2e} < 1e-8")


def test_c5_metric_oracles():
    rng = np.random.default_rng(5)
    errs = {"EN": [], "SD": [], "SF": [], "MI": [], "SCD": [], "SSIM": []}
    for _ in range(5):
        f, a, b = rng.random((8, 8)), rng.random((8, 8)), rng.random((8, 8))
        errs["EN"].append(abs(en(f) - entropy_oracle(f)))
        errs["SD"].append(abs(sd(f) - sd_oracle(f)))
        errs["SF"].append(abs(sf(f) - sf_oracle(f)))
        errs["MI"].append(abs(mi(f, a, b) - mi_oracle(f, a) - mi_oracle(f, b)))
        errs["SCD"].append(abs(scd(f, a, b) - pearson_oracle(f - b, a) - pearson_oracle(f - a, b)))
        # an 11x11 window does not fit 8x8, so SSIM falls back to the largest odd window (7)
        errs["SSIM"].append(abs(ssim(f, a) - ssim_oracle(f, a, win=7)))
    worst = max(max(v) for v in errs.values())
    x = rng.random((32, 32))
    self_ssim = ssim(x, x)
    q = qabf(x, x, x)
    sq = np.zeros((16, 16), int)
    sq[4:10, 4:10] = 1
    hd = hd95(np.roll(sq, 1, axis=1), sq, 1)
    ok = worst < 1e-9 and abs(self_ssim - 1) < 1e-12 and q >= 0.99 and hd == 1.0
    report("5", ok, f"oracle max abs diff {worst:.1e} < 1e-9; SSIM(x,x)={self_ssim:.12f}; "
                    f"Qabf(F=A=B)={q:.4f} >= 0.99; HD95(1-px shift)={hd}")


# ------------------------------------------------------------------ 9-10: reproducibility and format

def test_c9_reproducibility(tiny_dir, tmp_path):
    tiny = ["--set", "patch=32", "--set", "batch=4", "--set", "epochs_pretrain=2", "--set", "epochs_fusion=2"]
    outs = []
    for run in ("a", "b"):
        root = tmp_path / run
        assert main(["pretrain", "--data", str(tiny_dir), "--out", str(root / "pre"), "--seed", "9"] + tiny) == 0
        assert main(["train", "--data", str(tiny_dir), "--out", str(root / "coop"), "--seed", "9",
                     "--init", str(root / "pre" / CKPT_NAME)] + tiny) == 0
        outs.append(root)
    # epoch logs carry wall-clock times and are excluded; everything else must match byte for byte
    names = ["pre/model.f4sg", "coop/model.f4sg", "coop/config.cfg",
             "coop/val_seg.csv", "coop/val_fusion.csv", "coop/val_summary.json"]
    same = [(outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names]
    report("9", all(same), f"two seed-9 runs: {sum(same)}/{len(names)} artifacts byte-identical "
                           f"(checkpoints, config echo, reports)")


def test_c10_checkpoint_format(tmp_path):
    state = build_models(load_config(DESK_CFG)).state()
    checkpoint.save(tmp_path / "a.f4sg", state)
    checkpoint.save(tmp_path / "b.f4sg", checkpoint.load(tmp_path / "a.f4sg"))
    identical = (tmp_path / "a.f4sg").read_bytes() == (tmp_path / "b.f4sg").read_bytes()
    blob = bytearray((tmp_path / "a.f4sg").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    try:
        checkpoint.loads(bytes(blob))
        rejected = False
    except checkpoint.CheckpointError:
        rejected = True
    report("10", identical and rejected, f"save->load->save byte-identical={identical}; corrupted CRC rejected={rejected}")


# ------------------------------------------------------------------ 6-8: desk experiments

class Desk:
    """Runs desk experiments on demand and caches checkpoints and test-split summaries."""

    def __init__(self, root: Path):
        self.root = root
        self.cfg = load_config(DESK_CFG)
        build_dataset(200, self.cfg.seed, root / "data")
        self.ds = ingest_slices(root / "data")
        (self.x, self.y), self.gt = self.ds.arrays("test")
        self.ids = [c.case_id for c in self.ds.split("test")]
        self.pre, self.runs, self.times, self.recon_ssim = {}, {}, {}, {}

    def _recon_hook(self, key):
        (vx, vy), _ = self.ds.arrays("val")
        trace = self.recon_ssim.setdefault(key, [])

        def hook(epoch, models):
            with no_grad():
                recon, _ = models.fusion.reconstruct(Tensor(np.concatenate([vx, vy])))
            src = np.concatenate([vx, vy])[:, 0]
            trace.append(float(np.mean([ssim(r, s) for r, s in zip(recon.data[:, 0], src)])))
        return hook

    def pretrain(self, key: str, cfg) -> Path:
        if key not in self.pre:
            t0 = time.perf_counter()
            run_pretrain(cfg, self.ds, self.root / f"pre_{key}", on_epoch=self._recon_hook(key))
            self.times[f"pre_{key}"] = time.perf_counter() - t0
            self.pre[key] = self.root / f"pre_{key}" / CKPT_NAME
        return self.pre[key]

    def run(self, name: str, **flags) -> dict:
        if name in self.runs:
            return self.runs[name]
        cfg = self.cfg.replace(**flags)
        init = None
        if cfg.seg_input == "fused":
            key = "no_adv_pretrain" if cfg.no_adv_pretrain else "no_decoder" if cfg.no_decoder else "full"
            init = self.pretrain(key, cfg)
        t0 = time.perf_counter()
        run_train(cfg, self.ds, self.root / name, init=init)
        self.times[name] = time.perf_counter() - t0
        models = load_models(checkpoint.load(self.root / name / CKPT_NAME))
        self.runs[name] = evaluate(models, self.x, self.y, self.gt, self.ids).summary
        return self.runs[name]

    def average_baseline(self) -> dict:
        rows = [fusion_report(0.5 * (a[0] + b[0]), a[0], b[0]).row() for a, b in zip(self.x, self.y)]
        return dict(zip(("EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM"), np.mean(rows, axis=0)))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


ABLATIONS = ("no_adv_pretrain", "no_adv_coop", "no_cross_attention", "no_decoder")


@pytest.mark.slow
def test_c6_pretrain_smoke(desk):
    desk.run("full")
    trace = desk.recon_ssim["full"]
    gain = trace[-1] - trace[0]
    report("6-pretrain", gain >= 0.2,
           f"held-out reconstruction SSIM epoch 1 {trace[0]:.3f} -> epoch {len(trace)} {trace[-1]:.3f} "
           f"(gain {gain:.3f} >= 0.2)")


@pytest.mark.slow
def test_c6_runtime(desk):
    desk.run("full")
    total = desk.times["pre_full"] + desk.times["full"]
    report("6-runtime", total < 1800, f"desk config pretrain+cooperative wall time {total / 60:.1f} min < 30 min")


@pytest.mark.slow
def test_c6a_fused_lesion_dice(desk):
    d = desk.run("full")["lesion_dice"]
    report("6a", d > 0.85, f"fused-input cooperative lesion Dice {d:.4f} > 0.85")


@pytest.mark.slow
def test_c6b_modality_a_only(desk):
    d = desk.run("a_only", seg_input="m1")["lesion_dice"]
    report("6b", d < 0.70, f"modality-A-only lesion Dice {d:.4f} < 0.70")


@pytest.mark.slow
def test_c6c_beats_frozen_fusion(desk):
    full = desk.run("full")["lesion_dice"]
    frozen = desk.run("freeze_fusion", freeze_fusion=True)["lesion_dice"]
    report("6c", full - frozen >= 0.01,
           f"cooperative {full:.4f} vs frozen fusion {frozen:.4f}: gap {100 * (full - frozen):.2f} >= 1 Dice point")


@pytest.mark.slow
@pytest.mark.parametrize("metric", ["EN", "SF", "Qabf"])
def test_c7_fusion_beats_average(desk, metric):
    ours = desk.run("full")[metric]
    avg = desk.average_baseline()[metric]
    report(f"7-{metric}", ours > avg, f"test-split mean {metric}: trained fusion {ours:.4f} > pixel average {avg:.4f}")


@pytest.mark.slow
@pytest.mark.parametrize("ablation", ABLATIONS)
def test_c8_ablation_direction(desk, ablation):
    full = desk.run("full")
    abl = desk.run(ablation, **{ablation: True})
    ok = full["Qabf"] >= abl["Qabf"] and full["VIF"] >= abl["VIF"]
    report(f"8-{ablation}", ok, f"full vs {ablation}: Qabf {full['Qabf']:.4f} >= {abl['Qabf']:.4f}, "
                                f"VIF {full['VIF']:.4f} >= {abl['VIF']:.4f}")
