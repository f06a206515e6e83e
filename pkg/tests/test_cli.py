import json
import subprocess
import sys

import numpy as np
import pytest

from fusionseg.cli import main
from fusionseg.config import parse_config
from fusionseg.data import gen_phantom_case, read_image, write_image
from fusionseg.metrics import ssim

TINY = ["--set", "patch=32", "--set", "batch=4", "--set", "epochs_pretrain=1", "--set", "epochs_fusion=1"]


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_and_repeatability(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--cases", "10", "--seed", "3"]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--cases", "10", "--seed", "3"]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(man["cases"]) == 10
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert "manifest.json" in capsys.readouterr().out


def test_gen_data_bad_size(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--cases", "2", "--size", "30"]) == 2


def test_missing_data_is_io_error(tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


def test_unknown_config_key_is_usage_error(tiny_dir, tmp_path):
    assert main(["pretrain", "--data", str(tiny_dir), "--out", str(tmp_path), "--set", "bogus=1"]) == 2


def test_train_requires_init(tiny_dir, tmp_path):
    assert main(["train", "--data", str(tiny_dir), "--out", str(tmp_path)] + TINY) == 2


@pytest.fixture(scope="module")
def trained(tiny_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["pretrain", "--data", str(tiny_dir), "--out", str(root / "pre"), "--seed", "5"] + TINY) == 0
    assert main(["train", "--data", str(tiny_dir), "--out", str(root / "coop"), "--seed", "5",
                 "--init", str(root / "pre" / "model.f4sg")] + TINY) == 0
    return root


def test_run_directory_contents(trained):
    coop = trained / "coop"
    for name in ("config.cfg", "epochs.jsonl", "model.f4sg", "val_seg.csv", "val_fusion.csv", "val_summary.json"):
        assert (coop / name).is_file(), name
    echoed = parse_config((coop / "config.cfg").read_text())
    assert echoed.seed == 5 and echoed.patch == 32 and echoed.epochs_fusion == 1
    rec = json.loads((coop / "epochs.jsonl").read_text().splitlines()[0])
    assert {"epoch", "lr", "seg", "fusion", "wall_time"} <= set(rec)
    assert (coop / "val_seg.csv").read_text().splitlines()[0] == "image_id,dice,miou,hd95"


def test_ablation_flag_routes_to_concat_fusion(tiny_dir, trained, tmp_path):
    out = tmp_path / "nx"
    assert main(["train", "--data", str(tiny_dir), "--out", str(out), "--init",
                 str(trained / "pre" / "model.f4sg"), "--set", "no_cross_attention=true"] + TINY) == 0
    from fusionseg import checkpoint
    state = checkpoint.load(out / "model.f4sg")
    assert not any(".xattn." in k for k in state)
    assert main(["fuse", "--ckpt", str(out / "model.f4sg"), "--m1", str(tiny_dir / "images/case_00000_A.png"),
                 "--m2", str(tiny_dir / "images/case_00000_B.png"), "--out", str(tmp_path / "f.png"),
                 "--attn-out", str(tmp_path / "a.png")]) == 2


def test_fuse_segment_roundtrip(tiny_dir, trained, tmp_path):
    ck = str(trained / "coop" / "model.f4sg")
    m1, m2 = str(tiny_dir / "images/case_00000_A.png"), str(tiny_dir / "images/case_00000_B.png")
    assert main(["fuse", "--ckpt", ck, "--m1", m1, "--m2", m2, "--out", str(tmp_path / "f.png"),
                 "--attn-out", str(tmp_path / "att.png")]) == 0
    assert read_image(tmp_path / "f.png").shape == read_image(m1).shape
    assert read_image(tmp_path / "att.png").shape == read_image(m1).shape
    for i in (1, 2):
        assert main(["segment", "--ckpt", ck, "--m1", m1, "--m2", m2, "--out", str(tmp_path / f"s{i}.png")]) == 0
    s1 = (tmp_path / "s1.png").read_bytes()
    assert s1 == (tmp_path / "s2.png").read_bytes()
    labels = read_image(tmp_path / "s1.png", raw=True)
    assert set(np.unique(labels)) <= {0, 1, 2}
    # --fused bypasses fusion: segmenting the fused file reproduces the pair result up to 8-bit rounding
    assert main(["segment", "--ckpt", ck, "--fused", str(tmp_path / "f.png"), "--out", str(tmp_path / "s3.png")]) == 0
    assert np.mean(read_image(tmp_path / "s3.png", raw=True) == labels) > 0.95
    assert main(["segment", "--ckpt", ck, "--m1", m1, "--out", str(tmp_path / "x.png")]) == 2


def test_fuse_mismatched_sizes(tmp_path):
    write_image(tmp_path / "a.png", np.zeros((32, 32)))
    write_image(tmp_path / "b.png", np.zeros((40, 40)))
    assert main(["fuse", "--ckpt", "demo", "--m1", str(tmp_path / "a.png"), "--m2", str(tmp_path / "b.png"),
                 "--out", str(tmp_path / "f.png")]) == 2


def test_bad_checkpoint_is_validation_failure(tmp_path):
    (tmp_path / "bad.f4sg").write_bytes(b"F4SGjunkjunkjunkjunk")
    write_image(tmp_path / "a.png", np.zeros((32, 32)))
    assert main(["fuse", "--ckpt", str(tmp_path / "bad.f4sg"), "--m1", str(tmp_path / "a.png"),
                 "--m2", str(tmp_path / "a.png"), "--out", str(tmp_path / "f.png")]) == 1


def test_demo_checkpoint_fuse_self_ssim(tmp_path):
    scores = []
    for seed in range(5):
        c = gen_phantom_case(100 + seed)
        for mod in ("A", "B"):
            write_image(tmp_path / "x.png", c.images[mod])
            assert main(["fuse", "--ckpt", "demo", "--m1", str(tmp_path / "x.png"), "--m2", str(tmp_path / "x.png"),
                         "--out", str(tmp_path / "f.png")]) == 0
            scores.append(ssim(read_image(tmp_path / "f.png"), read_image(tmp_path / "x.png")))
    assert min(scores) > 0.85, scores


def test_eval_seg_identical_masks(tmp_path, capsys):
    m = gen_phantom_case(0).mask
    write_image(tmp_path / "p.png", m, raw=True)
    assert main(["eval-seg", "--pred", str(tmp_path / "p.png"), "--ref", str(tmp_path / "p.png"),
                 "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "seg_metrics.csv").read_text().splitlines()
    assert lines[0] == "image_id,dice,miou,hd95"
    _, dice, miou, hd = lines[1].split(",")
    assert float(dice) == 1.0 and float(miou) == 1.0 and float(hd) == 0.0
    summary = json.loads((tmp_path / "r" / "seg_summary.json").read_text())
    assert summary["dice"] == 1.0


def test_eval_fusion_fused_equals_sources(tmp_path):
    img = gen_phantom_case(1).images["A"]
    write_image(tmp_path / "x.png", img)
    x = str(tmp_path / "x.png")
    assert main(["eval-fusion", "--fused", x, "--m1", x, "--m2", x, "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "fusion_metrics.csv").read_text().splitlines()
    assert lines[0] == "image_id,EN,SD,SF,MI,SCD,VIF,Qabf,SSIM"
    assert float(lines[1].split(",")[-1]) == 1.0
    assert main(["eval-fusion", "--fused", x, x, "--m1", x, "--m2", x, "--out", str(tmp_path / "r")]) == 2


def test_verify_exit_codes(tmp_path, capsys):
    assert main(["verify", "--seed", "0", "--out", str(tmp_path / "v.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["passed"] is True and rep["rel_err_analytic"] < 1e-4
    assert json.loads((tmp_path / "v.json").read_text()) == rep
    assert main(["verify", "--corrupt-damping"]) == 1


def test_console_script_usage_error():
    r = subprocess.run([sys.executable, "-m", "fusionseg.cli", "gen-data"], capture_output=True)
    assert r.returncode == 2
