"""Metric oracles: every check is against an independent loop-based computation or a closed form."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusionseg.metrics import dice, en, hd95, iou, mi, miou, qabf, scd, sd, seg_report, sf, ssim, vif
from fusionseg.metrics.fusion import QABF_PERFECT, fusion_report, mutual_information
from oracles import (entropy_oracle, hd95_oracle, mi_oracle, pearson_oracle, sd_oracle, sf_oracle,
                     ssim_oracle)

unit = st.floats(0, 1, allow_nan=False)


@pytest.fixture
def imgs8():
    rng = np.random.default_rng(11)
    return rng.random((8, 8)), rng.random((8, 8)), rng.random((8, 8))


def test_en_sd_sf_against_oracles(imgs8):
    f, _, _ = imgs8
    assert abs(en(f) - entropy_oracle(f)) < 1e-9
    assert abs(sd(f) - sd_oracle(f)) < 1e-9
    assert abs(sf(f) - sf_oracle(f)) < 1e-9


def test_mi_scd_against_oracles(imgs8):
    f, a, b = imgs8
    assert abs(mi(f, a, b) - (mi_oracle(f, a) + mi_oracle(f, b))) < 1e-9
    assert abs(scd(f, a, b) - (pearson_oracle(f - b, a) + pearson_oracle(f - a, b))) < 1e-9


def test_ssim_against_oracle():
    rng = np.random.default_rng(12)
    a, b = rng.random((13, 13)), rng.random((13, 13))
    assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-9


def test_ssim_small_image_window():
    rng = np.random.default_rng(13)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    assert abs(ssim(a, b) - ssim_oracle(a, b, win=7)) < 1e-9
    assert abs(ssim(a, a) - 1.0) < 1e-12


def test_en_examples():
    assert en(np.full((4, 4), 0.3)) == 0.0
    half = np.zeros((4, 4))
    half[:2] = 1.0
    assert en(half) == 1.0
    u = np.random.default_rng(0).integers(0, 256, (256, 256)) / 255.0
    assert 7.9 <= en(u) <= 8.0


def test_sd_sf_examples():
    assert sd(np.full((4, 4), 0.5)) == 0.0
    cb = (np.indices((4, 4)).sum(0) % 2).astype(float)
    assert abs(sd(cb) - 127.5) < 1e-12
    stripes = np.tile([0.0, 1.0], (4, 2))
    assert abs(sf(stripes) - 255.0) < 1e-12


def test_mi_examples():
    c = np.full((4, 4), 0.2)
    assert mi(c, c, c) == 0.0
    a = np.random.default_rng(1).random((16, 16))
    assert abs(mi(a, a, a) - 2 * en(a)) < 1e-9
    with pytest.raises(ValueError):
        mutual_information(a, a[:8])


def test_scd_examples():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((64, 64))
    b = rng.standard_normal((64, 64))
    a -= a.mean()
    b -= b.mean()
    assert abs(scd(a + b, a, b) - 2.0) < 1e-12
    assert scd(a, a, a) == 0.0


def test_vif_examples():
    rng = np.random.default_rng(3)
    x = rng.random((32, 32))
    assert abs(vif(x, x, x) - 1.0) < 1e-6
    noise = rng.random((32, 32))
    assert vif(noise, x, rng.random((32, 32))) < 0.1
    c = np.full((32, 32), 0.5)
    assert math.isfinite(vif(c, c, c))


def test_qabf_examples():
    rng = np.random.default_rng(4)
    x = rng.random((32, 32))
    assert qabf(x, x, x) >= 0.99
    assert qabf(np.full((32, 32), 0.4), x, rng.random((32, 32))) < 0.01
    assert 0.0 <= qabf(rng.random((32, 32)), x, x) <= 1.0
    # raw (unnormalized) score of a perfect transfer is the product of the sigmoid peaks
    assert abs(qabf(x, x, x, normalize=False) - QABF_PERFECT) < 1e-6


def test_ssim_examples():
    rng = np.random.default_rng(5)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-15
    assert ssim(a, 1 - a) < 0


def test_fusion_report_ranges():
    rng = np.random.default_rng(6)
    r = fusion_report(rng.random((32, 32)), rng.random((32, 32)), rng.random((32, 32)))
    assert 0 <= r.en <= 8 and -1 <= r.ssim <= 1 and 0 <= r.qabf <= 1 and -2 <= r.scd <= 2
    assert all(math.isfinite(v) for v in r.row())


def test_dice_iou_examples():
    m = np.zeros((6, 6), int)
    m[1:3, 1:3] = 1
    assert dice(m, m, 1) == 1.0 and miou(m, m, 2) == 1.0
    other = np.zeros((6, 6), int)
    other[4:6, 4:6] = 1
    assert dice(m, other, 1) == 0.0
    p = np.zeros((4, 4), int)
    g = np.zeros((4, 4), int)
    p[0, 0:4] = 1
    g[0, 2:4] = 1
    g[1, 2:4] = 1
    assert dice(p, g, 1) == 0.5
    assert abs(iou(p, g, 1) - 1 / 3) < 1e-15
    # empty-empty class counts as perfect
    assert dice(np.zeros((3, 3), int), np.zeros((3, 3), int), 2) == 1.0


def test_hd95_examples():
    sq = np.zeros((12, 12), int)
    sq[3:8, 3:8] = 1
    assert hd95(sq, sq, 1) == 0.0
    shifted = np.roll(sq, 1, axis=1)
    assert hd95(shifted, sq, 1) == 1.0
    assert hd95(np.zeros_like(sq), sq, 1) == math.inf


def test_hd95_random_against_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(5):
        p = (rng.random((10, 10)) < 0.4).astype(int)
        g = (rng.random((10, 10)) < 0.4).astype(int)
        assert abs(hd95(p, g, 1) - hd95_oracle(p, g)) < 1e-12


def test_seg_report_label_range():
    with pytest.raises(ValueError):
        seg_report(np.array([[0, 3]]), np.array([[0, 1]]))
    with pytest.raises(ValueError):
        seg_report(np.zeros((2, 2), int), np.zeros((3, 3), int))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 8), elements=unit), arrays(np.float64, (8, 8), elements=unit),
       arrays(np.float64, (8, 8), elements=unit), st.integers(0, 3), st.booleans())
def test_spatial_transform_invariance(f, a, b, k, flip):
    def t(x):
        x = np.rot90(x, k)
        return x[:, ::-1] if flip else x

    assert abs(en(t(f)) - en(f)) < 1e-12
    assert abs(sd(t(f)) - sd(f)) < 1e-9
    assert abs(sf(t(f)) - sf(f)) < 1e-9
    assert abs(mi(t(f), t(a), t(b)) - mi(f, a, b)) < 1e-9
    assert abs(scd(t(f), t(a), t(b)) - scd(f, a, b)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(0, 2)), arrays(np.int64, (6, 6), elements=st.integers(0, 2)),
       st.integers(0, 2))
def test_dice_iou_relation(p, g, k):
    d, j = dice(p, g, k), iou(p, g, k)
    assert abs(d - 2 * j / (1 + j)) < 1e-12
    assert 0 <= j <= d <= 1
