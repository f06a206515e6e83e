import numpy as np
import pytest

from fusionseg import losses as L
from fusionseg.metrics import ssim as ssim_np
from fusionseg.models.fusion import FeaturePair
from fusionseg.models.seg import SegOutput
from fusionseg.tensor import ShapeError, Tensor, gradcheck, ops


def test_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(sigma=1.5)
    with pytest.raises(ValueError):
        L.LossWeights(lambda_adv=-1)
    assert L.LossWeights().eps == 1.01


def test_cc_identical_and_negated():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    assert abs(L.cc(x, x).item() - 1.0) < 1e-12
    assert abs(L.cc(x, -x).item() + 1.0) < 1e-12
    with pytest.raises(ShapeError):
        L.cc(np.ones((2, 4)), np.ones((2, 4)))


def test_correlation_ratio_values():
    # cc_high = 0.5, cc_low = 1 -> 0.25 / 2.01
    assert abs(L.correlation_ratio(Tensor(0.5), Tensor(1.0)).item() - 0.25 / 2.01) < 1e-12
    # cc_low = -1 keeps the denominator positive (0.01)
    assert abs(L.correlation_ratio(Tensor(0.1), Tensor(-1.0)).item() - 1.0) < 1e-9


def test_loss_correlation_gradcheck():
    rng = np.random.default_rng(1)
    ts = [Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True) for _ in range(4)]

    def f(h1, h2, l1, l2):
        return L.loss_correlation(FeaturePair(l1, h1), FeaturePair(l2, h2))

    assert gradcheck(f, ts) < 1e-6


def test_adversarial_losses():
    half = Tensor(np.full(4, 0.5))
    np.testing.assert_allclose(L.loss_adv_generator(half, half).item(), 2 * np.log(0.5), rtol=1e-10)
    np.testing.assert_allclose(L.loss_discriminator(half, half).item(), -2 * np.log(0.5), rtol=1e-10)
    # confident, correct discriminator -> loss near 0
    assert L.loss_discriminator(Tensor(np.full(2, 0.999)), Tensor(np.full(2, 0.001))).item() < 0.01


def test_tensor_ssim_matches_numpy_metric():
    rng = np.random.default_rng(2)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    t = L.ssim(Tensor(a[None, None]), Tensor(b[None, None])).item()
    assert abs(t - ssim_np(a, b)) < 1e-9
    assert abs(L.ssim(Tensor(a[None, None]), Tensor(a[None, None])).item() - 1.0) < 1e-9


def test_content_loss_zero_on_perfect_recon():
    x = Tensor(np.random.default_rng(3).random((2, 1, 16, 16)))
    assert abs(L.loss_content_pretrain(x, x).item()) < 1e-9


def test_enc_total_weighting():
    w = L.LossWeights(lambda_adv=0.0, sigma=0.25)
    out = L.loss_enc_total(Tensor(5.0), Tensor(2.0), Tensor(4.0), w)
    assert abs(out.item() - (0.25 * 2.0 + 0.75 * 4.0)) < 1e-12


def test_text_loss_zero_when_fused_copies_stronger_source():
    rng = np.random.default_rng(4)
    x = Tensor(rng.random((1, 1, 12, 12)))
    assert L.loss_text(x, x, x).item() < 1e-12
    flat = Tensor(np.full((1, 1, 12, 12), 0.3))
    # a flat second source contributes nothing, so copying x is still optimal
    assert L.loss_text(x, x, flat).item() < 1e-12
    assert L.loss_text(flat, x, flat).item() > 0


def test_text_loss_gradcheck():
    rng = np.random.default_rng(5)
    f = Tensor(rng.random((1, 1, 6, 6)), requires_grad=True)
    x, y = Tensor(rng.random((1, 1, 6, 6))), Tensor(rng.random((1, 1, 6, 6)))
    assert gradcheck(lambda t: L.loss_text(t, x, y), [f]) < 1e-5


def _out(probs):
    return SegOutput(logits=Tensor(np.log(probs)), probs=Tensor(probs, requires_grad=True))


def test_dice_and_ce_on_perfect_prediction():
    gt = np.array([[[0, 1], [2, 2]]])
    probs = L.one_hot(gt, 3)
    assert L.loss_dice(Tensor(probs), gt).item() < 1e-9
    assert L.loss_ce(Tensor(probs), gt).item() < 1e-9


def test_one_hot_range_error():
    with pytest.raises(ValueError):
        L.one_hot(np.array([0, 3]), 3)


def test_seg_loss_gradcheck():
    rng = np.random.default_rng(6)
    logits = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    gt = rng.integers(0, 3, (2, 3, 3))
    w = L.LossWeights(alpha=0.7, beta=0.3)

    def f(lg):
        p = ops.softmax(lg, axis=1)
        return L.loss_seg(SegOutput(lg, p), gt, w)

    assert gradcheck(f, [logits]) < 1e-6


def test_joint_lambda_zero():
    ls, lf = Tensor(1.5), Tensor(10.0)
    assert L.loss_joint(ls, lf, L.LossWeights(lambda_fuse=0.0)).item() == 1.5
    assert L.loss_joint(ls, lf, L.LossWeights(lambda_fuse=0.5)).item() == 6.5


def test_cc_shuffle_near_zero():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((64, 1, 8, 8))
    vals = [L.cc(x[i], rng.permutation(x[i].ravel()).reshape(1, 8, 8)).item() for i in range(64)]
    assert abs(np.mean(vals)) < 0.1


def test_correlation_ratio_spec_arithmetic():
    assert L.correlation_ratio(Tensor(0.0), Tensor(1.0)).item() == 0.0
    assert abs(L.correlation_ratio(Tensor(1.0), Tensor(1.0)).item() - 1 / 2.01) < 1e-12
    assert abs(L.correlation_ratio(Tensor(1.0), Tensor(-1.0)).item() - 100.0) < 1e-6


def test_adv_generator_guard_and_symmetry():
    one = Tensor(np.ones(2))
    v = L.loss_adv_generator(one, one).item()
    assert np.isfinite(v) and v < 2 * np.log(1e-11)
    a, b = Tensor(np.array([0.2, 0.7])), Tensor(np.array([0.4, 0.1]))
    assert L.loss_adv_generator(a, b).item() == L.loss_adv_generator(b, a).item()


def test_content_loss_zero_vs_one():
    x, r = np.zeros((1, 1, 16, 16)), np.ones((1, 1, 16, 16))
    expect = 1.0 + (1.0 - ssim_np(x[0, 0], r[0, 0]))
    assert abs(L.loss_content_pretrain(Tensor(x), Tensor(r)).item() - expect) < 1e-9


def test_enc_total_default_arithmetic():
    w = L.LossWeights()
    assert abs(L.loss_enc_total(Tensor(1.0), Tensor(2.0), Tensor(3.0), w).item() - 2.6) < 1e-12
    pure = L.LossWeights(lambda_adv=0.0, sigma=0.0)
    assert L.loss_enc_total(Tensor(9.0), Tensor(7.0), Tensor(3.0), pure).item() == 3.0
    assert L.loss_enc_total(Tensor(0.0), Tensor(2.0), Tensor(3.0), L.LossWeights(sigma=1.0)).item() == 2.0


def _sobel_mag_oracle(img):
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            gx = sum(kx[u][v] * p[i + u, j + v] for u in range(3) for v in range(3))
            gy = sum(kx[v][u] * p[i + u, j + v] for u in range(3) for v in range(3))
            out[i, j] = 0.5 * (abs(gx) + abs(gy))
    return out


def test_text_loss_brute_force():
    rng = np.random.default_rng(9)
    f, x, y = (rng.random((8, 8)) for _ in range(3))
    expect = np.mean(np.abs(_sobel_mag_oracle(f) - np.maximum(_sobel_mag_oracle(x), _sobel_mag_oracle(y))))
    got = L.loss_text(Tensor(f[None, None]), Tensor(x[None, None]), Tensor(y[None, None])).item()
    assert abs(got - expect) < 1e-6


def test_text_loss_constant_fused():
    rng = np.random.default_rng(10)
    x = rng.random((8, 8))
    flat = np.full((8, 8), 0.5)
    got = L.loss_text(Tensor(flat[None, None]), Tensor(x[None, None]), Tensor(flat[None, None])).item()
    assert abs(got - _sobel_mag_oracle(x).mean()) < 1e-6


def test_fusion_total_text_only_and_gradient():
    w = L.LossWeights(lambda_adv=0.0, sigma=0.0)
    assert L.loss_fusion_total(Tensor(3.0), Tensor(5.0), Tensor(0.25), w).item() == 0.25


def test_uniform_ce_and_disjoint_dice():
    gt = np.array([[[0, 1], [2, 1]]])
    uni = Tensor(np.full((1, 3, 2, 2), 1 / 3))
    assert abs(L.loss_ce(uni, gt).item() - np.log(3)) < 1e-9
    wrong = L.one_hot((gt + 1) % 3, 3)
    assert L.loss_dice(Tensor(wrong), gt).item() > 0.99
    with pytest.raises(ValueError):
        L.loss_seg(SegOutput(uni, uni), np.array([[[0, 3], [0, 0]]]), L.LossWeights())
