import numpy as np
import pytest

from dc4cr import metrics
from dc4cr import numerics as nx
from dc4cr.imagery import Image
from dc4cr.numerics import Tensor
from dc4cr.synthcloud import composite, gen_cloud, gen_terrain


def const(v, size=16):
    return Image(np.full((size, size, 3), v))


def noise_image(seed, size=32):
    return Image(np.random.default_rng(seed).random((size, size, 3)))


def test_mse_examples():
    assert metrics.mse(const(0.3), const(0.3)) == 0.0
    assert metrics.mse(const(0.0), const(0.5)) == 0.25
    assert metrics.mse(const(0.0), const(1.0)) == 1.0
    with pytest.raises(ValueError):
        metrics.mse(const(0.0, 16), const(0.0, 12))


def test_psnr_examples():
    assert metrics.psnr(const(0.2), const(0.2)) == 100.0
    assert metrics.psnr(const(0.0), const(0.5)) == pytest.approx(6.0206, abs=1e-3)


def test_ssim_identity_exact():
    a = noise_image(0)
    assert metrics.ssim(a, a) == 1.0


def test_ssim_checkerboard_inverse_negative():
    cb = (np.indices((32, 32)).sum(0) % 2).astype(float)
    a = Image(np.repeat(cb[..., None], 3, axis=-1))
    assert metrics.ssim(a, Image(1.0 - a.pixels)) < 0


@pytest.mark.parametrize("seed", range(10))
def test_ssim_of_independent_noise_is_small(seed):
    assert abs(metrics.ssim(noise_image(2 * seed, 64), noise_image(2 * seed + 1, 64))) < 0.15


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_brute_force(seed, ssim_oracle):
    a, b = noise_image(seed, 16), gen_terrain(seed, 16)
    assert metrics.ssim(a, b) == pytest.approx(ssim_oracle(a.pixels, b.pixels), abs=1e-6)


def test_ssim_window_precondition():
    with pytest.raises(ValueError, match="at least"):
        metrics.ssim(const(0.1, 8), const(0.2, 8))


def test_symmetry_and_flip_invariance():
    a, b = gen_terrain(1, 32), noise_image(5)
    fa, fb = Image(a.pixels[:, ::-1]), Image(b.pixels[:, ::-1])
    assert metrics.psnr(a, b) == metrics.psnr(b, a)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)
    assert metrics.psnr(fa, fb) == pytest.approx(metrics.psnr(a, b), abs=1e-9)
    assert metrics.ssim(fa, fb) == pytest.approx(metrics.ssim(a, b), abs=1e-9)


def _gram_loops(f):
    c, h, w = f.shape
    g = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            g[i, j] = sum(f[i, p, q] * f[j, p, q] for p in range(h) for q in range(w)) / (h * w)
    return g


def test_gram_examples():
    f = np.stack([np.ones((2, 2)), np.full((2, 2), 2.0)])
    np.testing.assert_array_equal(metrics.gram_matrix(Tensor(f)).data, [[1.0, 2.0], [2.0, 4.0]])
    np.testing.assert_array_equal(metrics.gram_matrix(Tensor(np.zeros((3, 2, 2)))).data, np.zeros((3, 3)))


def test_gram_psd_and_matches_loops():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(4, 3, 5))
    g = metrics.gram_matrix(Tensor(f)).data
    np.testing.assert_allclose(g, _gram_loops(f), atol=1e-12)
    np.testing.assert_allclose(g, g.T, atol=0)
    assert np.all(np.diag(g) >= 0)
    for _ in range(20):
        v = rng.normal(size=4)
        assert v @ g @ v >= -1e-10
    batched = metrics.gram_matrix(Tensor(f[None])).data[0]
    np.testing.assert_allclose(batched, g, atol=1e-12)


def test_style_loss_examples():
    ref = gen_terrain(0, 32)
    assert metrics.style_loss(ref, ref) == 0.0
    other = gen_terrain(1, 32)
    assert metrics.style_loss(ref, other) == pytest.approx(metrics.style_loss(other, ref), rel=1e-12)
    with pytest.raises(ValueError):
        metrics.style_loss(ref, ref, weights=(1.0, 1.0))


@pytest.mark.parametrize("seed", range(10))
def test_style_loss_penalises_channel_swap(seed):
    ref = gen_terrain(seed, 32)
    swapped = Image(ref.pixels[..., [2, 0, 1]])
    noisy = Image(np.clip(ref.pixels + np.random.default_rng(seed).normal(0, 0.01, ref.shape), 0, 1))
    assert metrics.style_loss(swapped, ref) > metrics.style_loss(noisy, ref)


def test_style_loss_gradient():
    ref = Tensor(gen_terrain(2, 16).pixels.transpose(2, 0, 1)[None].copy())
    gen = Tensor(gen_terrain(3, 16).pixels.transpose(2, 0, 1)[None].copy())
    rng = np.random.default_rng(0)
    idx = [tuple(rng.integers(0, s) for s in gen.shape) for _ in range(10)]
    err = nx.grad_check(lambda t: metrics.style_loss_tensor(t, ref).sum(), gen, 1e-4, indices=idx)
    assert err < 1e-3


def test_extractor_fixed_weights():
    a, b = metrics.StyleFeatureExtractor(), metrics.StyleFeatureExtractor()
    assert [k.shape for k in a.kernels] == [(8, 3, 3, 3), (16, 8, 3, 3), (32, 16, 3, 3)]
    for ka, kb in zip(a.kernels, b.kernels):
        assert ka.data.tobytes() == kb.data.tobytes()


def test_perceptual_distance_basic():
    a, b = gen_terrain(0, 32), gen_terrain(1, 32)
    assert metrics.perceptual_distance(a, a) == 0.0
    assert metrics.perceptual_distance(a, b) > 0.0
    assert metrics.perceptual_distance(a, b) == metrics.perceptual_distance(b, a)


def test_perceptual_distance_orders_cloud_thickness():
    thin, thick = [], []
    for seed in range(50):
        clean = gen_terrain(seed, 32)
        for kind, acc in (("thin", thin), ("thick", thick)):
            alpha, colour = gen_cloud(seed, 32, kind)
            acc.append(metrics.perceptual_distance(clean, composite(clean, alpha, colour)))
    assert np.mean(thick) > np.mean(thin)


def test_complexity_score_examples():
    a = gen_terrain(4, 16)
    assert metrics.complexity_score(a, a) == 0.0
    assert metrics.score_from_terms(0.04, 0.9) == pytest.approx(0.14, abs=1e-12)
    b = gen_terrain(5, 16)
    s1 = metrics.complexity_score(a, b, 1.0, 1.0)
    assert metrics.complexity_score(a, b, 2.0, 2.0) == pytest.approx(2 * s1, rel=1e-12)


def test_complexity_score_monotone():
    base = metrics.score_from_terms(0.02, 0.8)
    assert metrics.score_from_terms(0.03, 0.8) >= base
    assert metrics.score_from_terms(0.02, 0.7) >= base


def test_quality_report_json():
    a = gen_terrain(0, 32)
    rep = metrics.quality_report(a, a)
    assert rep.to_json() == {"psnr": 100.0, "ssim": 1.0, "pd": 0.0}
