"""Forward process, losses (pixel/feature/hybrid/wavelet), and training smoke."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skiplab import diffusion as D
from skiplab import tensor as T
from skiplab import unet as U
from skiplab.data import make_shapes
from skiplab.errors import ConfigError, DomainError, ShapeError
from skiplab.tensor import Tensor

SCHED = D.NoiseSchedule()


def tiny_net(seed=0):
    cfg = U.UNetConfig(input_channels=1, base_channels=8, depth=2,
                       blocks_per_resolution=2, groupnorm_groups=4,
                       skip_layer_count=4, time_embedding_dim=16)
    return U.MiniUNet(cfg, seed=seed)


class OracleDenoiser:
    """Test stand-in returning a fixed function of the noisy input."""

    def __init__(self, fn):
        self.fn = fn

    def denoise(self, x, sigma, **kwargs):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.fn(x, sigma), []


# -- schedule and perturbation -------------------------------------------------


def test_karras_grid_paper_anchor():
    grid = D.karras_grid(SCHED, 5)
    np.testing.assert_allclose(
        np.round(grid, 4), [80.0, 17.5278, 2.5152, 0.1698, 0.002]
    )


def test_karras_grid_endpoints_exact():
    grid = D.karras_grid(SCHED, 2)
    assert grid[0] == 80.0 and grid[-1] == 0.002


def test_karras_grid_middle_value_n3():
    grid = D.karras_grid(SCHED, 3)
    basis = 80.0 ** (1 / 7) + 0.5 * (0.002 ** (1 / 7) - 80.0 ** (1 / 7))
    assert grid[1] == pytest.approx(basis**7, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(min_value=2, max_value=200))
def test_karras_grid_strictly_decreasing(n):
    grid = D.karras_grid(SCHED, n)
    assert np.all(np.diff(grid) < 0)
    assert grid[0] == SCHED.sigma_max and grid[-1] == SCHED.sigma_min


def test_karras_grid_rejects_tiny_n():
    with pytest.raises(ConfigError):
        D.karras_grid(SCHED, 1)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        D.NoiseSchedule(sigma_min=2.0, sigma_max=1.0)


def test_perturb_basics():
    x0 = np.ones((2, 1, 2, 2))
    eps = np.full_like(x0, 0.5)
    assert np.array_equal(D.perturb(x0, 0.0, eps), x0)
    np.testing.assert_array_equal(D.perturb(np.zeros_like(x0), 2.0, eps), 2.0 * eps)
    with pytest.raises(DomainError):
        D.perturb(x0, -1.0, eps)
    with pytest.raises(ShapeError):
        D.perturb(x0, 1.0, np.zeros((3, 1, 2, 2)))


def test_perturb_monte_carlo_variance():
    rng = np.random.default_rng(0)
    sigma = 1.7
    draws = D.perturb(np.zeros(100_000), sigma, rng.standard_normal(100_000))
    assert abs(draws.var() - sigma**2) / sigma**2 < 0.02


# -- losses ---------------------------------------------------------------------


def test_loss_pixel_perfect_denoiser_is_zero():
    rng = np.random.default_rng(1)
    batch = rng.normal(size=(8, 1, 4, 4))
    sigmas = np.full(8, 1.0)
    eps = rng.standard_normal(batch.shape)

    class Perfect:
        def denoise(self, x, sigma, **kw):
            return Tensor(batch), []

    val = D.loss_pixel(Perfect(), batch, SCHED, D.LossConfig(weighting="uniform"),
                       sigmas=sigmas, eps=eps).item()
    assert val == 0.0


def test_loss_pixel_zero_denoiser_is_mean_square():
    rng = np.random.default_rng(2)
    batch = rng.normal(size=(8, 1, 4, 4))
    zero = OracleDenoiser(lambda x, s: Tensor(np.zeros(x.shape)))
    val = D.loss_pixel(zero, batch, SCHED, D.LossConfig(weighting="uniform"),
                       sigmas=np.full(8, 0.5), eps=rng.standard_normal(batch.shape)).item()
    expect = (batch.reshape(8, -1) ** 2).sum(axis=1).mean()
    assert val == pytest.approx(expect, rel=1e-12)


def test_loss_pixel_gaussian_closed_form():
    # analytic posterior-mean denoiser on N(0, I) data: per-item loss has mean
    # d * sigma^2 / (1 + sigma^2)
    rng = np.random.default_rng(3)
    d = 16
    n = 4000
    sigma = 0.8
    batch = rng.standard_normal((n, 1, 4, 4))
    eps = rng.standard_normal(batch.shape)
    model = D.GaussianDenoiser(1.0)
    val = D.loss_pixel(model, batch, SCHED, D.LossConfig(weighting="uniform"),
                       sigmas=np.full(n, sigma), eps=eps).item()
    expect = d * sigma**2 / (1 + sigma**2)
    # 3 Monte-Carlo standard errors of the per-item squared error
    x_t = D.perturb(batch, sigma, eps)
    with T.no_grad():
        xhat = model.denoise(x_t, np.full(n, sigma))[0].data
    per_item = ((xhat - batch).reshape(n, -1) ** 2).sum(axis=1)
    se = per_item.std(ddof=1) / np.sqrt(n)
    assert abs(val - expect) <= 3 * se


def test_loss_feature_identity_extractor_equals_pixel():
    rng = np.random.default_rng(4)
    batch = rng.normal(size=(6, 1, 4, 4)) * 0.5
    net = tiny_net()
    sigmas = np.exp(rng.uniform(np.log(0.01), np.log(10.0), size=6))
    eps = rng.standard_normal(batch.shape)
    cfg = D.LossConfig(weighting="edm")
    a = D.loss_pixel(net, batch, SCHED, cfg, sigmas=sigmas, eps=eps).item()
    b = D.loss_feature(net, batch, SCHED, cfg, f=D.IdentityFeatures(),
                       sigmas=sigmas, eps=eps).item()
    assert a == b


def test_loss_feature_linear_map_oracle():
    rng = np.random.default_rng(5)
    batch = rng.normal(size=(5, 1, 4, 4))
    amat = rng.normal(size=(16, 7))

    class LinearMap:
        def features(self, x):
            return T.matmul(T.reshape(x, (x.shape[0], 16)), Tensor(amat))

    zero = OracleDenoiser(lambda x, s: Tensor(np.zeros(x.shape)))
    sigmas = np.full(5, 1.0)
    eps = rng.standard_normal(batch.shape)
    val = D.loss_feature(zero, batch, SCHED, D.LossConfig(weighting="uniform"),
                         f=LinearMap(), sigmas=sigmas, eps=eps).item()
    expect = np.mean([(batch[i].reshape(16) @ amat @ amat.T @ batch[i].reshape(16)) for i in range(5)])
    # residual is -x0 mapped through A; squared norm = x0^T A A^T x0
    assert val == pytest.approx(expect, rel=1e-10)


def test_loss_feature_requires_extractor():
    with pytest.raises(ConfigError):
        D.loss_feature(tiny_net(), np.zeros((2, 1, 4, 4)), SCHED, D.LossConfig(),
                       sigmas=np.ones(2), eps=np.zeros((2, 1, 4, 4)))


def test_loss_hybrid_weight_zero_is_pixel():
    rng = np.random.default_rng(6)
    batch = rng.normal(size=(4, 1, 4, 4))
    net = tiny_net()
    sigmas = np.full(4, 2.0)
    eps = rng.standard_normal(batch.shape)
    cfg0 = D.LossConfig(hybrid_feature_weight=0.0)
    a = D.loss_hybrid(net, batch, SCHED, cfg0, sigmas=sigmas, eps=eps).item()
    b = D.loss_pixel(net, batch, SCHED, cfg0, sigmas=sigmas, eps=eps).item()
    assert a == b


def test_loss_hybrid_identity_extractor_doubles_pixel():
    rng = np.random.default_rng(7)
    batch = rng.normal(size=(4, 1, 4, 4))
    net = tiny_net()
    sigmas = np.full(4, 1.0)
    eps = rng.standard_normal(batch.shape)
    cfg = D.LossConfig(hybrid_feature_weight=1.0)
    h = D.loss_hybrid(net, batch, SCHED, cfg, f=D.IdentityFeatures(),
                      sigmas=sigmas, eps=eps).item()
    p = D.loss_pixel(net, batch, SCHED, cfg, sigmas=sigmas, eps=eps).item()
    assert h == pytest.approx(2 * p, rel=1e-14)


def test_loss_hybrid_recomposition():
    rng = np.random.default_rng(8)
    images, labels = make_shapes(64, size=8, seed=0)
    clf_cfg = D.ClassifierConfig(num_classes=4, width=4, feature_dim=8, steps=30)
    clf, _ = D.train_classifier(images, labels, clf_cfg, seed=0)
    net = tiny_net()
    batch = images[:6]
    sigmas = np.full(6, 1.0)
    eps = rng.standard_normal(batch.shape)
    cfg = D.LossConfig(hybrid_feature_weight=1.0, weighting="uniform")
    h = D.loss_hybrid(net, batch, SCHED, cfg, f=clf, sigmas=sigmas, eps=eps).item()
    p = D.loss_pixel(net, batch, SCHED, cfg, sigmas=sigmas, eps=eps).item()
    f = D.loss_feature(net, batch, SCHED, cfg, f=clf, sigmas=sigmas, eps=eps).item()
    assert h == pytest.approx(p + f, abs=1e-12)


# -- wavelet bands ---------------------------------------------------------------


def test_haar_hand_example_2x2():
    ll, lh, hl, hh = D.haar_dwt2(np.array([[1.0, 0.0], [0.0, 0.0]]))
    for band in (ll, lh, hl, hh):
        assert band.item() == pytest.approx(0.5)


def test_haar_constant_image_has_no_detail():
    x = np.full((2, 1, 4, 4), 3.7)
    ll, lh, hl, hh = D.haar_dwt2(x)
    assert np.allclose(lh, 0) and np.allclose(hl, 0) and np.allclose(hh, 0)
    assert np.allclose(ll, 3.7 * 2)


def test_haar_rejects_odd_dims():
    with pytest.raises(ConfigError):
        D.haar_dwt2(np.zeros((1, 1, 3, 4)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_haar_parseval(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 1, 8, 8))
    bands = D.haar_dwt2(x)
    total = sum((b**2).sum() for b in bands)
    assert total == pytest.approx((x**2).sum(), abs=1e-10)


def test_haar_against_blockwise_oracle():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 6))
    ll, lh, hl, hh = D.haar_dwt2(x)
    for by in range(3):
        for bx in range(3):
            a, b = x[2 * by, 2 * bx], x[2 * by, 2 * bx + 1]
            c, d = x[2 * by + 1, 2 * bx], x[2 * by + 1, 2 * bx + 1]
            assert ll[by, bx] == pytest.approx((a + b + c + d) / 2)
            assert lh[by, bx] == pytest.approx((a - b + c - d) / 2)
            assert hl[by, bx] == pytest.approx((a + b - c - d) / 2)
            assert hh[by, bx] == pytest.approx((a - b - c + d) / 2)


def test_wavelet_band_losses_recompose_to_pixel_sum():
    rng = np.random.default_rng(10)
    batch = rng.normal(size=(5, 1, 8, 8))
    net = tiny_net()
    sigmas = np.full(5, 1.0)
    eps = rng.standard_normal(batch.shape)
    bands = D.loss_wavelet_bands(net, batch, SCHED, D.LossConfig(), sigmas=sigmas, eps=eps)
    x_t = D.perturb(batch, sigmas, eps)
    with T.no_grad():
        xhat = net.denoise(x_t, sigmas)[0].data
    pixel_sum = ((xhat - batch).reshape(5, -1) ** 2).sum(axis=1).mean()
    assert sum(bands.values()) == pytest.approx(pixel_sum, abs=1e-10)
    assert set(bands) == {"LL", "LH", "HL", "HH"}


# -- training -------------------------------------------------------------------


def test_train_zero_steps_keeps_parameters():
    net = tiny_net(seed=3)
    before = [p.data.copy() for p in net.parameters()]
    D.train(net, np.zeros((4, 1, 8, 8)), D.OptimizerConfig(), D.LossConfig(), steps=0)
    for old, p in zip(before, net.parameters()):
        assert np.array_equal(old, p.data)


def test_train_decreases_held_out_loss():
    images, _ = make_shapes(256, size=8, seed=1)
    net = tiny_net(seed=4)
    held = images[200:]
    cfg = D.LossConfig()
    before = D.held_out_pixel_loss(net, held, SCHED, cfg)
    D.train(net, images[:200], D.OptimizerConfig(batch_size=16, learning_rate=3e-3),
            cfg, steps=120, seed=0)
    after = D.held_out_pixel_loss(net, held, SCHED, cfg)
    assert after < before


def test_train_nan_raises_with_step_index():
    net = tiny_net(seed=5)
    images = np.full((8, 1, 8, 8), np.nan)
    with pytest.raises(D.TrainingError) as exc:
        D.train(net, images, D.OptimizerConfig(), D.LossConfig(), steps=3)
    assert exc.value.step == 0


def test_classifier_reaches_target_accuracy():
    images, labels = make_shapes(600, size=8, noise_sigma=0.12, seed=2)
    cfg = D.ClassifierConfig(num_classes=4, width=8, feature_dim=32, steps=250)
    clf, acc = D.train_classifier(images, labels, cfg, seed=0)
    assert acc > cfg.target_accuracy


def test_classifier_checkpoint_roundtrip(tmp_path):
    images, labels = make_shapes(64, size=8, seed=3)
    cfg = D.ClassifierConfig(num_classes=4, width=4, feature_dim=8, steps=20)
    clf, _ = D.train_classifier(images, labels, cfg, seed=0)
    clf.save(tmp_path / "clf.ckpt")
    loaded = D.Classifier.load(tmp_path / "clf.ckpt")
    with T.no_grad():
        a = clf.features(images[:4]).data
        b = loaded.features(images[:4]).data
    assert np.array_equal(a, b)
