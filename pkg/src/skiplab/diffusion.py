"""Variance-exploding forward process, training objectives, and training loops.

Conventions: sigma(t) = t with unit drift-free dynamics, so a noisy sample is
x0 + sigma * eps and the deterministic reverse process is
dx/dsigma = (x - x0_hat) / sigma.  The sigma discretization follows the usual
power-interpolation grid between sigma_max and sigma_min.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError, TrainingError
from .tensor import Tensor
from .unet import denoiser_precondition  # noqa: F401  (re-exported convenience)


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    karras_exponent: float = 7.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError(
                f"need 0 < sigma_min < sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )


def karras_grid(schedule, n):
    """Strictly decreasing sigma grid of n values from sigma_max to sigma_min.

    sigma_i = (smax^(1/k) + (i/(n-1)) * (smin^(1/k) - smax^(1/k)))^k; the two
    endpoints are pinned exactly.
    """
    if n < 2:
        raise ConfigError(f"grid needs at least 2 values, got {n}")
    kappa = schedule.karras_exponent
    hi = schedule.sigma_max ** (1.0 / kappa)
    lo = schedule.sigma_min ** (1.0 / kappa)
    t = np.arange(n) / (n - 1)
    grid = (hi + t * (lo - hi)) ** kappa
    grid[0] = schedule.sigma_max
    grid[-1] = schedule.sigma_min
    return grid


def perturb(x0, sigma, eps):
    """x0 + sigma * eps (unit-variance forward kernel with alpha = 1)."""
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0):
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if sig.ndim:
        sig = sig.reshape((-1,) + (1,) * (x0.ndim - 1))
    return x0 + sig * eps


def sample_log_uniform_sigmas(schedule, n, rng):
    """Per-item training noise levels, log-uniform over the sigma range."""
    lo, hi = np.log(schedule.sigma_min), np.log(schedule.sigma_max)
    return np.exp(rng.uniform(lo, hi, size=n))


@dataclass(frozen=True)
class LossConfig:
    weighting: str = "edm"  # "uniform" or "edm"
    sigma_data: float = 0.5
    feature_extractor: Optional[object] = None
    hybrid_feature_weight: float = 1.0

    def weight(self, sigma):
        sig = np.asarray(sigma, dtype=np.float64)
        if self.weighting == "uniform":
            return np.ones_like(sig)
        if self.weighting == "edm":
            sd = self.sigma_data
            return (sig**2 + sd**2) / (sig * sd) ** 2
        raise ConfigError(f"unknown weighting {self.weighting!r}")


def _denoise_batch(net, x_t, sigmas, profile=None, mode=None):
    out, _ = net.denoise(x_t, sigmas, profile=profile, mode=mode)
    return out


def _per_item_sq(residual):
    axes = tuple(range(1, residual.ndim))
    return T.tsum(T.mul(residual, residual), axis=axes)


def _draws(batch, schedule, cfg, rng, sigmas, eps):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ConfigError("empty batch")
    if sigmas is None:
        if rng is None:
            raise ConfigError("need either an rng or explicit sigmas")
        sigmas = sample_log_uniform_sigmas(schedule, batch.shape[0], rng)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.ndim == 0:
        sigmas = np.full(batch.shape[0], float(sigmas))
    if eps is None:
        if rng is None:
            raise ConfigError("need either an rng or explicit eps")
        eps = rng.standard_normal(batch.shape)
    return batch, sigmas, eps


def loss_pixel(net, batch, schedule, cfg, rng=None, sigmas=None, eps=None,
               profile=None, mode=None):
    """Weighted squared clean-prediction error, averaged over the batch.

    Returns a scalar Tensor (use .item() for the value).  sigmas/eps override
    the random draws so paired comparisons can share them.
    """
    x0, sigmas, eps = _draws(batch, schedule, cfg, rng, sigmas, eps)
    x_t = perturb(x0, sigmas, eps)
    x_hat = _denoise_batch(net, x_t, sigmas, profile, mode)
    residual = T.sub(x_hat, Tensor(x0))
    per_item = _per_item_sq(residual)
    return T.tmean(T.mul(per_item, Tensor(cfg.weight(sigmas))))


def loss_feature(net, batch, schedule, cfg, f=None, rng=None, sigmas=None, eps=None,
                 profile=None, mode=None):
    """Weighted squared error of feature embeddings of the clean prediction."""
    f = f if f is not None else cfg.feature_extractor
    if f is None:
        raise ConfigError("loss_feature needs a feature extractor")
    x0, sigmas, eps = _draws(batch, schedule, cfg, rng, sigmas, eps)
    x_t = perturb(x0, sigmas, eps)
    x_hat = _denoise_batch(net, x_t, sigmas, profile, mode)
    with T.no_grad():
        ref = f.features(Tensor(x0)).data
    feat = f.features(x_hat)
    per_item = _per_item_sq(T.sub(feat, Tensor(ref)))
    return T.tmean(T.mul(per_item, Tensor(cfg.weight(sigmas))))


def loss_hybrid(net, batch, schedule, cfg, f=None, rng=None, sigmas=None, eps=None,
                profile=None, mode=None):
    """loss_pixel + hybrid_feature_weight * loss_feature on shared draws."""
    f = f if f is not None else cfg.feature_extractor
    w = cfg.hybrid_feature_weight
    x0, sigmas, eps = _draws(batch, schedule, cfg, rng, sigmas, eps)
    x_t = perturb(x0, sigmas, eps)
    x_hat = _denoise_batch(net, x_t, sigmas, profile, mode)
    weights = Tensor(cfg.weight(sigmas))
    pixel = T.tmean(T.mul(_per_item_sq(T.sub(x_hat, Tensor(x0))), weights))
    if w == 0.0:
        return pixel
    if f is None:
        raise ConfigError("hybrid loss with nonzero feature weight needs an extractor")
    with T.no_grad():
        ref = f.features(Tensor(x0)).data
    feat_term = T.tmean(T.mul(_per_item_sq(T.sub(f.features(x_hat), Tensor(ref))), weights))
    return T.add(pixel, T.mul_scalar(feat_term, w))


# -- wavelet bands -------------------------------------------------------------

BAND_NAMES = ("LL", "LH", "HL", "HH")


def haar_dwt2(x):
    """Single-level orthonormal Haar transform over the last two axes.

    Returns (LL, LH, HL, HH): approximation, horizontal detail, vertical
    detail, diagonal detail.  The transform is orthonormal, so total energy
    is preserved across the four bands.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ConfigError(f"haar transform needs even spatial dims, got {(h, w)}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def loss_wavelet_bands(net, batch, schedule, cfg, rng=None, sigmas=None, eps=None,
                       profile=None, mode=None):
    """Mean per-item energy of the clean-prediction residual in each Haar band.

    Returned as a dict over ("LL", "LH", "HL", "HH") using a sum-reduction
    within each item, so the four values add up to the pixel-space sum of
    squared residuals (orthonormality).
    """
    x0, sigmas, eps = _draws(batch, schedule, cfg, rng, sigmas, eps)
    x_t = perturb(x0, sigmas, eps)
    with T.no_grad():
        x_hat = _denoise_batch(net, x_t, sigmas, profile, mode).data
    residual = x_hat - x0
    bands = haar_dwt2(residual)
    axes = tuple(range(1, residual.ndim))
    return {
        name: float((band**2).sum(axis=axes).mean())
        for name, band in zip(BAND_NAMES, bands)
    }


# -- analytic reference model ----------------------------------------------------


class GaussianDenoiser:
    """Exact posterior-mean denoiser for centered isotropic Gaussian data.

    For data ~ N(0, s^2 I), the minimizer of the squared denoising error is
    x0_hat = x * s^2 / (s^2 + sigma^2); the matching deterministic reverse
    trajectory is x(sigma) = x(sigma_ref) * sqrt((s^2+sigma^2)/(s^2+sigma_ref^2)).
    """

    def __init__(self, data_std=1.0):
        self.data_std = float(data_std)

    def denoise(self, x, sigma, class_labels=None, profile=None, mode=None,
                instrument=False, _allow_unchecked_coeffs=False):
        x = x if isinstance(x, Tensor) else Tensor(x)
        sig = np.asarray(sigma, dtype=np.float64)
        if np.any(sig <= 0):
            raise DomainError("sigma must be positive")
        s2 = self.data_std**2
        gain = s2 / (s2 + sig**2)
        if sig.ndim:
            gain = gain.reshape((-1,) + (1,) * (x.ndim - 1))
        return T.mul(x, Tensor(gain)), []

    def denoiser(self, class_labels=None, profile=None, mode=None):
        def fn(x, sigma):
            with T.no_grad():
                out, _ = self.denoise(x, sigma)
            return out.data

        return fn

    def endpoint(self, x_start, sigma_start, sigma_end):
        s2 = self.data_std**2
        return x_start * np.sqrt((s2 + sigma_end**2) / (s2 + sigma_start**2))


# -- feature extractor (small convolutional classifier) ---------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    input_channels: int = 1
    num_classes: int = 4
    width: int = 16
    feature_dim: int = 64
    # training defaults, recorded with the model
    learning_rate: float = 1e-3
    batch_size: int = 64
    steps: int = 600
    val_fraction: float = 0.2
    target_accuracy: float = 0.9

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "width": self.width,
            "feature_dim": self.feature_dim,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "val_fraction": self.val_fraction,
            "target_accuracy": self.target_accuracy,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_channels=int(d["input_channels"]),
            num_classes=int(d["num_classes"]),
            width=int(d["width"]),
            feature_dim=int(d["feature_dim"]),
            learning_rate=float(d["learning_rate"]),
            batch_size=int(d["batch_size"]),
            steps=int(d["steps"]),
            val_fraction=float(d["val_fraction"]),
            target_accuracy=float(d["target_accuracy"]),
        )


class Classifier(nn.Module):
    """Three convolutional stages, a feature head, and a logit head."""

    def __init__(self, config: ClassifierConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        w = config.width
        self.conv1 = nn.Conv2d(config.input_channels, w, 3, rng, padding=1)
        self.conv2 = nn.Conv2d(w, 2 * w, 3, rng, padding=1)
        self.conv3 = nn.Conv2d(2 * w, 2 * w, 3, rng, padding=1)
        self.fc_feat = nn.Linear(2 * w, config.feature_dim, rng)
        self.fc_out = nn.Linear(config.feature_dim, config.num_classes, rng)

    def features(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = T.avg_pool2d(T.silu(self.conv1(x)), 2)
        h = T.avg_pool2d(T.silu(self.conv2(h)), 2)
        h = T.silu(self.conv3(h))
        pooled = T.tmean(h, axis=(2, 3))
        return T.silu(self.fc_feat(pooled))

    def logits(self, x):
        return self.fc_out(self.features(x))

    def predict(self, x):
        with T.no_grad():
            return np.argmax(self.logits(x).data, axis=1)

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def save(self, path):
        arrays = [(name, p.data) for name, p in self.named_parameters()]
        nn.save_checkpoint(path, "classifier", self.config.to_dict(), arrays)

    @classmethod
    def load(cls, path):
        kind, config, arrays = nn.load_checkpoint(path)
        if kind != "classifier":
            raise ConfigError(f"{path}: checkpoint kind {kind!r} is not a classifier")
        model = cls(ClassifierConfig.from_dict(config))
        nn.load_into_module(model, arrays)
        return model


class IdentityFeatures:
    """Feature extractor that returns flattened pixels; useful as a control."""

    feature_dim = None

    def features(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return T.reshape(x, (x.shape[0], -1))


def cross_entropy(logits, labels):
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = T.tsum(T.mul(logits, Tensor(onehot)), axis=1)
    return T.tmean(T.sub(T.logsumexp(logits, axis=1), picked))


def accuracy(model, images, labels, batch_size=256):
    hits = 0
    for lo in range(0, len(images), batch_size):
        pred = model.predict(images[lo : lo + batch_size])
        hits += int((pred == labels[lo : lo + batch_size]).sum())
    return hits / len(images)


def train_classifier(images, labels, cfg: ClassifierConfig, seed=0, verbose=False):
    """Train the toy classifier; returns (model, held-out accuracy)."""
    if len(images) == 0:
        raise ConfigError("empty dataset")
    rng = np.random.default_rng(seed)
    model = Classifier(cfg, seed=seed)
    n_val = max(1, int(len(images) * cfg.val_fraction))
    order = rng.permutation(len(images))
    val_idx, train_idx = order[:n_val], order[n_val:]
    opt = nn.Adam(model.parameters(), lr=cfg.learning_rate)
    for step in range(cfg.steps):
        pick = rng.choice(train_idx, size=min(cfg.batch_size, len(train_idx)), replace=False)
        model.zero_grad()
        loss = cross_entropy(model.logits(Tensor(images[pick])), labels[pick])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"classifier loss became non-finite at step {step}", step=step)
        loss.backward()
        opt.step()
        if verbose and step % 100 == 0:
            print(f"classifier step {step}: loss {value:.4f}")
    return model, accuracy(model, images[val_idx], labels[val_idx])


# -- denoiser training -------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999


def held_out_pixel_loss(net, images, schedule, cfg, seed=1234, batch_size=64):
    """Deterministic evaluation loss on a fixed set of draws."""
    rng = np.random.default_rng(seed)
    sigmas = sample_log_uniform_sigmas(schedule, len(images), rng)
    eps = rng.standard_normal(images.shape)
    total = 0.0
    for lo in range(0, len(images), batch_size):
        sl = slice(lo, min(lo + batch_size, len(images)))
        with T.no_grad():
            val = loss_pixel(
                net, images[sl], schedule, cfg, sigmas=sigmas[sl], eps=eps[sl]
            ).item()
        total += val * (sl.stop - sl.start)
    return total / len(images)


def train(net, images, opt_cfg: OptimizerConfig, loss_cfg: LossConfig, steps,
          schedule=None, seed=0, loss_fn=None, verbose=False, log_every=500):
    """Optimize the denoiser in place; returns the per-step training losses.

    ``loss_fn(net, batch, schedule, cfg, rng)`` defaults to the pixel loss.
    A non-finite loss aborts with the failing step index.
    """
    schedule = schedule or NoiseSchedule()
    loss_fn = loss_fn or loss_pixel
    rng = np.random.default_rng(seed)
    opt = nn.Adam(net.parameters(), lr=opt_cfg.learning_rate,
                  beta1=opt_cfg.beta1, beta2=opt_cfg.beta2)
    history = []
    for step in range(steps):
        pick = rng.integers(0, len(images), size=opt_cfg.batch_size)
        net.zero_grad()
        loss = loss_fn(net, images[pick], schedule, loss_cfg, rng=rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"training loss became non-finite at step {step}", step=step)
        loss.backward()
        opt.step()
        history.append(value)
        if verbose and step % log_every == 0:
            print(f"train step {step}: loss {value:.5f}")
    return history
