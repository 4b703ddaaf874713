"""Miniature encoder-decoder UNet with instrumented long skip connections.

Every decoder stage concatenates one encoder activation ``d`` with the
upstream decoder activation ``u`` as ``[d, u]`` along channels.  A per-layer
coefficient in (0, 1] can shrink the skip contribution at sampling time; it
can be injected three ways:

* ``AT_CONCAT``     - scale ``d`` before the concatenation (the definition).
* ``ORIG_ONLY``     - leave the block input unscaled and scale only the skip
                      channels of the residual branch (``orig``) inside the
                      first block after the concat.
* ``NORM_INPUT_ONLY`` - scale only the input of that block's first
                      normalization layer.

Group normalization is exactly invariant to a positive scale that is uniform
within a normalization group, so the part of the scale that falls on
boundary-respecting groups is cancelled analytically rather than multiplied
in and washed out numerically.  With groups aligned to the skip/up channel
boundary this makes AT_CONCAT bit-identical to ORIG_ONLY and NORM_INPUT_ONLY
bit-identical to the baseline; with straddling groups the mixed groups see
the scale numerically.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DomainError
from .tensor import Tensor


class ScalingMode(enum.Enum):
    AT_CONCAT = "at_concat"
    ORIG_ONLY = "orig_only"
    NORM_INPUT_ONLY = "norm_input_only"


class GroupAlignment(enum.Enum):
    ALIGNED = "aligned"
    STRADDLING = "straddling"


@dataclass(frozen=True)
class UNetConfig:
    input_channels: int = 1
    base_channels: int = 32
    depth: int = 3
    blocks_per_resolution: int = 2
    groupnorm_groups: int = 8
    skip_layer_count: int = 6
    time_embedding_dim: int = 64
    group_alignment: GroupAlignment = GroupAlignment.STRADDLING
    sigma_data: float = 0.5
    num_classes: int = 0

    def __post_init__(self):
        if self.skip_layer_count != self.depth * self.blocks_per_resolution:
            raise ConfigError(
                f"skip_layer_count {self.skip_layer_count} != depth*blocks_per_resolution "
                f"{self.depth * self.blocks_per_resolution}"
            )
        if self.groupnorm_groups % 2:
            raise ConfigError("groupnorm_groups must be even so concat groups can align")
        if self.base_channels % self.groupnorm_groups:
            raise ConfigError("base_channels must be divisible by groupnorm_groups")
        if self.time_embedding_dim % 2:
            raise ConfigError("time_embedding_dim must be even")

    @property
    def level_channels(self):
        return [self.base_channels * (2**l) for l in range(self.depth)]

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "blocks_per_resolution": self.blocks_per_resolution,
            "groupnorm_groups": self.groupnorm_groups,
            "skip_layer_count": self.skip_layer_count,
            "time_embedding_dim": self.time_embedding_dim,
            "group_alignment": self.group_alignment.value,
            "sigma_data": self.sigma_data,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_channels=int(d["input_channels"]),
            base_channels=int(d["base_channels"]),
            depth=int(d["depth"]),
            blocks_per_resolution=int(d["blocks_per_resolution"]),
            groupnorm_groups=int(d["groupnorm_groups"]),
            skip_layer_count=int(d["skip_layer_count"]),
            time_embedding_dim=int(d["time_embedding_dim"]),
            group_alignment=GroupAlignment(d["group_alignment"]),
            sigma_data=float(d["sigma_data"]),
            num_classes=int(d["num_classes"]),
        )


@dataclass
class SkipTap:
    """Norms recorded at one skip concatenation, ordered bottom -> top."""

    layer_index: int
    d_norm: float
    u_norm: float


def concat_group_partition(c_skip, c_up, groups, alignment):
    """Channel partition for the first norm after a concat.

    ALIGNED keeps the contiguous grouping, whose boundaries land exactly on
    the skip/up channel split when ``groups`` is even and channel counts
    match.  STRADDLING rotates the partition by half a group so the split
    falls inside a group.
    """
    c = c_skip + c_up
    if c % groups:
        raise ConfigError(f"concat channels {c} not divisible by {groups} groups")
    gs = c // groups
    if alignment is GroupAlignment.ALIGNED:
        return None  # plain contiguous grouping already respects the boundary
    rolled = np.roll(np.arange(c), -(gs // 2))
    return [rolled[k * gs : (k + 1) * gs] for k in range(groups)]


def _scaled_channel_mask(partition, c_skip, c_total, groups):
    """Boolean mask of channels whose scale survives the first normalization.

    A scale uniform within a group cancels exactly; only skip channels that
    share a group with up channels keep it.
    """
    if partition is None:
        gs = c_total // groups
        partition = [np.arange(k * gs, (k + 1) * gs) for k in range(groups)]
    mask = np.zeros(c_total, dtype=bool)
    for group in partition:
        in_skip = group < c_skip
        if in_skip.any() and (~in_skip).any():
            mask[group[in_skip]] = True
    return mask


def _channel_scale_vector(mask, rho, c_total):
    """(1, C, 1, 1) vector equal to rho on masked channels and 1 elsewhere.

    Returns None when nothing is scaled.  Differentiable in rho when rho is
    a Tensor.
    """
    if not mask.any():
        return None
    m = mask.astype(np.float64).reshape(1, c_total, 1, 1)
    if isinstance(rho, Tensor):
        return T.add(Tensor(1.0 - m), T.mul(Tensor(m), rho))
    if rho == 1.0:
        return None
    return Tensor(1.0 - m + m * float(rho))


class UNetBlock(nn.Module):
    """norm -> silu -> conv, time-conditioned norm -> silu -> conv, residual."""

    def __init__(self, c_in, c_out, emb_dim, groups, rng, norm0_partition=None):
        self.norm0 = nn.GroupNorm(c_in, groups, partition=norm0_partition)
        self.conv0 = nn.Conv2d(c_in, c_out, 3, rng, padding=1)
        self.norm1 = nn.GroupNorm(c_out, groups)
        self.emb_scale = nn.Linear(emb_dim, c_out, rng, init_scale=0.1)
        self.emb_shift = nn.Linear(emb_dim, c_out, rng, init_scale=0.1)
        self.conv1 = nn.Conv2d(c_out, c_out, 3, rng, padding=1, init_scale=0.1)
        self.res = nn.Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x, emb, norm_scale=None, orig_scale=None):
        orig = x if orig_scale is None else T.mul(x, orig_scale)
        h = x if norm_scale is None else T.mul(x, norm_scale)
        h = self.conv0(T.silu(self.norm0(h)))
        b, c = h.shape[0], h.shape[1]
        scale = T.reshape(self.emb_scale(emb), (b, c, 1, 1))
        shift = T.reshape(self.emb_shift(emb), (b, c, 1, 1))
        h = T.silu(T.add(T.mul(self.norm1(h), T.add(scale, Tensor(1.0))), shift))
        h = self.conv1(h)
        res = orig if self.res is None else self.res(orig)
        return T.add(h, res)


class MiniUNet(nn.Module):
    """Configurable small UNet predicting the clean image from a noisy one."""

    def __init__(self, config: UNetConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        chans = cfg.level_channels
        e = cfg.time_embedding_dim
        # deterministic log-spaced frequencies for the noise-level embedding
        self.freqs = np.exp(np.linspace(math.log(0.25), math.log(64.0), e // 2))
        self.emb_fc0 = nn.Linear(e, e, rng)
        self.emb_fc1 = nn.Linear(e, e, rng)
        if cfg.num_classes:
            self.class_table = Tensor(
                rng.normal(0.0, 1.0, size=(cfg.num_classes, e)), requires_grad=True
            )
        else:
            self.class_table = None

        self.stem = nn.Conv2d(cfg.input_channels, chans[0], 3, rng, padding=1)
        self.enc_blocks = []
        self.down = []
        for l in range(cfg.depth):
            level = []
            for _ in range(cfg.blocks_per_resolution):
                level.append(UNetBlock(chans[l], chans[l], e, cfg.groupnorm_groups, rng))
            self.enc_blocks.append(level)
            if l + 1 < cfg.depth:
                self.down.append(nn.Conv2d(chans[l], chans[l + 1], 3, rng, stride=2, padding=1))
        self.mid = [
            UNetBlock(chans[-1], chans[-1], e, cfg.groupnorm_groups, rng),
            UNetBlock(chans[-1], chans[-1], e, cfg.groupnorm_groups, rng),
        ]
        self.dec_blocks = []
        self.up = []
        for l in reversed(range(cfg.depth)):
            partition = concat_group_partition(
                chans[l], chans[l], cfg.groupnorm_groups, cfg.group_alignment
            )
            level = []
            for _ in range(cfg.blocks_per_resolution):
                level.append(
                    UNetBlock(
                        2 * chans[l], chans[l], e, cfg.groupnorm_groups, rng,
                        norm0_partition=partition,
                    )
                )
            self.dec_blocks.append(level)
            if l > 0:
                self.up.append(nn.Conv2d(chans[l], chans[l - 1], 3, rng, padding=1))
        self.head_norm = nn.GroupNorm(chans[0], cfg.groupnorm_groups)
        self.head = nn.Conv2d(chans[0], cfg.input_channels, 3, rng, padding=1, init_scale=0.1)

        # per-tap metadata, bottom -> top: (channel count, norm0 scale mask)
        self._tap_info = []
        for li, l in enumerate(reversed(range(cfg.depth))):
            partition = concat_group_partition(
                chans[l], chans[l], cfg.groupnorm_groups, cfg.group_alignment
            )
            mask = _scaled_channel_mask(
                partition, chans[l], 2 * chans[l], cfg.groupnorm_groups
            )
            for _ in range(cfg.blocks_per_resolution):
                self._tap_info.append((chans[l], mask))

    # -- embeddings -----------------------------------------------------------

    def _embed(self, sigma_per_item, class_labels=None):
        batch = len(sigma_per_item)
        c_noise = np.log(sigma_per_item) / 4.0
        ang = 2 * np.pi * np.outer(c_noise, self.freqs)
        feat = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
        emb = Tensor(feat)
        if class_labels is not None:
            if self.class_table is None:
                raise ConfigError("model was built without class conditioning")
            onehot = np.zeros((batch, self.config.num_classes))
            onehot[np.arange(batch), np.asarray(class_labels, dtype=int)] = 1.0
            emb = T.add(emb, T.matmul(Tensor(onehot), self.class_table))
        return self.emb_fc1(T.silu(self.emb_fc0(emb)))

    # -- forward passes ---------------------------------------------------------

    def raw_forward(self, x, emb, layer_coeffs=None, mode=ScalingMode.AT_CONCAT,
                    instrument=False):
        """Run the UNet trunk; ``x`` is the preconditioned input.

        ``layer_coeffs``: one coefficient per skip layer, bottom -> top; floats
        or scalar Tensors.  Returns (output, taps).
        """
        cfg = self.config
        k = cfg.skip_layer_count
        if layer_coeffs is not None and len(layer_coeffs) != k:
            raise ConfigError(f"profile supplies {len(layer_coeffs)} coefficients, model has {k}")
        taps = []
        h = self.stem(x)
        skips = []
        for l in range(cfg.depth):
            for block in self.enc_blocks[l]:
                h = block(h, emb)
                skips.append(h)
            if l + 1 < cfg.depth:
                h = self.down[l](h)
        for block in self.mid:
            h = block(h, emb)
        tap_idx = 0
        for li, level in enumerate(self.dec_blocks):
            for block in level:
                d = skips.pop()
                rho = 1.0 if layer_coeffs is None else layer_coeffs[tap_idx]
                c_skip, norm_mask = self._tap_info[tap_idx]
                if instrument:
                    rho_val = float(rho.data) if isinstance(rho, Tensor) else float(rho)
                    d_raw_norm = float(np.linalg.norm(d.data))
                    d_norm = rho_val * d_raw_norm if mode is ScalingMode.AT_CONCAT else d_raw_norm
                    taps.append(SkipTap(tap_idx, d_norm, float(np.linalg.norm(h.data))))
                c_total = 2 * c_skip
                full_mask = np.arange(c_total) < c_skip
                if _is_identity(rho):
                    norm_scale = orig_scale = None
                elif mode is ScalingMode.AT_CONCAT:
                    norm_scale = _channel_scale_vector(norm_mask, rho, c_total)
                    orig_scale = _channel_scale_vector(full_mask, rho, c_total)
                elif mode is ScalingMode.ORIG_ONLY:
                    norm_scale = None
                    orig_scale = _channel_scale_vector(full_mask, rho, c_total)
                elif mode is ScalingMode.NORM_INPUT_ONLY:
                    norm_scale = _channel_scale_vector(norm_mask, rho, c_total)
                    orig_scale = None
                else:
                    raise ConfigError(f"unknown scaling mode {mode!r}")
                h = T.concat_channels([d, h])
                h = block(h, emb, norm_scale=norm_scale, orig_scale=orig_scale)
                tap_idx += 1
            if li + 1 < cfg.depth:
                h = self.up[li](T.upsample_nearest(h))
        return self.head(T.silu(self.head_norm(h))), taps

    def denoise(self, x, sigma, class_labels=None, profile=None, mode=None,
                instrument=False, _allow_unchecked_coeffs=False):
        """Full denoiser: preconditioning around the trunk; returns (x0_hat, taps).

        ``sigma`` is a positive scalar or a per-item vector of length B.
        ``profile`` may be a coefficient provider (``layer_coefficients(sigma)``
        and ``mode``) or a plain per-layer coefficient list; profiles require a
        scalar sigma.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        sig = np.asarray(sigma, dtype=np.float64)
        if not np.all(sig > 0) or not np.all(np.isfinite(sig)):
            raise DomainError(f"sigma must be positive and finite, got {sigma}")
        scalar_sigma = sig.ndim == 0
        if not scalar_sigma and sig.shape != (x.shape[0],):
            raise ConfigError(f"per-item sigma needs shape ({x.shape[0]},), got {sig.shape}")
        coeffs = None
        if profile is not None:
            if not scalar_sigma:
                raise ConfigError("skip profiles require a scalar sigma per forward pass")
            if hasattr(profile, "layer_coefficients"):
                coeffs = profile.layer_coefficients(float(sig))
                if mode is None and getattr(profile, "mode", None) is not None:
                    mode = profile.mode
            else:
                coeffs = list(profile)
            if not _allow_unchecked_coeffs:
                for r in coeffs:
                    val = float(r.data) if isinstance(r, Tensor) else float(r)
                    if not 0.0 < val <= 1.0:
                        raise DomainError(f"skip coefficient {val} outside (0, 1]")
        if mode is None:
            mode = ScalingMode.AT_CONCAT
        sd = self.config.sigma_data
        sig_b = np.broadcast_to(sig, (x.shape[0],))
        c_in = (1.0 / np.sqrt(sig_b**2 + sd**2)).reshape(-1, 1, 1, 1)
        emb = self._embed(sig_b, class_labels)
        raw, taps = self.raw_forward(
            T.mul(x, Tensor(c_in)), emb, layer_coeffs=coeffs, mode=mode, instrument=instrument
        )
        return denoiser_precondition(raw, x, sig, sd), taps

    def denoiser(self, class_labels=None, profile=None, mode=None):
        """A plain ndarray denoiser closure for the samplers (tape-free)."""

        def fn(x, sigma):
            with T.no_grad():
                out, _ = self.denoise(
                    x, sigma, class_labels=class_labels, profile=profile, mode=mode
                )
            return out.data

        return fn

    # -- persistence ------------------------------------------------------------

    def save(self, path):
        arrays = [(name, p.data) for name, p in self.named_parameters()]
        nn.save_checkpoint(path, "mini-unet", self.config.to_dict(), arrays)

    @classmethod
    def load(cls, path):
        kind, config, arrays = nn.load_checkpoint(path)
        if kind != "mini-unet":
            raise ConfigError(f"{path}: checkpoint kind {kind!r} is not a mini-unet")
        net = cls(UNetConfig.from_dict(config))
        nn.load_into_module(net, arrays)
        return net


def _is_identity(rho):
    return not isinstance(rho, Tensor) and float(rho) == 1.0


def forward(net, x_t, sigma, class_labels=None, profile=None,
            mode=None, instrument=False):
    """Denoise ``x_t`` at noise level ``sigma``; returns (denoised, taps)."""
    return net.denoise(
        x_t, sigma, class_labels=class_labels, profile=profile, mode=mode,
        instrument=instrument,
    )


def denoiser_precondition(raw_net_output, x_t, sigma, sigma_data):
    """Combine the raw network output with the noisy input into a clean estimate.

    x0_hat = c_skip(sigma) * x_t + c_out(sigma) * raw, with
    c_skip = sigma_data^2 / (sigma^2 + sigma_data^2) and
    c_out  = sigma * sigma_data / sqrt(sigma^2 + sigma_data^2).
    ``sigma`` may be a scalar or a per-item vector.
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0):
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    c_skip = sigma_data**2 / (sig**2 + sigma_data**2)
    c_out = sig * sigma_data / np.sqrt(sig**2 + sigma_data**2)
    if sig.ndim:
        c_skip = c_skip.reshape(-1, 1, 1, 1)
        c_out = c_out.reshape(-1, 1, 1, 1)
    if isinstance(raw_net_output, Tensor) or isinstance(x_t, Tensor):
        return T.add(T.mul(x_t, Tensor(c_skip)), T.mul(raw_net_output, Tensor(c_out)))
    return c_skip * x_t + c_out * raw_net_output
