"""Reverse-process integrators: Euler, Heun, a multistep predictor-corrector,
their stochastic interpolation toward Langevin dynamics, and the forward-ODE
inversion of data into noise.

All solvers integrate dx/dsigma = (x - x0_hat(x, sigma)) / sigma over a Karras
grid.  Sampling runs sigma_max -> 0 with the final step landing exactly at 0
via a first-order step (the derivative is undefined there); inversion runs
sigma_min -> sigma_max and mirrors that by taking its first step first-order.
NFE accounting: euler and the predictor-corrector use one denoiser call per
step, heun uses two except on its first-order step (2N - 1 total).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .diffusion import karras_grid
from .errors import ConfigError, DomainError

ChurnSpec = Union[float, Sequence[Tuple[float, float, float]]]


@dataclass(frozen=True)
class SamplerConfig:
    solver: str = "heun"  # "euler" | "heun" | "unipc"
    steps: int = 18
    unipc_order: int = 2
    churn: ChurnSpec = 0.0  # constant tau or [(sigma_low, sigma_high, tau), ...]
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("euler", "heun", "unipc"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.unipc_order not in (2, 3):
            raise ConfigError(f"unipc_order must be 2 or 3, got {self.unipc_order}")
        if tau_value(self.churn, 1.0) < 0:
            raise ConfigError("churn must be non-negative")


def tau_value(churn, sigma):
    """Piecewise-constant stochastic strength at a noise level."""
    if isinstance(churn, (int, float)):
        return float(churn)
    for lo, hi, val in churn:
        if lo <= sigma <= hi:
            return float(val)
    return 0.0


@dataclass
class Trajectory:
    """(sigma_i, x_i) pairs in integration order plus the denoiser-call count."""

    sigmas: np.ndarray
    states: List[np.ndarray] = field(default_factory=list)
    nfe: int = 0

    @property
    def endpoint(self):
        return self.states[-1]

    def pairs(self):
        return list(zip(self.sigmas, self.states))


def score_from_denoiser(x, sigma, x0_hat):
    """Score estimate (x0_hat - x) / sigma^2 implied by a clean prediction."""
    if sigma <= 0:
        raise DomainError(f"score needs sigma > 0, got {sigma}")
    return (x0_hat - x) / sigma**2


def _resolve_denoiser(net, profile, mode, class_labels):
    if hasattr(net, "denoiser"):
        return net.denoiser(class_labels=class_labels, profile=profile, mode=mode)
    if callable(net):
        if profile is not None or mode is not None:
            raise ConfigError("bare denoiser callables do not accept profiles")
        return net
    raise ConfigError(f"cannot build a denoiser from {type(net)!r}")


def _initial_state(batch, shape, sigma_max, rng):
    if isinstance(batch, (int, np.integer)):
        if shape is None:
            raise ConfigError("sampling with an integer batch needs an item shape")
        return sigma_max * rng.standard_normal((int(batch), *shape))
    x = np.asarray(batch, dtype=np.float64)
    return x.copy()


def sample_ode(net, cfg, schedule, profile=None, batch=1, shape=None,
               class_labels=None, keep_trajectory=True):
    """Deterministic sampling from sigma_max to 0.

    ``batch`` is an item count (initial noise drawn from cfg.seed) or an
    explicit starting state at sigma_max.
    """
    denoise = _resolve_denoiser(net, profile, mode=None, class_labels=class_labels)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.steps
    grid = karras_grid(schedule, n + 1)
    sig_traj = grid.copy()
    sig_traj[-1] = 0.0
    x = _initial_state(batch, shape, schedule.sigma_max, rng)
    traj = Trajectory(sigmas=sig_traj)
    if x.shape[0] == 0:
        traj.states = [x.copy() for _ in range(n + 1)]
        return traj
    if keep_trajectory:
        traj.states.append(x.copy())
    if cfg.solver == "unipc":
        return _run_unipc(denoise, x, grid, sig_traj, cfg.unipc_order, traj, keep_trajectory)
    for i in range(n):
        sig, sig_next = grid[i], sig_traj[i + 1]
        den = denoise(x, sig)
        traj.nfe += 1
        d = (x - den) / sig
        x_next = x + (sig_next - sig) * d
        if cfg.solver == "heun" and sig_next > 0:
            den2 = denoise(x_next, sig_next)
            traj.nfe += 1
            d2 = (x_next - den2) / sig_next
            x_next = x + (sig_next - sig) * 0.5 * (d + d2)
        x = x_next
        if keep_trajectory:
            traj.states.append(x.copy())
    if not keep_trajectory:
        traj.states.append(x.copy())
    return traj


def sample_stochastic(net, cfg, schedule, profile=None, batch=1, shape=None,
                      class_labels=None, keep_trajectory=True):
    """Euler-Maruyama integration of the churned reverse process.

    The drift interpolates between the deterministic flow (tau = 0) and a
    Langevin-augmented one; with tau = 0 the path is bit-identical to
    ``sample_ode`` with the euler solver.
    """
    denoise = _resolve_denoiser(net, profile, mode=None, class_labels=class_labels)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.steps
    grid = karras_grid(schedule, n + 1)
    sig_traj = grid.copy()
    sig_traj[-1] = 0.0
    x = _initial_state(batch, shape, schedule.sigma_max, rng)
    traj = Trajectory(sigmas=sig_traj)
    if x.shape[0] == 0:
        traj.states = [x.copy() for _ in range(n + 1)]
        return traj
    if keep_trajectory:
        traj.states.append(x.copy())
    for i in range(n):
        sig, sig_next = grid[i], sig_traj[i + 1]
        tau = tau_value(cfg.churn, sig)
        den = denoise(x, sig)
        traj.nfe += 1
        d = (x - den) / sig
        x = x + (sig_next - sig) * d * (1.0 + tau * tau)
        if tau > 0.0:
            x = x + tau * math.sqrt(2.0 * sig) * math.sqrt(sig - sig_next) * rng.standard_normal(
                x.shape
            )
        if keep_trajectory:
            traj.states.append(x.copy())
    if not keep_trajectory:
        traj.states.append(x.copy())
    return traj


def invert(net, cfg, schedule, profile=None, data_batch=None, class_labels=None,
           keep_trajectory=False):
    """Integrate the deterministic flow from sigma_min up to sigma_max.

    The data is treated as the state at sigma_min (the score is singular at
    exactly 0).  Returns (noise_batch, trajectory) where noise_batch is the
    terminal state divided by sigma_max.
    """
    if cfg.solver not in ("euler", "heun", "unipc"):
        raise ConfigError(f"inversion needs a deterministic solver, got {cfg.solver}")
    denoise = _resolve_denoiser(net, profile, mode=None, class_labels=class_labels)
    n = cfg.steps
    grid = karras_grid(schedule, n + 1)[::-1].copy()  # sigma_min .. sigma_max
    x = np.asarray(data_batch, dtype=np.float64).copy()
    traj = Trajectory(sigmas=grid)
    if x.shape[0] == 0:
        traj.states = [x.copy() for _ in range(n + 1)]
        return x.copy(), traj
    if keep_trajectory:
        traj.states.append(x.copy())
    if cfg.solver == "unipc":
        traj = _run_unipc(denoise, x, grid, grid, cfg.unipc_order, traj, keep_trajectory)
        noise = traj.endpoint / schedule.sigma_max
        return noise, traj
    for i in range(n):
        sig, sig_next = grid[i], grid[i + 1]
        den = denoise(x, sig)
        traj.nfe += 1
        d = (x - den) / sig
        x_next = x + (sig_next - sig) * d
        # first step mirrors the sampler's first-order endpoint step
        if cfg.solver == "heun" and i > 0:
            den2 = denoise(x_next, sig_next)
            traj.nfe += 1
            d2 = (x_next - den2) / sig_next
            x_next = x + (sig_next - sig) * 0.5 * (d + d2)
        x = x_next
        if keep_trajectory:
            traj.states.append(x.copy())
    if not keep_trajectory:
        traj.states.append(x.copy())
    return x / schedule.sigma_max, traj


# -- multistep predictor-corrector (data-prediction, B(h) = h variant) ----------


def _uni_weights(hh, rks, order):
    """Solve for the combination weights of the multistep correction terms."""
    h_phi_1 = math.expm1(hh)
    b_h = hh
    rows = []
    rhs = []
    h_phi_k = h_phi_1 / hh - 1.0
    fact = 1.0
    for i in range(1, order + 1):
        rows.append(np.power(rks, i - 1))
        rhs.append(h_phi_k * fact / b_h)
        fact *= i + 1
        h_phi_k = h_phi_k / hh - 1.0 / fact
    return np.array(rows), np.array(rhs), h_phi_1, b_h


def _unipc_predict(x, sig_s, sig_t, hist, order):
    """Advance from sig_s to sig_t using the model-output history."""
    lam_s = -math.log(sig_s)
    m0 = hist[-1][1]
    if order == 1 or sig_t == 0.0:
        ratio = sig_t / sig_s
        return ratio * (x - m0) + m0
    lam_t = -math.log(sig_t)
    h = lam_t - lam_s
    hh = -h
    rks = []
    d1s = []
    for k in range(1, order):
        lam_k, m_k = hist[-1 - k]
        rk = (lam_k - lam_s) / h
        rks.append(rk)
        d1s.append((m_k - m0) / rk)
    rks.append(1.0)
    rows, rhs, h_phi_1, b_h = _uni_weights(hh, np.array(rks), order)
    if order == 2:
        weights = np.array([0.5])
    else:
        weights = np.linalg.solve(rows[:-1, :-1], rhs[:-1])
    pred_res = sum(w * d for w, d in zip(weights, d1s))
    return (sig_t / sig_s) * x - h_phi_1 * m0 - b_h * pred_res


def _unipc_correct(x_prev, x_cur, sig_prev, sig_cur, m_cur, hist, order):
    """Refine the current state using its own model output plus history."""
    lam_prev = -math.log(sig_prev)
    lam_cur = -math.log(sig_cur)
    m0 = hist[-1][1]  # output at the previous node
    h = lam_cur - lam_prev
    hh = -h
    rks = []
    d1s = []
    for k in range(1, order):
        lam_k, m_k = hist[-1 - k]
        rk = (lam_k - lam_prev) / h
        rks.append(rk)
        d1s.append((m_k - m0) / rk)
    rks.append(1.0)
    rows, rhs, h_phi_1, b_h = _uni_weights(hh, np.array(rks), order)
    if order == 1:
        weights = np.array([0.5])
    else:
        weights = np.linalg.solve(rows, rhs)
    corr = sum(w * d for w, d in zip(weights[:-1], d1s))
    d1_t = m_cur - m0
    return (sig_cur / sig_prev) * x_prev - h_phi_1 * m0 - b_h * (corr + weights[-1] * d1_t)


def _run_unipc(denoise, x, grid, sig_traj, order, traj, keep_trajectory):
    n = len(grid) - 1
    hist = []  # (lambda, model output) pairs, most recent last
    x_prev = None
    prev_order = 1
    for i in range(n):
        sig = grid[i]
        sig_next = sig_traj[i + 1]
        m = denoise(x, sig)
        traj.nfe += 1
        if i > 0:
            x = _unipc_correct(x_prev, x, grid[i - 1], sig, m, hist, prev_order)
        hist.append((-math.log(sig), m))
        if len(hist) > 3:
            hist.pop(0)
        p = min(order, i + 1, n - i)
        x_prev = x
        x = _unipc_predict(x, sig, sig_next, hist, p)
        prev_order = p
        if keep_trajectory:
            traj.states.append(x.copy())
    if not keep_trajectory:
        traj.states.append(x.copy())
    return traj


def trajectory_to_csv(traj, path):
    """One row per (item, step): item, step, sigma, then the flattened state."""
    with open(path, "w") as fh:
        fh.write("# skiplab-csv v1 trajectory\n")
        width = traj.states[0][0].size if traj.states and traj.states[0].shape[0] else 0
        cols = ",".join(f"x{i}" for i in range(width))
        fh.write(f"item,step,sigma,{cols}\n" if width else "item,step,sigma\n")
        for step, (sig, state) in enumerate(zip(traj.sigmas, traj.states)):
            for item in range(state.shape[0]):
                flat = ",".join(repr(v) for v in state[item].ravel())
                fh.write(f"{item},{step},{sig!r},{flat}\n")
