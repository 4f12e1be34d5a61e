"""Noise schedule, forward noising, x0 prediction, DDIM stepping and CFG."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, as_tensor


@dataclass(frozen=True)
class Schedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t: int) -> float:
        """alpha_bar at 1-based timestep t (t=0 means the clean signal)."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return Schedule(T, beta, alpha_bar)


def _check_t(t, s, allow_zero=False):
    lo = 0 if allow_zero else 1
    if not (lo <= t < s.T):
        raise ValueError(f"timestep {t} outside [{lo}, {s.T})")


def forward_noise(z0, t, eps, s):
    _check_t(t, s)
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} differ in shape")
    ab = s.ab(t)
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def predict_z0(z_t, eps_hat, t, s):
    """Denoised observation: invert the forward process using predicted noise."""
    _check_t(t, s)
    z_t, eps_hat = as_tensor(z_t), as_tensor(eps_hat)
    ab = s.ab(t)
    return (z_t - eps_hat * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))


def ddim_step(z_t, eps_hat, t, t_prev, s):
    """Deterministic (eta = 0) DDIM update from t to t_prev.

    ``t_prev == 0`` lands on the clean estimate; ``t_prev == t`` is a no-op.
    """
    if t_prev > t:
        raise ValueError(f"DDIM steps must not increase: {t} -> {t_prev}")
    if t_prev == t:
        return as_tensor(z_t)
    _check_t(t_prev, s, allow_zero=True)
    z0_hat = predict_z0(z_t, eps_hat, t, s)
    ab_prev = s.ab(t_prev)
    return z0_hat * np.sqrt(ab_prev) + as_tensor(eps_hat) * np.sqrt(1.0 - ab_prev)


def ddim_timesteps(s: Schedule, n_steps: int = 50) -> list[int]:
    """Descending, evenly spaced ladder over [1, T), ending at 0."""
    ts = np.linspace(s.T - 1, 1, n_steps).round().astype(int)
    ladder = [int(t) for t in dict.fromkeys(ts.tolist())]
    return ladder + [0]


def cfg_combine(eps_uncond, eps_cond, scale):
    eps_uncond, eps_cond = as_tensor(eps_uncond), as_tensor(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    if scale < 1:
        raise ValueError("guidance scale must be >= 1")
    return eps_uncond + (eps_cond - eps_uncond) * scale


def schedule_arrays(s: Schedule) -> dict[str, np.ndarray]:
    return {"schedule.beta": np.asarray(s.beta)}


def schedule_from_arrays(arrays) -> Schedule:
    beta = np.array(arrays["schedule.beta"], dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return Schedule(len(beta), beta, alpha_bar)


def noise_tensor(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))
