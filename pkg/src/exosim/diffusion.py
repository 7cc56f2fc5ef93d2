"""Shared denoising-diffusion core for the intention predictor and the
anomaly detector.

Convention: diffusion steps t run 1..T; arrays are indexed t-1. The reverse
chain uses the standard posterior variance beta_tilde_t; its square root
scales the injected noise (ancestral mode). DDIM exposes eta so eta=1 with
the noise zeroed reproduces the ancestral mean iteration exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .errors import ConfigError, ShapeMismatchError

T_DEFAULT = 100
BETA_START = 1e-4
BETA_END = 0.02
TEMB_DIM = 16


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def validate(self):
        if self.beta.shape != (self.T,):
            raise ConfigError("beta length must equal T")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ConfigError("beta must lie in (0, 1)")
        if np.any(np.diff(self.beta) < 0):
            raise ConfigError("beta schedule must be non-decreasing")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing")

    def abar_prev(self, t: int) -> float:
        """alpha_bar at t-1 with the alpha_bar_0 = 1 convention."""
        return float(self.alpha_bar[t - 2]) if t >= 2 else 1.0

    def to_dict(self):
        return {"T": int(self.T), "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def linear_schedule(T: int = T_DEFAULT, beta_start: float = BETA_START,
                    beta_end: float = BETA_END) -> NoiseSchedule:
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - abar_prev) / (1.0 - alpha_bar) * beta
    # abar_0 = 1 makes beta_tilde_1 = 0; pin it to beta_1 (the t=1 reverse
    # step injects no noise anyway)
    beta_tilde[0] = beta[0]
    sched = NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                          beta_tilde=beta_tilde)
    sched.validate()
    return sched


def time_embedding(t, dim: int = TEMB_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps; t scalar or (B,)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class Denoiser:
    """Noise-prediction network with its schedule.

    The MLP consumes [x_t, time-embedding, cond]; cond_dim = 0 for the
    unconditional detector.
    """

    def __init__(self, net: nn.Mlp, schedule: NoiseSchedule, data_dim: int,
                 cond_dim: int = 0, temb_dim: int = TEMB_DIM):
        expected = data_dim + temb_dim + cond_dim
        if net.layer_dims[0] != expected:
            raise ShapeMismatchError(
                f"denoiser input dim {net.layer_dims[0]} != data {data_dim} + temb {temb_dim} + cond {cond_dim}")
        if net.layer_dims[-1] != data_dim:
            raise ShapeMismatchError("denoiser output dim must equal data_dim")
        self.net = net
        self.schedule = schedule
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        self.temb_dim = temb_dim

    def _assemble(self, x_t, t, cond):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float32))
        temb = time_embedding(t, self.temb_dim)
        if temb.shape[0] == 1 and x_t.shape[0] > 1:
            temb = np.repeat(temb, x_t.shape[0], axis=0)
        parts = [x_t, temb]
        if self.cond_dim:
            if cond is None:
                raise ShapeMismatchError("conditional denoiser needs cond input")
            cond = np.atleast_2d(np.asarray(cond, dtype=np.float32))
            if cond.shape[0] == 1 and x_t.shape[0] > 1:
                cond = np.repeat(cond, x_t.shape[0], axis=0)
            parts.append(cond)
        return np.concatenate(parts, axis=1)

    def predict_noise(self, x_t, t, cond=None) -> np.ndarray:
        return self.net(self._assemble(x_t, t, cond))

    def predict_noise_graph(self, x_t: nn.Tensor, t, cond: nn.Tensor = None) -> nn.Tensor:
        temb = nn.Tensor(time_embedding(t, self.temb_dim))
        parts = [x_t, temb]
        if self.cond_dim:
            if cond is None:
                raise ShapeMismatchError("conditional denoiser needs cond input")
            parts.append(cond)
        return self.net.apply(nn.concat(parts, axis=1))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Forward noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    t = np.asarray(t)
    ab = schedule.alpha_bar[t - 1].astype(np.float32)
    if x0.ndim == 2 and ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def loss(denoiser: Denoiser, x0: np.ndarray, cond, rng: np.random.Generator,
         t=None, eps=None) -> nn.Tensor:
    """Simplified denoising objective: mean over the batch of the summed
    squared noise-prediction error. x0 must already be normalized."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float32))
    B = x0.shape[0]
    if t is None:
        t = rng.integers(1, denoiser.schedule.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_t = q_sample(denoiser.schedule, x0, t, eps)
    cond_t = None
    if cond is not None:
        cond_t = cond if isinstance(cond, nn.Tensor) else nn.Tensor(np.atleast_2d(np.asarray(cond, dtype=np.float32)))
    eps_hat = denoiser.predict_noise_graph(nn.Tensor(x_t), t, cond_t)
    return (eps_hat - nn.Tensor(eps)).square().sum_rows().mean_rows()


def _ancestral_update(denoiser, x, t, cond, noise):
    s = denoiser.schedule
    eps_hat = denoiser.predict_noise(x, t, cond)
    a_t = s.alpha[t - 1]
    ab_t = s.alpha_bar[t - 1]
    mean = (x - (s.beta[t - 1] / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(a_t)
    if t > 1:
        return mean + np.sqrt(s.beta_tilde[t - 1]) * noise
    return mean


def _ddim_update(denoiser, x, t, t_prev, cond, eta, noise):
    s = denoiser.schedule
    eps_hat = denoiser.predict_noise(x, t, cond)
    ab_t = s.alpha_bar[t - 1]
    ab_prev = s.alpha_bar[t_prev - 1] if t_prev >= 1 else 1.0
    x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    sigma2 = 0.0
    if eta > 0:
        sigma2 = eta**2 * (1.0 - ab_prev) / (1.0 - ab_t) * s.beta[t - 1]
        sigma2 = min(sigma2, 1.0 - ab_prev)
    dir_coeff = np.sqrt(max(1.0 - ab_prev - sigma2, 0.0))
    out = np.sqrt(ab_prev) * x0_hat + dir_coeff * eps_hat
    if sigma2 > 0 and noise is not None:
        out = out + np.sqrt(sigma2) * noise
    return out


def ddim_steps(T: int, steps: int) -> list:
    """Evenly spaced decreasing sub-sequence of steps ending at 1."""
    if steps > T:
        raise ConfigError("steps must not exceed T")
    ts = np.unique(np.linspace(1, T, steps).round().astype(int))[::-1]
    return ts.tolist()


def sample(denoiser: Denoiser, cond, steps: int, mode: str,
           rng: np.random.Generator, n: int = 1, eta: float = 0.0,
           noise_scale: float = 1.0) -> np.ndarray:
    """Draw n samples from the learned distribution.

    mode 'ancestral' runs the full T-step chain with posterior noise;
    'ddim' runs the `steps`-long deterministic (eta = 0) sub-sequence.
    noise_scale = 0 turns either chain into its mean iteration.
    """
    s = denoiser.schedule
    x = rng.standard_normal((n, denoiser.data_dim)).astype(np.float32)
    if mode == "ancestral":
        for t in range(s.T, 0, -1):
            noise = noise_scale * rng.standard_normal(x.shape).astype(np.float32) if t > 1 else None
            x = _ancestral_update(denoiser, x, t, cond, noise)
    elif mode == "ddim":
        ts = ddim_steps(s.T, steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            noise = None
            if eta > 0:
                noise = noise_scale * rng.standard_normal(x.shape).astype(np.float32)
            x = _ddim_update(denoiser, x, t, t_prev, cond, eta, noise)
    else:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    return x


def denoise_from(denoiser: Denoiser, x_nu: np.ndarray, nu: int,
                 rng: np.random.Generator, cond=None) -> np.ndarray:
    """Run the ancestral reverse chain from step nu down to 0.

    Used by the reconstruction-based anomaly score: partially noise a window
    to step nu, then denoise back and compare.
    """
    s = denoiser.schedule
    if not (1 <= nu <= s.T):
        raise ConfigError(f"nu must lie in [1, {s.T}]")
    squeeze = np.asarray(x_nu).ndim == 1
    x = np.atleast_2d(np.asarray(x_nu, dtype=np.float32))
    for t in range(nu, 0, -1):
        noise = rng.standard_normal(x.shape).astype(np.float32) if t > 1 else None
        x = _ancestral_update(denoiser, x, t, cond, noise)
    return x[0] if squeeze else x


class Normalizer:
    """Per-channel z-score with training-set statistics."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    @classmethod
    def fit(cls, data: np.ndarray, floor: float = 1e-6) -> "Normalizer":
        data = np.asarray(data, dtype=np.float64)
        flat = data.reshape(-1, data.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), floor))

    def transform(self, x):
        return ((np.asarray(x, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    def inverse(self, x):
        return (np.asarray(x, dtype=np.float32) * self.std + self.mean).astype(np.float32)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))
