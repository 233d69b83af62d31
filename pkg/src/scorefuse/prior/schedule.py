"""Noise schedule, EDM preconditioning and the denoiser contract."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Protocol

import numpy as np

P_MEAN = -0.5
P_STD = 1.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise range of the zero-drift forward process ``x(sigma) = x0 + sigma * n``.

    The mean scaling is fixed at 1, so ``sigma`` and time are interchangeable.
    """

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 1.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")

    @staticmethod
    def scaling(t) -> float:
        return 1.0


class Denoiser(Protocol):
    """Estimates the clean state from a noisy one.

    ``denoise`` maps a ``(C, H, W)`` array and a noise level to an array of
    the same shape; ``vjp`` applies the transposed Jacobian of ``denoise`` at
    ``(x, sigma)`` to ``cotangent``.
    """

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray: ...


def linearize(denoiser: Denoiser, x: np.ndarray, sigma: float):
    """Return ``denoise(x, sigma)`` and a closure computing its vjp.

    Denoisers that can share work between the two expose their own
    ``linearize``; everything else falls back to two independent calls.
    """
    own = getattr(denoiser, "linearize", None)
    if own is not None:
        return own(x, sigma)
    out = denoiser.denoise(x, sigma)
    return out, lambda cot: denoiser.vjp(x, sigma, cot)


class PreconditionCoeffs(NamedTuple):
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def precondition_coeffs(sigma: float, sigma_data: float = 1.0) -> PreconditionCoeffs:
    if not math.isfinite(sigma) or sigma <= 0:
        raise ValueError(f"sigma must be finite and positive, got {sigma}")
    s2, d2 = sigma * sigma, sigma_data * sigma_data
    return PreconditionCoeffs(
        c_skip=d2 / (s2 + d2),
        c_out=sigma * sigma_data / math.sqrt(s2 + d2),
        c_in=1.0 / math.sqrt(s2 + d2),
        c_noise=math.log(sigma) / 4.0,
    )


def precondition(
    raw_net: Callable[[np.ndarray, float], np.ndarray],
    x: np.ndarray,
    sigma: float,
    sigma_data: float = 1.0,
) -> np.ndarray:
    """``c_skip * x + c_out * F(c_in * x; c_noise)``."""
    c = precondition_coeffs(sigma, sigma_data)
    f = np.asarray(raw_net(c.c_in * x, c.c_noise))
    if f.shape != np.shape(x):
        raise ValueError(f"raw network returned shape {f.shape}, expected {np.shape(x)}")
    return c.c_skip * x + c.c_out * f


def loss_weight(sigma, sigma_data: float = 1.0):
    """EDM loss weight ``1 / c_out(sigma)**2``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def score_from_denoiser(denoiser: Denoiser, x: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = denoiser.denoise(x, sigma)
    if np.shape(d) != np.shape(x):
        raise ValueError(f"denoiser returned shape {np.shape(d)} for input {np.shape(x)}")
    return (d - x) / sigma**2


def sample_training_sigma(
    rng: np.random.Generator, size=None, p_mean: float = P_MEAN, p_std: float = P_STD
):
    """Log-normal training noise levels: ``ln sigma ~ N(p_mean, p_std**2)``."""
    return np.exp(p_mean + p_std * rng.standard_normal(size))
