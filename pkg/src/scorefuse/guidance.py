"""Likelihood guidance for posterior sampling.

Each observation modality contributes the gradient, with respect to the noisy
state ``x_t``, of ``-||y - M(D(x_t; sigma))||^2 / (sigma_y + sigma^2 * gamma_hat)``.
Modalities are combined by a weighted sum of these gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .measure import MeasurementOp, ObsVector
from .prior.schedule import Denoiser, linearize

# Default noise variance and variance inflation per modality.
COARSE_SIGMA_Y = 1e-1
COARSE_GAMMA_HAT = 5e-3
POINT_SIGMA_Y = 5e-4
POINT_GAMMA_HAT = 1e-5
AUTO_CLIP_FACTOR = 10.0


@dataclass(frozen=True)
class GuidanceTerm:
    """One observation modality: operator, data, noise model and fusion weight.

    ``sigma_y`` may be a scalar or one variance per observation.
    """

    op: MeasurementOp
    y: np.ndarray
    sigma_y: float | np.ndarray = COARSE_SIGMA_Y
    gamma_hat: float = COARSE_GAMMA_HAT
    weight: float = 1.0

    def __post_init__(self):
        y = self.y.values if isinstance(self.y, ObsVector) else self.y
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size != self.op.out_size:
            raise ValueError(f"observation length {y.size} does not match operator output {self.op.out_size}")
        sy = np.asarray(self.sigma_y, dtype=np.float64)
        if sy.ndim and sy.shape != y.shape:
            raise ValueError("per-observation sigma_y must match the observation length")
        if np.any(sy < 0) or self.gamma_hat < 0:
            raise ValueError("sigma_y and gamma_hat must be nonnegative")
        if np.any(sy == 0) and self.gamma_hat == 0:
            raise ValueError("sigma_y + sigma^2 * gamma_hat must stay positive")
        if self.weight < 0:
            raise ValueError("fusion weight must be nonnegative")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma_y", sy if sy.ndim else float(sy))

    def cotangent(self, x_hat: np.ndarray, sigma: float) -> np.ndarray:
        """State-space gradient of the misfit with respect to the denoised state."""
        resid = self.y - self.op.apply(x_hat)
        return self.op.vjp(x_hat, (2.0 / (self.sigma_y + sigma * sigma * self.gamma_hat)) * resid)

    def misfit(self, x_hat: np.ndarray, sigma: float) -> float:
        resid = self.y - self.op.apply(x_hat)
        return float(-np.sum(resid * resid / (self.sigma_y + sigma * sigma * self.gamma_hat)))


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance terms, gradient clipping and the overall guidance scale.

    ``clip_norm=None`` selects the automatic threshold: ten times the RMS of
    the prior drift at the first sampler step. ``clip_norm=0`` disables clipping.
    By default the fused likelihood gradient is clipped as one vector. With
    ``clip_per_term`` each modality is clipped on its own and then weighted,
    so a stiff modality cannot shrink the others.
    """

    terms: Sequence[GuidanceTerm] = field(default_factory=tuple)
    clip_norm: float | None = None
    guidance_scale: float = 1.0
    clip_per_term: bool = False

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be nonnegative")
        if self.clip_norm is not None and self.clip_norm < 0:
            raise ValueError("clip_norm must be nonnegative")

    @property
    def active(self) -> bool:
        return self.guidance_scale != 0 and any(t.weight != 0 for t in self.terms)


def _check_state(x):
    if not isinstance(x, np.ndarray):
        raise TypeError("guidance operates on (C, H, W) arrays; pass StateTensor.data")


def likelihood_score(term: GuidanceTerm, denoiser: Denoiser, x_t: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    _check_state(x_t)
    x_hat, d_vjp = linearize(denoiser, x_t, sigma)
    return d_vjp(term.cotangent(x_hat, sigma))


def fused_score_from(terms: Sequence[GuidanceTerm], x_hat: np.ndarray, d_vjp, sigma: float) -> np.ndarray:
    """Weighted likelihood score given an already linearized denoiser."""
    total = None
    for term in terms:
        if term.weight == 0:
            continue
        c = term.weight * term.cotangent(x_hat, sigma)
        total = c if total is None else total + c
    if total is None:
        return np.zeros_like(x_hat)
    return d_vjp(total)


def fuse_scores(terms: Sequence[GuidanceTerm], denoiser: Denoiser, x_t: np.ndarray, sigma: float) -> np.ndarray:
    if len(terms) == 0:
        raise ValueError("fuse_scores needs at least one guidance term")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    _check_state(x_t)
    x_hat, d_vjp = linearize(denoiser, x_t, sigma)
    return fused_score_from(terms, x_hat, d_vjp, sigma)


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    if clip_norm < 0:
        raise ValueError("clip_norm must be nonnegative")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("cannot clip a non-finite gradient")
    if clip_norm == 0:
        return g
    norm = float(np.sqrt(np.sum(g * g)))
    if norm <= clip_norm:
        return g
    return g * (clip_norm / norm)
