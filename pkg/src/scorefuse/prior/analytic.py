"""Closed-form priors whose denoisers are exact posterior means.

These stand in for a learned prior wherever an exact answer is needed:
Tweedie/score checks, adjoint tests and the synthetic experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class GaussianMixturePrior:
    """Mixture of isotropic Gaussians ``sum_k w_k N(m_k, s_k^2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if m.ndim != 4:
            raise ValueError(f"means must have shape (K, C, H, W), got {m.shape}")
        if w.shape != (m.shape[0],) or v.shape != (m.shape[0],):
            raise ValueError("weights and variances need one entry per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1, got {w}")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.means.shape[1:]

    def _log_resp(self, x, sigma):
        v = self.variances + sigma * sigma
        d = x.size
        sq = np.array([np.sum((x - m) ** 2) for m in self.means])
        logits = np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * v) - 0.5 * sq / v
        return logits, v

    def log_density(self, x: np.ndarray, sigma: float) -> float:
        """Log density of the sigma-smoothed mixture at ``x``."""
        logits, _ = self._log_resp(np.asarray(x, dtype=np.float64), sigma)
        return float(logsumexp(logits))

    def responsibilities(self, x: np.ndarray, sigma: float) -> np.ndarray:
        logits, _ = self._log_resp(x, sigma)
        return np.exp(logits - logsumexp(logits))

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        """Analytic gradient of :meth:`log_density`."""
        r = self.responsibilities(x, sigma)
        v = self.variances + sigma * sigma
        return sum(rk * (m - x) / vk for rk, m, vk in zip(r, self.means, v))

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        return gmm_denoise(self, x, sigma)

    def vjp(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray:
        return gmm_vjp(self, x, sigma, cotangent)

    def linearize(self, x: np.ndarray, sigma: float):
        if sigma == 0:
            return np.array(x, dtype=np.float64), lambda cot: np.array(cot, dtype=np.float64)
        parts = _gmm_parts(self, x, sigma)
        return _gmm_mean(parts), lambda cot: _gmm_vjp(parts, x, cot)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        ks = rng.choice(len(self.weights), size=count, p=self.weights)
        noise = rng.standard_normal((count,) + self.shape)
        return self.means[ks] + np.sqrt(self.variances[ks])[:, None, None, None] * noise


def _gmm_parts(prior, x, sigma):
    logits, v = prior._log_resp(x, sigma)
    r = np.exp(logits - logsumexp(logits))
    comps = [(s2k * x + sigma * sigma * m) / vk
             for s2k, m, vk in zip(prior.variances, prior.means, v)]
    return prior, r, v, comps


def _gmm_mean(parts):
    _, r, _, comps = parts
    return sum(rk * ck for rk, ck in zip(r, comps))


def _gmm_vjp(parts, x, cot):
    # J^T u = sum_k r_k (s_k^2/v_k) u + sum_k r_k (a_k . u) (g_k - g_bar),
    # with g_k = (m_k - x)/v_k the gradient of the k-th log-weight.
    prior, r, v, comps = parts
    out = float(np.sum(r * prior.variances / v)) * cot
    if len(r) == 1:
        return out
    grads = [(m - x) / vk for m, vk in zip(prior.means, v)]
    g_bar = sum(rk * g for rk, g in zip(r, grads))
    for rk, ck, g in zip(r, comps, grads):
        if rk > 0:
            out = out + rk * float(np.vdot(ck, cot)) * (g - g_bar)
    return out


def gmm_denoise(prior: GaussianMixturePrior, x: np.ndarray, sigma: float) -> np.ndarray:
    """Posterior mean ``E[x0 | x(sigma) = x]`` under the mixture prior."""
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return _gmm_mean(_gmm_parts(prior, x, sigma))


def gmm_vjp(prior: GaussianMixturePrior, x: np.ndarray, sigma: float, cotangent) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != x.shape:
        raise ValueError(f"cotangent shape {cot.shape} does not match state {x.shape}")
    if sigma == 0:
        return cot.copy()
    return _gmm_vjp(_gmm_parts(prior, x, sigma), x, cot)


@dataclass(frozen=True)
class StationaryGaussianPrior:
    """Gaussian prior whose covariance is diagonal in the 2-D Fourier basis.

    ``spectrum[c, ky, kx]`` is the variance of each orthonormal FFT mode of
    channel ``c``; it must be symmetric under ``k -> -k`` so fields stay real.
    The basis is periodic in both directions, which is a modelling choice for
    the prior only (interpolation still clamps in y).
    """

    mean: np.ndarray
    spectrum: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        p = np.asarray(self.spectrum, dtype=np.float64)
        if m.ndim != 3 or p.shape != m.shape:
            raise ValueError(f"mean {m.shape} and spectrum {p.shape} must both be (C, H, W)")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("spectrum must be finite and nonnegative")
        flipped = np.roll(p[:, ::-1, ::-1], 1, axis=(1, 2))
        if not np.allclose(p, flipped, rtol=1e-10, atol=0):
            raise ValueError("spectrum must be symmetric under k -> -k")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "spectrum", p)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mean.shape

    @classmethod
    def power_law(cls, shape, slope: float = 3.0, k0: float = 1.0, variance: float = 1.0,
                  mean=0.0) -> "StationaryGaussianPrior":
        """Isotropic spectrum ``(k0^2 + |k|^2)^(-slope/2)`` scaled to unit pointwise variance."""
        c, h, w = shape
        ky = np.fft.fftfreq(h) * h
        kx = np.fft.fftfreq(w) * w
        k2 = ky[:, None] ** 2 + kx[None, :] ** 2
        p = (k0 * k0 + k2) ** (-slope / 2.0)
        p = p * variance / p.mean()
        spec = np.broadcast_to(p, (c, h, w)).copy()
        return cls(np.broadcast_to(np.asarray(mean, dtype=np.float64), (c, h, w)).copy(), spec)

    @classmethod
    def fit(cls, samples, floor: float = 1e-8) -> "StationaryGaussianPrior":
        """Estimate a per-channel constant mean and the mode variances from samples."""
        samples = np.asarray(samples, dtype=np.float64)
        mean = samples.mean(axis=(0, 2, 3), keepdims=True)[0]
        mean = np.broadcast_to(mean, samples.shape[1:]).copy()
        modes = np.fft.fft2(samples - mean, norm="ortho")
        p = np.mean(np.abs(modes) ** 2, axis=0)
        p = 0.5 * (p + np.roll(p[:, ::-1, ::-1], 1, axis=(1, 2)))
        return cls(mean, np.maximum(p, floor))

    def _filter(self, u, sigma):
        gain = self.spectrum / (self.spectrum + sigma * sigma)
        return np.fft.ifft2(gain * np.fft.fft2(u, norm="ortho"), norm="ortho").real

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if sigma == 0:
            return x.copy()
        return self.mean + self._filter(x - self.mean, sigma)

    def vjp(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray:
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != self.shape:
            raise ValueError(f"cotangent shape {cot.shape} does not match prior {self.shape}")
        if sigma == 0:
            return cot.copy()
        # the Wiener filter is symmetric, so the vjp is the filter itself
        return self._filter(cot, sigma)

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        return (self.denoise(x, sigma) - x) / sigma**2

    def log_density(self, x: np.ndarray, sigma: float) -> float:
        modes = np.fft.fft2(np.asarray(x) - self.mean, norm="ortho")
        var = self.spectrum + sigma * sigma
        return float(-0.5 * np.sum(np.abs(modes) ** 2 / var + np.log(2 * np.pi * var)))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        white = rng.standard_normal((count,) + self.shape)
        colored = np.fft.ifft2(np.sqrt(self.spectrum) * np.fft.fft2(white, norm="ortho"), norm="ortho")
        return self.mean + colored.real
