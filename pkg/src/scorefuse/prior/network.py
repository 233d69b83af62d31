"""A small trainable denoiser and the EDM training loop.

The raw network is a two-hidden-layer MLP over the flattened state plus a
Fourier embedding of ``c_noise``; it sits inside the EDM preconditioning
wrapper. Forward and reverse passes are written out by hand so the same code
serves training (parameter gradients) and guidance (input vjp).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .schedule import (
    P_MEAN,
    P_STD,
    Denoiser,
    NoiseSchedule,
    loss_weight,
    precondition_coeffs,
    sample_training_sigma,
)

log = logging.getLogger(__name__)

EMBED_FREQS = (1.0, 2.0, 4.0)
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


def _silu(h):
    s = 1.0 / (1.0 + np.exp(-h))
    return h * s, s


def _embed(c_noise: np.ndarray) -> np.ndarray:
    c = np.asarray(c_noise, dtype=np.float64)[:, None]
    feats = [c]
    for f in EMBED_FREQS:
        feats += [np.sin(f * c), np.cos(f * c)]
    return np.concatenate(feats, axis=1)


def embed_dim() -> int:
    return 1 + 2 * len(EMBED_FREQS)


def init_params(dim: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n_in = dim + embed_dim()
    return {
        "w1": rng.standard_normal((n_in, hidden)) / np.sqrt(n_in),
        "b1": np.zeros(hidden),
        "w2": rng.standard_normal((hidden, hidden)) / np.sqrt(hidden),
        "b2": np.zeros(hidden),
        # zero output layer: the untrained network is D = c_skip * x
        "w3": np.zeros((hidden, dim)),
        "b3": np.zeros(dim),
    }


def _forward(params, z):
    h1 = z @ params["w1"] + params["b1"]
    a1, s1 = _silu(h1)
    h2 = a1 @ params["w2"] + params["b2"]
    a2, s2 = _silu(h2)
    out = a2 @ params["w3"] + params["b3"]
    return out, (z, h1, a1, s1, h2, a2, s2)


def _silu_grad(h, s):
    return s * (1.0 + h * (1.0 - s))


def _backward(params, cache, g_out, want_params=True):
    z, h1, a1, s1, h2, a2, s2 = cache
    grads = {}
    g_a2 = g_out @ params["w3"].T
    g_h2 = g_a2 * _silu_grad(h2, s2)
    g_a1 = g_h2 @ params["w2"].T
    g_h1 = g_a1 * _silu_grad(h1, s1)
    g_z = g_h1 @ params["w1"].T
    if want_params:
        grads["w3"] = a2.T @ g_out
        grads["b3"] = g_out.sum(axis=0)
        grads["w2"] = a1.T @ g_h2
        grads["b2"] = g_h2.sum(axis=0)
        grads["w1"] = z.T @ g_h1
        grads["b1"] = g_h1.sum(axis=0)
    return g_z, grads


@dataclass(frozen=True)
class MLPDenoiser:
    """Preconditioned MLP denoiser for states of a fixed shape."""

    shape: tuple[int, int, int]
    params: dict[str, np.ndarray] = field(repr=False)
    schedule: NoiseSchedule = NoiseSchedule()

    @property
    def dim(self) -> int:
        c, h, w = self.shape
        return c * h * w

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _inputs(self, x_flat, sigmas):
        coeffs = [precondition_coeffs(float(s), self.schedule.sigma_data) for s in sigmas]
        c_in = np.array([c.c_in for c in coeffs])[:, None]
        c_noise = np.array([c.c_noise for c in coeffs])
        z = np.concatenate([c_in * x_flat, _embed(c_noise)], axis=1)
        c_skip = np.array([c.c_skip for c in coeffs])[:, None]
        c_out = np.array([c.c_out for c in coeffs])[:, None]
        return z, c_skip, c_out, c_in

    def denoise_batch(self, x: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
        flat = x.reshape(len(x), -1)
        z, c_skip, c_out, _ = self._inputs(flat, sigmas)
        f, _ = _forward(self.params, z)
        return (c_skip * flat + c_out * f).reshape(x.shape)

    def denoise(self, x: np.ndarray, sigma: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise ValueError(f"state shape {x.shape} does not match network shape {self.shape}")
        return self.denoise_batch(x[None], np.array([sigma]))[0]

    def linearize(self, x: np.ndarray, sigma: float):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise ValueError(f"state shape {x.shape} does not match network shape {self.shape}")
        flat = x.reshape(1, -1)
        z, c_skip, c_out, c_in = self._inputs(flat, [sigma])
        f, cache = _forward(self.params, z)
        out = (c_skip * flat + c_out * f).reshape(self.shape)

        def vjp(cot):
            cot = np.asarray(cot, dtype=np.float64).reshape(1, -1)
            g_z, _ = _backward(self.params, cache, c_out * cot, want_params=False)
            return (c_skip * cot + c_in * g_z[:, : self.dim]).reshape(self.shape)

        return out, vjp

    def vjp(self, x: np.ndarray, sigma: float, cotangent: np.ndarray) -> np.ndarray:
        return self.linearize(x, sigma)[1](cotangent)


def edm_loss(
    denoiser: Denoiser,
    batch,
    rng: np.random.Generator,
    sigma: float | None = None,
    noise: np.ndarray | None = None,
    p_mean: float = P_MEAN,
    p_std: float = P_STD,
    sigma_data: float = 1.0,
) -> float:
    """Mean over the batch of ``w(sigma) * ||x0 - D(x0 + sigma n; sigma)||^2``.

    A fresh ``sigma`` and ``n`` are drawn per element unless fixed by the caller.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if len(batch) == 0:
        raise ValueError("edm_loss needs a nonempty batch")
    total = 0.0
    for i, x0 in enumerate(batch):
        s = float(sample_training_sigma(rng, p_mean=p_mean, p_std=p_std)) if sigma is None else sigma
        n = rng.standard_normal(x0.shape) if noise is None else np.asarray(noise)[i]
        resid = x0 - denoiser.denoise(x0 + s * n, s)
        total += float(loss_weight(s, sigma_data)) * float(np.sum(resid * resid))
    return total / len(batch)


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 128
    steps: int = 20000
    batch_size: int = 128
    learning_rate: float = 1e-2
    grad_clip: float = 10.0
    seed: int = 0
    p_mean: float = P_MEAN
    p_std: float = P_STD
    log_every: int = 500


def _batch_loss_and_grads(den: MLPDenoiser, x0, sigmas, noise):
    flat0 = x0.reshape(len(x0), -1)
    noisy = flat0 + sigmas[:, None] * noise.reshape(len(x0), -1)
    z, c_skip, c_out, _ = den._inputs(noisy, sigmas)
    f, cache = _forward(den.params, z)
    resid = c_skip * noisy + c_out * f - flat0
    w = loss_weight(sigmas, den.schedule.sigma_data)[:, None]
    b = len(x0)
    loss = float(np.sum(w * resid * resid)) / b
    g_f = 2.0 * w * resid * c_out / b
    _, grads = _backward(den.params, cache, g_f)
    return loss, grads


def train_denoiser(config: TrainConfig, dataset, schedule: NoiseSchedule = NoiseSchedule()):
    """Fit an :class:`MLPDenoiser` with clipped SGD on the EDM loss.

    Returns the trained denoiser and the per-step loss trace. Deterministic
    for a given ``config.seed``.
    """
    from ..rng import stream

    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("dataset must be a nonempty stack of (C, H, W) states")
    rng = stream(config.seed)
    shape = data.shape[1:]
    params = init_params(int(np.prod(shape)), config.hidden, rng)
    den = MLPDenoiser(tuple(shape), params, schedule)
    trace = np.empty(config.steps)
    for step in range(config.steps):
        idx = rng.integers(0, len(data), size=config.batch_size)
        sigmas = sample_training_sigma(rng, config.batch_size, config.p_mean, config.p_std)
        noise = rng.standard_normal((config.batch_size,) + tuple(shape))
        loss, grads = _batch_loss_and_grads(den, data[idx], sigmas, noise)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        trace[step] = loss
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, config.grad_clip / norm) if norm > 0 else 1.0
        for name in PARAM_NAMES:
            params[name] -= config.learning_rate * scale * grads[name]
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.4f grad-norm %.3f", step, loss, norm)
    return den, trace


def save_checkpoint(den: MLPDenoiser, path) -> None:
    np.savez(
        path,
        shape=np.array(den.shape),
        sigma_min=den.schedule.sigma_min,
        sigma_max=den.schedule.sigma_max,
        sigma_data=den.schedule.sigma_data,
        **den.params,
    )


def load_checkpoint(path) -> MLPDenoiser:
    with np.load(path) as f:
        params = {name: f[name].copy() for name in PARAM_NAMES}
        schedule = NoiseSchedule(float(f["sigma_min"]), float(f["sigma_max"]), float(f["sigma_data"]))
        shape = tuple(int(v) for v in f["shape"])
    return MLPDenoiser(shape, params, schedule)
