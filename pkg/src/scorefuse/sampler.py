"""Deterministic and stochastic (churned) Heun samplers with likelihood guidance."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import StateTensor, save_field
from .guidance import AUTO_CLIP_FACTOR, GuidanceConfig, clip_gradient, fused_score_from
from .prior.schedule import Denoiser, linearize
from .rng import member_seed, stream


class SamplerDivergedError(FloatingPointError):
    def __init__(self, step: int, sigma: float):
        super().__init__(f"non-finite state at step {step} (sigma={sigma:g})")
        self.step = step
        self.sigma = sigma


class EnsembleMemberError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"ensemble member {index} failed: {cause}")
        self.index = index


@dataclass(frozen=True)
class TimeGrid:
    steps: np.ndarray
    rho: float

    def __post_init__(self):
        t = np.asarray(self.steps, dtype=np.float64)
        if t[-1] != 0 or np.any(np.diff(t) >= 0):
            raise ValueError("time grid must be strictly decreasing and end at 0")
        object.__setattr__(self, "steps", t)

    @property
    def n(self) -> int:
        return len(self.steps) - 1


def build_time_grid(n: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> TimeGrid:
    if n < 2:
        raise ValueError(f"need at least 2 steps, got {n}")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    i = np.arange(n)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    t = (hi + i / (n - 1) * (lo - hi)) ** rho
    t[0], t[-1] = sigma_max, sigma_min
    return TimeGrid(np.append(t, 0.0), rho)


@dataclass(frozen=True)
class SamplerConfig:
    grid: TimeGrid = field(default_factory=lambda: build_time_grid(40))
    s_churn: float = 0.0
    s_tmin: float = 0.0
    s_tmax: float = math.inf
    seed: int = 0
    reevaluate_correction: bool = True

    def __post_init__(self):
        if self.s_churn < 0 or not 0 <= self.s_tmin <= self.s_tmax:
            raise ValueError("need s_churn >= 0 and 0 <= s_tmin <= s_tmax")

    @classmethod
    def stochastic(cls, n: int = 40, **kw) -> "SamplerConfig":
        kw.setdefault("s_churn", 2.0)
        kw.setdefault("s_tmin", 0.05)
        kw.setdefault("s_tmax", 50.0)
        return cls(grid=build_time_grid(n), **kw)

    def gamma(self, t: float) -> float:
        if self.s_tmin <= t <= self.s_tmax:
            return min(self.s_churn / self.grid.n, math.sqrt(2) - 1)
        return 0.0

    def to_dict(self) -> dict:
        return {
            "steps": self.grid.n, "rho": self.grid.rho,
            "sigma_min": float(self.grid.steps[-2]), "sigma_max": float(self.grid.steps[0]),
            "s_churn": self.s_churn, "s_tmin": self.s_tmin,
            "s_tmax": None if math.isinf(self.s_tmax) else self.s_tmax,
            "seed": self.seed, "reevaluate_correction": self.reevaluate_correction,
        }


class _Guide:
    """Posterior drift evaluator; resolves the automatic clip threshold once."""

    def __init__(self, guidance: GuidanceConfig | None):
        self.guidance = guidance if guidance is not None and guidance.active else None
        self.clip = None if guidance is None else guidance.clip_norm

    def parts(self, denoiser, x, t, with_likelihood=True):
        """Prior drift ``(x - D(x; t)) / t`` and, if requested, the likelihood scores.

        Scores come back as ``(weight, score)`` pairs: one fused score with
        weight 1, or one unweighted score per active term when the guidance
        clips modalities separately (the weight then applies after clipping).
        """
        x_hat, d_vjp = linearize(denoiser, x, t)
        d = (x - x_hat) / t
        if self.guidance is None or not with_likelihood:
            return d, None
        if self.clip is None:
            self.clip = AUTO_CLIP_FACTOR * float(np.sqrt(np.mean(d * d)))
        terms = self.guidance.terms
        if self.guidance.clip_per_term:
            return d, [(term.weight, d_vjp(term.cotangent(x_hat, t))) for term in terms if term.weight != 0]
        return d, [(1.0, fused_score_from(terms, x_hat, d_vjp, t))]

    def combine(self, d_prior, s_l, t):
        if s_l is None:
            return d_prior
        g = None
        for w, s in s_l:
            c = clip_gradient(t * s, self.clip)
            c = c if w == 1.0 else w * c
            g = c if g is None else g + c
        return d_prior - self.guidance.guidance_scale * g


def _step(guide: _Guide, denoiser, x, t_cur, t_next, reevaluate=True):
    d_prior, s_l = guide.parts(denoiser, x, t_cur)
    d = guide.combine(d_prior, s_l, t_cur)
    x_pred = x + (t_next - t_cur) * d
    if t_next == 0:
        return x_pred
    d_prior2, s_l2 = guide.parts(denoiser, x_pred, t_next, with_likelihood=reevaluate)
    if not reevaluate:
        s_l2 = s_l
    d_corr = guide.combine(d_prior2, s_l2, t_next)
    return x + (t_next - t_cur) * (0.5 * (d + d_corr))


def heun_step(denoiser: Denoiser, x: np.ndarray, t_cur: float, t_next: float,
              guidance: GuidanceConfig | None = None) -> np.ndarray:
    """One Euler predictor plus trapezoidal corrector (plain Euler into ``t = 0``)."""
    if not t_cur > 0:
        raise ValueError(f"t_cur must be positive, got {t_cur}")
    if not 0 <= t_next < t_cur:
        raise ValueError(f"need 0 <= t_next < t_cur, got {t_next}, {t_cur}")
    return _step(_Guide(guidance), denoiser, np.asarray(x, dtype=np.float64), t_cur, t_next)


def _shape_of(denoiser, shape):
    if shape is not None:
        return tuple(shape)
    shape = getattr(denoiser, "shape", None)
    if shape is None:
        raise ValueError("pass shape= for denoisers without a .shape attribute")
    return tuple(shape)


def posterior_sample(
    denoiser: Denoiser,
    config: SamplerConfig,
    guidance: GuidanceConfig | None = None,
    rng: np.random.Generator | None = None,
    shape=None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Draw one posterior sample with the churned, guided Heun sampler.

    The initial state is ``t_0 * N(0, I)`` unless ``x_init`` is given. Churn
    noise is only drawn at steps whose ``gamma`` is positive.
    """
    rng = stream(config.seed) if rng is None else rng
    t = config.grid.steps
    if x_init is None:
        x = t[0] * rng.standard_normal(_shape_of(denoiser, shape))
    else:
        x = np.array(x_init, dtype=np.float64)
    guide = _Guide(guidance)
    for i in range(config.grid.n):
        t_cur, t_next = float(t[i]), float(t[i + 1])
        gamma = config.gamma(t_cur)
        if gamma > 0:
            t_hat = t_cur + gamma * t_cur
            x = x + math.sqrt(t_hat * t_hat - t_cur * t_cur) * rng.standard_normal(x.shape)
        else:
            t_hat = t_cur
        x = _step(guide, denoiser, x, t_hat, t_next, config.reevaluate_correction)
        if not np.all(np.isfinite(x)):
            raise SamplerDivergedError(i, t_hat)
    return x


def deterministic_sample(denoiser: Denoiser, grid: TimeGrid, x_init: np.ndarray,
                         guidance: GuidanceConfig | None = None) -> np.ndarray:
    """Plain probability-flow integration with :func:`heun_step`; shares its clip state."""
    guide = _Guide(guidance)
    x = np.array(x_init, dtype=np.float64)
    t = grid.steps
    for i in range(grid.n):
        x = _step(guide, denoiser, x, float(t[i]), float(t[i + 1]))
    return x


@dataclass
class EnsembleResult:
    members: np.ndarray
    seeds: list[int]
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.members = np.asarray(self.members)
        self.mean = self.members.mean(axis=0)
        self.std = self.members.std(axis=0)

    def __len__(self):
        return len(self.members)

    def save(self, directory, channels, manifest: dict | None = None) -> None:
        """Write ``member_<k>.fld``, ``mean.fld``, ``std.fld`` and ``manifest.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(self.members):
            save_field(StateTensor.from_array(m, channels), out / f"member_{k}.fld")
        save_field(StateTensor.from_array(self.mean, channels), out / "mean.fld")
        save_field(StateTensor.from_array(self.std, channels), out / "std.fld")
        info = dict(manifest or {})
        info["seeds"] = list(self.seeds)
        (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def generate_ensemble(
    denoiser: Denoiser,
    config: SamplerConfig,
    guidance: GuidanceConfig | None,
    count: int,
    base_seed: int,
    threads: int = 1,
    shape=None,
    x_init=None,
) -> EnsembleResult:
    """Independent posterior samples with seeds ``base_seed + k``; merged by index."""
    if count < 1:
        raise ValueError("ensemble needs at least one member")
    seeds = [member_seed(base_seed, k) for k in range(count)]

    def run(k):
        try:
            return posterior_sample(denoiser, config, guidance, stream(seeds[k]), shape=shape, x_init=x_init)
        except Exception as exc:
            raise EnsembleMemberError(k, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            members = list(pool.map(run, range(count)))
    else:
        members = [run(k) for k in range(count)]
    return EnsembleResult(np.stack(members), seeds)
