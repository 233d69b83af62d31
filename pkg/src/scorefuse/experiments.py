"""Synthetic twin experiments shared by the CLI and the acceptance suite.

Truth comes from a fine-grid stochastic advection-diffusion simulation whose
small-scale forcing gives it structure the coarse emulator cannot represent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assimilate import (
    FusionConfig,
    FusionSchedule,
    SpectralAdvectionEmulator,
    fuse_precomputed,
    fuse_reinitialized,
)
from .diagnostics import angle_averaged_spectrum, high_k_deficit, mean_spectrum, points_mask, rmse
from .guidance import COARSE_GAMMA_HAT, COARSE_SIGMA_Y, GuidanceConfig, GuidanceTerm
from .measure import CoarsenOp, PointObservations, PointOp, clustered_points, upsample
from .prior.analytic import StationaryGaussianPrior
from .rng import stream
from .sampler import SamplerConfig, generate_ensemble


@dataclass(frozen=True)
class AdvectionScenario:
    """Fine-grid reference dynamics plus a biased, over-diffusive coarse emulator.

    Velocities are given in coarse cells per step; the fine simulation uses
    the same physical speed, i.e. ``factor_x`` times as many fine cells.
    """

    shape: tuple[int, int, int] = (2, 32, 64)
    factor: tuple[int, int] = (4, 4)
    velocity: tuple[float, ...] = (0.5, -0.3)
    nu: float = 0.02
    damping: float = 0.01
    forcing_slope: float = 4.0
    velocity_bias: float = 0.3
    excess_nu: float = 0.3
    channels: tuple[str, ...] = ("u", "v")

    @property
    def coarse_shape(self) -> tuple[int, int, int]:
        c, h, w = self.shape
        return (c, h // self.factor[0], w // self.factor[1])

    def truth_model(self) -> SpectralAdvectionEmulator:
        fx = self.factor[1]
        return SpectralAdvectionEmulator(self.shape, tuple(v * fx for v in self.velocity),
                                         self.nu / fx**2, self.damping)

    def emulator(self, perfect: bool = False) -> SpectralAdvectionEmulator:
        if perfect:
            vel, nu = self.velocity, self.nu
        else:
            vel = tuple(v + self.velocity_bias for v in self.velocity)
            nu = self.nu + self.excess_nu
        return SpectralAdvectionEmulator(self.coarse_shape, vel, nu, self.damping, grid_factor=self.factor)

    def _forcing(self) -> StationaryGaussianPrior:
        # unit-variance forcing spectrum; its amplitude sets the climatological variance
        return StationaryGaussianPrior.power_law(self.shape, slope=self.forcing_slope, variance=1.0)

    def _raw_climatology(self) -> np.ndarray:
        w = self.shape[2]
        kx = 2 * np.pi * np.fft.fftfreq(w)
        decay = np.exp(-2 * (self.damping + self.nu / self.factor[1] ** 2 * kx**2))
        return self._forcing().spectrum / (1 - decay)[None, None, :]

    def _forcing_amplitude(self) -> float:
        # scales the forcing so the climatology has unit mean pointwise variance
        return float(np.sqrt(1.0 / self._raw_climatology().mean()))

    def stationary_prior(self) -> StationaryGaussianPrior:
        """Exact climatology: forcing spectrum over ``1 - |a_k|^2`` per mode."""
        p = self._raw_climatology() * self._forcing_amplitude() ** 2
        return StationaryGaussianPrior(np.zeros(self.shape), p)

    def simulate(self, seed: int, n_steps: int, x0: np.ndarray | None = None) -> np.ndarray:
        """Truth trajectory of ``n_steps + 1`` states started from the climatology."""
        rng = stream(seed)
        model = self.truth_model()
        forcing = self._forcing()
        amp = self._forcing_amplitude()
        x = self.stationary_prior().sample(rng, 1)[0] if x0 is None else np.array(x0, dtype=np.float64)
        out = [x]
        for _ in range(n_steps):
            x = model.step(x) + amp * forcing.sample(rng, 1)[0]
            out.append(x)
        return np.stack(out)

    def climatology(self, seed: int, count: int, spacing: int = 20) -> np.ndarray:
        traj = self.simulate(seed, count * spacing)
        return traj[spacing::spacing]

    def fitted_prior(self, seed: int = 10_000, count: int = 400) -> StationaryGaussianPrior:
        return StationaryGaussianPrior.fit(self.climatology(seed, count))

    def observe_points(self, truth: np.ndarray, pts, time: int, rng, noise_std: float,
                       sigma_y: float) -> PointObservations:
        op = PointOp(self.shape, self.channels, pts)
        vals = op.apply(truth) + noise_std * rng.standard_normal(len(pts))
        return PointObservations(time, pts, vals, np.full(len(pts), sigma_y))


TRUTH_SEED_OFFSET = 1 << 40


def multiscale_prior(shape, slope: float = 3.0, detail_std: float = 0.5, detail_slope: float = 1.0,
                     seed: int = 0) -> StationaryGaussianPrior:
    """Large-scale random field around a fixed fine-scale climatological pattern.

    The static pattern plays the role of orography-locked detail: it is known
    to the prior but invisible on the coarse grid.
    """
    base = StationaryGaussianPrior.power_law(shape, slope=slope)
    pattern = StationaryGaussianPrior.power_law(shape, slope=detail_slope, variance=detail_std**2)
    mean = pattern.sample(stream(TRUTH_SEED_OFFSET - 1 - seed), 1)[0]
    return StationaryGaussianPrior(mean, base.spectrum)


def default_sampler(steps: int = 40, seed: int = 0) -> SamplerConfig:
    return SamplerConfig.stochastic(steps, seed=seed)


@dataclass
class SuperResTrial:
    rmse_guided: float
    rmse_bicubic: float
    deficit_guided: float
    deficit_bicubic: float


def superres_trial(prior: StationaryGaussianPrior, factor: tuple[int, int], sampler: SamplerConfig,
                   members: int, seed: int, sigma_y: float = COARSE_SIGMA_Y,
                   gamma_hat: float = COARSE_GAMMA_HAT, threads: int = 1) -> SuperResTrial:
    """Reconstruct one prior draw from its coarsened version; compare against bicubic."""
    truth = prior.sample(stream(TRUTH_SEED_OFFSET + seed), 1)[0]
    op = CoarsenOp(prior.shape, *factor)
    coarse = op.apply_grid(truth)
    guidance = GuidanceConfig([GuidanceTerm(op, coarse.ravel(), sigma_y, gamma_hat)])
    ens = generate_ensemble(prior, sampler, guidance, members, seed * 1000 + 1, threads=threads)
    bicubic = upsample(coarse, prior.shape)
    k_cut = min(prior.shape[1] // factor[0], prior.shape[2] // factor[1]) // 2
    spec_true = angle_averaged_spectrum(truth)
    return SuperResTrial(
        rmse(ens.mean, truth), rmse(bicubic, truth),
        high_k_deficit(mean_spectrum(ens.members), spec_true, k_cut),
        high_k_deficit(angle_averaged_spectrum(bicubic), spec_true, k_cut),
    )


@dataclass
class SparseTrial:
    median_std_observed: float
    median_std_unobserved: float


def sparse_uncertainty_trial(prior: StationaryGaussianPrior, channels, sampler: SamplerConfig,
                             members: int, seed: int, n_sites: int = 40, n_clusters: int = 3,
                             sigma_y: float = 5e-4, gamma_hat: float = 1e-5) -> SparseTrial:
    """Ensemble spread at clustered sites versus nodes away from any site."""
    rng = stream(TRUTH_SEED_OFFSET + seed)
    truth = prior.sample(rng, 1)[0]
    pts = clustered_points(channels, n_sites, n_clusters, rng)
    op = PointOp(prior.shape, channels, pts)
    guidance = GuidanceConfig([GuidanceTerm(op, op.apply(truth), sigma_y, gamma_hat)])
    ens = generate_ensemble(prior, sampler, guidance, members, seed * 1000 + 1)
    at_obs = op.apply(ens.std)
    mask = points_mask(pts, prior.shape, radius=2)
    away = ens.std[:, ~mask].ravel()
    return SparseTrial(float(np.median(at_obs)), float(np.median(away)))


@dataclass
class FusionSetup:
    """Everything one assimilation trial needs: truth, observations, schedule."""

    scenario: AdvectionScenario
    truths: list          # truth at each assimilation time
    init_coarse: np.ndarray
    obs: list             # PointObservations per cycle
    schedule: FusionSchedule


def fusion_setup(scenario: AdvectionScenario, seed: int, schedule: FusionSchedule | None = None,
                 n_sites: int = 48, n_clusters: int = 4, obs_noise: float = 0.1,
                 obs_sigma_y: float | None = None) -> FusionSetup:
    """Truth trajectory, clustered noisy point observations and the coarse initial state.

    Observations record ``obs_sigma_y`` as their variance, defaulting to the
    variance of the injected noise.
    """
    schedule = schedule or FusionSchedule()
    if obs_sigma_y is None:
        obs_sigma_y = obs_noise**2
    traj = scenario.simulate(seed, schedule.total_lead)
    rng = stream(seed + 7_777_777)
    pts = clustered_points(scenario.channels, n_sites, n_clusters, rng)
    truths = [traj[lead] for lead in schedule.leads()]
    obs = [scenario.observe_points(t, pts, lead, rng, obs_noise, obs_sigma_y)
           for t, lead in zip(truths, schedule.leads())]
    init = CoarsenOp(scenario.shape, *scenario.factor).apply_grid(traj[0])
    return FusionSetup(scenario, truths, init, obs, schedule)


def run_fusion(setup: FusionSetup, prior, config: FusionConfig, method: str, perfect: bool = False):
    """``method`` is one of sparse, emulator, combined, reinit, unconditional."""
    em = setup.scenario.emulator(perfect=perfect)
    obs = setup.obs
    cfg = config
    if method == "sparse":
        cfg = config.with_(use_emulator=False)
    elif method == "emulator":
        obs = [None] * len(obs)
    elif method == "unconditional":
        obs = [None] * len(obs)
        cfg = config.with_(use_emulator=False)
    elif method not in ("combined", "reinit"):
        raise ValueError(f"unknown fusion method {method!r}")
    cfg = cfg.with_(channels=setup.scenario.channels)
    fn = fuse_reinitialized if method == "reinit" else fuse_precomputed
    return fn(prior, em, setup.init_coarse, obs, setup.schedule, cfg, shape=setup.scenario.shape)


def ensemble_rmse_by_lead(results, truths) -> np.ndarray:
    return np.array([rmse(ens.mean, t) for ens, t in zip(results, truths)])
