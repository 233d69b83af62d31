import csv

import numpy as np
import pytest

from scorefuse.assimilate import (
    FusionConfig,
    FusionSchedule,
    SpectralAdvectionEmulator,
    emulator_step,
    fuse_precomputed,
    fuse_reinitialized,
    rmse_records,
    write_rmse_manifest,
)
from scorefuse.experiments import (
    AdvectionScenario,
    default_sampler,
    ensemble_rmse_by_lead,
    fusion_setup,
    run_fusion,
)
from scorefuse.fields import StateTensor
from scorefuse.rng import stream

SMALL = AdvectionScenario(shape=(2, 16, 32))
SCHED = FusionSchedule(interval=2, n_cycles=3)


@pytest.fixture(scope="module")
def small_prior():
    return SMALL.fitted_prior(count=200)


@pytest.fixture(scope="module")
def setup():
    return fusion_setup(SMALL, 3, SCHED, n_sites=24, n_clusters=3)


def cfg(**kw):
    base = FusionConfig(sampler=default_sampler(24), members=4, point_sigma_y=None)
    return base.with_(**kw)


def test_integer_velocity_is_exact_shift():
    em = SpectralAdvectionEmulator((2, 4, 16), (1.0, -2.0))
    x = stream(0).standard_normal((2, 4, 16))
    out = em.advance(x, 3)
    np.testing.assert_allclose(out[0], np.roll(x[0], 3, axis=1), atol=1e-10)
    np.testing.assert_allclose(out[1], np.roll(x[1], -6, axis=1), atol=1e-10)


def test_zero_dynamics_is_identity():
    em = SpectralAdvectionEmulator((1, 4, 8), (0.0,))
    x = stream(1).standard_normal((1, 4, 8))
    np.testing.assert_allclose(em.step(x), x, atol=1e-12)


def test_heat_kernel_decay():
    w, nu, n = 32, 0.7, 5
    em = SpectralAdvectionEmulator((1, 4, w), (0.0,), nu=nu, damping=0.01)
    k = 3
    x = np.cos(2 * np.pi * k * np.arange(w) / w)[None, None, :].repeat(4, axis=1)
    kk = 2 * np.pi * k / w
    np.testing.assert_allclose(em.advance(x, n), x * np.exp(-(nu * kk**2 + 0.01) * n), atol=1e-12)


def test_state_tensor_passthrough_and_shape_check():
    em = SpectralAdvectionEmulator((1, 4, 8), (0.5,))
    st = StateTensor.from_array(np.ones((1, 4, 8)), ["u"])
    out = emulator_step(em, st)
    assert isinstance(out, StateTensor) and out.channels == ("u",)
    with pytest.raises(ValueError):
        em.step(np.ones((1, 4, 9)))
    with pytest.raises(ValueError):
        SpectralAdvectionEmulator((2, 4, 8), (0.5,))


def test_schedule_leads():
    assert FusionSchedule(3, 4).leads() == [3, 6, 9, 12]
    with pytest.raises(ValueError):
        FusionSchedule(0, 3)


def test_misaligned_observations_rejected(small_prior, setup):
    em = SMALL.emulator()
    with pytest.raises(ValueError):
        fuse_precomputed(small_prior, em, setup.init_coarse, setup.obs[:-1], SCHED, cfg())
    with pytest.raises(ValueError):
        fuse_reinitialized(small_prior, em, setup.init_coarse, setup.obs + [None], SCHED, cfg())


def test_no_guidance_carries_free_forecast(small_prior, setup):
    em = SMALL.emulator()
    traj = []
    fuse_reinitialized(small_prior, em, setup.init_coarse, [None] * SCHED.n_cycles, SCHED,
                       cfg(use_emulator=False), shape=SMALL.shape, trajectory=traj)
    expect = setup.init_coarse
    for state in traj:
        np.testing.assert_allclose(state, expect, atol=1e-12)
        for _ in range(SCHED.interval):
            expect = em.step(expect)


def test_reinitialized_restarts_from_reconstruction(small_prior, setup):
    traj = []
    res = fuse_reinitialized(small_prior, SMALL.emulator(), setup.init_coarse, setup.obs, SCHED,
                             cfg(channels=SMALL.channels),
                             shape=SMALL.shape, trajectory=traj)
    from scorefuse.measure import CoarsenOp

    op = CoarsenOp(SMALL.shape, *SMALL.factor)
    np.testing.assert_allclose(traj[1], op.apply_grid(res[0].mean))


def test_perfect_emulator_beats_unconditional(small_prior, setup):
    em_run = run_fusion(setup, small_prior, cfg(), "emulator", perfect=True)
    free = run_fusion(setup, small_prior, cfg(), "unconditional")
    assert ensemble_rmse_by_lead(em_run, setup.truths).mean() < ensemble_rmse_by_lead(free, setup.truths).mean()


def test_information_ordering(small_prior):
    """Either guidance source alone beats unconditional sampling in at least 90% of paired (trial, lead) cases."""
    sparse_ok, em_ok = [], []
    for seed in range(4):
        st = fusion_setup(SMALL, seed, SCHED)
        free = ensemble_rmse_by_lead(run_fusion(st, small_prior, cfg(), "unconditional"), st.truths)
        sparse = ensemble_rmse_by_lead(run_fusion(st, small_prior, cfg(), "sparse"), st.truths)
        em = ensemble_rmse_by_lead(run_fusion(st, small_prior, cfg(), "emulator"), st.truths)
        sparse_ok.extend(sparse <= free)
        em_ok.extend(em <= free)
    assert np.mean(sparse_ok) >= 0.9
    assert np.mean(em_ok) >= 0.9


def test_emulator_only_error_grows_with_lead(small_prior):
    st = fusion_setup(SMALL, 5, FusionSchedule(2, 8), n_sites=24, n_clusters=3)
    rm = ensemble_rmse_by_lead(run_fusion(st, small_prior, cfg(), "emulator"), st.truths)
    assert rm[-1] > rm[0]


def test_perfect_emulator_with_tight_noise_beats_unconditional_at_every_lead(small_prior, setup):
    tight = cfg(emulator_sigma_y=1e-3, emulator_gamma_hat=1e-4)
    em = ensemble_rmse_by_lead(run_fusion(setup, small_prior, tight, "emulator", perfect=True), setup.truths)
    free = ensemble_rmse_by_lead(run_fusion(setup, small_prior, tight, "unconditional"), setup.truths)
    assert np.all(em <= free)


def test_reinitialized_cycle_is_self_consistent(small_prior, setup):
    """With a perfect emulator and tight guidance, coarsen(reconstruct(forecast)) stays on the forecast."""
    em = SMALL.emulator(perfect=True)
    traj = []
    fuse_reinitialized(small_prior, em, setup.init_coarse, [None] * SCHED.n_cycles, SCHED,
                       cfg(emulator_sigma_y=1e-3, emulator_gamma_hat=1e-4), shape=SMALL.shape, trajectory=traj)
    for before, after in zip(traj[:-1], traj[1:]):
        forecast = before
        for _ in range(SCHED.interval):
            forecast = em.step(forecast)
        drift = np.sqrt(np.mean((after - forecast) ** 2) / np.mean(forecast**2))
        assert drift < 0.01


def test_zero_point_weight_equals_emulator_only(small_prior, setup):
    a = run_fusion(setup, small_prior, cfg(point_weight=0.0), "combined")
    b = run_fusion(setup, small_prior, cfg(), "emulator")
    for x, y in zip(a, b):
        assert np.array_equal(x.members, y.members)


def test_reinit_deterministic_across_threads(small_prior, setup):
    a = run_fusion(setup, small_prior, cfg(), "reinit")
    b = run_fusion(setup, small_prior, cfg(threads=2), "reinit")
    for x, y in zip(a, b):
        assert np.array_equal(x.members, y.members)


def test_unknown_method(small_prior, setup):
    with pytest.raises(ValueError):
        run_fusion(setup, small_prior, cfg(), "magic")


def test_rmse_manifest(tmp_path, small_prior, setup):
    res = run_fusion(setup, small_prior, cfg(), "combined")
    recs = rmse_records(res, setup.truths, SCHED.leads(), "combined", SMALL.channels)
    write_rmse_manifest(tmp_path / "rmse.csv", recs)
    with open(tmp_path / "rmse.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["lead", "channel", "method", "rmse_mean", "rmse_std"]
    assert len(rows) == SCHED.n_cycles * 2
    first = rows[0]
    assert int(first["lead"]) == 2 and first["channel"] == "u"
    expect = np.sqrt(np.mean((res[0].mean[0] - setup.truths[0][0]) ** 2))
    assert float(first["rmse_mean"]) == expect
    assert float(first["rmse_std"]) >= 0
