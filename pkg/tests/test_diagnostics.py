import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scorefuse.diagnostics import (
    ScatterSet,
    angle_averaged_spectrum,
    extract_scatter,
    high_k_deficit,
    line_trace,
    mean_spectrum,
    points_mask,
    read_spectrum_csv,
    rmse,
    write_scatter_csv,
    write_spectrum_csv,
    write_trace_csv,
)
from scorefuse.measure import CoarsenOp, PointSet, cell_centers, upsample
from scorefuse.prior import StationaryGaussianPrior
from scorefuse.rng import stream


def test_rmse_basic_and_channel():
    a = np.zeros((2, 4, 4))
    b = np.ones((2, 4, 4))
    b[1] *= 3
    assert rmse(a, b, 0) == 1.0
    assert rmse(a, b) == pytest.approx(np.sqrt(5))
    with pytest.raises(ValueError):
        rmse(a, np.zeros((2, 4, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_rmse_triangle_inequality(seed):
    a, b, c = np.random.default_rng(seed).standard_normal((3, 1, 6, 6))
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12


@pytest.mark.parametrize("kx,ky", [(3, 0), (0, 5), (4, 3)])
def test_single_harmonic_lands_in_one_bin(kx, ky):
    h, w = 32, 48
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    f = np.cos(2 * np.pi * (kx * xx / w + ky * yy / h))[None]
    spec = angle_averaged_spectrum(f)
    share = spec.energy[0] * spec.counts / (spec.energy[0] * spec.counts).sum()
    k = int(np.floor(np.hypot(kx, ky) + 0.5))
    assert share[k] >= 0.99


def test_white_noise_is_flat():
    x = stream(0).standard_normal((200, 1, 32, 32))
    spec = mean_spectrum(x)
    inner = spec.energy[0, 1:-1]
    np.testing.assert_allclose(inner, 1.0, rtol=0.1)


def test_dc_bin():
    spec = angle_averaged_spectrum(np.full((1, 8, 8), 2.0))
    assert spec.energy[0, 0] == pytest.approx(4.0 * 64)
    assert np.allclose(spec.energy[0, 1:], 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(4, 20), st.integers(4, 20))
def test_parseval(seed, h, w):
    x = np.random.default_rng(seed).standard_normal((2, h, w))
    spec = angle_averaged_spectrum(x)
    np.testing.assert_allclose(spec.total(), (x**2).sum(axis=(1, 2)), rtol=1e-8)


def test_bicubic_has_high_k_deficit():
    prior = StationaryGaussianPrior.power_law((1, 32, 32), slope=1.0)
    truth = prior.sample(stream(1), 1)[0]
    bic = upsample(CoarsenOp(prior.shape, 4, 4).apply_grid(truth), prior.shape)
    t = angle_averaged_spectrum(truth)
    assert high_k_deficit(angle_averaged_spectrum(bic), t, 4) > 0.5
    assert high_k_deficit(t, t, 4) == 0.0


def test_scatter_noise_oracle():
    rng = stream(2)
    ref = rng.standard_normal((1, 16, 16))
    noisy = ref + 0.1 * rng.standard_normal(ref.shape)
    pts = PointSet(("a",) * 30, rng.uniform(0, 1, 30), rng.uniform(0, 1, 30))
    mask = points_mask(pts, ref.shape, radius=1)
    sc = extract_scatter(ref, noisy, pts, mask, ["a"])
    un = sc.subset("unobserved")
    assert len(un.reference) == (~mask).sum()
    resid = un.reconstructed - un.reference
    assert np.std(resid) == pytest.approx(0.1, rel=0.2)
    assert len(sc.subset("observed").reference) == 30


def test_stratified_unobserved_sampling():
    ref = np.zeros((1, 16, 16))
    pts = PointSet(("a",), [0.5], [0.5])
    sc = extract_scatter(ref, ref, pts, points_mask(pts, ref.shape), ["a"], n_unobserved=32,
                         rng=np.random.default_rng(0))
    assert (sc.tag == "unobserved").sum() == 32


def test_scatter_length_check():
    with pytest.raises(ValueError):
        ScatterSet(np.array(["observed"]), np.array([0]), np.array([1.0, 2.0]), np.array([1.0]))


def test_points_mask_wraps_in_x():
    pts = PointSet(("a",), [cell_centers(8)[0]], [cell_centers(8)[4]])
    m = points_mask(pts, (1, 8, 8), radius=1)
    assert m[4, 7] and m[4, 0] and m[4, 1] and not m[4, 2]
    assert m.sum() == 9


def test_line_trace():
    x = np.arange(2 * 4 * 5, dtype=float).reshape(2, 4, 5)
    np.testing.assert_array_equal(line_trace(x, 2), x[:, 2, :])
    with pytest.raises(IndexError):
        line_trace(x, 4)


def test_csv_writers(tmp_path):
    x = stream(3).standard_normal((2, 8, 8))
    spec = angle_averaged_spectrum(x)
    write_spectrum_csv(tmp_path / "s.csv", spec, ["u", "v"])
    back = read_spectrum_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back["v"], spec.energy[1])
    write_trace_csv(tmp_path / "t.csv", {"truth": line_trace(x, 1)}, ["u", "v"], 1)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "source,channel,y_row,x,value"
    pts = PointSet(("u",), [0.2], [0.2])
    sc = extract_scatter(x, x, pts, points_mask(pts, x.shape), ["u", "v"])
    write_scatter_csv(tmp_path / "c.csv", sc, ["u", "v"])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "tag,channel,reference,reconstructed"
    assert len(lines) == 1 + len(sc.reference)
