import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_gmm
from scorefuse.guidance import (
    GuidanceConfig,
    GuidanceTerm,
    clip_gradient,
    fuse_scores,
    likelihood_score,
)
from scorefuse.measure import CoarsenOp, IdentityOp, PointOp, PointSet
from scorefuse.rng import stream
from test_prior import fd_grad

SHAPE = (1, 8, 8)


@pytest.fixture
def prior():
    return make_gmm(SHAPE, k=3, seed=7)


def _terms(rng):
    coarse = CoarsenOp(SHAPE, 2, 2)
    pts = PointOp(SHAPE, ("c0",), PointSet(("c0",) * 5, rng.uniform(0, 1, 5), rng.uniform(0, 1, 5)))
    return [GuidanceTerm(coarse, rng.standard_normal(coarse.out_size), 0.1, 5e-3),
            GuidanceTerm(pts, rng.standard_normal(5), 0.05, 1e-2, weight=0.7)]


def test_score_is_gradient_of_misfit(prior):
    rng = stream(1)
    x = rng.standard_normal(SHAPE)
    sigma = 0.6
    for term in _terms(rng):
        fd = fd_grad(lambda z: term.misfit(prior.denoise(z, sigma), sigma), x)
        np.testing.assert_allclose(likelihood_score(term, prior, x, sigma), fd, rtol=1e-6, atol=1e-7)


def test_hand_formula_identity_operator():
    # D = identity at sigma = 0 is not allowed, so use a linear Gaussian denoiser
    prior = make_gmm(SHAPE, k=1, seed=3)
    sigma, sy, gh = 0.5, 0.2, 0.1
    rng = stream(2)
    x, y = rng.standard_normal((2,) + SHAPE)
    term = GuidanceTerm(IdentityOp(SHAPE), y.ravel(), sy, gh)
    a = prior.variances[0] / (prior.variances[0] + sigma**2)
    d = prior.denoise(x, sigma)
    expect = 2 / (sy + sigma**2 * gh) * a * (y - d)
    np.testing.assert_allclose(likelihood_score(term, prior, x, sigma), expect, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.integers(0, 1000))
def test_fusion_is_linear_in_weights(w1, w2, seed):
    prior = make_gmm(SHAPE, k=2, seed=5)
    rng = stream(seed)
    t1, t2 = _terms(rng)
    x = rng.standard_normal(SHAPE)
    fused = fuse_scores([GuidanceTerm(t1.op, t1.y, t1.sigma_y, t1.gamma_hat, w1),
                         GuidanceTerm(t2.op, t2.y, t2.sigma_y, t2.gamma_hat, w2)], prior, x, 0.4)
    s1 = likelihood_score(t1, prior, x, 0.4)
    s2 = likelihood_score(t2, prior, x, 0.4)
    np.testing.assert_allclose(fused, w1 * s1 + w2 * s2, rtol=1e-9, atol=1e-9)


def test_zero_weight_term_is_bitwise_absent(prior):
    rng = stream(3)
    t1, t2 = _terms(rng)
    x = rng.standard_normal(SHAPE)
    zero = GuidanceTerm(t2.op, t2.y, t2.sigma_y, t2.gamma_hat, 0.0)
    assert np.array_equal(fuse_scores([t1, zero], prior, x, 0.3), fuse_scores([t1], prior, x, 0.3))


def test_per_observation_sigma():
    rng = stream(4)
    op = IdentityOp(SHAPE)
    y = rng.standard_normal(op.out_size)
    sy = rng.uniform(0.1, 1.0, op.out_size)
    term = GuidanceTerm(op, y, sy, 0.0)
    x_hat = np.zeros(SHAPE)
    np.testing.assert_allclose(term.cotangent(x_hat, 1.0).ravel(), 2 * y / sy)


def test_term_validation():
    op = IdentityOp(SHAPE)
    with pytest.raises(ValueError):
        GuidanceTerm(op, np.zeros(3))
    with pytest.raises(ValueError):
        GuidanceTerm(op, np.zeros(op.out_size), 0.0, 0.0)
    with pytest.raises(ValueError):
        GuidanceTerm(op, np.zeros(op.out_size), weight=-1)
    with pytest.raises(ValueError):
        GuidanceConfig(clip_norm=-1)


def test_guidance_inactive_cases():
    op = IdentityOp(SHAPE)
    t = GuidanceTerm(op, np.zeros(op.out_size))
    assert GuidanceConfig([t]).active
    assert not GuidanceConfig([t], guidance_scale=0).active
    assert not GuidanceConfig([GuidanceTerm(op, np.zeros(op.out_size), weight=0)]).active
    assert not GuidanceConfig().active


def test_state_tensor_rejected(prior):
    from scorefuse.fields import StateTensor

    t = GuidanceTerm(IdentityOp(SHAPE), np.zeros(64))
    with pytest.raises(TypeError):
        likelihood_score(t, prior, StateTensor.from_array(np.zeros(SHAPE)), 1.0)


def test_clip_cases():
    g = np.array([3.0, 4.0])
    assert np.array_equal(clip_gradient(g, 0), g)
    assert np.array_equal(clip_gradient(g, 10), g)
    np.testing.assert_allclose(clip_gradient(g, 1.0), [0.6, 0.8])
    assert np.linalg.norm(clip_gradient(g, 2.5)) == pytest.approx(2.5)
    with pytest.raises(FloatingPointError):
        clip_gradient(np.array([np.inf, 0.0]), 1.0)
    with pytest.raises(ValueError):
        clip_gradient(g, -1)
