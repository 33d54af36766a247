import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import clean_scene
from focus.errors import DivergenceError, EmptyBatchError, InvalidJacobianError
from focus.geometry import CameraView, project_points
from focus.model import ModelParams
from focus.optim import (
    OptimConfig,
    TocSample,
    fit_samples,
    focus_o_loss,
    pixel_sigma,
    propagate_uncertainty,
    reproject,
    sample_tocs,
    toc_nll_loss,
)


# -- NLL -----------------------------------------------------------------------------
def test_nll_zero_residual():
    assert toc_nll_loss([0.3, 0.4, 0.5], [0, 0, 0], [0.3, 0.4, 0.5]) == 0.0


def test_nll_hand_value():
    got = toc_nll_loss([0.1, 0.1, 0.1], np.log([0.01] * 3), [0, 0, 0])
    assert got == pytest.approx(3 * (1 + np.log(0.01)), abs=1e-12)
    assert got == pytest.approx(-10.816, abs=1e-3)


def test_nll_batch_mean():
    mu = np.array([[0.1, 0, 0], [0, 0, 0]])
    got = toc_nll_loss(mu, np.zeros((2, 3)), np.zeros((2, 3)))
    assert got == pytest.approx(0.005)


def nll_argmin_error(r):
    """Minimise the NLL over a shared sigma^2 and return |argmin - r^2|."""
    f = lambda s2: toc_nll_loss([r] * 3, np.log([s2] * 3), [0.0] * 3)  # noqa: E731
    res = minimize_scalar(f, bounds=(r * r / 10, r * r * 10), method="bounded", options={"xatol": 1e-14})
    return abs(res.x - r * r)


@pytest.mark.parametrize("r", [0.05, 0.1, 0.5])
def test_nll_minimiser_is_squared_residual(r):
    assert nll_argmin_error(r) < 1e-6


# -- covariance propagation ------------------------------------------------------------
def test_propagate_identity_padded():
    cov, sig = propagate_uncertainty(np.eye(2, 3), [0.1, 0.2, 0.3])
    np.testing.assert_allclose(cov, np.diag([0.1, 0.2]))
    np.testing.assert_allclose(sig, np.sqrt([0.1, 0.2]))


def test_propagate_quadratic_scaling():
    rng = np.random.default_rng(0)
    J, s2 = rng.normal(size=(2, 3)), rng.uniform(0.1, 1, 3)
    a, _ = propagate_uncertainty(J, s2)
    b, _ = propagate_uncertainty(2 * J, s2)
    np.testing.assert_allclose(b, 4 * a)


def test_propagate_rejects_non_finite():
    J = np.eye(2, 3)
    J[0, 0] = np.nan
    with pytest.raises(InvalidJacobianError):
        propagate_uncertainty(J, [1, 1, 1])


def monte_carlo_covariance_error(n_jacobians=10, draws=100_000, seed=0):
    """Worst relative deviation of the sample covariance of J eps from J S J^T."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_jacobians):
        J = rng.normal(size=(2, 3)) * rng.uniform(10, 1000)
        s2 = rng.uniform(1e-6, 1e-3, 3)
        cov, _ = propagate_uncertainty(J, s2)
        eps = rng.standard_normal((draws, 3)) * np.sqrt(s2)
        mc = np.cov((eps @ J.T).T)
        scale = np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
        worst = max(worst, float(np.max(np.abs(mc - cov) / scale)))
    return worst


def test_propagate_monte_carlo():
    assert monte_carlo_covariance_error() < 0.05


# -- loss ----------------------------------------------------------------------------
def _one_sample_setup(residual=(0.0, 0.0)):
    sc = clean_scene(10)
    cam = CameraView(500, 500, 320, 240, np.eye(3), [0, 0, 1000], 640, 480)
    x = sc.model.template.vertices[:1]
    p = ModelParams.identity()
    pix, _ = project_points(cam, x)
    s = TocSample(np.zeros(1, int), pix - np.asarray(residual), sc.model.template_to_toc(x), np.full((1, 3), 1e-4), x)
    return sc.model, cam, p, s


def test_loss_zero_at_exact_pixels():
    model, cam, p, s = _one_sample_setup()
    assert focus_o_loss(s, p, model, [cam], sigma=np.ones((1, 2))).loss == pytest.approx(0.0, abs=1e-12)


def test_loss_three_four_five():
    model, cam, p, s = _one_sample_setup((3.0, 4.0))
    assert focus_o_loss(s, p, model, [cam], sigma=np.ones((1, 2))).loss == pytest.approx(5.0)
    assert focus_o_loss(s, p, model, [cam], use_uncertainty=False).loss == pytest.approx(5.0)
    assert focus_o_loss(s, p, model, [cam], sigma=np.array([[3.0, 4.0]])).loss == pytest.approx(np.sqrt(2))


def test_reproject_hand_computed():
    model, cam, p, s = _one_sample_setup()
    x = model.template.vertices[0]
    pix, ok = reproject(model, cam, x, p)
    assert ok
    np.testing.assert_allclose(pix, [500 * x[0] / (x[2] + 1000) + 320, 500 * x[1] / (x[2] + 1000) + 240])


def test_behind_camera_samples_excluded():
    model, cam, p, s = _one_sample_setup()
    back = CameraView(500, 500, 320, 240, np.diag([1.0, -1.0, -1.0]), [0, 0, -1000], 640, 480)
    two = TocSample(np.array([0, 1]), np.vstack([s.pixel, s.pixel]), np.vstack([s.toc] * 2),
                    np.vstack([s.var] * 2), np.vstack([s.template] * 2))
    out = focus_o_loss(two, p, model, [cam, back])
    assert out.n_valid == 1 and out.n_excluded == 1
    far = ModelParams(np.zeros(3), 1.0, [0, 0, -5000], np.zeros(4), np.zeros(4))
    with pytest.raises(EmptyBatchError):
        focus_o_loss(s, far, model, [cam])
    _, ok = reproject(model, cam, s.template, far)
    assert not ok.any()


@pytest.fixture(scope="module")
def clean_samples():
    sc = clean_scene(10)
    return sc, sample_tocs(sc.images, sc.model, 40, seed=1)


def test_gt_params_reproject_within_one_pixel(clean_samples):
    sc, s = clean_samples
    for v, cam in enumerate(sc.cameras):
        sel = s.view == v
        pix, ok = reproject(sc.model, cam, s.template[sel], sc.gt_params)
        assert ok.all()
        assert np.max(np.linalg.norm(pix - s.pixel[sel], axis=1)) < 1.0


def random_config(sc, s, rng):
    """Params near the ground truth and heteroscedastic TOC variances."""
    gt = sc.gt_params
    p = ModelParams(gt.r + rng.normal(size=3) * 0.05, gt.s * rng.uniform(0.95, 1.05), gt.t + rng.normal(size=3) * 5,
                    gt.z_s + rng.normal(size=4) * 0.2, gt.z_p + rng.normal(size=4) * 0.05)
    var = np.exp(rng.uniform(np.log(4e-6), np.log(4e-4), size=s.var.shape))
    return p, TocSample(s.view, s.pixel, s.toc, var, s.template)


def gradient_fd_error(sc, s, n_configs=20, step=1e-5, seed=0):
    """Worst relative error of the analytic gradient against central differences.

    The pixel sigma is frozen at each configuration, matching the optimiser's
    treatment of sigma as a constant weight.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        p, samp = random_config(sc, s, rng)
        sigma = pixel_sigma(samp, p, sc.model, sc.cameras)
        g = focus_o_loss(samp, p, sc.model, sc.cameras, sigma=sigma).grad
        v = p.to_vector()
        fd = np.zeros_like(v)
        for k in range(len(v)):
            e = np.zeros_like(v)
            e[k] = step
            lp = focus_o_loss(samp, ModelParams.from_vector(v + e, 4, 4), sc.model, sc.cameras, sigma=sigma).loss
            lm = focus_o_loss(samp, ModelParams.from_vector(v - e, 4, 4), sc.model, sc.cameras, sigma=sigma).loss
            fd[k] = (lp - lm) / (2 * step)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    return worst


def test_gradient_matches_finite_differences(clean_samples):
    sc, s = clean_samples
    assert gradient_fd_error(sc, s, n_configs=5) < 1e-3


def test_loss_invariant_to_order_and_duplication(clean_samples):
    sc, s = clean_samples
    rng = np.random.default_rng(2)
    p, samp = random_config(sc, s, rng)
    base = focus_o_loss(samp, p, sc.model, sc.cameras)
    perm = np.argsort(samp.view * 10**6 + rng.permutation(len(samp)), kind="stable")
    shuffled = focus_o_loss(samp.subset(perm), p, sc.model, sc.cameras)
    doubled = focus_o_loss(samp.subset(np.sort(np.tile(np.arange(len(samp)), 2))), p, sc.model, sc.cameras)
    assert shuffled.loss == pytest.approx(base.loss, rel=1e-12)
    assert doubled.loss == pytest.approx(base.loss, rel=1e-12)
    np.testing.assert_allclose(shuffled.grad, base.grad, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(doubled.grad, base.grad, rtol=1e-10, atol=1e-14)


def test_sigma_scale_scales_loss(clean_samples):
    sc, s = clean_samples
    p, samp = random_config(sc, s, np.random.default_rng(3))
    base = focus_o_loss(samp, p, sc.model, sc.cameras).loss
    for c in (0.25, 4.0):
        got = focus_o_loss(samp.scaled_variance(c), p, sc.model, sc.cameras).loss
        assert got == pytest.approx(base / np.sqrt(c), rel=1e-12)


def _short_fit(sc, samples, **kw):
    cfg = OptimConfig(samples_per_image=40, epochs=kw.pop("epochs", (15, 15)), **kw)
    init = ModelParams(sc.gt_params.r + 0.05, sc.gt_params.s, sc.gt_params.t + 10, np.zeros(4), np.zeros(4))
    return fit_samples(samples, sc.model, sc.cameras, cfg, init)


def test_sigma_scale_leaves_argmin(clean_samples):
    sc, s = clean_samples
    _, samp = random_config(sc, s, np.random.default_rng(4))
    base = _short_fit(sc, samp).params.to_vector()
    for c in (0.25, 4.0):
        got = _short_fit(sc, samp.scaled_variance(c)).params.to_vector()
        np.testing.assert_allclose(got, base, atol=1e-6, rtol=0)


def test_stage_one_freezes_latents(clean_samples):
    sc, s = clean_samples
    res = _short_fit(sc, s, epochs=(10, 5))
    first = res.stage_params[0]
    assert first.z_s.tobytes() == np.zeros(4).tobytes()
    assert first.z_p.tobytes() == np.zeros(4).tobytes()
    assert not np.array_equal(first.t, sc.gt_params.t + 10)
    assert not np.array_equal(res.params.z_s, np.zeros(4))
    assert res.stage_ends == [10, 15]
    assert len(res.loss_trace) == 15


def test_fit_deterministic(clean_samples):
    sc, s = clean_samples
    a = _short_fit(sc, s)
    b = _short_fit(sc, s)
    assert a.loss_trace == b.loss_trace
    assert a.params.to_vector().tobytes() == b.params.to_vector().tobytes()


def test_fit_decreases_loss(clean_samples):
    sc, s = clean_samples
    res = _short_fit(sc, s, epochs=(40, 20), lr=0.01)
    assert res.loss_trace[-1] < 0.5 * res.loss_trace[0]


def test_divergence_raises(clean_samples):
    sc, s = clean_samples
    with pytest.raises(DivergenceError) as info:
        _short_fit(sc, s, lr=50.0)
    assert info.value.epoch >= 0


def test_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(epochs=(0, 5))
    with pytest.raises(ValueError):
        OptimConfig(lr=0)
    assert OptimConfig().to_dict()["epochs"] == [500, 500]
