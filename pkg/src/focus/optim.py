"""Model fitting: recover ModelParams from multi-view TOC predictions by
minimising an uncertainty-weighted reprojection loss with Adam."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DivergenceError, EmptyBatchError, FocusError, InvalidJacobianError
from .geometry import CameraView, TriMesh, project_points
from .model import DeformableModel, ModelParams
from .synth import TocImage

log = logging.getLogger(__name__)

MIN_DEPTH_MM = 1e-6


@dataclass
class OptimConfig:
    samples_per_image: int = 3000
    epochs: Tuple[int, int] = (500, 500)
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    use_uncertainty: bool = True
    variance_floor: float = 1e-8
    seed: int = 42
    # Adam steps are ~lr per coordinate, so translation is optimised in
    # units of this many mm to give it a reach comparable to r and s
    translation_unit_mm: float = 100.0
    init_tracks: int = 100

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        if len(self.epochs) != 2 or min(self.epochs) < 1:
            raise ValueError("epochs must be two positive counts")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.samples_per_image < 1:
            raise ValueError("samples_per_image must be >= 1")
        if not self.variance_floor > 0:
            raise ValueError("variance floor must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = list(self.epochs)
        return d


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------
def toc_nll_loss(mu, logvar, gt) -> float:
    """Diagonal Gaussian NLL (without constants), summed over axes.

    A batch ``(N, 3)`` is reduced by the mean over rows.
    """
    mu, logvar, gt = (np.asarray(a, dtype=float) for a in (mu, logvar, gt))
    per = np.sum((mu - gt) ** 2 / np.exp(logvar) + logvar, axis=-1)
    return float(np.mean(per))


def propagate_uncertainty(J, sigma2_toc, variance_floor: float = 0.0):
    """First-order pixel covariance ``J diag(sigma2) J^T`` and its marginal std.

    Works on a single ``(2, 3)`` Jacobian or a batch ``(M, 2, 3)``.
    """
    J = np.asarray(J, dtype=float)
    s2 = np.maximum(np.asarray(sigma2_toc, dtype=float), variance_floor)
    if not np.all(np.isfinite(J)):
        raise InvalidJacobianError("Jacobian has non-finite entries")
    if J.shape[-2:] != (2, 3) or s2.shape[-1] != 3:
        raise ValueError("expected a (2, 3) Jacobian and 3 variances")
    cov = np.einsum("...ij,...j,...kj->...ik", J, s2, J)
    sigma = np.sqrt(np.einsum("...ii->...i", cov))
    return cov, sigma


# --------------------------------------------------------------------------
# samples
# --------------------------------------------------------------------------
@dataclass
class TocSample:
    """A batch of pixel samples, struct-of-arrays, grouped by view."""

    view: np.ndarray  # (M,)
    pixel: np.ndarray  # (M, 2)
    toc: np.ndarray  # (M, 3)
    var: np.ndarray  # (M, 3)
    template: np.ndarray  # (M, 3) mm

    def __len__(self) -> int:
        return len(self.view)

    def subset(self, idx) -> "TocSample":
        return TocSample(self.view[idx], self.pixel[idx], self.toc[idx], self.var[idx], self.template[idx])

    def scaled_variance(self, c: float) -> "TocSample":
        return TocSample(self.view, self.pixel, self.toc, self.var * c, self.template)


def sample_tocs(images: Sequence[TocImage], model: DeformableModel, P: int, seed,
                variance_floor: float = 1e-8) -> TocSample:
    """Draw ``P`` in-mask pixels per view (fixed once for the whole fit)."""
    from .sfm import sample_points

    views, pixels, tocs, variances = [], [], [], []
    for i, img in enumerate(images):
        s = sample_points(img, P, np.random.SeedSequence([int(seed), 1, i]))
        xs, ys = s.pixels[:, 0], s.pixels[:, 1]
        views.append(np.full(len(xs), i))
        pixels.append(s.pixels.astype(float))
        tocs.append(np.clip(s.toc, 0.0, 1.0))
        variances.append(np.maximum(np.exp(img.toc_logvar[ys, xs].astype(float)), variance_floor))
    toc = np.concatenate(tocs)
    return TocSample(
        np.concatenate(views), np.concatenate(pixels), toc, np.concatenate(variances), model.toc_to_template(toc)
    )


class _CameraStack:
    """Per-view camera data plus cached model terms for one fixed sample set."""

    def __init__(self, cameras: Sequence[CameraView], view: np.ndarray, model: Optional[DeformableModel] = None,
                 template: Optional[np.ndarray] = None):
        self.cameras = list(cameras)
        view = np.asarray(view)
        if np.any(np.diff(view) < 0):
            raise ValueError("samples must be grouped by view")
        bounds = np.searchsorted(view, np.arange(len(self.cameras) + 1))
        self.slices = [slice(bounds[i], bounds[i + 1]) for i in range(len(self.cameras))]
        self.prep = model.prepare(template) if model is not None else None


def _forward(samples: TocSample, params: ModelParams, model: DeformableModel, cams: _CameraStack):
    """Projected pixels, depth-validity, d pixel/d params and d pixel/d toc."""
    x2, dparams, dx = model.deform_with_jacobians(samples.template, params, cams.prep)
    m = len(x2)
    pix = np.empty((m, 2))
    ok = np.empty(m, dtype=bool)
    Jw = np.empty((m, 2, 3))
    for cam, sl in zip(cams.cameras, cams.slices):
        pc = x2[sl] @ cam.rotation.T + cam.translation
        z = pc[:, 2]
        good = z > MIN_DEPTH_MM
        zs = np.where(good, z, 1.0)
        f = np.array([cam.fx, cam.fy])
        pix[sl] = f * pc[:, :2] / zs[:, None] + np.array([cam.cx, cam.cy])
        ok[sl] = good
        Jc = np.zeros((len(z), 2, 3))
        Jc[:, 0, 0] = cam.fx / zs
        Jc[:, 1, 1] = cam.fy / zs
        Jc[:, :, 2] = -f * pc[:, :2] / zs[:, None] ** 2
        Jw[sl] = np.matmul(Jc, cam.rotation)
    d_par = np.matmul(Jw, dparams)
    d_toc = np.matmul(Jw, dx) * model.extent[None, None, :]
    return pix, ok, d_par, d_toc


def reproject(model: DeformableModel, camera: CameraView, template_points, params: ModelParams):
    """Pixels of template point(s) after deformation; ``(pixels, in_front)``."""
    x = np.atleast_2d(np.asarray(template_points, dtype=float))
    pix, z = project_points(camera, model.deform(x, params))
    ok = z > MIN_DEPTH_MM
    if np.asarray(template_points).ndim == 1:
        return pix[0], bool(ok[0])
    return pix, ok


def pixel_sigma(samples: TocSample, params: ModelParams, model: DeformableModel,
                cameras: Sequence[CameraView], use_uncertainty: bool = True) -> np.ndarray:
    """Per-sample pixel std ``(M, 2)`` propagated from the TOC variances."""
    if not use_uncertainty:
        return np.ones((len(samples), 2))
    _, ok, _, d_toc = _forward(samples, params, model, _CameraStack(cameras, samples.view))
    _, sigma = propagate_uncertainty(d_toc[ok], samples.var[ok])
    out = np.ones((len(samples), 2))
    out[ok] = sigma
    return out


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    n_valid: int
    n_excluded: int
    mean_pixel_error: float


def focus_o_loss(samples: TocSample, params: ModelParams, model: DeformableModel, cameras: Sequence[CameraView],
                 use_uncertainty: bool = True, sigma: Optional[np.ndarray] = None,
                 variance_floor: float = 1e-8, _cams: Optional[_CameraStack] = None) -> LossResult:
    """Mean over in-front samples of ``|| (p_hat - p) / sigma_p ||``.

    ``sigma_p`` is propagated from the TOC variances at ``params`` unless a
    fixed ``sigma`` (M, 2) is supplied. Either way it is treated as a
    constant: ``grad`` is the exact derivative of the loss with ``sigma``
    held at its current value, which is the direction the optimiser follows.
    """
    cams = _cams if _cams is not None else _CameraStack(cameras, samples.view, model, samples.template)
    pix, ok, d_par, d_toc = _forward(samples, params, model, cams)
    n_valid = int(ok.sum())
    if n_valid == 0:
        raise EmptyBatchError("no sample projects in front of its camera")
    res = (pix - samples.pixel)[ok]
    if sigma is not None:
        sig = np.asarray(sigma, dtype=float)[ok]
    elif use_uncertainty:
        _, sig = propagate_uncertainty(d_toc[ok], samples.var[ok], variance_floor)
    else:
        sig = np.ones_like(res)
    e = res / sig
    norm = np.sqrt(np.sum(e**2, axis=1))
    loss = float(np.mean(norm))
    safe = np.where(norm > 0, norm, 1.0)
    coef = np.where(norm[:, None] > 0, e / safe[:, None], 0.0) / sig  # d loss_i / d pixel
    grad = np.sum(np.sum(coef[:, :, None] * d_par[ok], axis=1), axis=0) / n_valid
    return LossResult(loss, grad, n_valid, len(ok) - n_valid, float(np.mean(np.linalg.norm(res, axis=1))))


# --------------------------------------------------------------------------
# initialisation and fitting
# --------------------------------------------------------------------------
def initial_translation(images: Sequence[TocImage], cameras: Sequence[CameraView], model: DeformableModel,
                        n_tracks: int = 100, seed=42) -> np.ndarray:
    """Translation placing the template centroid on a coarse triangulated centroid.

    Falls back to centring the template on the origin when fewer than two
    views or no usable track exist.
    """
    from .sfm import SfmConfig, match_correspondences, triangulate_tracks

    centroid = model.template.vertices.mean(axis=0)
    if len(images) < 2:
        return -centroid
    cfg = SfmConfig(samples_per_image=max(1, math.ceil(n_tracks / len(images))), seed=int(seed))
    try:
        tracks = triangulate_tracks(match_correspondences(images, cfg), cameras)
    except FocusError:
        return -centroid
    good = tracks.triangulated & (tracks.reproj <= cfg.reproj_threshold)
    if not good.any():
        return -centroid
    return tracks.points[good].mean(axis=0) - centroid


@dataclass
class FitResult:
    params: ModelParams
    loss_trace: List[float]
    mesh: TriMesh
    mean_pixel_error: float
    excluded: int
    stage_ends: List[int] = field(default_factory=list)
    stage_params: List[ModelParams] = field(default_factory=list)


class _Adam:
    def __init__(self, n, config: OptimConfig):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0
        self.cfg = config

    def step(self, grad):
        c = self.cfg
        self.k += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad**2
        mhat = self.m / (1 - c.beta1**self.k)
        vhat = self.v / (1 - c.beta2**self.k)
        return -c.lr * mhat / (np.sqrt(vhat) + c.eps)


def fit_samples(samples: TocSample, model: DeformableModel, cameras: Sequence[CameraView], config: OptimConfig,
                init: ModelParams, progress=None) -> FitResult:
    """Two-stage Adam: registration (r, s, t) first, then every parameter."""
    Ds, Dp = model.dim_shape, model.dim_pose
    n = 7 + Ds + Dp
    unit = np.ones(n)
    unit[4:7] = config.translation_unit_mm
    phi = init.to_vector() / unit
    cams = _CameraStack(cameras, samples.view, model, samples.template)
    trace: List[float] = []
    excluded = 0
    stage_ends = []
    stage_params = []
    epoch = 0
    for stage, n_epochs in enumerate(config.epochs):
        active = np.zeros(n, dtype=bool)
        active[:7] = True
        if stage == 1:
            active[:] = True
        opt = _Adam(int(active.sum()), config)
        for _ in range(n_epochs):
            params = _to_params(phi * unit, Ds, Dp, epoch)
            out = focus_o_loss(samples, params, model, cameras, config.use_uncertainty,
                               variance_floor=config.variance_floor, _cams=cams)
            if not np.isfinite(out.loss) or not np.all(np.isfinite(out.grad)):
                raise DivergenceError(epoch, out.loss)
            trace.append(out.loss)
            excluded += out.n_excluded
            g = out.grad * unit  # chain rule into the scaled coordinates
            phi[active] += opt.step(g[active])
            epoch += 1
            if progress is not None and (epoch % 100 == 0):
                progress(epoch, out.loss)
        stage_ends.append(epoch)
        stage_params.append(_to_params(phi * unit, Ds, Dp, epoch))
    params = _to_params(phi * unit, Ds, Dp, epoch)
    final = focus_o_loss(samples, params, model, cameras, config.use_uncertainty,
                         variance_floor=config.variance_floor, _cams=cams)
    if excluded:
        log.warning("%d sample evaluations were behind the camera and skipped", excluded)
    return FitResult(params, trace, model.deformed_mesh(params), final.mean_pixel_error, excluded, stage_ends,
                     stage_params)


def _to_params(vec, Ds, Dp, epoch) -> ModelParams:
    if not np.all(np.isfinite(vec)) or not vec[3] > 0:
        raise DivergenceError(epoch, float("nan"))
    return ModelParams.from_vector(vec, Ds, Dp)


def fit_scene(scene, config: Optional[OptimConfig] = None, init: Optional[ModelParams] = None,
              progress=None) -> FitResult:
    """Fit the scene's model to its views; ``init`` defaults to r=0, s=1, z=0
    and a triangulated-centroid translation."""
    config = config or OptimConfig()
    model = scene.model
    if len(scene.images) == 1:
        log.warning("fitting a single view: the problem is under-constrained")
    if init is None:
        init = ModelParams.identity(model.dim_shape, model.dim_pose)
        init.t = initial_translation(scene.images, scene.cameras, model, config.init_tracks, config.seed)
    samples = sample_tocs(scene.images, model, config.samples_per_image, config.seed, config.variance_floor)
    return fit_samples(samples, model, scene.cameras, config, init, progress)


def params_path(ply_path) -> Path:
    p = Path(ply_path)
    return p.with_name(p.stem + ".params.json")


def fit(scene, out_path=None, config: Optional[OptimConfig] = None, init: Optional[ModelParams] = None,
        progress=None) -> FitResult:
    """Load a scene (directory or Scene), fit, and optionally write the mesh
    PLY plus ``<stem>.params.json``."""
    from . import io
    from .scene import Scene, load_scene

    if not isinstance(scene, Scene):
        scene = load_scene(scene)
    result = fit_scene(scene, config, init, progress)
    if out_path is not None:
        io.write_ply(out_path, result.mesh)
        with open(params_path(out_path), "w") as fh:
            json.dump(result.params.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result
