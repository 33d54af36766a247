"""Synthetic scenes: a z-buffered software rasterizer for TOC/normal/mask/depth
rasters and an emulator of a noisy, uncertainty-aware TOC predictor."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import BehindCameraError, InvalidSpecError
from .geometry import CameraView, TriMesh, look_at, project_points
from .model import DeformableModel, ModelParams

log = logging.getLogger(__name__)

LOGVAR_FLOOR = float(np.log(1e-12))
MASK_THRESHOLD = 0.5


@dataclass(eq=False)
class TocImage:
    """Per-pixel predictor outputs for one view (float32 rasters, row-major).

    ``normal`` is in the camera frame; ``depth`` is +inf on the background.
    """

    toc_mean: np.ndarray
    toc_logvar: np.ndarray
    mask: np.ndarray
    normal: np.ndarray
    depth: np.ndarray

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def inside(self) -> np.ndarray:
        return self.mask > MASK_THRESHOLD

    def copy(self) -> "TocImage":
        return TocImage(*(a.copy() for a in (self.toc_mean, self.toc_logvar, self.mask, self.normal, self.depth)))


@dataclass(frozen=True)
class NoiseSpec:
    sigma_base: float = 0.0
    sigma_range: float = 0.0
    normal_sigma: float = 0.0  # per-component std added to unit normals

    def validate(self) -> None:
        for name in ("sigma_base", "sigma_range", "normal_sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidSpecError(f"noise {name} must be finite and non-negative, got {v}")

    @property
    def is_zero(self) -> bool:
        return self.sigma_base == 0 and self.sigma_range == 0 and self.normal_sigma == 0


def _candidate_pixels(pix: np.ndarray, faces: np.ndarray, width: int, height: int):
    """Expand every face's clipped pixel bounding box into (face, x, y) triples."""
    tri = pix[faces]  # (F,3,2)
    x0 = np.clip(np.ceil(tri[:, :, 0].min(axis=1)), 0, width)
    x1 = np.clip(np.floor(tri[:, :, 0].max(axis=1)), -1, width - 1)
    y0 = np.clip(np.ceil(tri[:, :, 1].min(axis=1)), 0, height)
    y1 = np.clip(np.floor(tri[:, :, 1].max(axis=1)), -1, height - 1)
    nx = np.maximum(x1 - x0 + 1, 0).astype(np.int64)
    ny = np.maximum(y1 - y0 + 1, 0).astype(np.int64)
    counts = nx * ny
    face_id = np.repeat(np.arange(len(faces)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    nxf = nx[face_id]
    px = x0[face_id].astype(np.int64) + local % np.maximum(nxf, 1)
    py = y0[face_id].astype(np.int64) + local // np.maximum(nxf, 1)
    return face_id, px, py


def rasterize_mesh(mesh: TriMesh, camera: CameraView) -> TocImage:
    """Render a mesh carrying per-vertex TOC and normals.

    Attributes are interpolated perspective-correctly (linear in screen
    space after division by depth) and resolved with a z-buffer; equal
    depths go to the lower face index.
    """
    if mesh.toc is None:
        raise ValueError("mesh needs per-vertex TOC values")
    normals = mesh.normals if mesh.normals is not None else mesh.compute_vertex_normals()
    W, H = camera.width, camera.height
    pix, z = project_points(camera, mesh.vertices)
    if np.all(z <= 0):
        log.debug("mesh entirely behind the camera; rendering background")
        return _background(W, H)
    if np.any(z <= 0):
        raise BehindCameraError("mesh straddles the camera plane; cannot rasterize")

    face_id, px, py = _candidate_pixels(pix, mesh.faces, W, H)
    f = mesh.faces[face_id]
    a, b, c = pix[f[:, 0]], pix[f[:, 1]], pix[f[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    qx, qy = px.astype(float), py.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        l0 = ((b[:, 0] - qx) * (c[:, 1] - qy) - (b[:, 1] - qy) * (c[:, 0] - qx)) / area
        l1 = ((c[:, 0] - qx) * (a[:, 1] - qy) - (c[:, 1] - qy) * (a[:, 0] - qx)) / area
    l2 = 1.0 - l0 - l1
    eps = -1e-9
    keep = (np.abs(area) > 1e-12) & (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
    face_id, px, py, f = face_id[keep], px[keep], py[keep], f[keep]
    lam = np.stack([l0[keep], l1[keep], l2[keep]], axis=1)
    inv_z = lam / z[f]
    denom = inv_z.sum(axis=1)
    depth = 1.0 / denom
    wts = inv_z / denom[:, None]

    flat = py * W + px
    order = np.lexsort((face_id, depth, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]

    img = _background(W, H)
    fw, ww = f[win], wts[win]
    toc = np.einsum("mk,mkc->mc", ww, mesh.toc[fw])
    nrm = np.einsum("mk,mkc->mc", ww, normals[fw])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = nrm @ camera.rotation.T
    yy, xx = py[win], px[win]
    img.toc_mean[yy, xx] = np.clip(toc, 0.0, 1.0)
    img.toc_logvar[yy, xx] = LOGVAR_FLOOR
    img.mask[yy, xx] = 1.0
    img.normal[yy, xx] = nrm
    img.depth[yy, xx] = depth[win]
    return img


def _background(width: int, height: int) -> TocImage:
    return TocImage(
        np.zeros((height, width, 3), np.float32),
        np.zeros((height, width, 3), np.float32),
        np.zeros((height, width), np.float32),
        np.zeros((height, width, 3), np.float32),
        np.full((height, width), np.inf, np.float32),
    )


def rasterize(model: DeformableModel, params: ModelParams, camera: CameraView,
              resolution: Optional[Tuple[int, int]] = None) -> TocImage:
    """Noiseless TOC/normal/mask/depth rasters of the posed model."""
    if resolution is not None and tuple(resolution) != (camera.width, camera.height):
        raise ValueError(f"resolution {resolution} does not match camera {camera.width}x{camera.height}")
    return rasterize_mesh(model.deformed_mesh(params), camera)


def smooth_field(rng: np.random.Generator, width: int, height: int, grid: int = 4) -> np.ndarray:
    """Value noise in [0, 1]: a ``grid x grid`` control lattice, bilinearly upsampled."""
    ctrl = rng.uniform(0.0, 1.0, size=(grid, grid))
    gy = np.linspace(0, grid - 1, height)
    gx = np.linspace(0, grid - 1, width)
    iy = np.minimum(gy.astype(int), grid - 2)
    ix = np.minimum(gx.astype(int), grid - 2)
    fy = (gy - iy)[:, None]
    fx = (gx - ix)[None, :]
    c00 = ctrl[iy][:, ix]
    c01 = ctrl[iy][:, ix + 1]
    c10 = ctrl[iy + 1][:, ix]
    c11 = ctrl[iy + 1][:, ix + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def emulate_prediction(image: TocImage, noise: NoiseSpec, seed) -> TocImage:
    """Perturb a clean render the way a probabilistic predictor would.

    The per-pixel std follows a smooth field in
    ``[sigma_base, sigma_base + sigma_range]``; TOC means get Gaussian noise
    of that std (clamped to [0, 1]) and ``toc_logvar`` reports ``log sigma^2``.
    Mask and depth pass through untouched.
    """
    noise.validate()
    out = image.copy()
    if noise.is_zero:
        return out
    rng = np.random.default_rng(seed)
    H, W = image.height, image.width
    inside = image.inside
    sigma = noise.sigma_base + noise.sigma_range * smooth_field(rng, W, H)
    eps = rng.standard_normal((H, W, 3)) * sigma[:, :, None]
    if noise.sigma_base > 0 or noise.sigma_range > 0:
        noisy = np.clip(image.toc_mean.astype(float) + eps, 0.0, 1.0)
        out.toc_mean[inside] = noisy[inside]
        logvar = np.log(np.maximum(sigma**2, 1e-12))
        out.toc_logvar[inside] = logvar[inside][:, None]
    if noise.normal_sigma > 0:
        n = image.normal.astype(float) + rng.standard_normal((H, W, 3)) * noise.normal_sigma
        n /= np.linalg.norm(n, axis=2, keepdims=True)
        out.normal[inside] = n[inside]
    return out


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------
DEFAULT_RESOLUTION = (480, 640)  # width, height


def default_gt_params(model: DeformableModel, seed: int) -> ModelParams:
    """Moderate, seed-deterministic ground-truth pose/shape for synthetic scenes."""
    rng = np.random.default_rng([seed, 7919])
    r = np.array([0.0, 0.0, rng.uniform(-0.3, 0.3)])
    s = float(rng.uniform(0.95, 1.05))
    z_s = rng.uniform(-0.4, 0.4, model.dim_shape)
    z_p = rng.uniform(-0.12, 0.12, model.dim_pose)
    p = ModelParams(r, s, np.zeros(3), z_s, z_p)
    # centre the foot over the origin, sole on the floor
    verts = model.deform(model.template.vertices, p)
    mid = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    p.t = np.array([-mid[0], -mid[1], -verts[:, 2].min()])
    return p


def _frame_view(verts, aim, direction, diag, focal, width, height, fill):
    """Rolled look-at rotation and the distance that makes the mesh fill the frame."""
    R0, _ = look_at(aim + direction * diag, aim)
    rel = (verts - aim) @ R0.T
    evals, evecs = np.linalg.eigh(np.cov(rel[:, :2].T))
    major = evecs[:, -1]
    goal = np.pi / 2 if height >= width else 0.0
    roll = goal - np.arctan2(major[1], major[0])
    c, s = np.cos(roll), np.sin(roll)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ R0
    rel = (verts - aim) @ R.T

    def overflow(dist):
        zc = rel[:, 2] + dist
        return max(
            np.abs(focal * rel[:, 0] / zc).max() / (0.5 * width),
            np.abs(focal * rel[:, 1] / zc).max() / (0.5 * height),
        )

    lo, hi = 1e-3 - rel[:, 2].min(), 50.0 * diag
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if overflow(mid) > fill:
            lo = mid
        else:
            hi = mid
    return R, hi


def ring_cameras(mesh: TriMesh, n_views: int, width: int, height: int, elevation_deg: float = 40.0,
                 focal: Optional[float] = None, fill: float = 0.95) -> List[CameraView]:
    """Cameras evenly spaced in azimuth around the mesh.

    Each camera is aimed so the mesh projects centred in the frame, rolled so
    the foot's longest projected axis follows the image's longer side, and
    placed at the distance where the projection fills ``fill`` of the frame.
    """
    if n_views < 1:
        raise InvalidSpecError("need at least one camera")
    focal = float(focal or max(width, height))
    verts = mesh.vertices
    target = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
    elev = np.deg2rad(elevation_deg)
    cams = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        d = np.array([np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)])
        aim = target.copy()
        for _ in range(4):
            R, dist = _frame_view(verts, aim, d, diag, focal, width, height, fill)
            # re-aim so the projected extent is centred in the frame
            rel = (verts - aim) @ R.T
            zc = rel[:, 2] + dist
            u, v = focal * rel[:, 0] / zc, focal * rel[:, 1] / zc
            du, dv = 0.5 * (u.min() + u.max()), 0.5 * (v.min() + v.max())
            aim = aim + (du * R[0] + dv * R[1]) * dist / focal
        R, dist = _frame_view(verts, aim, d, diag, focal, width, height, fill)
        eye = aim - R[2] * dist
        cams.append(CameraView(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, R, -R @ eye, width, height))
    return cams


@dataclass
class SceneSpec:
    model_seed: int = 0
    dim_shape: int = 4
    dim_pose: int = 4
    gt_params: Optional[ModelParams] = None
    n_views: int = 10
    cameras: Optional[List[CameraView]] = None
    resolution: Tuple[int, int] = DEFAULT_RESOLUTION
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 42
    elevation_deg: float = 40.0

    def validate(self) -> None:
        if self.cameras is not None and len(self.cameras) == 0:
            raise InvalidSpecError("scene needs at least one camera")
        if self.cameras is None and self.n_views < 1:
            raise InvalidSpecError("scene needs at least one camera")
        if min(self.resolution) <= 0:
            raise InvalidSpecError(f"resolution must be positive, got {self.resolution}")
        self.noise.validate()


@dataclass
class SynthScene:
    model: DeformableModel
    gt_params: ModelParams
    gt_mesh: TriMesh
    cameras: List[CameraView]
    images: List[TocImage]
    clean_images: List[TocImage]
    azimuths: List[float]


def view_seed(seed: int, view_index: int) -> np.random.SeedSequence:
    """Independent RNG stream per view, so scheduling order never matters."""
    return np.random.SeedSequence([int(seed), int(view_index)])


def render_scene(spec: SceneSpec, threads: int = 1) -> SynthScene:
    """Render all views of a synthetic scene in memory."""
    spec.validate()
    model = DeformableModel.procedural(spec.model_seed, spec.dim_shape, spec.dim_pose)
    gt = spec.gt_params if spec.gt_params is not None else default_gt_params(model, spec.seed)
    mesh = model.deformed_mesh(gt)
    width, height = spec.resolution
    cams = spec.cameras or ring_cameras(mesh, spec.n_views, width, height, spec.elevation_deg)
    if spec.cameras is not None:
        azimuths = [float(np.degrees(np.arctan2(c.center[1], c.center[0]))) for c in cams]
    else:
        azimuths = [360.0 * k / len(cams) for k in range(len(cams))]

    def work(i):
        clean = rasterize_mesh(mesh, cams[i])
        return clean, emulate_prediction(clean, spec.noise, view_seed(spec.seed, i))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, range(len(cams))))
    return SynthScene(model, gt, mesh, list(cams), [r[1] for r in results], [r[0] for r in results], azimuths)


def select_views(scene: SynthScene, indices: Sequence[int]) -> SynthScene:
    idx = list(indices)
    return replace(
        scene,
        cameras=[scene.cameras[i] for i in idx],
        images=[scene.images[i] for i in idx],
        clean_images=[scene.clean_images[i] for i in idx],
        azimuths=[scene.azimuths[i] for i in idx],
    )


def generate_scene(spec: SceneSpec, out_dir, threads: int = 1) -> SynthScene:
    """Render a scene and write rasters, ``gt.ply`` and ``scene.json`` to ``out_dir``."""
    from .scene import write_scene

    scene = render_scene(spec, threads=threads)
    write_scene(scene, out_dir, spec)
    return scene
