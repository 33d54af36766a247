"""Multi-view TOC fusion into an oriented point cloud.

Pipeline: sample in-mask pixels per view, find each sampled TOC value's
nearest neighbour in every view, refine to subpixel precision, triangulate
with a joint DLT, filter, and average the per-view normals.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloudError, EmptyInputError, EmptyMaskError, InsufficientViewsError
from .geometry import CameraView, OrientedPointCloud, normalize_pixels, normalized_projections, triangulate_dlt_batch
from .synth import TocImage

log = logging.getLogger(__name__)

CHUNK = 4096


@dataclass
class SfmConfig:
    samples_per_image: int = 3000
    match_threshold: float = 0.002
    subpixel_factor: int = 8
    reproj_threshold: float = 3.0
    floor_z: float = 0.0
    sor_k: int = 20
    sor_std_ratio: float = 2.0
    seed: int = 42
    subpixel: bool = True
    normal_aggregation: bool = True
    # forwarded untouched to the external Poisson mesher
    poisson_depth: int = 8
    poisson_iterations: int = 8
    crop_padding_mm: float = 1.0
    height_interval_mm: Tuple[float, float] = (0.0, 150.0)

    def __post_init__(self):
        if self.samples_per_image < 1:
            raise ValueError("samples_per_image must be >= 1")
        for name in ("match_threshold", "reproj_threshold", "sor_std_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.subpixel_factor < 1 or self.sor_k < 1:
            raise ValueError("subpixel_factor and sor_k must be >= 1")

    def poisson_sidecar(self) -> dict:
        return {
            "method": "screened_poisson",
            "depth": self.poisson_depth,
            "iterations": self.poisson_iterations,
            "crop_padding_mm": self.crop_padding_mm,
            "height_interval_mm": list(self.height_interval_mm),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["height_interval_mm"] = list(self.height_interval_mm)
        return d


@dataclass
class PointSamples:
    pixels: np.ndarray  # (P, 2) integer (x, y)
    toc: np.ndarray
    normal: np.ndarray


def sample_points(image: TocImage, P: int, seed) -> PointSamples:
    """Draw ``P`` in-mask pixels uniformly (without replacement when possible)."""
    ys, xs = np.nonzero(image.inside)
    if len(ys) == 0:
        raise EmptyMaskError("image has no in-mask pixels")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ys), size=P, replace=len(ys) < P)
    ys, xs = ys[idx], xs[idx]
    return PointSamples(
        np.stack([xs, ys], axis=1),
        image.toc_mean[ys, xs].astype(float),
        image.normal[ys, xs].astype(float),
    )


_NEIGH = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])


class TocIndex:
    """Exact nearest-neighbour lookup over one view's in-mask TOC values."""

    def __init__(self, image: TocImage):
        ys, xs = np.nonzero(image.inside)
        if len(ys) == 0:
            raise EmptyMaskError("image has no in-mask pixels")
        self.pixels = np.stack([xs, ys], axis=1)
        self.values = image.toc_mean[ys, xs].astype(float)
        self.tree = cKDTree(self.values)
        self.max_spread = _max_patch_spread(image)

    def query(self, toc: np.ndarray):
        """Return ``(distance, pixel (x, y), toc)`` of the nearest stored value."""
        toc = np.asarray(toc, dtype=float)
        d, i = self.tree.query(np.atleast_2d(toc), k=1)
        if toc.ndim == 1:
            return float(d[0]), self.pixels[i[0]], self.values[i[0]]
        return d, self.pixels[i], self.values[i]

    def query_within(self, toc: np.ndarray, radius: float):
        """Nearest stored value when it lies within ``radius``; ``found`` flags hits.

        Misses get pixel (0, 0); bounding the search keeps queries for surface
        parts invisible in this view cheap.
        """
        toc = np.atleast_2d(np.asarray(toc, dtype=float))
        d, i = self.tree.query(toc, k=1, distance_upper_bound=radius)
        found = i < len(self.values)
        i = np.where(found, i, 0)
        pix = np.where(found[:, None], self.pixels[i], 0)
        return d, pix, found


def _max_patch_spread(image: TocImage) -> float:
    """Largest TOC distance between a pixel and a 3x3 neighbour, over pixels
    whose whole neighbourhood is in-mask (the only ones refined)."""
    inside = image.inside
    H, W = inside.shape
    if H < 3 or W < 3:
        return 0.0
    toc = image.toc_mean.astype(float)
    full = np.ones((H - 2, W - 2), dtype=bool)
    for dy, dx in _NEIGH:
        full &= inside[1 + dy : H - 1 + dy, 1 + dx : W - 1 + dx]
    if not full.any():
        return 0.0
    centre = toc[1 : H - 1, 1 : W - 1][full]
    spread = 0.0
    for dy, dx in _NEIGH:
        nb = toc[1 + dy : H - 1 + dy, 1 + dx : W - 1 + dx][full]
        spread = max(spread, float(np.max(np.linalg.norm(nb - centre, axis=1))))
    return spread


def build_toc_index(image: TocImage) -> TocIndex:
    return TocIndex(image)


def _offset_grid(factor: int):
    """Subpixel offsets in [-1, 1]^2: 1-D steps, separable weights and a
    centre-first tie-break rank per (row, col) grid index."""
    steps = np.arange(-factor, factor + 1) / factor
    # weights of the (-1, 0, +1) neighbours for a 1-D linear interpolation
    w1 = np.stack([np.maximum(-steps, 0.0), 1.0 - np.abs(steps), np.maximum(steps, 0.0)], axis=1)
    oy, ox = np.meshgrid(np.arange(len(steps)), np.arange(len(steps)), indexing="ij")
    oy, ox = oy.ravel(), ox.ravel()
    r2 = steps[oy] ** 2 + steps[ox] ** 2
    order = np.lexsort((ox, oy, r2))
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return steps, w1, rank.reshape(len(steps), len(steps))


def _search_cell(p, q, a, b, factor, w1, rank):
    """Best grid sample inside quadrant cell (a, b) of each 3x3 patch.

    ``p`` is (k, 3, 3, ch). Returns distance, rank, row and column grid
    index and the interpolated value.
    """
    idx = np.arange(factor + 1)
    ry, rx = a * factor + idx, b * factor + idx
    wy, wx = w1[ry][:, a : a + 2], w1[rx][:, b : b + 2]
    # columns first, then rows (same arithmetic as the full 3-tap sum)
    rows = wx[None, :, 0, None, None] * p[:, None, a : a + 2, b, :]
    rows = rows + wx[None, :, 1, None, None] * p[:, None, a : a + 2, b + 1, :]  # (k, S, 2, ch)
    grid = wy[None, :, None, 0, None] * rows[:, None, :, 0, :]
    grid = grid + wy[None, :, None, 1, None] * rows[:, None, :, 1, :]  # (k, S, S, ch)
    k = len(p)
    sub_rank = rank[np.ix_(ry, rx)].ravel()
    order = np.argsort(sub_rank, kind="stable")
    flat = grid.reshape(k, -1, grid.shape[-1])[:, order]
    dist = np.sqrt(np.sum((flat - q[:, None, :]) ** 2, axis=2))
    best = np.argmin(dist, axis=1)
    cell = order[best]
    i = np.arange(k)
    return dist[i, best], sub_rank[cell], ry[cell // (factor + 1)], rx[cell % (factor + 1)], flat[i, best]


def refine_subpixel_batch(image: TocImage, queries: np.ndarray, pixels: np.ndarray, threshold: float,
                          factor: int = 8, subpixel: bool = True):
    """Refine integer matches to the best bilinear sample on a ``1/factor`` grid.

    The search covers offsets in [-1, 1]^2 around each pixel (the 3x3 patch
    upscaled by ``factor``); ties prefer the offset closest to the centre, so
    the refined distance is never worse than the integer one. Pixels whose
    3x3 neighbourhood is not fully in-mask fall back to the integer match.
    Returns ``(positions (M, 2), matched toc (M, 3), normals (M, 3), ok (M,))``.
    """
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    m = len(queries)
    H, W = image.height, image.width
    pos = pixels.astype(float)
    toc = image.toc_mean[pixels[:, 1], pixels[:, 0]].astype(float)
    nrm = image.normal[pixels[:, 1], pixels[:, 0]].astype(float)
    d_int = np.linalg.norm(toc - queries, axis=1)
    ok = d_int <= threshold
    if not subpixel or m == 0:
        return pos, toc, nrm, ok

    ny = pixels[:, 1:2] + _NEIGH[None, :, 0]
    nx = pixels[:, 0:1] + _NEIGH[None, :, 1]
    inb = np.all((ny >= 0) & (ny < H) & (nx >= 0) & (nx < W), axis=1)
    cy, cx = np.clip(ny, 0, H - 1), np.clip(nx, 0, W - 1)
    full = inb & np.all(image.inside[cy, cx], axis=1)
    patch = image.toc_mean[cy, cx].astype(float)  # (M, 9, 3)
    # interpolants lie in the convex hull of the patch: cheap exact rejection
    spread = np.max(np.linalg.norm(patch - toc[:, None, :], axis=2), axis=1)
    todo = np.nonzero(full & (d_int - spread <= threshold))[0]

    steps, w1, rank = _offset_grid(factor)
    for start in range(0, len(todo), CHUNK):
        sel = todo[start : start + CHUNK]
        k = len(sel)
        p = patch[sel].reshape(k, 3, 3, 3)
        q = queries[sel]
        # the 9 patch pixels are grid samples: an upper bound on the optimum
        ub = np.min(np.linalg.norm(patch[sel] - q[:, None, :], axis=2), axis=1)
        bound = np.minimum(ub, threshold)
        best_d = np.full(k, np.inf)
        best_r = np.full(k, np.iinfo(np.int64).max)
        best_y = np.full(k, factor)
        best_x = np.full(k, factor)
        best_v = np.zeros((k, 3))
        for a in (0, 1):
            for b in (0, 1):
                corners = p[:, a : a + 2, b : b + 2].reshape(k, 4, 3)
                c0 = corners.mean(axis=1)
                rad = np.max(np.linalg.norm(corners - c0[:, None], axis=2), axis=1)
                # bilinear samples stay in the corners' hull: skip cells that cannot win
                live = np.nonzero(np.linalg.norm(q - c0, axis=1) - rad <= bound + 1e-12)[0]
                if len(live) == 0:
                    continue
                d, r, gy, gx, v = _search_cell(p[live], q[live], a, b, factor, w1, rank)
                better = (d < best_d[live]) | ((d == best_d[live]) & (r < best_r[live]))
                upd = live[better]
                best_d[upd], best_r[upd] = d[better], r[better]
                best_y[upd], best_x[upd] = gy[better], gx[better]
                best_v[upd] = v[better]
        found = np.isfinite(best_d)
        s_sel, gy, gx = sel[found], best_y[found], best_x[found]
        wy, wx = w1[gy], w1[gx]
        wts = (wy[:, :, None] * wx[:, None, :]).reshape(-1, 9)
        pos[s_sel, 0] = pixels[s_sel, 0] + steps[gx]
        pos[s_sel, 1] = pixels[s_sel, 1] + steps[gy]
        toc[s_sel] = best_v[found]
        ok[s_sel] = best_d[found] <= threshold
        npatch = image.normal[cy[s_sel], cx[s_sel]].astype(float)
        n = np.sum(wts[:, :, None] * npatch, axis=1)
        nn = np.linalg.norm(n, axis=1, keepdims=True)
        nrm[s_sel] = np.where(nn > 1e-12, n / np.where(nn > 0, nn, 1.0), nrm[s_sel])
    return pos, toc, nrm, ok


def refine_subpixel(image: TocImage, query_toc, pixel, threshold: float = 0.002, factor: int = 8):
    """Single-match refinement; returns ``(position, matched toc)`` or ``None`` on rejection."""
    pos, toc, _, ok = refine_subpixel_batch(image, np.asarray(query_toc)[None], np.asarray(pixel)[None],
                                            threshold, factor)
    if not ok[0]:
        return None
    return pos[0], toc[0]


@dataclass
class CorrespondenceTrack:
    query_toc: np.ndarray
    observations: List[dict]
    point: Optional[np.ndarray] = None
    mean_reprojection_error: Optional[float] = None


@dataclass
class TrackSet:
    """Struct-of-arrays track storage; ``valid[t, v]`` marks an observation of track t in view v."""

    query_toc: np.ndarray
    source_view: np.ndarray
    sample_index: np.ndarray
    valid: np.ndarray
    pixel: np.ndarray
    toc: np.ndarray
    normal: np.ndarray
    points: Optional[np.ndarray] = None
    reproj: Optional[np.ndarray] = None
    triangulated: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.query_toc)

    @property
    def view_count(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def select(self, keep: np.ndarray) -> "TrackSet":
        pick = lambda a: None if a is None else a[keep]  # noqa: E731
        return TrackSet(*(pick(getattr(self, f)) for f in self.__dataclass_fields__))

    def track(self, i: int) -> CorrespondenceTrack:
        obs = [
            {"view": int(v), "pixel": self.pixel[i, v], "toc": self.toc[i, v], "normal": self.normal[i, v]}
            for v in np.nonzero(self.valid[i])[0]
        ]
        point = None if self.points is None or not self.triangulated[i] else self.points[i]
        err = None if self.reproj is None or not self.triangulated[i] else float(self.reproj[i])
        return CorrespondenceTrack(self.query_toc[i], obs, point, err)


def _match_source(i, samples: PointSamples, images, indices, config: SfmConfig):
    V = len(images)
    P = len(samples.toc)
    valid = np.zeros((P, V), dtype=bool)
    pixel = np.zeros((P, V, 2))
    toc = np.zeros((P, V, 3))
    normal = np.zeros((P, V, 3))
    for j in range(V):
        # no refined sample can beat the integer hit by more than the patch spread
        reach = config.match_threshold + (indices[j].max_spread if config.subpixel else 0.0)
        _, pix, found = indices[j].query_within(samples.toc, reach * (1 + 1e-9) + 1e-12)
        pos, mt, mn, ok = refine_subpixel_batch(
            images[j], samples.toc, pix, config.match_threshold, config.subpixel_factor, config.subpixel
        )
        valid[:, j] = ok & found
        pixel[:, j] = pos
        toc[:, j] = mt
        normal[:, j] = mn
    return valid, pixel, toc, normal


def match_correspondences(images: Sequence[TocImage], config: SfmConfig, threads: int = 1) -> TrackSet:
    """Query every view with every sampled TOC and keep tracks seen in >= 2 views.

    Tracks are ordered by source view then sample index.
    """
    V = len(images)
    if V < 2:
        raise InsufficientViewsError(f"matching needs at least 2 views, got {V}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        indices = list(pool.map(build_toc_index, images))
        samples = [
            sample_points(img, config.samples_per_image, np.random.SeedSequence([config.seed, i]))
            for i, img in enumerate(images)
        ]
        parts = list(pool.map(lambda i: _match_source(i, samples[i], images, indices, config), range(V)))

    valid = np.concatenate([p[0] for p in parts])
    keep = valid.sum(axis=1) >= 2
    P = config.samples_per_image
    return TrackSet(
        query_toc=np.concatenate([s.toc for s in samples])[keep],
        source_view=np.repeat(np.arange(V), P)[keep],
        sample_index=np.tile(np.arange(P), V)[keep],
        valid=valid[keep],
        pixel=np.concatenate([p[1] for p in parts])[keep],
        toc=np.concatenate([p[2] for p in parts])[keep],
        normal=np.concatenate([p[3] for p in parts])[keep],
    )


def project_all(cameras: Sequence[CameraView], points: np.ndarray):
    """Pixels (T, V, 2) and depths (T, V) of every point in every camera."""
    R = np.stack([c.rotation for c in cameras])
    t = np.stack([c.translation for c in cameras])
    pc = np.einsum("vij,tj->tvi", R, points) + t[None]
    f = np.array([[c.fx, c.fy] for c in cameras])
    cc = np.array([[c.cx, c.cy] for c in cameras])
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = f[None] * pc[:, :, :2] / pc[:, :, 2:3] + cc[None]
    return uv, pc[:, :, 2]


def triangulate_tracks(tracks: TrackSet, cameras: Sequence[CameraView]) -> TrackSet:
    """Joint DLT per track plus its mean reprojection error; degenerate tracks are flagged, not fatal."""
    P, c0, scale = normalized_projections(cameras)
    T = len(tracks)
    pts = np.zeros((T, 3))
    ok = np.zeros(T, dtype=bool)
    xn = np.stack([normalize_pixels(c, tracks.pixel[:, v]) for v, c in enumerate(cameras)], axis=1) if T else None
    for start in range(0, T, CHUNK):
        sl = slice(start, start + CHUNK)
        X, good = triangulate_dlt_batch(P, xn[sl], tracks.valid[sl])
        pts[sl] = c0 + scale * X
        ok[sl] = good
    reproj = np.full(T, np.inf)
    if T:
        uv, z = project_all(cameras, pts)
        err = np.linalg.norm(uv - tracks.pixel, axis=2)
        behind = np.any(tracks.valid & ~(z > 0), axis=1)
        mean_err = np.sum(np.where(tracks.valid, err, 0.0), axis=1) / tracks.valid.sum(axis=1)
        ok &= ~behind & np.isfinite(mean_err)
        reproj = np.where(ok, mean_err, np.inf)
    tracks.points, tracks.reproj, tracks.triangulated = pts, reproj, ok
    return tracks


def statistical_outlier_mask(points: np.ndarray, k: int = 20, std_ratio: float = 2.0) -> np.ndarray:
    """Keep-mask of classic SOR: drop points whose mean k-NN distance exceeds
    the global mean of that statistic by more than ``std_ratio`` std."""
    n = len(points)
    if n < 2:
        return np.ones(n, dtype=bool)
    k = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    mean_d = d[:, 1:].mean(axis=1)
    return mean_d <= mean_d.mean() + std_ratio * mean_d.std()


def filter_points(tracks: TrackSet, config: SfmConfig) -> TrackSet:
    """Reprojection-error cut, floor cut (strictly below ``floor_z``), then SOR."""
    keep = tracks.triangulated & (tracks.reproj <= config.reproj_threshold)
    keep &= ~(tracks.points[:, 2] < config.floor_z)
    idx = np.nonzero(keep)[0]
    if len(idx):
        keep[idx] = statistical_outlier_mask(tracks.points[idx], config.sor_k, config.sor_std_ratio)
    if not keep.any():
        raise EmptyCloudError("every triangulated point was filtered out")
    return tracks.select(keep)


def aggregate_normals_batch(normals: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Spherical-coordinate consensus: mean polar angle, circular-mean azimuth."""
    theta = np.arccos(np.clip(normals[..., 2], -1.0, 1.0))
    phi = np.arctan2(normals[..., 1], normals[..., 0])
    cnt = valid.sum(axis=1)
    mt = np.sum(np.where(valid, theta, 0.0), axis=1) / cnt
    ms = np.sum(np.where(valid, np.sin(phi), 0.0), axis=1)
    mc = np.sum(np.where(valid, np.cos(phi), 0.0), axis=1)
    mp = np.arctan2(ms, mc)
    st = np.sin(mt)
    return np.stack([st * np.cos(mp), st * np.sin(mp), np.cos(mt)], axis=1)


def aggregate_normals(normals) -> np.ndarray:
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(normals) == 0:
        raise EmptyInputError("no normals to aggregate")
    return aggregate_normals_batch(normals[None], np.ones((1, len(normals)), dtype=bool))[0]


def world_normals(tracks: TrackSet, cameras: Sequence[CameraView]) -> np.ndarray:
    """Rotate each camera-frame observation normal into the world frame."""
    R = np.stack([c.rotation for c in cameras])
    return np.einsum("vji,tvj->tvi", R, tracks.normal)


@dataclass
class SfmResult:
    cloud: OrientedPointCloud
    tracks: TrackSet
    stats: dict = field(default_factory=dict)


def reconstruct(images: Sequence[TocImage], cameras: Sequence[CameraView], config: SfmConfig,
                threads: int = 1) -> SfmResult:
    """sample -> match -> refine -> triangulate -> filter -> aggregate."""
    tracks = match_correspondences(images, config, threads=threads)
    n_matched = len(tracks)
    if n_matched == 0:
        raise EmptyCloudError("no correspondences found in two or more views")
    tracks = triangulate_tracks(tracks, cameras)
    n_tri = int(tracks.triangulated.sum())
    tracks = filter_points(tracks, config)
    nw = world_normals(tracks, cameras)
    if config.normal_aggregation:
        normals = aggregate_normals_batch(nw, tracks.valid)
    else:
        normals = nw[np.arange(len(tracks)), tracks.source_view]
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = OrientedPointCloud(
        tracks.points, normals, toc=tracks.query_toc, view_count=tracks.view_count,
        reprojection_error=tracks.reproj,
    )
    stats = {"tracks": n_matched, "triangulated": n_tri, "kept": len(tracks)}
    log.info("sfm: %d tracks, %d triangulated, %d kept", n_matched, n_tri, len(tracks))
    return SfmResult(cloud, tracks, stats)


def sidecar_path(ply_path) -> Path:
    p = Path(ply_path)
    return p.with_name(p.stem + ".poisson.json")


def run_sfm(scene, out_path, config: Optional[SfmConfig] = None, threads: int = 1) -> SfmResult:
    """Reconstruct a scene directory and write the oriented PLY plus Poisson sidecar."""
    from . import io
    from .scene import Scene, load_scene

    config = config or SfmConfig()
    if not isinstance(scene, Scene):
        scene = load_scene(scene)
    if len(scene.cameras) < 2:
        raise InsufficientViewsError("scene needs at least 2 calibrated views")
    result = reconstruct(scene.images, scene.cameras, config, threads=threads)
    io.write_ply(out_path, result.cloud)
    sidecar_path(out_path).write_text(json.dumps(config.poisson_sidecar(), indent=2) + "\n")
    return result
