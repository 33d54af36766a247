"""Reconstruction metrics: height crop, uniform surface sampling, exact
nearest-point-on-surface chamfer and normal errors, and the view-count sweep."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMeshError, EmptyInputError, EmptyMeshError, InvalidRequestError
from .geometry import OrientedPointCloud, TriMesh

log = logging.getLogger(__name__)

DEFAULT_CROP_MM = 100.0
DEFAULT_SAMPLES = 10_000
COVERAGE_RADIUS_MM = 2.0


# --------------------------------------------------------------------------
# cropping
# --------------------------------------------------------------------------
def crop_at_height(mesh: TriMesh, z_max: float = DEFAULT_CROP_MM) -> TriMesh:
    """Remove everything above ``z = z_max``; faces crossing the plane are
    clipped and re-triangulated (fan) so the cut follows the plane exactly."""
    tri = mesh.triangles
    above = tri[:, :, 2] > z_max
    n_above = above.sum(axis=1)
    if np.all(n_above == 3):
        raise EmptyMeshError(f"mesh lies entirely above z = {z_max}")
    if not above.any():
        return TriMesh(mesh.vertices, mesh.faces)

    keep_faces = mesh.faces[n_above == 0]
    new_verts = [mesh.vertices]
    new_faces = [keep_faces]
    next_id = len(mesh.vertices)
    for fi in np.nonzero((n_above > 0) & (n_above < 3))[0]:
        poly = []
        ids = mesh.faces[fi]
        for k in range(3):
            a, b = ids[k], ids[(k + 1) % 3]
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            ina, inb = pa[2] <= z_max, pb[2] <= z_max
            if ina:
                poly.append(("v", a))
            if ina != inb:
                s = (z_max - pa[2]) / (pb[2] - pa[2])
                p = pa + s * (pb - pa)
                p[2] = z_max
                poly.append(("p", p))
        idx = []
        for kind, val in poly:
            if kind == "v":
                idx.append(val)
            else:
                new_verts.append(val[None])
                idx.append(next_id)
                next_id += 1
        for k in range(1, len(idx) - 1):
            new_faces.append(np.array([[idx[0], idx[k], idx[k + 1]]]))
    verts = np.concatenate(new_verts)
    faces = np.concatenate(new_faces)
    used = np.unique(faces)
    remap = np.full(len(verts), -1)
    remap[used] = np.arange(len(used))
    return TriMesh(verts[used], remap[faces])


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------
def sample_surface(mesh: TriMesh, n: int = DEFAULT_SAMPLES, seed=0):
    """Area-weighted uniform samples; returns ``(points, face normals, face ids)``."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    tri = mesh.triangles[face]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, mesh.face_normals()[face], face


# --------------------------------------------------------------------------
# exact closest point on a triangle mesh
# --------------------------------------------------------------------------
def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point of each triangle (a, b, c) to the paired point p (Ericson, RTCD 5.1.5)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[:] |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


class MeshProximity:
    """Exact nearest-surface queries accelerated by a KD-tree over face centroids.

    For each query the distance to the face with the nearest centroid gives an
    upper bound ``d``; every face whose centroid lies within ``d + r_max``
    (``r_max`` = largest centroid-to-vertex radius) is then tested exactly, so
    the result equals a linear scan over all faces.
    """

    def __init__(self, mesh: TriMesh):
        if len(mesh.faces) == 0:
            raise EmptyInputError("mesh has no faces")
        self.mesh = mesh
        self.tri = mesh.triangles
        self.centroids = self.tri.mean(axis=1)
        self.radius = float(np.max(np.linalg.norm(self.tri - self.centroids[:, None], axis=2)))
        self.tree = cKDTree(self.centroids)
        self.face_normals = mesh.face_normals()

    def _dist_to(self, pts, faces):
        t = self.tri[faces]
        q = closest_point_on_triangles(pts, t[:, 0], t[:, 1], t[:, 2])
        return np.linalg.norm(q - pts, axis=1), q

    def query(self, points: np.ndarray, chunk: int = 2048):
        """Return ``(distance, closest point, face index)`` per query point."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(points)
        dist = np.empty(n)
        closest = np.empty((n, 3))
        face = np.empty(n, dtype=np.int64)
        for s in range(0, n, chunk):
            pts = points[s : s + chunk]
            _, f0 = self.tree.query(pts)
            d0, _ = self._dist_to(pts, f0)
            r = d0 + self.radius
            r = r * (1 + 1e-9) + 1e-9
            lists = self.tree.query_ball_point(pts, r)
            counts = np.array([len(x) for x in lists])
            qi = np.repeat(np.arange(len(pts)), counts)
            fi = np.concatenate([np.sort(np.asarray(x, dtype=np.int64)) for x in lists])
            d, q = self._dist_to(pts[qi], fi)
            # per-query argmin, first face index on ties
            order = np.lexsort((fi, d, qi))
            first = np.ones(len(order), dtype=bool)
            first[1:] = qi[order][1:] != qi[order][:-1]
            best = order[first]
            dist[s : s + chunk] = d[best]
            closest[s : s + chunk] = q[best]
            face[s : s + chunk] = fi[best]
        return dist, closest, face


def brute_force_closest(mesh: TriMesh, points: np.ndarray):
    """All-faces linear scan; the reference the accelerated query must match."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles
    F = len(tri)
    dist = np.empty(len(points))
    face = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        q = closest_point_on_triangles(np.repeat(p[None], F, 0), tri[:, 0], tri[:, 1], tri[:, 2])
        d = np.linalg.norm(q - p, axis=1)
        face[i] = int(np.argmin(d))
        dist[i] = d[face[i]]
    return dist, face


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------
def _stats(x: np.ndarray) -> Dict[str, float]:
    # sorted first so pooled statistics do not depend on concatenation order
    x = np.sort(np.asarray(x, dtype=float))
    return {
        "mean": float(np.mean(x)),
        "median": float(np.median(x)),
        "rmse": float(np.sqrt(np.mean(x**2))),
        "max": float(np.max(x)),
    }


def angle_deg(n1: np.ndarray, n2: np.ndarray) -> np.ndarray:
    n1 = n1 / np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = n2 / np.linalg.norm(n2, axis=1, keepdims=True)
    # atan2 keeps precision near 0 and 180 degrees, where arccos does not
    return np.degrees(np.arctan2(np.linalg.norm(np.cross(n1, n2), axis=1), np.einsum("ij,ij->i", n1, n2)))


def directional_errors(points: np.ndarray, normals: np.ndarray, target: Union[TriMesh, MeshProximity]):
    """Chamfer distances (mm) and normal angles (deg) from samples to a surface."""
    prox = target if isinstance(target, MeshProximity) else MeshProximity(target)
    d, _, f = prox.query(points)
    return d, angle_deg(normals, prox.face_normals[f])


@dataclass
class MetricReport:
    chamfer: Dict[str, float]
    normal: Dict[str, float]
    counts: Dict[str, int]
    directions: Dict[str, dict] = field(default_factory=dict)
    coverage: Optional[float] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.coverage is None:
            d.pop("coverage")
        return d


def nn_metrics(pred: Union[TriMesh, OrientedPointCloud], gt: TriMesh, n_samples: int = DEFAULT_SAMPLES,
               seed=0, bidirectional: bool = True) -> MetricReport:
    """Chamfer and normal statistics of ``pred`` against the ``gt`` surface.

    Mesh predictions are sampled uniformly and, when ``bidirectional``, the
    two directions are pooled before computing mean/median/RMSE. Point-cloud
    predictions are scored cloud-to-surface, plus the fraction of GT samples
    within 2 mm of some cloud point.
    """
    if len(gt.faces) == 0:
        raise EmptyInputError("ground-truth mesh is empty")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=2)
    directions = {}
    if isinstance(pred, OrientedPointCloud):
        if len(pred) == 0:
            raise EmptyInputError("prediction cloud is empty")
        d, a = directional_errors(pred.positions, pred.normals, gt)
        gp, _, _ = sample_surface(gt, n_samples, seeds[1])
        gd, _ = cKDTree(pred.positions).query(gp)
        coverage = float(np.mean(gd <= COVERAGE_RADIUS_MM))
        directions["pred_to_gt"] = {"chamfer": _stats(d), "normal": _stats(a), "count": len(d)}
        return MetricReport(_stats(d), _stats(a), {"pred_to_gt": len(d), "total": len(d)}, directions, coverage)

    if len(pred.faces) == 0:
        raise EmptyInputError("prediction mesh is empty")
    pp, pn, _ = sample_surface(pred, n_samples, seeds[0])
    d1, a1 = directional_errors(pp, pn, gt)
    directions["pred_to_gt"] = {"chamfer": _stats(d1), "normal": _stats(a1), "count": len(d1)}
    ds, angs = [d1], [a1]
    if bidirectional:
        # same stream for both meshes: swapping pred and gt pools the same set
        gp, gn, _ = sample_surface(gt, n_samples, seeds[0])
        d2, a2 = directional_errors(gp, gn, pred)
        directions["gt_to_pred"] = {"chamfer": _stats(d2), "normal": _stats(a2), "count": len(d2)}
        ds.append(d2)
        angs.append(a2)
    d = np.concatenate(ds)
    a = np.concatenate(angs)
    counts = {k: v["count"] for k, v in directions.items()}
    counts["total"] = len(d)
    return MetricReport(_stats(d), _stats(a), counts, directions)


def evaluate(pred, gt: TriMesh, crop: Optional[float] = DEFAULT_CROP_MM, n_samples: int = DEFAULT_SAMPLES,
             seed=0) -> MetricReport:
    """Protocol: crop both surfaces at ``crop`` mm height, then ``nn_metrics``."""
    if crop is not None:
        gt = crop_at_height(gt, crop)
        if isinstance(pred, TriMesh):
            pred = crop_at_height(pred, crop)
        else:
            keep = pred.positions[:, 2] <= crop
            pred = OrientedPointCloud(pred.positions[keep], pred.normals[keep])
    return nn_metrics(pred, gt, n_samples, seed)


# --------------------------------------------------------------------------
# view-count sweep
# --------------------------------------------------------------------------
def even_view_subset(azimuths: Sequence[float], k: int) -> List[int]:
    """Pick ``k`` views evenly spaced along the azimuthal ordering."""
    n = len(azimuths)
    if k > n or k < 1:
        raise InvalidRequestError(f"cannot select {k} views out of {n}")
    order = np.argsort(np.asarray(azimuths) % 360.0, kind="stable")
    pos = np.floor(np.arange(k) * n / k).astype(int)
    return sorted(int(i) for i in order[pos])


BENCH_FIELDS = [
    "views", "method", "status", "chamfer_mean", "chamfer_median", "chamfer_rmse",
    "normal_mean", "normal_median", "normal_rmse", "coverage", "seconds",
]


def bench_views(scene, method: str, counts: Sequence[int], sfm_config=None, optim_config=None,
                crop: Optional[float] = DEFAULT_CROP_MM, n_samples: int = DEFAULT_SAMPLES, seed=0,
                threads: int = 1) -> List[dict]:
    """Run ``method`` ('sfm' or 'optim') on evenly spaced view subsets and score each."""
    import time

    from .errors import FocusError
    from .optim import OptimConfig, fit_scene
    from .scene import Scene, load_scene
    from .sfm import SfmConfig, reconstruct

    if method not in ("sfm", "optim"):
        raise InvalidRequestError(f"unknown method {method!r}")
    if not isinstance(scene, Scene):
        scene = load_scene(scene)
    if scene.gt_mesh is None:
        raise InvalidRequestError("scene has no ground-truth mesh")
    n = len(scene.cameras)
    for k in counts:
        if k > n or k < 1:
            raise InvalidRequestError(f"requested {k} views but the scene has {n}")
    azimuths = scene.azimuths if scene.azimuths is not None else [
        float(np.degrees(np.arctan2(c.center[1], c.center[0]))) for c in scene.cameras
    ]
    rows = []
    for k in counts:
        sub = scene.subset(even_view_subset(azimuths, k))
        row = {"views": k, "method": method, "status": "ok"}
        t0 = time.perf_counter()
        try:
            if method == "sfm":
                pred = reconstruct(sub.images, sub.cameras, sfm_config or SfmConfig(), threads=threads).cloud
            else:
                pred = fit_scene(sub, optim_config or OptimConfig()).mesh
            rep = evaluate(pred, scene.gt_mesh, crop, n_samples, seed)
            row.update({f"chamfer_{s}": rep.chamfer[s] for s in ("mean", "median", "rmse")})
            row.update({f"normal_{s}": rep.normal[s] for s in ("mean", "median", "rmse")})
            row["coverage"] = rep.coverage
        except FocusError as exc:
            log.warning("bench: %s with %d views failed: %s", method, k, exc)
            row["status"] = f"error: {type(exc).__name__}"
        row["seconds"] = round(time.perf_counter() - t0, 3)
        rows.append(row)
    return rows


def write_bench_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in BENCH_FIELDS})
