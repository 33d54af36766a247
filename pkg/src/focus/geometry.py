"""Pinhole cameras, projection, DLT triangulation and basic mesh/cloud types.

Conventions: cameras are world-to-camera (``x_cam = R @ x_world + t``),
right-handed, +Z pointing into the scene. Pixel centres sit on integer
coordinates, ``u`` along image columns and ``v`` along rows. World units are
millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateConfigurationError,
    InsufficientViewsError,
    OutOfRangeError,
)

ORTHONORMAL_TOL = 1e-9
UNIT_TOL = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(r) -> np.ndarray:
    """Rotation matrix of an axis-angle vector."""
    r = np.asarray(r, dtype=float)
    theta2 = float(r @ r)
    K = skew(r)
    if theta2 < 1e-24:
        return np.eye(3) + K
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    # 1 - cos(theta) written stably
    b = 2.0 * np.sin(0.5 * theta) ** 2 / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_derivatives(r) -> np.ndarray:
    """``dR[i] = dR/dr_i`` for the axis-angle map, shape (3, 3, 3).

    Uses the closed form of Gallego & Yezzi (2015), which stays well defined
    for any non-zero angle; the zero rotation uses the generators directly.
    """
    r = np.asarray(r, dtype=float)
    theta2 = float(r @ r)
    eye = np.eye(3)
    if theta2 < 1e-20:
        return np.stack([skew(eye[i]) for i in range(3)])
    R = rodrigues(r)
    K = skew(r)
    out = np.empty((3, 3, 3))
    for i in range(3):
        v = np.cross(r, (eye - R)[:, i])
        out[i] = (r[i] * K + skew(v)) @ R / theta2
    return out


@dataclass(frozen=True, eq=False)
class CameraView:
    """Calibrated pinhole camera (world-to-camera pose, pixels, millimetres)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        R.setflags(write=False)
        t.setflags(write=False)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not np.allclose(R @ R.T, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")

    @classmethod
    def single_focal(cls, f, cx, cy, rotation, translation, width, height) -> "CameraView":
        return cls(f, f, cx, cy, rotation, translation, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.K @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation


def project_points(camera: CameraView, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection without the depth check.

    Returns ``(pixels (M, 2), depth (M,))``; callers decide what to do with
    non-positive depths.
    """
    pc = camera.to_camera(np.atleast_2d(points))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[:, 0] / z + camera.cx
        v = camera.fy * pc[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1), z


def project(camera: CameraView, point) -> np.ndarray:
    """Project world point(s) to pixels; raises if any depth is non-positive."""
    point = np.asarray(point, dtype=float)
    pix, z = project_points(camera, point)
    if np.any(~(z > 0)):
        raise BehindCameraError(f"point has non-positive depth {z.min():.6g} mm")
    return pix[0] if point.ndim == 1 else pix


def projection_jacobian(camera: CameraView, points: np.ndarray) -> np.ndarray:
    """d(pixel)/d(world point), shape (M, 2, 3)."""
    pc = camera.to_camera(np.atleast_2d(points))
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / z
    Jc = np.zeros((len(pc), 2, 3))
    Jc[:, 0, 0] = camera.fx * inv_z
    Jc[:, 0, 2] = -camera.fx * x * inv_z**2
    Jc[:, 1, 1] = camera.fy * inv_z
    Jc[:, 1, 2] = -camera.fy * y * inv_z**2
    return Jc @ camera.rotation


def _world_normalisation(cameras: Sequence[CameraView]) -> Tuple[np.ndarray, float]:
    centers = np.array([c.center for c in cameras])
    c0 = centers.mean(axis=0)
    scale = float(np.mean(np.linalg.norm(centers - c0, axis=1)))
    if scale <= 0:
        scale = float(np.mean(np.linalg.norm(centers, axis=1))) or 1.0
    return c0, scale


def normalized_projections(cameras: Sequence[CameraView]):
    """Per-camera ``[R | t']`` matrices acting on normalised world points.

    World points are expressed as ``X = c0 + scale * X'`` which keeps the DLT
    system well conditioned. Returns ``(P (V, 3, 4), c0, scale)``.
    """
    c0, scale = _world_normalisation(cameras)
    P = np.empty((len(cameras), 3, 4))
    for i, cam in enumerate(cameras):
        P[i, :, :3] = cam.rotation
        P[i, :, 3] = (cam.rotation @ c0 + cam.translation) / scale
    return P, c0, scale


def normalize_pixels(camera: CameraView, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    return np.stack(
        [(pixels[..., 0] - camera.cx) / camera.fx, (pixels[..., 1] - camera.cy) / camera.fy],
        axis=-1,
    )


def triangulate_dlt_batch(P: np.ndarray, xn: np.ndarray, valid: np.ndarray):
    """Joint DLT for many tracks at once.

    ``P``: (V, 3, 4) normalised projections, ``xn``: (T, V, 2) normalised
    image coordinates, ``valid``: (T, V) observation mask. Missing views
    contribute zero rows. Returns ``(X' (T, 3), ok (T,))`` in the normalised
    world frame; ``ok`` is False for rank-deficient systems or near-infinite
    solutions.
    """
    T, V = valid.shape
    A = np.zeros((T, 2 * V, 4))
    w = valid[:, :, None].astype(float)
    A[:, 0::2, :] = w * (xn[:, :, 0:1] * P[None, :, 2, :] - P[None, :, 0, :])
    A[:, 1::2, :] = w * (xn[:, :, 1:2] * P[None, :, 2, :] - P[None, :, 1, :])
    # row equilibration does not move the null space
    norms = np.linalg.norm(A, axis=2, keepdims=True)
    A = np.divide(A, norms, out=np.zeros_like(A), where=norms > 0)
    if T == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    sol = vt[:, -1, :]
    ok = s[:, -2] > 1e-10 * s[:, 0]
    hom = sol[:, 3]
    ok &= np.abs(hom) >= 1e-12 * np.linalg.norm(sol, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        X = sol[:, :3] / hom[:, None]
    ok &= np.all(np.isfinite(X), axis=1)
    return X, ok


def triangulate_dlt(observations: Sequence[Tuple[CameraView, np.ndarray]]) -> np.ndarray:
    """Triangulate one world point from two or more (camera, pixel) pairs."""
    if len(observations) < 2:
        raise InsufficientViewsError(f"need at least 2 observations, got {len(observations)}")
    cameras = [cam for cam, _ in observations]
    P, c0, scale = normalized_projections(cameras)
    xn = np.array([normalize_pixels(cam, px) for cam, px in observations])[None]
    X, ok = triangulate_dlt_batch(P, xn, np.ones((1, len(cameras)), dtype=bool))
    if not ok[0]:
        raise DegenerateConfigurationError("DLT system is rank deficient (coincident or parallel rays)")
    return c0 + scale * X[0]


def reprojection_error(point, observations: Sequence[Tuple[CameraView, np.ndarray]]) -> float:
    """Mean pixel distance between the projected point and each observation."""
    errs = [np.linalg.norm(project(cam, point) - np.asarray(px, dtype=float)) for cam, px in observations]
    return float(np.mean(errs))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``eye`` looking at ``target``.

    Image ``v`` grows downwards, so the camera y axis is the negated up vector
    projected onto the image plane.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def _unit_rows(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, n, out=np.zeros_like(a), where=n > 0)


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None
    toc: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise ValueError("normals must be per-vertex")
            if len(self.normals) and np.max(np.abs(np.linalg.norm(self.normals, axis=1) - 1)) > UNIT_TOL:
                raise ValueError("vertex normals must be unit length")
        if self.toc is not None:
            self.toc = np.asarray(self.toc, dtype=float).reshape(-1, 3)
            if len(self.toc) != len(self.vertices):
                raise ValueError("toc must be per-vertex")
            if len(self.toc) and (self.toc.min() < 0 or self.toc.max() > 1):
                raise OutOfRangeError("vertex TOC values must lie in [0,1]^3")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        tri = self.triangles
        return _unit_rows(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]))

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def compute_vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        tri = self.triangles
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], fn)
        return _unit_rows(acc)

    def with_vertex_normals(self) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, self.compute_vertex_normals(), self.toc)

    def signed_volume(self, origin=(0.0, 0.0, 0.0)) -> float:
        tri = self.triangles - np.asarray(origin, dtype=float)
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


@dataclass(frozen=True)
class OrientedPoint:
    position: np.ndarray
    normal: np.ndarray
    toc: np.ndarray
    view_count: int
    mean_reprojection_error: float


@dataclass(eq=False)
class OrientedPointCloud:
    """Struct-of-arrays oriented cloud; provenance arrays are optional."""

    positions: np.ndarray
    normals: np.ndarray
    toc: Optional[np.ndarray] = None
    view_count: Optional[np.ndarray] = None
    reprojection_error: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if self.positions.shape != self.normals.shape:
            raise ValueError("positions and normals must have the same shape")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> OrientedPoint:
        return OrientedPoint(
            self.positions[i],
            self.normals[i],
            None if self.toc is None else self.toc[i],
            -1 if self.view_count is None else int(self.view_count[i]),
            float("nan") if self.reprojection_error is None else float(self.reprojection_error[i]),
        )
