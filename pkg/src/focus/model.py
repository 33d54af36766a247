"""Procedural deformable foot model with an analytic deformation function.

The model maps a template point ``x`` to a world point

    x2 = s * R(r) @ (x + sum_i z_s[i] * B_i(x) + W(x, z_p)) + t

where ``B_i`` are smooth sinusoidal displacement fields and ``W`` is a sum of
smoothly ramped bends about fixed pivots. Everything is closed form, so both
the deformation and its Jacobians are cheap and exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import OutOfRangeError
from .geometry import TriMesh, rodrigues, rodrigues_derivatives, skew

BBOX_TOL = 1e-9
DEFAULT_DIM_SHAPE = 4
DEFAULT_DIM_POSE = 4


@dataclass(eq=False)
class ModelParams:
    r: np.ndarray
    s: float
    t: np.ndarray
    z_s: np.ndarray
    z_p: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.z_s = np.asarray(self.z_s, dtype=float).reshape(-1)
        self.z_p = np.asarray(self.z_p, dtype=float).reshape(-1)
        self.s = float(self.s)
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("parameters must be finite")

    @classmethod
    def identity(cls, dim_shape=DEFAULT_DIM_SHAPE, dim_pose=DEFAULT_DIM_POSE) -> "ModelParams":
        return cls(np.zeros(3), 1.0, np.zeros(3), np.zeros(dim_shape), np.zeros(dim_pose))

    @property
    def size(self) -> int:
        return 7 + len(self.z_s) + len(self.z_p)

    def to_vector(self) -> np.ndarray:
        """Flat layout ``[r(3), s, t(3), z_s, z_p]`` used by Jacobians and the optimiser."""
        return np.concatenate([self.r, [self.s], self.t, self.z_s, self.z_p])

    @classmethod
    def from_vector(cls, vec, dim_shape: int, dim_pose: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if len(vec) != 7 + dim_shape + dim_pose:
            raise ValueError("parameter vector has the wrong length")
        return cls(vec[0:3], vec[3], vec[4:7], vec[7 : 7 + dim_shape], vec[7 + dim_shape :])

    def to_dict(self) -> dict:
        return {
            "r": self.r.tolist(),
            "s": self.s,
            "t": self.t.tolist(),
            "z_s": self.z_s.tolist(),
            "z_p": self.z_p.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(d["r"], d["s"], d["t"], d["z_s"], d["z_p"])

    def copy(self) -> "ModelParams":
        return ModelParams(self.r.copy(), self.s, self.t.copy(), self.z_s.copy(), self.z_p.copy())


def _cube_sphere(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unit sphere tessellated from a cube with ``n`` segments per edge."""
    a = np.tan(np.linspace(-np.pi / 4, np.pi / 4, n + 1))
    gu, gv = np.meshgrid(a, a, indexing="ij")
    ones = np.ones_like(gu)
    sides = [
        np.stack([ones, gu, gv], -1),
        np.stack([-ones, gv, gu], -1),
        np.stack([gv, ones, gu], -1),
        np.stack([gu, -ones, gv], -1),
        np.stack([gu, gv, ones], -1),
        np.stack([gv, gu, -ones], -1),
    ]
    pts, faces = [], []
    base = 0
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    for side in sides:
        pts.append(side.reshape(-1, 3))
        a0, a1 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
        b0, b1 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
        faces.append(np.concatenate([np.stack([a0, a1, b1], 1), np.stack([a0, b1, b0], 1)]) + base)
        base += (n + 1) ** 2
    pts = np.concatenate(pts)
    faces = np.concatenate(faces)
    key = np.round(pts * 1e9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    verts = pts[first[order]]
    faces = remap[inverse.reshape(-1)[faces]]
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    # orient outwards
    tri = verts[faces]
    if np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() < 0:
        faces = faces[:, ::-1]
    return verts, np.ascontiguousarray(faces)


def _spow(u: np.ndarray, e: float) -> np.ndarray:
    return np.sign(u) * np.abs(u) ** e


def foot_template(resolution: int = 29, length: float = 250.0) -> TriMesh:
    """Foot-like closed surface: rounded heel, high instep, broad flat toe box.

    A cube-sphere (``6 n^2 + 2`` vertices, about 5k at the default) is pushed
    through a superellipsoid map and tapered by smooth width/height profiles
    along the length. The map is injective, so the surface never folds.
    """
    u, faces = _cube_sphere(resolution)
    t = 0.5 * (_spow(u[:, 0], 0.75) + 1.0)
    width = 60.0 + 40.0 * np.exp(-(((t - 0.72) / 0.28) ** 2))
    height = 28.0 + 52.0 * np.exp(-(((t - 0.30) / 0.33) ** 2))
    y = 0.5 * width * _spow(u[:, 1], 0.6)
    # flatter sole than top
    ez = np.where(u[:, 2] < 0, 0.35, 0.8)
    z = 0.5 * height * (_spow(u[:, 2], ez) + 1.0)
    x = length * t
    verts = np.stack([x, y, z], axis=1)
    mesh = TriMesh(verts, faces)
    if mesh.signed_volume(verts.mean(axis=0)) < 0:
        mesh = TriMesh(verts, faces[:, ::-1])
    return mesh.with_vertex_normals()


def _smootherstep(xi: np.ndarray, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """C2 ramp from 0 at ``lo`` to 1 at ``hi`` and its derivative in ``xi``."""
    s = np.clip((xi - lo) / (hi - lo), 0.0, 1.0)
    w = s**3 * (s * (6 * s - 15) + 10)
    dw = 30 * s**2 * (s - 1) ** 2 / (hi - lo)
    return w, dw


@dataclass(frozen=True)
class Bend:
    """Rotation about ``axis`` through ``pivot`` by ``weight(x) * z`` radians."""

    axis: np.ndarray
    pivot: np.ndarray
    ramp: Tuple[float, float]


class DeformableModel:
    """Template mesh with per-vertex TOC plus the analytic deformation ``F``."""

    def __init__(self, template: TriMesh, seed: int = 0, dim_shape: int = DEFAULT_DIM_SHAPE,
                 dim_pose: int = DEFAULT_DIM_POSE):
        self.seed = int(seed)
        self.dim_shape = int(dim_shape)
        self.dim_pose = int(dim_pose)
        verts = template.vertices
        self.bbox_min = verts.min(axis=0)
        self.bbox_max = verts.max(axis=0)
        self.extent = self.bbox_max - self.bbox_min
        if np.any(self.extent <= 0):
            raise ValueError("template bounding box must have positive extent on every axis")
        normals = template.normals if template.normals is not None else template.compute_vertex_normals()
        self.template = TriMesh(verts, template.faces, normals, self.template_to_toc(verts))
        self.diagonal = float(np.linalg.norm(self.extent))
        self.length = float(self.extent.max())

        rng = np.random.default_rng(self.seed)
        # shape basis: per basis i, per output axis k, amplitude/frequency/phase
        amp = rng.uniform(-1.0, 1.0, size=(dim_shape, 3)) * (0.04 * self.extent)
        direction = rng.normal(size=(dim_shape, 3, 3))
        direction /= np.linalg.norm(direction, axis=2, keepdims=True)
        cycles = rng.uniform(0.5, 2.0, size=(dim_shape, 3, 1))
        self.shape_amp = amp
        self.shape_freq = direction * cycles
        self.shape_phase = rng.uniform(0.0, 2 * np.pi, size=(dim_shape, 3))
        self.bends = self._make_bends(rng)
        for arr in (self.shape_amp, self.shape_freq, self.shape_phase, self.bbox_min, self.bbox_max, self.extent):
            arr.setflags(write=False)

    @classmethod
    def procedural(cls, seed: int = 0, dim_shape: int = DEFAULT_DIM_SHAPE, dim_pose: int = DEFAULT_DIM_POSE,
                   resolution: int = 29) -> "DeformableModel":
        return cls(foot_template(resolution), seed, dim_shape, dim_pose)

    def _make_bends(self, rng) -> list:
        lo, ext = self.bbox_min, self.extent
        mid_y = lo[1] + 0.5 * ext[1]
        toe_pivot = np.array([lo[0] + 0.60 * ext[0], mid_y, lo[2] + 0.25 * ext[2]])
        mid_pivot = np.array([lo[0] + 0.50 * ext[0], mid_y, lo[2] + 0.30 * ext[2]])
        presets = [
            Bend(np.array([0.0, 1.0, 0.0]), toe_pivot, (0.55, 0.75)),  # toe flexion
            Bend(np.array([0.0, 0.0, 1.0]), toe_pivot, (0.55, 0.75)),  # forefoot yaw
            Bend(np.array([0.0, 1.0, 0.0]), mid_pivot, (0.20, 0.80)),  # arch pitch
            Bend(np.array([1.0, 0.0, 0.0]), mid_pivot, (0.20, 0.80)),  # roll
        ]
        bends = presets[: self.dim_pose]
        for _ in range(self.dim_pose - len(bends)):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            pivot = lo + rng.uniform(0.2, 0.8, size=3) * ext
            a = float(rng.uniform(0.1, 0.6))
            bends.append(Bend(axis, pivot, (a, a + 0.3)))
        return bends

    # -- TOC normalisation -------------------------------------------------
    def template_to_toc(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        tol = BBOX_TOL * np.maximum(1.0, np.abs(self.extent))
        if np.any(x < self.bbox_min - tol) or np.any(x > self.bbox_max + tol):
            raise OutOfRangeError("template point lies outside the template bounding box")
        return np.clip((x - self.bbox_min) / self.extent, 0.0, 1.0)

    def toc_to_template(self, toc) -> np.ndarray:
        toc = np.asarray(toc, dtype=float)
        if np.any(~(toc >= 0.0)) or np.any(~(toc <= 1.0)):
            raise OutOfRangeError("TOC values must lie in [0,1]^3")
        return self.bbox_min + toc * self.extent

    # -- deformation ---------------------------------------------------------
    def _shape_terms(self, x: np.ndarray):
        """Basis fields (D_s, M, 3) and their spatial derivatives (D_s, M, 3, 3)."""
        xi = (x - self.bbox_min) / self.length  # (M,3)
        arg = 2 * np.pi * np.einsum("ikj,mj->imk", self.shape_freq, xi) + self.shape_phase[:, None, :]
        fields = self.shape_amp[:, None, :] * np.sin(arg)
        dcoef = self.shape_amp[:, None, :] * np.cos(arg) * 2 * np.pi  # (D,M,3)
        grads = dcoef[..., None] * (self.shape_freq / self.length)[:, None, :, :]
        return fields, grads

    def _bend_terms(self, x: np.ndarray, z_p: np.ndarray, need_grad: bool, prep: "PreparedPoints" = None):
        """Displacements of every bend and, optionally, their derivatives."""
        prep = prep if prep is not None else PreparedPoints(self, x, shape=False)
        disp = np.zeros((len(self.bends),) + x.shape)
        d_dz = np.zeros_like(disp)
        d_dx = np.zeros((len(self.bends), len(x), 3, 3)) if need_grad else None
        for k, bend in enumerate(self.bends):
            idx, w, dw, Kv, K2v, K, K2 = prep.bend[k]  # points where the ramp is non-zero
            theta = w * z_p[k]
            st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
            # (R - I) v with 1 - cos written stably
            disp[k, idx] = st * Kv + 2 * np.sin(0.5 * theta)[:, None] ** 2 * K2v
            dRv = ct * Kv + st * K2v  # dR/dtheta v
            d_dz[k, idx] = w[:, None] * dRv
            if need_grad:
                RmI = st[:, :, None] * K + (2 * np.sin(0.5 * theta) ** 2)[:, None, None] * K2
                RmI[:, :, 0] += dRv * (z_p[k] * dw / self.extent[0])[:, None]
                d_dx[k, idx] = RmI
        return disp, d_dz, d_dx

    def prepare(self, x) -> "PreparedPoints":
        """Cache the parameter-independent terms for a fixed set of template points."""
        return PreparedPoints(self, np.atleast_2d(np.asarray(x, dtype=float)))

    def local_offsets(self, x, params: ModelParams) -> np.ndarray:
        """Shape plus pose displacement applied before the similarity transform."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        fields, _ = self._shape_terms(x)
        disp, _, _ = self._bend_terms(x, params.z_p, need_grad=False)
        return np.einsum("i,imk->mk", params.z_s, fields) + disp.sum(axis=0)

    def deform(self, x, params: ModelParams) -> np.ndarray:
        """World position(s) of template point(s) ``x`` under ``params``."""
        x = np.asarray(x, dtype=float)
        xs = np.atleast_2d(x)
        local = xs + self.local_offsets(xs, params)
        out = params.s * local @ rodrigues(params.r).T + params.t
        return out[0] if x.ndim == 1 else out

    def jacobians(self, x, params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
        """Analytic ``(d x2 / d params, d x2 / d x)``.

        Shapes are ``(M, 3, 7 + D_s + D_p)`` and ``(M, 3, 3)`` for a batch, or
        without the leading axis for a single point. Parameter order matches
        :meth:`ModelParams.to_vector`.
        """
        x = np.asarray(x, dtype=float)
        _, dparams, dx = self.deform_with_jacobians(np.atleast_2d(x), params)
        if x.ndim == 1:
            return dparams[0], dx[0]
        return dparams, dx

    def deform_with_jacobians(self, x: np.ndarray, params: ModelParams, prepared: "PreparedPoints" = None):
        """Batched ``(x2, d x2 / d params, d x2 / d x)`` sharing one evaluation.

        Pass ``prepared`` (from :meth:`prepare` on the same points) to reuse
        the cached terms across repeated evaluations.
        """
        prep = prepared if prepared is not None else self.prepare(x)
        local, dlocal, dz = prep.local_terms(params.z_s, params.z_p)
        m = len(local)
        R = rodrigues(params.r)
        dR = rodrigues_derivatives(params.r)
        sR = params.s * R

        dparams = np.empty((m, 3, 7 + self.dim_shape + self.dim_pose))
        for i in range(3):
            dparams[:, :, i] = params.s * (local @ dR[i].T)
        rotated = local @ R.T
        dparams[:, :, 3] = rotated
        dparams[:, :, 4:7] = np.eye(3)
        dparams[:, :, 7:] = np.matmul(sR, dz)
        dx = np.matmul(sR, dlocal)
        x2 = params.s * rotated + params.t
        return x2, dparams, dx

    def deformed_mesh(self, params: ModelParams) -> TriMesh:
        verts = self.deform(self.template.vertices, params)
        mesh = TriMesh(verts, self.template.faces, toc=self.template.toc)
        return TriMesh(verts, mesh.faces, mesh.compute_vertex_normals(), self.template.toc)


class PreparedPoints:
    """Parameter-independent terms of the deformation at fixed template points.

    The latent-dependent part (offsets and their derivatives) is memoised for
    the last ``(z_s, z_p)`` seen, which makes registration-only updates cheap.
    """

    def __init__(self, model: DeformableModel, x: np.ndarray, shape: bool = True):
        self.model = model
        self.x = x
        if shape:
            self.fields, self.field_grads = model._shape_terms(x)
        xi = (x[:, 0] - model.bbox_min[0]) / model.extent[0]
        self.bend = []
        for bend in model.bends:
            w, dw = _smootherstep(xi, *bend.ramp)
            idx = np.nonzero(w > 0)[0]
            K = skew(bend.axis)
            K2 = K @ K
            v = x[idx] - bend.pivot
            self.bend.append((idx, w[idx], dw[idx], v @ K.T, v @ K2.T, K, K2))
        self._key = None
        self._val = None

    def local_terms(self, z_s: np.ndarray, z_p: np.ndarray):
        """``(local (M,3), d local/d x (M,3,3), d local/d z (M,3,D_s+D_p))``."""
        key = (np.asarray(z_s, dtype=float).tobytes(), np.asarray(z_p, dtype=float).tobytes())
        if key == self._key:
            return self._val
        m = self.model
        disp, bend_dz, bend_dx = m._bend_terms(self.x, z_p, need_grad=True, prep=self)
        local = self.x + np.einsum("i,imk->mk", z_s, self.fields) + disp.sum(axis=0)
        dlocal = np.broadcast_to(np.eye(3), (len(self.x), 3, 3)).copy()
        dlocal += np.einsum("i,imab->mab", z_s, self.field_grads)
        dlocal += bend_dx.sum(axis=0)
        dz = np.concatenate([self.fields, bend_dz], axis=0).transpose(1, 2, 0)
        self._key, self._val = key, (local, dlocal, np.ascontiguousarray(dz))
        return self._val
