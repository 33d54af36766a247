"""Scene directories: manifest + per-view FIMG rasters + ground-truth mesh."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .geometry import CameraView, TriMesh
from .model import DeformableModel, ModelParams
from .synth import SceneSpec, SynthScene, TocImage

MANIFEST_NAME = "scene.json"
GT_MESH_NAME = "gt.ply"

_CHANNELS = {
    "toc_mean": io.Channel.TOC_MEAN,
    "toc_logvar": io.Channel.TOC_LOGVAR,
    "normal": io.Channel.NORMAL,
    "mask": io.Channel.MASK,
    "depth": io.Channel.DEPTH,
}


@dataclass
class Scene:
    cameras: List[CameraView]
    images: List[TocImage]
    model: DeformableModel
    gt_params: Optional[ModelParams] = None
    gt_mesh: Optional[TriMesh] = None
    azimuths: Optional[List[float]] = None
    root: Optional[Path] = None

    def subset(self, indices: Sequence[int]) -> "Scene":
        idx = list(indices)
        return Scene(
            [self.cameras[i] for i in idx],
            [self.images[i] for i in idx],
            self.model,
            self.gt_params,
            self.gt_mesh,
            None if self.azimuths is None else [self.azimuths[i] for i in idx],
            self.root,
        )

    @classmethod
    def from_synth(cls, s: SynthScene) -> "Scene":
        return cls(list(s.cameras), list(s.images), s.model, s.gt_params, s.gt_mesh, list(s.azimuths))


def camera_to_entry(cam: CameraView, name: str, rasters: dict, azimuth: Optional[float]) -> io.ViewEntry:
    return io.ViewEntry(
        name=name,
        intrinsics=io.Intrinsics(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy),
        rotation=cam.rotation.tolist(),
        translation=cam.translation.tolist(),
        width=cam.width,
        height=cam.height,
        azimuth_deg=azimuth,
        rasters=rasters,
    )


def entry_to_camera(v: io.ViewEntry) -> CameraView:
    k = v.intrinsics
    return CameraView(k.fx, k.fy, k.cx, k.cy, np.array(v.rotation), np.array(v.translation), v.width, v.height)


def write_scene(scene: SynthScene, out_dir, spec: SceneSpec) -> Path:
    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(scene.cameras, scene.images)):
        name = f"view_{i:03d}"
        rasters = {}
        for key, tag in _CHANNELS.items():
            rel = f"views/{name}_{key}.fimg"
            try:
                io.write_fimg(out / rel, getattr(img, key), tag)
            except OSError as exc:
                raise OSError(f"failed to write raster {out / rel}: {exc}") from exc
            rasters[key] = rel
        entries.append(camera_to_entry(cam, name, rasters, scene.azimuths[i]))
    io.write_ply(out / GT_MESH_NAME, scene.gt_mesh)
    manifest = io.SceneManifest(
        version=io.MANIFEST_VERSION,
        units="mm",
        model=io.ModelSpec(seed=scene.model.seed, dim_shape=scene.model.dim_shape, dim_pose=scene.model.dim_pose),
        gt_params=io.ParamsEntry(**scene.gt_params.to_dict()),
        gt_mesh=GT_MESH_NAME,
        noise=io.NoiseEntry(
            sigma_base=spec.noise.sigma_base, sigma_range=spec.noise.sigma_range, normal_sigma=spec.noise.normal_sigma
        ),
        seed=spec.seed,
        views=entries,
    )
    io.write_manifest(out / MANIFEST_NAME, manifest)
    return out


def _load_image(root: Path, v: io.ViewEntry) -> TocImage:
    missing = [k for k in _CHANNELS if k not in v.rasters]
    if missing:
        raise io.SchemaError(f"view {v.name}: missing rasters {missing}")
    arrays = {}
    for key, tag in _CHANNELS.items():
        arr, got = io.read_fimg(root / v.rasters[key])
        if got != tag:
            raise io.FormatError(f"{root / v.rasters[key]}: channel tag {got.name}, expected {tag.name}")
        arrays[key] = arr[:, :, 0] if key in ("mask", "depth") else arr
    return TocImage(**arrays)


def load_scene(path) -> Scene:
    """Load a scene directory (or a path to its manifest)."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"scene manifest not found: {manifest_path}")
    root = manifest_path.parent
    m = io.read_manifest(manifest_path)
    if m.model.template is not None:
        template = io.read_mesh(root / m.model.template)
        model = DeformableModel(template, m.model.seed, m.model.dim_shape, m.model.dim_pose)
    else:
        model = DeformableModel.procedural(m.model.seed, m.model.dim_shape, m.model.dim_pose)
    cameras = [entry_to_camera(v) for v in m.views]
    images = [_load_image(root, v) for v in m.views]
    gt_params = ModelParams.from_dict(m.gt_params.model_dump()) if m.gt_params else None
    gt_mesh = io.read_mesh(root / m.gt_mesh) if m.gt_mesh else None
    az = [v.azimuth_deg for v in m.views]
    azimuths = None if any(a is None for a in az) else az
    return Scene(cameras, images, model, gt_params, gt_mesh, azimuths, root)
