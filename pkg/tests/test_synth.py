import json

import numpy as np
import pytest

from conftest import clean_scene
from focus.errors import BehindCameraError, InvalidSpecError
from focus.geometry import CameraView, TriMesh, look_at, project_points
from focus.synth import (
    LOGVAR_FLOOR,
    NoiseSpec,
    SceneSpec,
    TocImage,
    emulate_prediction,
    generate_scene,
    rasterize,
    rasterize_mesh,
    render_scene,
)


def front_camera(size=100, f=100.0):
    return CameraView(f, f, size / 2, size / 2, np.eye(3), np.zeros(3), size, size)


def triangle_mesh(verts, toc=((0, 0, 0), (1, 0, 0), (0, 1, 0))):
    v = np.asarray(verts, float)
    m = TriMesh(v, np.array([[0, 1, 2]]), toc=np.asarray(toc, float))
    n = np.cross(v[1] - v[0], v[2] - v[0])
    return TriMesh(m.vertices, m.faces, normals=np.tile(n / np.linalg.norm(n), (3, 1)), toc=m.toc)


def flat_image(w=400, h=300, value=0.5):
    return TocImage(
        np.full((h, w, 3), value, np.float32),
        np.full((h, w, 3), LOGVAR_FLOOR, np.float32),
        np.ones((h, w), np.float32),
        np.tile(np.array([0, 0, -1], np.float32), (h, w, 1)),
        np.full((h, w), 100.0, np.float32),
    )


# -- rasterizer ----------------------------------------------------------------------
def test_single_triangle_barycentric():
    # pixels (10,10), (90,10), (10,90) on a fronto-parallel plane
    mesh = triangle_mesh([[-40, -40, 100], [40, -40, 100], [-40, 40, 100]])
    img = rasterize_mesh(mesh, front_camera())
    assert img.mask[30, 30] == 1
    np.testing.assert_allclose(img.toc_mean[30, 30], [0.25, 0.25, 0.0], atol=1e-5)
    np.testing.assert_allclose(img.toc_mean[20, 40], [0.375, 0.125, 0.0], atol=1e-5)
    assert img.depth[30, 30] == pytest.approx(100.0)
    assert img.toc_logvar[30, 30, 0] == pytest.approx(np.log(1e-12))
    # background
    assert img.mask[95, 95] == 0
    assert np.all(img.toc_mean[95, 95] == 0) and np.isinf(img.depth[95, 95])


def test_perspective_correct_on_tilted_triangle():
    verts = np.array([[-40.0, -40, 80], [40, -40, 160], [-40, 40, 80]])
    mesh = triangle_mesh(verts)
    cam = front_camera()
    img = rasterize_mesh(mesh, cam)
    ys, xs = np.nonzero(img.mask > 0.5)
    # oracle: intersect each pixel ray with the plane, then 3D barycentrics
    n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
    for y, x in list(zip(ys, xs))[::37]:
        ray = np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0])
        X = ray * (n @ verts[0]) / (n @ ray)
        T = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
        l12 = np.linalg.lstsq(T, X - verts[0], rcond=None)[0]
        np.testing.assert_allclose(img.toc_mean[y, x], [l12[0], l12[1], 0.0], atol=1e-5)
        assert img.depth[y, x] == pytest.approx(X[2], rel=1e-5)


def test_camera_looking_away_renders_background():
    mesh = triangle_mesh([[-40, -40, -100], [40, -40, -100], [-40, 40, -100]])
    img = rasterize_mesh(mesh, front_camera())
    assert img.mask.sum() == 0
    assert np.all(np.isinf(img.depth))


def test_straddling_mesh_raises():
    mesh = triangle_mesh([[-40, -40, -100], [40, -40, 100], [-40, 40, 100]])
    with pytest.raises(BehindCameraError):
        rasterize_mesh(mesh, front_camera())


def test_zbuffer_nearer_wins():
    near = [[-40, -40, 100], [40, -40, 100], [-40, 40, 100]]
    far = [[-80, -80, 200], [80, -80, 200], [-80, 80, 200]]
    v = np.array(near + far, float)
    toc = np.array([[0.1] * 3] * 3 + [[0.9] * 3] * 3)
    # far face listed first so index order cannot explain the result
    mesh = TriMesh(v, np.array([[3, 4, 5], [0, 1, 2]]), toc=toc).with_vertex_normals()
    img = rasterize_mesh(mesh, front_camera())
    near_only = rasterize_mesh(triangle_mesh(near, toc[:3]), front_camera()).mask > 0.5
    far_only = rasterize_mesh(triangle_mesh(far, toc[3:]), front_camera()).mask > 0.5
    contested = near_only & far_only
    assert contested.sum() > 100
    np.testing.assert_allclose(img.toc_mean[contested], 0.1, atol=1e-6)
    np.testing.assert_allclose(img.toc_mean[far_only & ~near_only], 0.9, atol=1e-6)


def test_flat_shaded_normals_match_face_normal():
    rng = np.random.default_rng(0)
    for _ in range(5):
        R, t = look_at(rng.normal(size=3) * 200 + [0, 0, 300], [0, 0, 0])
        cam = CameraView(300, 300, 50, 50, R, t, 100, 100)
        verts = rng.normal(size=(3, 3)) * 30
        mesh = triangle_mesh(verts)
        img = rasterize_mesh(mesh, cam)
        inside = img.mask > 0.5
        if not inside.any():
            continue
        n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
        expect = R @ (n / np.linalg.norm(n))
        got = img.normal[inside].astype(float)
        np.testing.assert_allclose(np.linalg.norm(got, axis=1), 1.0, atol=1e-4)
        assert np.abs(got - expect).max() < 1e-3


def test_rasterize_resolution_mismatch():
    sc = clean_scene(10)
    with pytest.raises(ValueError):
        rasterize(sc.model, sc.gt_params, sc.cameras[0], (10, 10))


def test_rasterizer_consistent_with_model():
    sc = clean_scene(10)
    for v in (0, 3, 7):
        img, cam = sc.images[v], sc.cameras[v]
        ys, xs = np.nonzero(img.inside)
        x = sc.model.toc_to_template(np.clip(img.toc_mean[ys, xs].astype(float), 0, 1))
        pix, z = project_points(cam, sc.model.deform(x, sc.gt_params))
        err = np.hypot(pix[:, 0] - xs, pix[:, 1] - ys)
        assert err.max() < 1.0, err.max()


def test_default_scene_coverage():
    sc = clean_scene(10)
    for img in sc.images:
        assert (img.mask > 0.5).mean() >= 0.30
        inside = img.inside
        n = img.normal[inside]
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-4)
        assert np.all((img.toc_mean[inside] >= 0) & (img.toc_mean[inside] <= 1))
        assert np.all(img.toc_mean[~inside] == 0)
        assert np.all(np.isinf(img.depth[~inside]))


# -- predictor emulator --------------------------------------------------------------
def test_zero_noise_is_identity():
    img = clean_scene(10).images[0]
    out = emulate_prediction(img, NoiseSpec(0.0, 0.0), seed=1)
    for key in ("toc_mean", "toc_logvar", "mask", "normal", "depth"):
        assert getattr(out, key).tobytes() == getattr(img, key).tobytes()


def test_noise_std_matches_sigma():
    img = flat_image()
    out = emulate_prediction(img, NoiseSpec(0.01, 0.0), seed=3)
    diff = (out.toc_mean.astype(float) - img.toc_mean)[img.inside]
    assert diff.size >= 1e5
    assert 0.009 <= diff.std() <= 0.011
    np.testing.assert_allclose(out.toc_logvar[img.inside], np.log(np.float32(0.01) ** 2), rtol=1e-5)


def test_heteroscedastic_field_in_range():
    img = flat_image()
    out = emulate_prediction(img, NoiseSpec(0.002, 0.018), seed=5)
    sigma = np.exp(0.5 * out.toc_logvar[..., 0].astype(float))
    assert sigma.min() >= 0.002 * (1 - 1e-5) and sigma.max() <= 0.02 * (1 + 1e-5)
    # spatially smooth: neighbouring pixels differ far less than the range
    assert np.abs(np.diff(sigma, axis=1)).max() < 0.001


def test_noise_deterministic_and_preserves_mask_depth():
    img = clean_scene(10).images[1]
    spec = NoiseSpec(0.005, 0.01, 0.1)
    a = emulate_prediction(img, spec, seed=7)
    b = emulate_prediction(img, spec, seed=7)
    c = emulate_prediction(img, spec, seed=8)
    for key in ("toc_mean", "toc_logvar", "normal"):
        assert getattr(a, key).tobytes() == getattr(b, key).tobytes()
    assert a.toc_mean.tobytes() != c.toc_mean.tobytes()
    assert a.mask.tobytes() == img.mask.tobytes()
    assert a.depth.tobytes() == img.depth.tobytes()
    assert np.all((a.toc_mean >= 0) & (a.toc_mean <= 1))
    np.testing.assert_allclose(np.linalg.norm(a.normal[a.inside], axis=1), 1.0, atol=1e-4)


def test_negative_sigma_rejected():
    with pytest.raises(InvalidSpecError):
        emulate_prediction(flat_image(8, 8), NoiseSpec(-0.01, 0.0), seed=0)
    with pytest.raises(InvalidSpecError):
        render_scene(SceneSpec(n_views=1, noise=NoiseSpec(0.0, -1.0)))


# -- scene generation ----------------------------------------------------------------
def test_generate_three_view_scene(tmp_path):
    generate_scene(SceneSpec(n_views=3), tmp_path)
    manifest = json.loads((tmp_path / "scene.json").read_text())
    assert len(manifest["views"]) == 3
    assert (tmp_path / "gt.ply").exists()
    for v in manifest["views"]:
        for rel in v["rasters"].values():
            assert (tmp_path / rel).exists()
    assert len({v["rasters"]["toc_mean"] for v in manifest["views"]}) == 3


def test_zero_cameras_rejected():
    with pytest.raises(InvalidSpecError):
        render_scene(SceneSpec(n_views=0))
    with pytest.raises(InvalidSpecError):
        render_scene(SceneSpec(cameras=[]))


def test_views_independent_of_thread_count():
    spec = SceneSpec(n_views=3, noise=NoiseSpec(0.005, 0.01))
    a = render_scene(spec, threads=1)
    b = render_scene(spec, threads=3)
    for x, y in zip(a.images, b.images):
        assert x.toc_mean.tobytes() == y.toc_mean.tobytes()
