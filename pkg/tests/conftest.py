"""Shared scenes and cached pipeline runs.

Rendering and reconstruction are the slow parts of the suite, so each scene
and each expensive run is built once per session and shared by the module
tests and the acceptance gate.
"""
import functools
import time

import numpy as np
import pytest

from focus.evaluate import even_view_subset
from focus.scene import Scene
from focus.synth import NoiseSpec, SceneSpec, render_scene

# criterion lines collected by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES = []
# wall-clock seconds of the first (uncached) call of each expensive run
TIMINGS = {}

STANDARD_NOISE = NoiseSpec(sigma_base=0.005, sigma_range=0.0, normal_sigma=0.2)
HETERO_NOISE = NoiseSpec(sigma_base=0.002, sigma_range=0.018, normal_sigma=0.0)


@functools.lru_cache(maxsize=None)
def clean_scene(n_views=10) -> Scene:
    return Scene.from_synth(render_scene(SceneSpec(n_views=n_views)))


@functools.lru_cache(maxsize=None)
def noisy_scene() -> Scene:
    """The standard noisy scene: 20 ring views, TOC sigma 0.005."""
    return Scene.from_synth(render_scene(SceneSpec(n_views=20, noise=STANDARD_NOISE)))


@functools.lru_cache(maxsize=None)
def hetero_scene() -> Scene:
    """10 views with a spatially varying sigma in [0.002, 0.02]."""
    return Scene.from_synth(render_scene(SceneSpec(n_views=10, noise=HETERO_NOISE)))


def noisy_subset(k: int) -> Scene:
    sc = noisy_scene()
    return sc.subset(even_view_subset(sc.azimuths, k))


@functools.lru_cache(maxsize=None)
def sfm_run(which: str, k: int = 10, subpixel: bool = True, aggregation: bool = True):
    from focus.sfm import SfmConfig, reconstruct

    sc = clean_scene(k) if which == "clean" else noisy_subset(k)
    cfg = SfmConfig(subpixel=subpixel, normal_aggregation=aggregation)
    t0 = time.perf_counter()
    out = reconstruct(sc.images, sc.cameras, cfg)
    TIMINGS[("sfm", which, k, subpixel, aggregation)] = time.perf_counter() - t0
    return out


def perturbed_init(gt, seed=0):
    """Start inside the recovery basin: |dt| <= 30 mm, |ds| <= 0.2, |dr| <= 0.3 rad, z = 0."""
    from focus.model import ModelParams

    rng = np.random.default_rng(seed)

    def ball(radius):
        v = rng.normal(size=3)
        return v / np.linalg.norm(v) * radius * rng.uniform(0.8, 1.0)

    return ModelParams(gt.r + ball(0.3), gt.s + 0.2 * rng.choice([-1, 1]) * rng.uniform(0.8, 1.0),
                       gt.t + ball(30.0), np.zeros_like(gt.z_s), np.zeros_like(gt.z_p))


@functools.lru_cache(maxsize=None)
def optim_run(which: str, k: int = 10, use_uncertainty: bool = True, perturbed: bool = False):
    from focus.optim import OptimConfig, fit_scene

    if which == "clean":
        sc = clean_scene(k)
    elif which == "hetero":
        sc = hetero_scene()
    else:
        sc = noisy_subset(k)
    init = perturbed_init(sc.gt_params) if perturbed else None
    t0 = time.perf_counter()
    out = fit_scene(sc, OptimConfig(use_uncertainty=use_uncertainty), init=init)
    TIMINGS[("optim", which, k, use_uncertainty, perturbed)] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def clean10() -> Scene:
    return clean_scene(10)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
