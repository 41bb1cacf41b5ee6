"""Session fixtures for trained artifacts, cached on disk across runs.

Heavy fixtures (regressions, end-to-end trainings, datasets) are built once
and reused by module tests and the acceptance suite. Delete tests/.cache to
force a cold rebuild with honest timings.
"""

import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdfrecon import autodiff as ad
from sdfrecon import tensogrid, trainer

CACHE = Path(__file__).parent / ".cache"
CACHE.mkdir(exist_ok=True)


def sphere_sdf(p: np.ndarray, radius: float = 1.0) -> np.ndarray:
    return np.linalg.norm(p, axis=1) - radius


def _load_field(path):
    store, meta = ad.load_checkpoint(path)
    grid = tensogrid.TensorGridVM(store, "grid", meta["K"], meta["R"], create=False)
    dec = tensogrid.SdfDecoder(store, meta["K"], None, create=False)
    return store, grid, dec, meta


@pytest.fixture(scope="session")
def sphere_fit():
    """Field regressed directly to the analytic unit-sphere SDF.

    Returns a dict with store / grid / decoder / radius / elapsed. elapsed is
    measured on the run that actually built it (cold cache), then reused.
    """
    path = CACHE / "sphere_fit.zip"
    if path.exists():
        store, grid, dec, meta = _load_field(path)
        return {"store": store, "grid": grid, "decoder": dec,
                "radius": meta["radius"], "elapsed": meta["elapsed"]}
    K, R = 12, 64
    store = ad.ParamStore()
    rng = np.random.default_rng(11)
    grid = tensogrid.TensorGridVM(store, "grid", K, R, rng=rng)
    dec = tensogrid.SdfDecoder(store, K, rng)
    t0 = time.perf_counter()
    trainer.fit_sdf_regression(store, grid, dec, sphere_sdf, steps=900, seed=3)
    elapsed = time.perf_counter() - t0
    ad.save_checkpoint(path, store, {"K": K, "R": R, "elapsed": elapsed, "radius": 1.0})
    return {"store": store, "grid": grid, "decoder": dec,
            "radius": 1.0, "elapsed": elapsed}


@pytest.fixture(scope="session")
def sphere_init_field():
    """Small field after the geometric sphere initialization only."""
    path = CACHE / "sphere_init.zip"
    if path.exists():
        store, grid, dec, _ = _load_field(path)
        return store, grid, dec
    K, R = 12, 32
    store = ad.ParamStore()
    rng = np.random.default_rng(5)
    grid = tensogrid.TensorGridVM(store, "grid", K, R, rng=rng)
    dec = tensogrid.SdfDecoder(store, K, rng)
    trainer.sphere_init(store, grid, dec, seed=2)
    ad.save_checkpoint(path, store, {"K": K, "R": R})
    return store, grid, dec
