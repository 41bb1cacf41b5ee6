"""Analytic ground truth and evaluation: SDF scenes, a sphere-tracing
reference renderer, dataset emission, and image/geometry metrics.

Scenes are closed-form signed distance fields with per-point materials and
analytic environment lights (directional lobes plus ambient), so reference
renders need no external assets. The renderer shares the split-sum BRDF
code path with the reconstruction pipeline; a full Monte Carlo mode exists
for physically exact references.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from . import fields

TRACE_EPS = 1e-5
TRACE_STEPS = 256


# ---------------------------------------------------------------------------
# signed-distance primitives (all vectorized [N, 3] -> [N])


def sdf_sphere(p: np.ndarray, radius: float = 0.6, center=None) -> np.ndarray:
    q = p if center is None else p - np.asarray(center, dtype=p.dtype)
    return np.linalg.norm(q, axis=1) - radius


def sdf_rounded_box(p: np.ndarray, half, rad: float) -> np.ndarray:
    q = np.abs(p) - np.asarray(half, dtype=p.dtype)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside - rad


def sdf_torus(p: np.ndarray, major: float = 0.5, minor: float = 0.15) -> np.ndarray:
    ring = np.sqrt(p[:, 0] ** 2 + p[:, 2] ** 2) - major
    return np.sqrt(ring**2 + p[:, 1] ** 2) - minor


def sdf_union(*vals: np.ndarray) -> np.ndarray:
    return np.minimum.reduce(vals)


def sdf_subtract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum(a, -b)


def sdf_intersect(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum(a, b)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Material:
    albedo: tuple = (0.7, 0.7, 0.7)
    metallic: float = 0.0
    roughness: float = 0.9

    def at(self, p: np.ndarray):
        n = len(p)
        a = np.broadcast_to(np.asarray(self.albedo, np.float64), (n, 3)).copy()
        m = np.full(n, self.metallic)
        r = np.full(n, self.roughness)
        return a, m, r


class AnalyticScene:
    """A closed-form SDF with a per-point material map.

    sdf_fn: [N,3] -> [N]; material_fn: [N,3] -> (a [N,3], m [N], r [N]).
    The body must stay inside [-0.9, 0.9]^3 and be 1-Lipschitz so sphere
    tracing from the [-1,1] bounds is safe.
    """

    def __init__(self, name: str, sdf_fn, material_fn):
        self.name = name
        self._sdf = sdf_fn
        self._material = material_fn

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self._sdf(np.asarray(p, np.float64))

    def material(self, p: np.ndarray):
        return self._material(np.asarray(p, np.float64))

    def normal(self, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
        g = np.empty((len(p), 3))
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = h
            g[:, i] = self.sdf(p + dp) - self.sdf(p - dp)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)


def diffuse_sphere_scene() -> AnalyticScene:
    mat = Material(albedo=(0.70, 0.45, 0.25), metallic=0.0, roughness=0.9)
    return AnalyticScene("diffuse_sphere", lambda p: sdf_sphere(p, 0.6), mat.at)


def rounded_box_scene() -> AnalyticScene:
    """Glossy rounded box; the relighting fixture."""
    mat = Material(albedo=(0.75, 0.55, 0.30), metallic=0.8, roughness=0.05)
    return AnalyticScene(
        "rounded_box", lambda p: sdf_rounded_box(p, (0.45, 0.35, 0.30), 0.05), mat.at
    )


def mixed_sphere_scene() -> AnalyticScene:
    """Sphere that is matte on x<0 and mirror-like metal on x>=0.

    Exercises the per-ray loss weighting: radiance-only supervision handles
    the matte half but misreads the specular half as geometry.
    """

    def material(p):
        n = len(p)
        spec = p[:, 0] >= 0.0
        a = np.where(spec[:, None], [0.85, 0.85, 0.90], [0.60, 0.35, 0.20])
        m = np.where(spec, 1.0, 0.0)
        r = np.where(spec, 0.08, 0.90)
        return a.astype(np.float64), m, r

    return AnalyticScene("mixed_sphere", lambda p: sdf_sphere(p, 0.6), material)


def flat_plate_scene() -> AnalyticScene:
    """Thin diffuse slab: large flat area where grid noise shows up in normals."""
    mat = Material(albedo=(0.55, 0.55, 0.55), metallic=0.0, roughness=0.85)
    return AnalyticScene(
        "flat_plate", lambda p: sdf_rounded_box(p, (0.68, 0.68, 0.06), 0.02), mat.at
    )


def csg_scene() -> AnalyticScene:
    """Sphere-minus-box with a torus union; exercises composed SDFs."""
    mat = Material(albedo=(0.6, 0.5, 0.4), metallic=0.0, roughness=0.7)

    def shape(p):
        body = sdf_subtract(sdf_sphere(p, 0.55), sdf_rounded_box(p, (0.6, 0.2, 0.2), 0.0))
        return sdf_union(body, sdf_torus(p, 0.55, 0.10))

    return AnalyticScene("csg", shape, mat.at)


SCENES = {
    "diffuse_sphere": diffuse_sphere_scene,
    "rounded_box": rounded_box_scene,
    "mixed_sphere": mixed_sphere_scene,
    "flat_plate": flat_plate_scene,
    "csg": csg_scene,
}


# ---------------------------------------------------------------------------
# analytic environment lights: ambient + sum of (direction, color, exponent)


def _lobe(dx, dy, dz, color, k):
    d = np.array([dx, dy, dz], np.float64)
    return d / np.linalg.norm(d), np.asarray(color, np.float64), float(k)


LIGHT_PRESETS = (
    # 0: warm key + cool fill; the training light
    {"ambient": (0.18, 0.18, 0.22),
     "lobes": [_lobe(0.5, 0.3, 0.8, (1.8, 1.6, 1.2), 8.0),
               _lobe(-0.7, 0.2, 0.4, (0.5, 0.6, 0.9), 4.0)]},
    # 1: single hard light from +x
    {"ambient": (0.10, 0.10, 0.10),
     "lobes": [_lobe(0.9, 0.2, 0.35, (2.2, 2.0, 1.8), 24.0)]},
    # 2: two-tone rim lighting
    {"ambient": (0.12, 0.12, 0.15),
     "lobes": [_lobe(-0.4, 0.8, 0.45, (1.4, 0.9, 0.6), 10.0),
               _lobe(0.6, -0.5, 0.6, (0.5, 0.8, 1.3), 10.0)]},
    # 3: soft overhead dome
    {"ambient": (0.25, 0.24, 0.22),
     "lobes": [_lobe(0.0, 0.0, 1.0, (1.0, 1.0, 1.0), 2.0)]},
    # 4: uniform unit furnace (analytic test light)
    {"ambient": (1.0, 1.0, 1.0), "lobes": []},
)
FURNACE_PRESET = 4


def env_radiance(d: np.ndarray, preset: int) -> np.ndarray:
    """Incoming radiance [N, 3] from directions d (unit, pointing at the light)."""
    cfg = LIGHT_PRESETS[preset]
    out = np.broadcast_to(np.asarray(cfg["ambient"], np.float64), (len(d), 3)).copy()
    for axis, color, k in cfg["lobes"]:
        c = np.maximum(d @ axis, 0.0) ** k
        out += c[:, None] * color
    return out


def _orthonormal_frame(n: np.ndarray):
    """Tangent frames [N, 3] x2 for unit axes n."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    t = np.cross(helper, n)
    t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    b = np.cross(n, t)
    return t, b


def prefiltered_env(dirs: np.ndarray, roughness, preset: int,
                    spp: int = 128, seed: int = 0) -> np.ndarray:
    """Lobe-averaged environment radiance: the analytic stand-in for a
    prefiltered mip chain.

    roughness >= 0.99 averages over the cosine hemisphere around dirs (the
    diffuse convolution divided by pi); smaller values average over a GGX
    NDF lobe with (n.l) weighting, the standard split-sum prefilter with
    n = v = dirs.
    """
    rng = np.random.default_rng(seed)
    n = len(dirs)
    r = np.broadcast_to(np.asarray(roughness, np.float64).reshape(-1), (n,))
    t, b = _orthonormal_frame(dirs)
    u1 = rng.random((n, spp))
    u2 = rng.random((n, spp))
    out = np.zeros((n, 3))
    diffuse = r >= 0.99
    if diffuse.any():
        idx = np.where(diffuse)[0]
        ct = np.sqrt(1.0 - u1[idx])
        st = np.sqrt(u1[idx])
        ph = 2 * np.pi * u2[idx]
        l = (st * np.cos(ph))[..., None] * t[idx, None] \
            + (st * np.sin(ph))[..., None] * b[idx, None] \
            + ct[..., None] * dirs[idx, None]
        out[idx] = env_radiance(l.reshape(-1, 3), preset).reshape(len(idx), spp, 3).mean(axis=1)
    glossy = ~diffuse
    if glossy.any():
        idx = np.where(glossy)[0]
        alpha2 = (r[idx] ** 2)[:, None] ** 2
        ct = np.sqrt((1.0 - u1[idx]) / (1.0 + (alpha2 - 1.0) * u1[idx]))
        st = np.sqrt(np.maximum(1.0 - ct**2, 0.0))
        ph = 2 * np.pi * u2[idx]
        h = (st * np.cos(ph))[..., None] * t[idx, None] \
            + (st * np.sin(ph))[..., None] * b[idx, None] \
            + ct[..., None] * dirs[idx, None]
        vh = np.einsum("nsk,nk->ns", h, dirs[idx])
        l = 2.0 * vh[..., None] * h - dirs[idx, None]
        nl = np.maximum(np.einsum("nsk,nk->ns", l, dirs[idx]), 0.0)
        rad = env_radiance(l.reshape(-1, 3), preset).reshape(len(idx), -1, 3)
        wsum = np.maximum(nl.sum(axis=1, keepdims=True), 1e-9)
        out[idx] = (rad * nl[..., None]).sum(axis=1) / wsum
    return out


class OracleLights:
    """Analytic-light twin of the learned light heads (same query patterns)."""

    def __init__(self, preset: int, spp: int = 128, seed: int = 0):
        self.preset = preset
        self.spp = spp
        self.seed = seed

    def direct_np(self, d: np.ndarray, r: np.ndarray) -> np.ndarray:
        return prefiltered_env(d, r, self.preset, self.spp, self.seed)


# ---------------------------------------------------------------------------
# sphere tracing


def sphere_trace(scene: AnalyticScene, o: np.ndarray, d: np.ndarray,
                 t_max: float = 8.0):
    """March |s| to < 1e-5; returns (t [N], hit [N] bool)."""
    n = len(o)
    t = np.zeros(n)
    hit = np.zeros(n, bool)
    active = np.ones(n, bool)
    for _ in range(TRACE_STEPS):
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        p = o[idx] + t[idx, None] * d[idx]
        s = scene.sdf(p)
        conv = np.abs(s) < TRACE_EPS
        hit[idx[conv]] = True
        active[idx[conv]] = False
        t[idx] += s
        escaped = t[idx] > t_max
        active[idx[escaped]] = False
    return t, hit


# ---------------------------------------------------------------------------
# cameras


def fibonacci_directions(n: int) -> np.ndarray:
    """n roughly even directions on the unit sphere (spiral lattice)."""
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    theta = np.pi * (1.0 + 5.0**0.5) * i
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)


def look_at_pose(eye: np.ndarray) -> np.ndarray:
    """Camera-to-world 4x4 looking from eye at the origin (z = forward)."""
    eye = np.asarray(eye, np.float64)
    fwd = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.99 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose


def camera_rays(pose: np.ndarray, fov_deg: float, width: int, height: int):
    """Pinhole rays through pixel centers; returns (o [HW,3], d [HW,3] unit)."""
    tan = np.tan(np.radians(fov_deg) / 2.0)
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    gx, gy = np.meshgrid(xs * tan, ys * tan)
    local = np.stack([gx.ravel(), gy.ravel(), np.ones(width * height)], axis=1)
    d = local @ pose[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(pose[:3, 3], d.shape).copy()
    return o, d


# ---------------------------------------------------------------------------
# reference shading and rendering


def shade_split_sum(scene: AnalyticScene, p: np.ndarray, d: np.ndarray,
                    preset: int, spp: int = 128, seed: int = 0) -> np.ndarray:
    """Split-sum shading with analytic prefiltered light and exact geometry.

    Shares fields.split_sum_terms_np and the baked (A, B) table with the
    reconstruction pipeline; only the light source differs (closed-form
    environment instead of learned heads).
    """
    n = scene.normal(p)
    a, m, r = scene.material(p)
    rho_diff, rho_spec = fields.split_sum_terms_np(a, m[:, None], r[:, None], n, d)
    w_r = fields.reflect_dir(d, n)
    l_diff = prefiltered_env(n, 1.0, preset, spp, seed)
    l_spec = prefiltered_env(w_r, r, preset, spp, seed + 1)
    return rho_diff * l_diff + rho_spec * l_spec


def shade_monte_carlo(scene: AnalyticScene, p: np.ndarray, d: np.ndarray,
                      preset: int, spp: int = 128, seed: int = 0,
                      shadows: bool = False) -> np.ndarray:
    """Physically exact single-bounce estimate: cosine samples for the
    diffuse lobe, GGX NDF samples with full weights for the specular lobe."""
    rng = np.random.default_rng(seed)
    n = scene.normal(p)
    a, m, r = scene.material(p)
    f0 = 0.04 * (1.0 - m[:, None]) + a * m[:, None]
    a_diff = a * (1.0 - m[:, None])
    v = -d
    nv = np.maximum(np.einsum("nk,nk->n", n, v), 1e-4)
    t, b = _orthonormal_frame(n)
    half = spp // 2

    u1 = rng.random((len(p), half))
    u2 = rng.random((len(p), half))
    ct = np.sqrt(1.0 - u1)
    st = np.sqrt(u1)
    ph = 2 * np.pi * u2
    l = (st * np.cos(ph))[..., None] * t[:, None] \
        + (st * np.sin(ph))[..., None] * b[:, None] + ct[..., None] * n[:, None]
    rad = _masked_radiance(scene, p, l, preset, shadows)
    c_diff = a_diff * rad.mean(axis=1)

    u1 = rng.random((len(p), half))
    u2 = rng.random((len(p), half))
    alpha2 = (np.maximum(r, fields.R_MIN) ** 2)[:, None] ** 2
    ct = np.sqrt((1.0 - u1) / (1.0 + (alpha2 - 1.0) * u1))
    st = np.sqrt(np.maximum(1.0 - ct**2, 0.0))
    ph = 2 * np.pi * u2
    h = (st * np.cos(ph))[..., None] * t[:, None] \
        + (st * np.sin(ph))[..., None] * b[:, None] + ct[..., None] * n[:, None]
    vh = np.maximum(np.einsum("nsk,nk->ns", h, v), 1e-9)
    l = 2.0 * vh[..., None] * h - v[:, None]
    nl = np.einsum("nsk,nk->ns", l, n)
    good = nl > 0.0
    g = fields._ggx_g1(nv[:, None], alpha2) * fields._ggx_g1(np.maximum(nl, 1e-9), alpha2)
    gvis = np.where(good, g * vh / np.maximum(ct * nv[:, None], 1e-9), 0.0)
    fc = (1.0 - vh) ** 5
    fres = f0[:, None, :] * (1.0 - fc[..., None]) + fc[..., None]
    rad = _masked_radiance(scene, p, l, preset, shadows)
    c_spec = (fres * gvis[..., None] * rad).mean(axis=1)
    return c_diff + c_spec


def _masked_radiance(scene, p, l, preset, shadows):
    rad = env_radiance(l.reshape(-1, 3), preset).reshape(l.shape)
    if shadows:
        o = p[:, None, :] + 1e-3 * l
        _, hit = sphere_trace(scene, o.reshape(-1, 3), l.reshape(-1, 3), t_max=4.0)
        rad = rad * (~hit.reshape(l.shape[:2]))[..., None]
    return rad


def render_view(scene: AnalyticScene, pose: np.ndarray, fov_deg: float,
                width: int, height: int, preset: int, mode: str = "split",
                spp: int = 128, seed: int = 0) -> dict:
    """Reference render: linear RGB image, normals, mask, and depth maps."""
    o, d = camera_rays(pose, fov_deg, width, height)
    t, hit = sphere_trace(scene, o, d)
    img = np.zeros((width * height, 3))
    nrm = np.zeros((width * height, 3))
    depth = np.zeros(width * height)
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        nrm[hit] = scene.normal(p)
        depth[hit] = t[hit]
        shade = shade_split_sum if mode == "split" else shade_monte_carlo
        img[hit] = shade(scene, p, d[hit], preset, spp=spp, seed=seed)
    return {
        "image": img.reshape(height, width, 3),
        "normal": nrm.reshape(height, width, 3),
        "mask": hit.reshape(height, width),
        "depth": depth.reshape(height, width),
    }


# ---------------------------------------------------------------------------
# dataset emission


def make_dataset(scene: AnalyticScene, out_dir, n_views: int = 64,
                 resolution: int = 64, fov_deg: float = 40.0,
                 cam_radius: float = 2.2, train_preset: int = 0,
                 relight_presets=(1, 2, 3), relight_views: int = 8,
                 mode: str = "split", spp: int = 128, seed: int = 0) -> dict:
    """Render a posed dataset to disk and return its manifest.

    Layout: manifest.json, images/NNN.png, masks/NNN.png, normals/NNN.pfm.
    Training frames come first (fixed light), then relight frames under each
    held-out preset. Fully deterministic for a given seed.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "normals"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    dirs = fibonacci_directions(n_views)
    frames = [(look_at_pose(cam_radius * v), train_preset, "train") for v in dirs]
    rel_dirs = fibonacci_directions(relight_views * len(relight_presets) or 1)
    for j, preset in enumerate(relight_presets):
        for v in rel_dirs[j * relight_views:(j + 1) * relight_views]:
            frames.append((look_at_pose(cam_radius * v), preset, "relight"))

    manifest = {
        "scene": scene.name,
        "resolution": resolution,
        "fov_deg": fov_deg,
        "color_space": "linear",
        "seed": seed,
        "frames": [],
    }
    for i, (pose, preset, split) in enumerate(frames):
        view = render_view(scene, pose, fov_deg, resolution, resolution,
                           preset, mode=mode, spp=spp, seed=seed + 1000 * i)
        stem = f"{i:03d}"
        _write_png(out / "images" / f"{stem}.png", view["image"])
        _write_png(out / "masks" / f"{stem}.png", view["mask"].astype(np.float64))
        write_pfm(out / "normals" / f"{stem}.pfm", view["normal"].astype(np.float32))
        manifest["frames"].append({
            "file": stem,
            "split": split,
            "light": preset,
            "pose": [round(float(x), 12) for x in pose.reshape(-1)],
        })
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_manifest(path) -> dict:
    with open(Path(path) / "manifest.json") as f:
        return json.load(f)


def frame_pose(frame: dict) -> np.ndarray:
    return np.asarray(frame["pose"], np.float64).reshape(4, 4)


def load_frame(root, frame: dict):
    """(image [H,W,3] float in [0,1], mask [H,W] bool, normal [H,W,3])."""
    root = Path(root)
    img = np.asarray(Image.open(root / "images" / f"{frame['file']}.png"),
                     np.float64) / 255.0
    mask = np.asarray(Image.open(root / "masks" / f"{frame['file']}.png")) > 127
    nrm = read_pfm(root / "normals" / f"{frame['file']}.pfm")
    return img, mask, nrm


def _write_png(path, arr: np.ndarray) -> None:
    out = np.clip(np.asarray(arr, np.float64), 0.0, 1.0)
    Image.fromarray(np.round(out * 255.0).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# PFM float maps (little-endian)


def write_pfm(path, img: np.ndarray) -> None:
    img = np.asarray(img, np.float32)
    color = img.ndim == 3
    header = b"PF\n" if color else b"Pf\n"
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian payload
        f.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), "<f4" if scale < 0 else ">f4")
    img = data.reshape(h, w, 3) if kind == b"PF" else data.reshape(h, w)
    return np.flipud(img).copy()


# ---------------------------------------------------------------------------
# metrics


def normal_mae(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean angular error in degrees over masked pixels."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("normal_mae: empty mask")
    p = pred[mask].reshape(-1, 3)
    g = gt[mask].reshape(-1, 3)
    p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    cosang = np.clip(np.einsum("nk,nk->n", p, g), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosang)).mean())


def sample_triangles(verts: np.ndarray, faces: np.ndarray, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform surface samples from a triangle mesh."""
    if len(faces) == 0:
        raise ValueError("sample_triangles: empty mesh")
    a, b, c = (verts[faces[:, i]] for i in range(3))
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    probs = area / area.sum()
    tri = rng.choice(len(faces), size=n, p=probs)
    u = rng.random((n, 1))
    v = rng.random((n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    return a[tri] + u * (b[tri] - a[tri]) + v * (c[tri] - a[tri])


def chamfer(pts_a: np.ndarray, pts_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between point sets."""
    if len(pts_a) == 0 or len(pts_b) == 0:
        raise ValueError("chamfer: empty point set")
    d_ab = cKDTree(pts_b).query(pts_a)[0]
    d_ba = cKDTree(pts_a).query(pts_b)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def chamfer_to_sdf(pts: np.ndarray, sdf_fn) -> float:
    """One-sided surface error against an analytic SDF: mean |s|."""
    if len(pts) == 0:
        raise ValueError("chamfer_to_sdf: empty point set")
    return float(np.abs(sdf_fn(pts)).mean())


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio on [0, 1] images, capped for exact matches."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - b) ** 2))
    if mse < 1e-10:
        return cap
    return min(cap, float(10.0 * np.log10(1.0 / mse)))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, population covariance)."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    kwargs = dict(data_range=1.0, gaussian_weights=True, sigma=1.5,
                  use_sample_covariance=False)
    if a.ndim == 3:
        kwargs["channel_axis"] = -1
    return float(structural_similarity(np.asarray(a, np.float64),
                                       np.asarray(b, np.float64), **kwargs))
