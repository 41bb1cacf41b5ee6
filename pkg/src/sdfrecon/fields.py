"""Appearance models: a view-dependent radiance field and a physically
structured reflectance field.

The radiance head is a plain view-conditioned color MLP. The reflectance head
decomposes color into material properties (albedo, metallic, roughness), a
learned direct light, a learned indirect light queried along the reflected
view direction, and an occlusion probability that blends the two light
sources. Specular shading uses the split-sum approximation with a baked
pre-integrated GGX environment-BRDF table.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import nets, tensogrid, volren

DIR_FREQS = 4
R_MIN = 0.02  # roughness floor; keeps the GGX lobe finite

_POS_WIDTH = nets.encoding_width(3, tensogrid.POS_FREQS)  # 39
_DIR_WIDTH = nets.encoding_width(3, DIR_FREQS)  # 27
FEATURE_WIDTH = tensogrid.FEATURE_WIDTH

_DATA_DIR = Path(__file__).with_name("data")


def _encode_pos(p: ad.Var) -> ad.Var:
    return nets.positional_encoding(p, tensogrid.POS_FREQS)


def _encode_dir(d: ad.Var) -> ad.Var:
    return nets.positional_encoding(d, DIR_FREQS)


class RadianceNet:
    """c = net(gamma(p), n, v_f, gamma(d)), sigmoid RGB."""

    def __init__(self, store, rng, prefix: str = "render/radiance", create: bool = True):
        in_w = _POS_WIDTH + 3 + FEATURE_WIDTH + _DIR_WIDTH
        self.mlp = nets.Mlp(
            store, prefix, [in_w, 128, 128, 128, 3], rng,
            out_activation="sigmoid", create=create,
        )

    def __call__(self, tape: ad.Tape, p: ad.Var, n: ad.Var, v_f: ad.Var, d: ad.Var) -> ad.Var:
        x = ad.concat([_encode_pos(p), n, v_f, _encode_dir(d)], axis=1)
        return self.mlp(tape, x)

    def parameters(self):
        return self.mlp.parameters()


class MaterialNet:
    """(a, m, r) = net(gamma(p), v_f); a, m sigmoid, r in [R_MIN, 1]."""

    def __init__(self, store, rng, prefix: str = "render/material", create: bool = True):
        in_w = _POS_WIDTH + FEATURE_WIDTH
        self.mlp = nets.Mlp(store, prefix, [in_w, 128, 128, 128, 5], rng, create=create)

    def __call__(self, tape: ad.Tape, p: ad.Var, v_f: ad.Var):
        out = self.mlp(tape, ad.concat([_encode_pos(p), v_f], axis=1))
        a = ad.sigmoid(out[:, 0:3])
        m = ad.sigmoid(out[:, 3:4])
        r = ad.sigmoid(out[:, 4:5]) * (1.0 - R_MIN) + R_MIN
        return a, m, r

    def parameters(self):
        return self.mlp.parameters()


class LightNets:
    """Direct light (direction + roughness), indirect light, and occlusion.

    The direct net serves two query patterns: the diffuse term reads it at the
    surface normal with roughness pinned to 1 (fully blurred), the specular
    term at the reflected direction with the material roughness. Indirect
    light is position-dependent; occlusion predicts how much of the specular
    query is blocked by the object itself.
    """

    def __init__(self, store, rng, prefix: str = "render/light", create: bool = True):
        self.direct = nets.Mlp(
            store, f"{prefix}/direct", [_DIR_WIDTH + 1, 128, 128, 128, 3], rng,
            out_activation="softplus", create=create,
        )
        self.indirect = nets.Mlp(
            store, f"{prefix}/indirect",
            [_POS_WIDTH + _DIR_WIDTH + 1, 128, 128, 128, 3], rng,
            out_activation="softplus", create=create,
        )
        self.occ = nets.Mlp(
            store, f"{prefix}/occ", [_POS_WIDTH + _DIR_WIDTH, 128, 128, 128, 1], rng,
            out_activation="sigmoid", create=create,
        )

    def direct_light(self, tape: ad.Tape, d: ad.Var, r: ad.Var) -> ad.Var:
        return self.direct(tape, ad.concat([_encode_dir(d), r], axis=1))

    def indirect_light(self, tape: ad.Tape, p: ad.Var, w_r: ad.Var, r: ad.Var) -> ad.Var:
        return self.indirect(tape, ad.concat([_encode_pos(p), _encode_dir(w_r), r], axis=1))

    def occlusion(self, tape: ad.Tape, p: ad.Var, w_r: ad.Var) -> ad.Var:
        return self.occ(tape, ad.concat([_encode_pos(p), _encode_dir(w_r)], axis=1))

    def parameters(self):
        return self.direct.parameters() + self.indirect.parameters() + self.occ.parameters()


def reflect_dir(d, n):
    """Mirror d about n: w_r = d - 2 (d.n) n.

    d points from the camera toward the surface; for unit inputs the result is
    unit. Accepts arrays or tape variables ([N, 3] each).
    """
    if isinstance(d, ad.Var) or isinstance(n, ad.Var):
        dot = ad.reduce_sum(ad.mul(d, n), axis=1, keepdims=True)
        return ad.sub(d, ad.mul(n, ad.mul(dot, 2.0)))
    dot = np.sum(d * n, axis=1, keepdims=True)
    return d - 2.0 * dot * n


# ---------------------------------------------------------------------------
# pre-integrated environment BRDF


class EnvBrdfTable:
    """Baked split-sum scale/bias (A, B) over (roughness, sqrt(n.v)).

    Axis 0 is roughness, uniform on [0, 1]; axis 1 is x = sqrt(n.v), uniform
    on [x_min, 1]. The sqrt axis spends resolution near grazing angles where
    the Fresnel term varies fastest.
    """

    def __init__(self, a_tab: np.ndarray, b_tab: np.ndarray, x_min: float):
        if a_tab.shape != b_tab.shape or a_tab.ndim != 2:
            raise ValueError("A/B tables must share a 2-d shape")
        self.table = np.stack([a_tab, b_tab]).astype(np.float32)  # [2, Rr, Rx]
        self.x_min = float(x_min)

    @classmethod
    def load(cls, path=None) -> "EnvBrdfTable":
        path = Path(path) if path is not None else _DATA_DIR / "env_brdf_64.npz"
        with np.load(path) as z:
            return cls(z["A"], z["B"], float(z["x_min"]))

    def _coords_np(self, r: np.ndarray, mu: np.ndarray):
        rr, rx = self.table.shape[1:]
        rc = np.clip(r, 0.0, 1.0) * (rr - 1)
        x = np.sqrt(np.clip(mu, 0.0, 1.0))
        xc = np.clip((x - self.x_min) / (1.0 - self.x_min), 0.0, 1.0) * (rx - 1)
        return rc, xc

    def lookup(self, tape: ad.Tape, r: ad.Var, mu: ad.Var):
        """Differentiable (A, B) at roughness r and cosine mu, both [N, 1]."""
        rr, rx = self.table.shape[1:]
        n = r.data.shape[0]
        rc = ad.mul(ad.clip(r, 0.0, 1.0), float(rr - 1))
        x = ad.sqrt(ad.clip(mu, 1e-8, 1.0))
        xc = ad.mul(
            ad.clip(ad.mul(ad.sub(x, self.x_min), 1.0 / (1.0 - self.x_min)), 0.0, 1.0),
            float(rx - 1),
        )
        out = ad.grid_sample2d(
            tape.const(self.table), ad.reshape(rc, (n,)), ad.reshape(xc, (n,))
        )
        return out[:, 0:1], out[:, 1:2]

    def lookup_np(self, r: np.ndarray, mu: np.ndarray):
        rc, xc = self._coords_np(np.asarray(r, np.float64), np.asarray(mu, np.float64))
        coords = np.stack([rc, xc])
        a = ndimage.map_coordinates(self.table[0].astype(np.float64), coords, order=1, mode="nearest")
        b = ndimage.map_coordinates(self.table[1].astype(np.float64), coords, order=1, mode="nearest")
        return a, b


_ENV_TABLE: EnvBrdfTable | None = None


def env_brdf_table() -> EnvBrdfTable:
    global _ENV_TABLE
    if _ENV_TABLE is None:
        _ENV_TABLE = EnvBrdfTable.load()
    return _ENV_TABLE


def _ggx_g1(cos_t: np.ndarray, alpha2: float) -> np.ndarray:
    return 2.0 * cos_t / (cos_t + np.sqrt(alpha2 + (1.0 - alpha2) * cos_t**2))


def bake_env_brdf(res: int = 64, spp: int = 1 << 16, x_min: float = 0.05, seed: int = 0) -> dict:
    """Monte Carlo pre-integration of the GGX environment BRDF.

    For each (roughness, n.v) the split-sum specular response is
    F0 * A + B where A = E[(1 - fc) g], B = E[fc g] over NDF-importance-
    sampled half vectors, g = G vh / (nh nv), fc = (1 - vh)^5. Table nodes
    sit exactly on the lookup lattice so interpolation is exact at nodes.
    """
    rng = np.random.default_rng(seed)
    a_tab = np.zeros((res, res))
    b_tab = np.zeros((res, res))
    xs = x_min + (1.0 - x_min) * np.arange(res) / (res - 1)
    rs = np.arange(res) / (res - 1)
    for i, r in enumerate(rs):
        alpha2 = float(r) ** 4  # alpha = r^2
        if alpha2 < 1e-12:
            # mirror limit: h = n exactly
            mu = xs**2
            fc = (1.0 - mu) ** 5
            a_tab[i] = 1.0 - fc
            b_tab[i] = fc
            continue
        xi1 = rng.random(spp)
        xi2 = rng.random(spp)
        cos_h = np.sqrt((1.0 - xi1) / (1.0 + (alpha2 - 1.0) * xi1))
        sin_h = np.sqrt(np.maximum(1.0 - cos_h**2, 0.0))
        phi = 2.0 * np.pi * xi2
        h = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=1)
        for j, x in enumerate(xs):
            nv = x * x
            v = np.array([np.sqrt(max(1.0 - nv * nv, 0.0)), 0.0, nv])
            vh = h @ v
            l = 2.0 * vh[:, None] * h - v[None, :]
            nl = l[:, 2]
            ok = (nl > 0.0) & (vh > 0.0)
            g = _ggx_g1(nv, alpha2) * _ggx_g1(nl[ok], alpha2)
            gvis = g * vh[ok] / np.maximum(cos_h[ok] * nv, 1e-12)
            fc = (1.0 - vh[ok]) ** 5
            a_tab[i, j] = np.sum((1.0 - fc) * gvis) / spp
            b_tab[i, j] = np.sum(fc * gvis) / spp
    return {"A": a_tab.astype(np.float32), "B": b_tab.astype(np.float32),
            "x_min": np.float32(x_min)}


# ---------------------------------------------------------------------------
# split-sum shading


def split_sum_terms(tape: ad.Tape, a: ad.Var, m: ad.Var, r: ad.Var,
                    n: ad.Var, d: ad.Var, table: EnvBrdfTable | None = None):
    """Diffuse and specular reflectance weights of the microfacet model.

    rho_diff = a (1 - m); rho_spec = F0 A + B with F0 = 0.04 (1 - m) + a m.
    d is the camera-to-surface direction, so the view cosine is -(n.d),
    clamped to 1e-4 below grazing.
    """
    table = table if table is not None else env_brdf_table()
    dot = ad.reduce_sum(ad.mul(n, d), axis=1, keepdims=True)
    mu = ad.clip(ad.neg(dot), 1e-4, 1.0)
    a_term, b_term = table.lookup(tape, r, mu)
    one_minus_m = 1.0 - m
    f0 = ad.add(ad.mul(one_minus_m, 0.04), ad.mul(a, m))
    rho_spec = ad.add(ad.mul(f0, a_term), b_term)
    rho_diff = ad.mul(a, one_minus_m)
    return rho_diff, rho_spec


def split_sum_terms_np(a, m, r, n, d, table: EnvBrdfTable | None = None):
    """Array twin of split_sum_terms for oracle renderers."""
    table = table if table is not None else env_brdf_table()
    mu = np.clip(-np.sum(n * d, axis=1, keepdims=True), 1e-4, 1.0)
    a_t, b_t = table.lookup_np(r[:, 0], mu[:, 0])
    f0 = 0.04 * (1.0 - m) + a * m
    return a * (1.0 - m), f0 * a_t[:, None] + b_t[:, None]


def shade_reflectance(tape: ad.Tape, p: ad.Var, n: ad.Var, d: ad.Var, v_f: ad.Var,
                      material: MaterialNet, lights: LightNets,
                      table: EnvBrdfTable | None = None) -> dict:
    """Full reflectance color at surface samples.

    c_ref = rho_diff * L_diffuse + rho_spec * ((1 - u) L_direct + u L_indirect)
    with the diffuse light queried at the normal (roughness 1) and the
    specular lights at the reflected view direction. Returns the color along
    with the intermediates needed by the losses.
    """
    a, m, r = material(tape, p, v_f)
    w_r = reflect_dir(d, n)
    rho_diff, rho_spec = split_sum_terms(tape, a, m, r, n, d, table)
    ones = tape.const(np.ones_like(r.data))
    l_diff = lights.direct_light(tape, n, ones)
    l_spec = lights.direct_light(tape, w_r, r)
    l_ind = lights.indirect_light(tape, p, w_r, r)
    u = lights.occlusion(tape, p, w_r)
    spec_light = ad.add(ad.mul(1.0 - u, l_spec), ad.mul(u, l_ind))
    c_spec = ad.mul(rho_spec, spec_light)
    c_ref = ad.relu(ad.add(ad.mul(rho_diff, l_diff), c_spec))
    return {
        "color": c_ref, "c_spec": c_spec, "albedo": a, "metallic": m,
        "roughness": r, "occlusion": u, "w_r": w_r,
    }


def occlusion_target(p: np.ndarray, w_r: np.ndarray, grid, decoder, inv_s: float,
                     n_coarse: int = 48, offset: float = 1e-3) -> np.ndarray:
    """Volume-rendered opacity along secondary rays; the occlusion net's label.

    Marches from just off the surface along w_r and composites NeuS-style
    weights with no tape. The ray origin itself is the first sample point:
    a ray entering the body crosses the level set right at its origin, and
    without that sample the transition happens between origin and the first
    march point and its opacity is lost. Rays that never enter the domain
    return 0. Outward rays see a rising SDF and thus zero opacity.
    """
    o = (p + offset * w_r).astype(np.float32)
    d = w_r.astype(np.float32)

    def sdf_fn(q):
        return tensogrid.query_sdf_values(np.clip(q, -1.0, 1.0), grid, decoder)

    t, _, _, hit = volren.sample_ray(o, d, n_coarse, 0, sdf_fn, inv_s, rng=None)
    t = np.concatenate([np.zeros((len(t), 1), t.dtype), t], axis=1)
    pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
    s = sdf_fn(pts.reshape(-1, 3)).reshape(t.shape)
    w = volren.neus_weights_np(s, inv_s)
    u = np.clip(w.sum(axis=1), 0.0, 1.0)
    u[~hit] = 0.0
    return u
