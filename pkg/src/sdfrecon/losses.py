"""Training objectives for both reconstruction stages.

Color terms come in two flavors (radiance path, reflectance path) blended
per ray by composited roughness: rough surfaces lean on the radiance field,
glossy ones on the physically structured reflectance field. Geometry
regularizers (Eikonal, Hessian or mask, TV, Gaussian) and the reflectance
bookkeeping terms (occlusion BCE, early-specular stabilization) assemble
into one weighted stage total. Everything is a pure function of tape vars;
reports carry plain floats for logging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .tensogrid import stencil_grad, stencil_laplacian, stencil_points

_BCE_EPS = 1e-5


@dataclass
class LossWeights:
    """Per-term weights of the geometry-stage total.

    The Hessian smoothness term and the mask term are alternatives: mask
    supervision replaces the Hessian prior when silhouettes are available.
    """

    lambda_e: float = 0.1     # Eikonal
    lambda_t: float = 0.1     # factor total variation
    lambda_g: float = 1e-5    # factor Gaussian smoothness
    lambda_h: float = 0.5     # Hessian (maskless mode)
    lambda_mask: float = 5e-4  # mask BCE (mask mode)
    lambda_m: float = 0.1     # material smoothness (second stage)

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass
class LossReport:
    """Raw term values, their weights, and the weighted total, as floats."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    total: float = 0.0

    def recomputed_total(self) -> float:
        return float(sum(self.weights[k] * v for k, v in self.terms.items()))

    def log_line(self, step: int) -> str:
        rec = {"step": step, "total": self.total}
        rec.update({k: float(v) for k, v in self.terms.items()})
        return json.dumps(rec)


# ---------------------------------------------------------------------------
# color terms


def per_ray_color_loss(c: ad.Var, c_gt: np.ndarray) -> ad.Var:
    """Squared RGB error summed over channels, one scalar per ray [N]."""
    diff = ad.sub(c, c.tape.const(np.asarray(c_gt, dtype=c.data.dtype)))
    return ad.reduce_sum(ad.mul(diff, diff), axis=1)


def color_loss(c: ad.Var, c_gt: np.ndarray) -> ad.Var:
    """Mean over the ray batch of the per-pixel squared RGB error."""
    return ad.reduce_mean(per_ray_color_loss(c, c_gt))


def composite_roughness(w: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Per-ray roughness from sample weights, detached by construction.

    w: [N, S] volume weights, r: [N, S] sample roughness. Rays with little
    mass keep a neutral 1 (pure radiance supervision) rather than an
    arbitrary normalized value.
    """
    mass = w.sum(axis=1)
    r_bar = np.where(mass > 1e-6, (w * r).sum(axis=1) / np.maximum(mass, 1e-6), 1.0)
    return np.clip(r_bar, 0.0, 1.0)


def roughness_aware_loss(l_rad: ad.Var, l_ref: ad.Var, r_bar: np.ndarray) -> ad.Var:
    """Per-ray blend r_bar*l_rad + (1 - r_bar)*l_ref, averaged over rays.

    r_bar must be a plain array (already detached): the blend weight carries
    no gradient back into the roughness head, only the reflectance shading
    path does.
    """
    r_bar = np.clip(np.asarray(r_bar, dtype=l_rad.data.dtype), 0.0, 1.0)
    w = l_rad.tape.const(r_bar)
    return ad.reduce_mean(ad.add(ad.mul(w, l_rad), ad.mul(1.0 - w, l_ref)))


# ---------------------------------------------------------------------------
# geometry regularizers


def eikonal_loss(tape: ad.Tape, p: np.ndarray, query_fn, h: float) -> ad.Var:
    """Mean squared deviation of the FD gradient norm from 1 at points p.

    query_fn(tape, pts_var) -> SDF values Var; the finite-difference stencil
    keeps the term differentiable through the field without second-order
    autodiff.
    """
    n = len(p)
    s7 = query_fn(tape, tape.const(stencil_points(p, h)))
    g = stencil_grad(s7, n, h)
    norm = ad.sqrt(ad.reduce_sum(ad.mul(g, g), axis=1) + 1e-12)
    dev = ad.sub(norm, tape.const(np.ones(n, dtype=norm.data.dtype)))
    return ad.reduce_mean(ad.mul(dev, dev))


def hessian_loss(tape: ad.Tape, p: np.ndarray, query_fn, h: float) -> ad.Var:
    """Mean squared 7-point FD Laplacian of the SDF at points p."""
    n = len(p)
    s7 = query_fn(tape, tape.const(stencil_points(p, h)))
    lap = stencil_laplacian(s7, n, h)
    return ad.reduce_mean(ad.mul(lap, lap))


def mask_loss(wsum: ad.Var, mask: np.ndarray) -> ad.Var:
    """Binary cross-entropy between per-ray opacity and the silhouette."""
    m = np.asarray(mask, dtype=wsum.data.dtype)
    o = ad.clip(wsum, _BCE_EPS, 1.0 - _BCE_EPS)
    mk = wsum.tape.const(m)
    ll = ad.add(ad.mul(mk, ad.log(o)), ad.mul(1.0 - mk, ad.log(1.0 - o)))
    return ad.neg(ad.reduce_mean(ll))


def occlusion_bce(u: ad.Var, u_target: np.ndarray) -> ad.Var:
    """Cross-entropy of the occlusion head against ray-marched soft labels."""
    t = np.clip(np.asarray(u_target, dtype=u.data.dtype), 0.0, 1.0)
    o = ad.clip(u, _BCE_EPS, 1.0 - _BCE_EPS)
    tv = u.tape.const(t)
    ll = ad.add(ad.mul(tv, ad.log(o)), ad.mul(1.0 - tv, ad.log(1.0 - o)))
    return ad.neg(ad.reduce_mean(ll))


def stabilization_loss(c_spec: ad.Var, step: int, warmup: int) -> ad.Var:
    """Early penalty on specular energy, fading linearly to zero by `warmup`."""
    w = max(0.0, 1.0 - step / max(warmup, 1))
    mag = ad.reduce_mean(ad.reduce_sum(ad.mul(c_spec, c_spec), axis=1))
    return ad.mul(mag, w)


# ---------------------------------------------------------------------------
# material smoothness


def jitter_points(p: np.ndarray, rng: np.random.Generator, radius: float = 0.01) -> np.ndarray:
    """Points displaced uniformly within a ball of the given radius."""
    d = rng.standard_normal(p.shape).astype(p.dtype)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    u = rng.random((len(p), 1)).astype(p.dtype) ** (1.0 / 3.0)
    return np.clip(p + radius * u * d, -1.0, 1.0)


def material_reg_loss(mats, mats_jit) -> ad.Var:
    """Mean absolute change of (albedo, metallic, roughness) under jitter.

    mats and mats_jit are (a, m, r) tuples evaluated at p and at jittered
    points; each contributes its mean |difference|.
    """
    total = None
    for x, y in zip(mats, mats_jit):
        term = ad.reduce_mean(ad.absval(ad.sub(x, y)))
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# stage assembly


def geometry_stage_total(terms: dict, weights: LossWeights, mask_mode: bool):
    """Weighted geometry-stage objective and its float report.

    Expects term keys: c, e, g, t, o, s, and h (maskless) or mask (mask
    mode). Color, occlusion, and stabilization enter at weight 1.
    """
    wmap = {
        "c": 1.0,
        "e": weights.lambda_e,
        "g": weights.lambda_g,
        "t": weights.lambda_t,
        "o": 1.0,
        "s": 1.0,
    }
    if mask_mode:
        wmap["mask"] = weights.lambda_mask
    else:
        wmap["h"] = weights.lambda_h
    return _weighted_total(terms, wmap)


def material_stage_total(terms: dict, weights: LossWeights):
    """Second-stage objective: color plus weighted material smoothness."""
    return _weighted_total(terms, {"c": 1.0, "m": weights.lambda_m})


def _weighted_total(terms: dict, wmap: dict):
    missing = set(wmap) - set(terms)
    extra = set(terms) - set(wmap)
    if missing or extra:
        raise ValueError(f"loss terms mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    total = None
    for key, w in wmap.items():
        part = ad.mul(terms[key], w)
        total = part if total is None else ad.add(total, part)
    report = LossReport(
        terms={k: float(v.data) for k, v in terms.items()},
        weights=dict(wmap),
        total=float(total.data),
    )
    return total, report
