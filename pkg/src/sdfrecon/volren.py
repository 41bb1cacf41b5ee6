"""SDF volume rendering: ray sampling, opacity weights, aggregation.

Weights follow the opaque-density construction for SDFs: per-interval alpha
from the ratio of logistic CDF values of consecutive scaled SDF samples,
clamped at zero, composited front to back.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from . import autodiff as ad

EPS_ALPHA = 1e-6
INV_S_MIN, INV_S_MAX = 1.0, 1e4
INV_S_INIT = 20.0


def intersect_box(o: np.ndarray, d: np.ndarray, box: float = 1.0):
    """Slab test against [-box, box]^3.

    Returns (t_near, t_far, hit). Rays starting inside get t_near clamped to 0.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-box - o) * inv
        t1 = (box - o) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axes with zero direction: inside slab -> (-inf, inf), outside -> no hit
    par_in = (np.abs(d) < 1e-12) & (np.abs(o) <= box)
    par_out = (np.abs(d) < 1e-12) & (np.abs(o) > box)
    lo = np.where(np.abs(d) < 1e-12, np.where(par_in, -np.inf, np.inf), lo)
    hi = np.where(np.abs(d) < 1e-12, np.where(par_in, np.inf, -np.inf), hi)
    t_near = np.max(lo, axis=-1)
    t_far = np.min(hi, axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = (t_near < t_far) & ~np.any(par_out, axis=-1)
    return t_near, t_far, hit


def stratified_samples(t_near, t_far, n: int, rng: np.random.Generator | None):
    """[N, n] strictly increasing t values, one jittered sample per bin."""
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    N = t_near.shape[0]
    edges = np.linspace(0.0, 1.0, n + 1)
    u = edges[:-1] + (rng.uniform(size=(N, n)) if rng is not None else 0.5) / n
    return (t_near[:, None] + (t_far - t_near)[:, None] * u).astype(np.float32)


def importance_samples(t: np.ndarray, w: np.ndarray, n_fine: int,
                       rng: np.random.Generator | None):
    """Inverse-CDF draws over the sample intervals, density proportional to w.

    t: [N, S] sorted sample positions; w: [N, S-1] nonnegative interval
    weights. Returns [N, n_fine] (unsorted).
    """
    N, S = t.shape
    w = w + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((N, 1)), np.cumsum(pdf, axis=1)], axis=1)
    if rng is None:
        u = np.linspace(0.0, 1.0, n_fine + 2)[1:-1]
        u = np.broadcast_to(u, (N, n_fine)).copy()
    else:
        u = rng.uniform(size=(N, n_fine))
    # vectorized row-wise searchsorted: count cdf entries <= u
    idx = np.clip((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), 1, S - 1)
    below = idx - 1
    cdf_lo = np.take_along_axis(cdf, below, axis=1)
    cdf_hi = np.take_along_axis(cdf, idx, axis=1)
    t_lo = np.take_along_axis(t, below, axis=1)
    t_hi = np.take_along_axis(t, idx, axis=1)
    denom = np.where(cdf_hi - cdf_lo < 1e-10, 1.0, cdf_hi - cdf_lo)
    frac = (u - cdf_lo) / denom
    return (t_lo + frac * (t_hi - t_lo)).astype(np.float32)


def sample_ray(o: np.ndarray, d: np.ndarray, n_coarse: int, n_fine: int,
               sdf_fn, inv_s: float, rng: np.random.Generator | None,
               box: float = 1.0):
    """Coarse stratified samples plus one importance round against coarse weights.

    sdf_fn: callable [M,3] -> [M] plain-numpy SDF used only to place fine
    samples (no gradients). Returns (t [N, n_coarse+n_fine] sorted, t_near,
    t_far, hit mask). Rays that miss the box get empty (NaN-free, zero-span)
    sample rows and hit=False.
    """
    t_near, t_far, hit = intersect_box(o, d, box)
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 1e-3)
    t = stratified_samples(t_near, t_far, n_coarse, rng)
    if n_fine > 0 and hit.any():
        pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
        s = sdf_fn(np.clip(pts, -1.0, 1.0)).reshape(t.shape)
        w = neus_weights_np(s, inv_s)
        t_f = importance_samples(t, w, n_fine, rng)
        t = np.sort(np.concatenate([t, t_f], axis=1), axis=1)
    return t, t_near, t_far, hit


def _sigmoid(x):
    return special.expit(x)


def neus_weights_np(s: np.ndarray, inv_s: float) -> np.ndarray:
    """Plain-numpy weights for [N, S] SDF samples; returns [N, S-1]."""
    phi = _sigmoid(s * inv_s)
    alpha = np.maximum((phi[:, :-1] - phi[:, 1:]) / np.maximum(phi[:, :-1], EPS_ALPHA), 0.0)
    trans = np.cumprod(np.concatenate([np.ones((len(s), 1)), 1.0 - alpha + 1e-10], axis=1),
                       axis=1)[:, :-1]
    return alpha * trans


def neus_weights(s: ad.Var, inv_s: ad.Var | float) -> ad.Var:
    """Differentiable weights from SDF samples s [N, S]; returns w [N, S-1].

    alpha_i = max((phi(s_i k) - phi(s_{i+1} k)) / max(phi(s_i k), eps), 0),
    w_i = alpha_i * prod_{j<i} (1 - alpha_j), phi = logistic sigmoid, k = inv_s.
    """
    tape = s.tape
    scaled = ad.mul(s, inv_s) if not isinstance(inv_s, ad.Var) else ad.mul(
        s, ad.reshape(inv_s, (1, 1)))
    phi = ad.sigmoid(scaled)
    prev = phi[:, :-1]
    nxt = phi[:, 1:]
    alpha = ad.maximum(ad.div(ad.sub(prev, nxt), ad.maximum(prev, EPS_ALPHA)), 0.0)
    n = alpha.data.shape[0]
    log_t = ad.cumsum(ad.log(ad.add(ad.sub(tape.const_like(1.0, alpha), alpha), 1e-10)),
                      axis=1)
    trans = ad.exp(ad.concat(
        [tape.const(np.zeros((n, 1), dtype=alpha.data.dtype)), log_t[:, :-1]], axis=1))
    return ad.mul(alpha, trans)


def composite(w: ad.Var, x: ad.Var) -> ad.Var:
    """Sum_i w_i x_i per ray; x may be [N, S-1] or [N, S-1, C]."""
    if x.data.ndim == w.data.ndim + 1:
        return ad.reduce_sum(ad.mul(ad.reshape(w, w.data.shape + (1,)), x), axis=1)
    return ad.reduce_sum(ad.mul(w, x), axis=1)


def composite_np(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim == w.ndim + 1:
        return np.sum(w[..., None] * x, axis=1)
    return np.sum(w * x, axis=1)
