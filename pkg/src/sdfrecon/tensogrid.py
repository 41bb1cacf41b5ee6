"""Factorized SDF representation: vector-matrix grid, shared decoder, priors.

A 3D feature field is stored as three axis factorizations: per axis m, K
vector components over that axis times K matrix components over the
orthogonal plane. A point's latent is the concatenation of the three K-wide
elementwise products, decoded together with an encoded position by one small
MLP into a signed distance and a 36-wide appearance feature.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates

from . import autodiff as ad
from . import nets

AXES = ("x", "y", "z")
# matrix for axis m spans the two complementary axes, in this index order
PLANE = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}

FEATURE_WIDTH = 36
POS_FREQS = 6


class OutOfDomainError(Exception):
    """Query point outside the [-1,1] bounding box."""


class DegenerateGradientError(Exception):
    """SDF gradient too small to define a normal."""


class TensorGridVM:
    """Handles to the six factor Parameters plus (K, R) bookkeeping."""

    def __init__(self, store: ad.ParamStore, prefix: str, K: int, R: int,
                 rng: np.random.Generator | None = None, init_scale: float = 0.1,
                 dtype=np.float32, create: bool = True):
        self.store = store
        self.prefix = prefix
        self.K = K
        self.R = R
        if create:
            rng = rng or np.random.default_rng(0)
            for ax in AXES:
                store.add(f"{prefix}/vec_{ax}",
                          (init_scale * rng.standard_normal((K, R))).astype(dtype))
                store.add(f"{prefix}/mat_{ax}",
                          (init_scale * rng.standard_normal((K, R, R))).astype(dtype))

    def vec(self, ax: str) -> ad.Parameter:
        return self.store.get(f"{self.prefix}/vec_{ax}")

    def mat(self, ax: str) -> ad.Parameter:
        return self.store.get(f"{self.prefix}/mat_{ax}")

    def factor_params(self) -> list[ad.Parameter]:
        return [self.vec(ax) for ax in AXES] + [self.mat(ax) for ax in AXES]

    @property
    def cell_size(self) -> float:
        return 2.0 / self.R


class SdfDecoder:
    """Shared 2-hidden-layer MLP: (latent, encoded position) -> (s, feature).

    enc_window optionally weights the positional bands during training
    (coarse-to-fine schedules); fold_encoding_window bakes the current
    window into the first-layer weights so saved checkpoints evaluate
    identically with no window set.
    """

    def __init__(self, store: ad.ParamStore, K: int, rng: np.random.Generator | None,
                 prefix: str = "decoder", width: int = 128, create: bool = True):
        in_dim = 3 * K + nets.encoding_width(3, POS_FREQS)
        self.latent_width = 3 * K
        self.mlp = nets.Mlp(store, prefix, [in_dim, width, width, 1 + FEATURE_WIDTH],
                            rng, create=create)
        self.enc_window = None

    def __call__(self, tape: ad.Tape, latent: ad.Var, p: ad.Var):
        enc = nets.positional_encoding(p, POS_FREQS, band_weights=self.enc_window)
        out = self.mlp(tape, ad.concat([latent, enc], axis=1))
        return out[:, 0], out[:, 1:]

    def fold_encoding_window(self) -> None:
        """Scale first-layer rows by the window, then clear it (exact rewrite)."""
        if self.enc_window is None:
            return
        w0 = self.mlp.store.get(f"{self.mlp.prefix}/w0").values
        row = self.latent_width + 3  # latent block, then the raw-p columns
        for k in range(POS_FREQS):
            w0[row:row + 6] *= float(self.enc_window[k])
            row += 6
        self.enc_window = None

    def parameters(self) -> list[ad.Parameter]:
        return self.mlp.parameters()


def _check_domain(p: np.ndarray) -> None:
    if p.size and np.abs(p).max() > 1.0 + 1e-5:
        raise OutOfDomainError(
            f"point outside [-1,1]^3 (max coord {np.abs(p).max():.4f}); clamp or discard upstream"
        )


def encode(tape: ad.Tape, p: ad.Var, grid: TensorGridVM) -> ad.Var:
    """Latent V_p [N, 3K]: per axis, sum-free elementwise product of factors."""
    _check_domain(p.data)
    R = grid.R
    scale = 0.5 * (R - 1)
    idx = [ad.mul(ad.add(p[:, i], 1.0), scale) for i in range(3)]
    feats = []
    for ai, ax in enumerate(AXES):
        u, w = PLANE[ax]
        vfeat = ad.grid_sample1d(tape.leaf(grid.vec(ax)), idx[ai])
        mfeat = ad.grid_sample2d(tape.leaf(grid.mat(ax)), idx[u], idx[w])
        feats.append(ad.mul(vfeat, mfeat))
    return ad.concat(feats, axis=1)


def query_sdf(tape: ad.Tape, p: ad.Var, grid: TensorGridVM, decoder: SdfDecoder):
    """(s [N], v_f [N,36]) differentiable wrt grid and decoder parameters."""
    latent = encode(tape, p, grid)
    return decoder(tape, latent, p)


def query_sdf_values(p: np.ndarray, grid: TensorGridVM, decoder: SdfDecoder) -> np.ndarray:
    """Plain-numpy SDF values (no tape recording)."""
    tape = ad.Tape(recording=False)
    s, _ = query_sdf(tape, tape.const(p.astype(np.float32, copy=False)), grid, decoder)
    return s.data


def normal(p: np.ndarray, grid: TensorGridVM, decoder: SdfDecoder,
           eps: float = 1e-8) -> np.ndarray:
    """Unit normals grad(s)/|grad(s)| by reverse-mode differentiation wrt p."""

    def query(tape, pv):
        return query_sdf(tape, pv, grid, decoder)[0]

    return _normal_by_autodiff(p, query, eps)


def normal_blended(p: np.ndarray, stack: "MipStack", decoder: SdfDecoder,
                   eps: float = 1e-8) -> np.ndarray:
    def query(tape, pv):
        return blended_sdf(tape, pv, stack, decoder)[0]

    return _normal_by_autodiff(p, query, eps)


def _normal_by_autodiff(p, query, eps):
    tape = ad.Tape()
    pv = tape.const(np.asarray(p, dtype=np.float32))
    s = query(tape, pv)
    (g,) = tape.backward(ad.reduce_sum(s), wrt=[pv])
    norms = np.linalg.norm(g, axis=1)
    if np.any(norms < eps):
        raise DegenerateGradientError(
            f"gradient norm below {eps} at {(norms < eps).sum()} points"
        )
    return g / norms[:, None]


# ---------------------------------------------------------------------------
# finite-difference stencils (training-time normals and curvature terms)


def stencil_points(p: np.ndarray, h: float) -> np.ndarray:
    """[7N, 3] block layout: center, +x, -x, +y, -y, +z, -z (clamped to box)."""
    offsets = np.array(
        [[0, 0, 0], [h, 0, 0], [-h, 0, 0], [0, h, 0], [0, -h, 0], [0, 0, h], [0, 0, -h]],
        dtype=p.dtype,
    )
    pts = (p[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    return np.clip(pts, -1.0, 1.0)


def stencil_grad(s7: ad.Var, n: int, h: float) -> ad.Var:
    """Central-difference gradient [N, 3] from stencil SDF values [7N]."""
    s = ad.reshape(s7, (7, n))
    cols = [ad.reshape(ad.mul(ad.sub(s[2 * i + 1], s[2 * i + 2]), 1.0 / (2 * h)), (n, 1))
            for i in range(3)]
    return ad.concat(cols, axis=1)


def stencil_laplacian(s7: ad.Var, n: int, h: float) -> ad.Var:
    """7-point finite-difference Laplacian [N] from stencil SDF values."""
    s = ad.reshape(s7, (7, n))
    acc = ad.add(s[1], s[2])
    for i in (3, 4, 5, 6):
        acc = ad.add(acc, s[i])
    return ad.mul(ad.sub(acc, ad.mul(s[0], 6.0)), 1.0 / (h * h))


# ---------------------------------------------------------------------------
# smoothness priors


def _gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    x = np.arange(k) - (k - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _reflect_index(R: int, k: int) -> list[np.ndarray]:
    """Per-tap gather indices along an axis of length R with reflect padding."""
    half = k // 2
    base = np.arange(R)
    out = []
    for o in range(-half, half + 1):
        j = base + o
        j = np.where(j < 0, -j, j)
        j = np.where(j > R - 1, 2 * (R - 1) - j, j)
        out.append(j)
    return out


def _conv_last(x: ad.Var, kernel: np.ndarray, taps: list[np.ndarray]) -> ad.Var:
    acc = None
    for w, idx in zip(kernel, taps):
        term = ad.mul(ad.take_last(x, idx), float(w))
        acc = term if acc is None else ad.add(acc, term)
    return acc


def gaussian_smooth_loss(tape: ad.Tape, grid: TensorGridVM,
                         k_g: int = 3, sigma_g: float = 1.0) -> ad.Var:
    """Sum of squared residuals between each factor and its Gaussian blur."""
    if k_g % 2 != 1:
        raise ValueError("kernel size must be odd")
    kernel = _gaussian_kernel(k_g, sigma_g)
    taps = _reflect_index(grid.R, k_g)
    total = None
    for ax in AXES:
        v = tape.leaf(grid.vec(ax))
        dv = ad.sub(_conv_last(v, kernel, taps), v)
        m = tape.leaf(grid.mat(ax))
        gm = _conv_last(m, kernel, taps)  # blur along z
        gm = ad.transpose(_conv_last(ad.transpose(gm, (0, 2, 1)), kernel, taps), (0, 2, 1))
        dm = ad.sub(gm, m)
        term = ad.add(ad.reduce_sum(ad.mul(dv, dv)), ad.reduce_sum(ad.mul(dm, dm)))
        total = term if total is None else ad.add(total, term)
    return total


def tv_loss(tape: ad.Tape, grid: TensorGridVM) -> ad.Var:
    """Mean over factor components of diff-count-normalized squared variation."""
    R = grid.R
    comps = []
    for ax in AXES:
        v = tape.leaf(grid.vec(ax))
        d = ad.sub(v[:, 1:], v[:, :-1])
        comps.append(ad.mul(ad.reduce_sum(ad.mul(d, d), axis=1), 1.0 / (R - 1)))
        m = tape.leaf(grid.mat(ax))
        dy = ad.sub(m[:, 1:, :], m[:, :-1, :])
        dz = ad.sub(m[:, :, 1:], m[:, :, :-1])
        sq = ad.add(
            ad.reduce_sum(ad.reduce_sum(ad.mul(dy, dy), axis=2), axis=1),
            ad.reduce_sum(ad.reduce_sum(ad.mul(dz, dz), axis=2), axis=1),
        )
        comps.append(ad.mul(sq, 1.0 / (2 * R * (R - 1))))
    per_comp = ad.concat(comps, axis=0)
    return ad.reduce_mean(per_comp)


# ---------------------------------------------------------------------------
# mipmap blending


class MipStack:
    """Base grid plus a half-resolution copy built by linear downsampling.

    The top layer is derived data: plain arrays, rebuilt whenever needed,
    never trained or serialized.
    """

    def __init__(self, base: TensorGridVM, alpha: float):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must be in [0,1]")
        self.base = base
        self.alpha = float(alpha)
        self.top_R = max(base.R // 2, 2)
        self.top_vec = {}
        self.top_mat = {}
        for ax in AXES:
            self.top_vec[ax] = _resize_vec(base.vec(ax).values, self.top_R)
            self.top_mat[ax] = _resize_mat(base.mat(ax).values, self.top_R)


def _encode_top(tape: ad.Tape, p: ad.Var, stack: MipStack) -> ad.Var:
    R = stack.top_R
    scale = 0.5 * (R - 1)
    idx = [ad.mul(ad.add(p[:, i], 1.0), scale) for i in range(3)]
    feats = []
    for ai, ax in enumerate(AXES):
        u, w = PLANE[ax]
        vfeat = ad.grid_sample1d(tape.const(stack.top_vec[ax]), idx[ai])
        mfeat = ad.grid_sample2d(tape.const(stack.top_mat[ax]), idx[u], idx[w])
        feats.append(ad.mul(vfeat, mfeat))
    return ad.concat(feats, axis=1)


def blended_sdf(tape: ad.Tape, p: ad.Var, stack: MipStack, decoder: SdfDecoder):
    """(s_hat [N], v_f [N,36]): (1-alpha)*s_base + alpha*s_top, shared decoder."""
    s, v_f = query_sdf(tape, p, stack.base, decoder)
    if stack.alpha == 0.0:
        return s, v_f
    _check_domain(p.data)
    s_top, _ = decoder(tape, _encode_top(tape, p, stack), p)
    return ad.add(ad.mul(s, 1.0 - stack.alpha), ad.mul(s_top, stack.alpha)), v_f


def blended_sdf_values(p: np.ndarray, stack: MipStack, decoder: SdfDecoder) -> np.ndarray:
    tape = ad.Tape(recording=False)
    s, _ = blended_sdf(tape, tape.const(p.astype(np.float32, copy=False)), stack, decoder)
    return s.data


# ---------------------------------------------------------------------------
# resolution changes


def _resize_vec(v: np.ndarray, new_R: int) -> np.ndarray:
    K, R = v.shape
    xs = np.linspace(0.0, R - 1, new_R)
    out = np.empty((K, new_R), dtype=v.dtype)
    base = np.arange(R, dtype=np.float64)
    for k in range(K):
        out[k] = np.interp(xs, base, v[k].astype(np.float64)).astype(v.dtype)
    return out


def _resize_mat(m: np.ndarray, new_R: int) -> np.ndarray:
    K, R, _ = m.shape
    xs = np.linspace(0.0, R - 1, new_R)
    gy, gz = np.meshgrid(xs, xs, indexing="ij")
    coords = np.stack([gy.ravel(), gz.ravel()])
    out = np.empty((K, new_R, new_R), dtype=m.dtype)
    for k in range(K):
        out[k] = map_coordinates(
            m[k].astype(np.float64), coords, order=1, mode="nearest"
        ).reshape(new_R, new_R).astype(m.dtype)
    return out


def upsample(grid: TensorGridVM, new_R: int) -> TensorGridVM:
    """Interpolate all factors to a finer resolution, replacing store buffers."""
    if new_R < grid.R:
        raise ValueError(f"new resolution {new_R} below current {grid.R}")
    for ax in AXES:
        vid, mid = f"{grid.prefix}/vec_{ax}", f"{grid.prefix}/mat_{ax}"
        grid.store.replace(vid, _resize_vec(grid.store.get(vid).values, new_R))
        grid.store.replace(mid, _resize_mat(grid.store.get(mid).values, new_R))
    out = TensorGridVM(grid.store, grid.prefix, grid.K, new_R, create=False)
    return out
