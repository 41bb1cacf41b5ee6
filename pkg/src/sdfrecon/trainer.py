"""Optimization: Adam, schedules, supervised SDF regression, training stages."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from . import tensogrid


class NumericsError(Exception):
    """Loss went non-finite; training aborted."""

    def __init__(self, msg: str, last_checkpoint: str | None = None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


def cosine_lr(step: int, total: int, lr0: float, floor_ratio: float = 0.05) -> float:
    """lr(0)=lr0, lr(total)=floor_ratio*lr0, monotone cosine in between."""
    t = min(max(step / max(total, 1), 0.0), 1.0)
    return lr0 * (floor_ratio + (1.0 - floor_ratio) * 0.5 * (1.0 + math.cos(math.pi * t)))


class Adam:
    """Standard Adam over a ParamStore with per-parameter learning-rate groups."""

    def __init__(self, params: list[ad.Parameter], lr_of, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr_of = lr_of if callable(lr_of) else (lambda pid, base=lr_of: base)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.id: np.zeros_like(p.values) for p in self.params}
        self.v = {p.id: np.zeros_like(p.values) for p in self.params}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.id]
            v = self.v[p.id]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = self.lr_of(p.id) * lr_scale
            p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def rebind(self, old_id: str, new_param: ad.Parameter) -> None:
        """Swap a parameter buffer (grid upsample); moment state is reset."""
        self.params = [new_param if p.id == old_id else p for p in self.params]
        self.m[new_param.id] = np.zeros_like(new_param.values)
        self.v[new_param.id] = np.zeros_like(new_param.values)


def group_lr(lr_grid: float, lr_mlp: float):
    """Grid factors train fast; MLPs and everything else slow."""

    def lr_of(pid: str) -> float:
        return lr_grid if pid.startswith("grid/") or pid.startswith("render/") else lr_mlp

    return lr_of


# ---------------------------------------------------------------------------
# supervised SDF regression (sphere initialization + representation fidelity)


def project_to_surface(p: np.ndarray, target_fn, iters: int = 2, h: float = 1e-4) -> np.ndarray:
    """Newton-project points onto the zero set of an analytic SDF."""
    q = p.astype(np.float32, copy=True)
    for _ in range(iters):
        s = target_fn(q)
        g = _numeric_grad(target_fn, q, h)
        q -= (s[:, None] * g).astype(np.float32)
    return np.clip(q, -1.0, 1.0)


def fit_sdf_regression(store: ad.ParamStore, grid: tensogrid.TensorGridVM,
                       decoder: tensogrid.SdfDecoder, target_fn, steps: int = 900,
                       seed: int = 3, lr_grid: float = 0.03, lr_mlp: float = 0.004,
                       beta2: float = 0.99, lr_floor: float = 0.002, warmup: int = 40,
                       l1_frac: float = 0.58,
                       uniform_batch: tuple[int, int] = (5120, 8192),
                       shell_batch: tuple[int, int] = (2048, 2560),
                       shell_sigma: float = 0.04, tv_weight: float = 1e-3,
                       smooth_weight: float = 0.02, enc_alpha: float | None = 0.0,
                       log_every: int = 0):
    """Supervised fit of the field to an analytic SDF over [-1,1]^3.

    Two phases: a squared-error phase for global shape, then a mean-absolute
    phase with larger batches that polishes the level set. Batches mix
    uniform box points with a jittered shell around the target surface.
    Factor smoothness priors (total variation every step, Gaussian smoothing
    every other step) suppress cell-scale ripple that would otherwise
    dominate normal error. enc_alpha caps the decoder's positional bands
    during the fit; the window is folded into the first layer afterwards,
    so the returned field is a plain instance of the architecture.
    """
    rng = np.random.default_rng(seed)
    params = grid.factor_params() + decoder.parameters()
    opt = Adam(params, group_lr(lr_grid, lr_mlp), beta2=beta2)
    if enc_alpha is not None:
        decoder.enc_window = nets.coarse_to_fine_window(enc_alpha, tensogrid.POS_FREQS)
    l1_from = int(steps * l1_frac)
    history = []
    for step in range(steps):
        late = step >= l1_from
        nu = uniform_batch[1 if late else 0]
        ns = shell_batch[1 if late else 0]
        pts = rng.uniform(-1.0, 1.0, size=(nu, 3)).astype(np.float32)
        if ns:
            shell = project_to_surface(
                rng.uniform(-1.0, 1.0, size=(ns, 3)).astype(np.float32), target_fn
            )
            shell += rng.normal(0.0, shell_sigma, size=shell.shape).astype(np.float32)
            pts = np.concatenate([pts, np.clip(shell, -1.0, 1.0)])
        target = target_fn(pts).astype(np.float32)

        tape = ad.Tape()
        s, _ = tensogrid.query_sdf(tape, tape.const(pts), grid, decoder)
        diff = ad.sub(s, tape.const(target))
        if late:
            loss = ad.reduce_mean(ad.absval(diff))
        else:
            loss = ad.reduce_mean(ad.mul(diff, diff))
        if tv_weight:
            loss = ad.add(loss, ad.mul(tensogrid.tv_loss(tape, grid), tv_weight))
        if smooth_weight and step % 2 == 0:
            loss = ad.add(loss, ad.mul(tensogrid.gaussian_smooth_loss(tape, grid),
                                       smooth_weight))
        opt.zero_grad()
        tape.backward(loss)
        warm = min(1.0, (step + 1) / max(warmup, 1))
        opt.step(warm * cosine_lr(step, steps, 1.0, lr_floor))
        if not np.isfinite(loss.data):
            raise NumericsError(f"regression loss non-finite at step {step}")
        if log_every and step % log_every == 0:
            history.append((step, float(loss.data)))
    decoder.fold_encoding_window()
    return history


def _numeric_grad(fn, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    g = np.empty_like(p, dtype=np.float32)
    for i in range(3):
        dp = np.zeros(3, dtype=p.dtype)
        dp[i] = h
        g[:, i] = (fn(p + dp) - fn(p - dp)) / (2 * h)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.maximum(n, 1e-9)


def sphere_init(store: ad.ParamStore, grid: tensogrid.TensorGridVM,
                decoder: tensogrid.SdfDecoder, radius: float = 0.5,
                steps: int = 250, seed: int = 0) -> None:
    """Initialize the field near s(p) = |p| - radius so training has an inside."""

    def target(p):
        return np.linalg.norm(p, axis=1) - radius

    fit_sdf_regression(store, grid, decoder, target, steps=steps, seed=seed,
                       uniform_batch=(2048, 3072), shell_batch=(1024, 1024))
