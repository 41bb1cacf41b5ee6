"""Shared test utilities: the differentiable-op inventory and FD machinery.

Each op case builds a scalar loss from float64 parameters so central
finite differences at h=1e-4 resolve gradients well below the 1e-3
relative tolerance used across the suite.
"""

from __future__ import annotations

import numpy as np

from sdfrecon import autodiff as ad


def fd_case(build_fn, param_arrays, h=1e-4, max_entries=8, seed=0):
    """Run one finite-difference comparison; returns max relative error."""
    store = ad.ParamStore()
    params = [store.add(f"p{i}", np.asarray(a, dtype=np.float64)) for i, a in enumerate(param_arrays)]

    def build(tape):
        return build_fn(tape, [tape.leaf(p) for p in params])

    return ad.finite_difference_check(
        build, params, h=h, max_entries=max_entries, rng=np.random.default_rng(seed)
    )


def _r(rng, *shape):
    return rng.standard_normal(shape)


def _rpos(rng, *shape):
    return rng.uniform(0.5, 1.5, size=shape)


def op_cases(rng):
    """Yield (name, build_fn, param_arrays) covering every differentiable op."""
    N, K, R = 5, 3, 7

    def scalarize(v):
        return ad.reduce_sum(ad.mul(v, v)) if v.data.ndim else v

    cases = []

    def case(name, arrays, fn):
        cases.append((name, lambda t, ps, fn=fn: scalarize(fn(t, ps)), arrays))

    case("add", [_r(rng, N), _r(rng, N)], lambda t, ps: ad.add(ps[0], ps[1]))
    case("add_broadcast", [_r(rng, N, K), _r(rng, K)], lambda t, ps: ad.add(ps[0], ps[1]))
    case("sub", [_r(rng, N), _r(rng, N)], lambda t, ps: ad.sub(ps[0], ps[1]))
    case("mul", [_r(rng, N, K), _r(rng, N, 1)], lambda t, ps: ad.mul(ps[0], ps[1]))
    case("div", [_r(rng, N), _rpos(rng, N)], lambda t, ps: ad.div(ps[0], ps[1]))
    case("neg", [_r(rng, N)], lambda t, ps: ad.neg(ps[0]))
    case("pow", [_rpos(rng, N)], lambda t, ps: ad.pow_const(ps[0], 2.5))
    case("exp", [_r(rng, N)], lambda t, ps: ad.exp(ps[0]))
    case("log", [_rpos(rng, N)], lambda t, ps: ad.log(ps[0]))
    case("sqrt", [_rpos(rng, N)], lambda t, ps: ad.sqrt(ps[0]))
    case("sin", [_r(rng, N)], lambda t, ps: ad.sin(ps[0]))
    case("cos", [_r(rng, N)], lambda t, ps: ad.cos(ps[0]))
    case("tanh", [_r(rng, N)], lambda t, ps: ad.tanh(ps[0]))
    case("sigmoid", [_r(rng, N)], lambda t, ps: ad.sigmoid(ps[0]))
    case("softplus", [_r(rng, N)], lambda t, ps: ad.softplus(ps[0], beta=3.0))
    # kink at 0: keep inputs away from it so FD is valid
    case("relu", [_r(rng, N) + np.where(_r(rng, N) > 0, 2.0, -2.0)], lambda t, ps: ad.relu(ps[0]))
    case("abs", [_rpos(rng, N)], lambda t, ps: ad.absval(ps[0]))
    case(
        "clip",
        [np.linspace(-2.0, 2.0, N)],
        lambda t, ps: ad.clip(ps[0], -1.5, 1.5),
    )
    case(
        "maximum",
        [_r(rng, N) + 3.0, _r(rng, N) - 3.0],
        lambda t, ps: ad.maximum(ps[0], ps[1]),
    )
    case(
        "where",
        [_r(rng, N), _r(rng, N)],
        lambda t, ps: ad.where(np.arange(N) % 2 == 0, ps[0], ps[1]),
    )
    case("matmul", [_r(rng, N, K), _r(rng, K, 4)], lambda t, ps: ad.matmul(ps[0], ps[1]))
    case(
        "concat",
        [_r(rng, N, 2), _r(rng, N, 3)],
        lambda t, ps: ad.concat([ps[0], ps[1]], axis=1),
    )
    case("reshape", [_r(rng, N, K)], lambda t, ps: ad.reshape(ps[0], (K, N)))
    case("getitem", [_r(rng, N, K)], lambda t, ps: ps[0][1:4, ::2])
    case(
        "gather_rows",
        [_r(rng, N, K)],
        lambda t, ps: ad.gather_rows(ps[0], np.array([0, 2, 2, 4, 1])),
    )
    case(
        "put_rows",
        [_r(rng, 3, K)],
        lambda t, ps: ad.put_rows(N, np.array([4, 0, 2]), ps[0]),
    )
    case("reduce_sum", [_r(rng, N, K)], lambda t, ps: ad.reduce_sum(ps[0], axis=0))
    case("reduce_sum_all", [_r(rng, N, K)], lambda t, ps: ad.reduce_sum(ps[0]))
    case(
        "reduce_mean",
        [_r(rng, N, K)],
        lambda t, ps: ad.reduce_mean(ps[0], axis=1, keepdims=True),
    )
    case("cumsum", [_r(rng, N, K)], lambda t, ps: ad.cumsum(ps[0], axis=1))
    case(
        "transpose",
        [_r(rng, 2, N, K)],
        lambda t, ps: ad.transpose(ps[0], (2, 0, 1)),
    )
    case(
        "take_last",
        [_r(rng, N, K)],
        lambda t, ps: ad.take_last(ps[0], np.array([0, 2, 2, 1])),
    )
    case(
        "grid_sample1d",
        [_r(rng, K, R), rng.uniform(0.3, R - 1.3, size=N)],
        lambda t, ps: ad.grid_sample1d(ps[0], ps[1]),
    )
    case(
        "grid_sample2d",
        [
            _r(rng, K, R, R),
            rng.uniform(0.3, R - 1.3, size=N),
            rng.uniform(0.3, R - 1.3, size=N),
        ],
        lambda t, ps: ad.grid_sample2d(ps[0], ps[1], ps[2]),
    )
    # composite graphs exercise fan-out and mixed chains
    case(
        "composite_mlp_like",
        [_r(rng, N, 4), _r(rng, 4, 6), _r(rng, 6), _r(rng, 6, 1)],
        lambda t, ps: ad.matmul(
            ad.relu(ad.add(ad.matmul(ps[0], ps[1]), ps[2] + 2.0)), ps[3]
        ),
    )
    case(
        "composite_fanout",
        [_r(rng, N)],
        lambda t, ps: ad.add(ad.mul(ps[0], ps[0]), ad.sin(ps[0])),
    )
    case(
        "composite_transmittance",
        [rng.uniform(0.05, 0.9, size=(2, 6))],
        lambda t, ps: ad.mul(
            ps[0],
            ad.exp(
                ad.concat(
                    [
                        t.const(np.zeros((2, 1))),
                        ad.cumsum(ad.log(1.0 - ps[0] + 1e-10), axis=1)[:, :-1],
                    ],
                    axis=1,
                )
            ),
        ),
    )
    return cases
