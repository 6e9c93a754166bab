"""Finite-difference verification harness for the autodiff primitives.

Each registry entry knows how to build a seeded instance of the op together
with inputs conditioned away from its non-differentiable points (the
exclusion zones: kinks of clamp/min/max/|x|/leaky_relu, lattice boundaries of
the interpolators). The check reports the worst relative disagreement between
the analytic gradient (float32 graph) and a float64 central difference; it
does not judge.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _away_from(rng, shape, kinks, margin=0.05, lo=-2.0, hi=2.0):
    """Uniform values with distance > margin from every kink value."""
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x = np.where(near, x + 2 * margin * np.sign(x - k + 1e-9), x)
    return x


def _registry() -> dict[str, Callable]:
    R: dict[str, Callable] = {}

    def entry(name):
        def deco(fn):
            R[name] = fn
            return fn

        return deco

    @entry("add")
    def _(rng):
        return lambda a, b: T.add(a, b), [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))]

    @entry("sub")
    def _(rng):
        return lambda a, b: T.sub(a, b), [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))]

    @entry("mul")
    def _(rng):
        return lambda a, b: T.mul(a, b), [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4,))]

    @entry("div")
    def _(rng):
        den = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        return lambda a, b: T.div(a, b), [rng.uniform(-2, 2, (3, 4)), den]

    @entry("neg")
    def _(rng):
        return lambda a: T.neg(a), [rng.uniform(-2, 2, (3, 4))]

    @entry("matmul")
    def _(rng):
        return lambda a, b: T.matmul(a, b), [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))]

    @entry("linear")
    def _(rng):
        return lambda x, w, b: T.linear(x, w, b), [
            rng.uniform(-1, 1, (3, 4)),
            rng.uniform(-1, 1, (4, 2)),
            rng.uniform(-1, 1, (2,)),
        ]

    @entry("exp")
    def _(rng):
        return lambda a: T.exp(a), [rng.uniform(-2, 2, (3, 4))]

    @entry("log")
    def _(rng):
        return lambda a: T.log(a), [rng.uniform(0.5, 3.0, (3, 4))]

    @entry("power")
    def _(rng):
        return lambda a: T.power(a, 2.5), [rng.uniform(0.5, 2.0, (3, 4))]

    @entry("sqrt")
    def _(rng):
        return lambda a: T.sqrt(a), [rng.uniform(0.5, 2.0, (3, 4))]

    @entry("abs")
    def _(rng):
        return lambda a: T.absolute(a), [_away_from(rng, (3, 4), [0.0])]

    @entry("maximum")
    def _(rng):
        a = rng.uniform(-2, 2, (3, 4))
        b = a + rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        return lambda x, y: T.maximum(x, y), [a, b]

    @entry("minimum")
    def _(rng):
        a = rng.uniform(-2, 2, (3, 4))
        b = a + rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        return lambda x, y: T.minimum(x, y), [a, b]

    @entry("clamp")
    def _(rng):
        return lambda a: T.clamp(a, -0.5, 0.5), [_away_from(rng, (3, 4), [-0.5, 0.5])]

    @entry("where")
    def _(rng):
        cond = rng.random((3, 4)) > 0.5
        return lambda a, b: T.where(cond, a, b), [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (3, 4))]

    @entry("concatenate")
    def _(rng):
        return lambda a, b: T.concatenate([a, b], axis=1), [rng.uniform(-2, 2, (3, 2)), rng.uniform(-2, 2, (3, 4))]

    @entry("slice")
    def _(rng):
        return lambda a: T.getitem(a, (slice(1, 3), slice(0, 2))), [rng.uniform(-2, 2, (4, 3))]

    @entry("take")
    def _(rng):
        idx = rng.integers(0, 5, size=8)  # repeats exercise scatter-add
        return lambda a: T.take(a, idx), [rng.uniform(-2, 2, (5, 3))]

    @entry("sum")
    def _(rng):
        return lambda a: T.reduce_sum(a, axis=1), [rng.uniform(-2, 2, (3, 4))]

    @entry("mean")
    def _(rng):
        return lambda a: T.reduce_mean(a, axis=0), [rng.uniform(-2, 2, (3, 4))]

    @entry("cumsum")
    def _(rng):
        return lambda a: T.cumsum(a, axis=1), [rng.uniform(-2, 2, (3, 4))]

    @entry("flip")
    def _(rng):
        return lambda a: T.flip(a, axis=1), [rng.uniform(-2, 2, (3, 4))]

    @entry("reshape")
    def _(rng):
        return lambda a: T.reshape(a, (4, 3)), [rng.uniform(-2, 2, (3, 4))]

    @entry("transpose")
    def _(rng):
        return lambda a: T.transpose(a), [rng.uniform(-2, 2, (3, 4))]

    @entry("broadcast")
    def _(rng):
        return lambda a: T.broadcast_to(a, (3, 4)), [rng.uniform(-2, 2, (1, 4))]

    @entry("stack")
    def _(rng):
        return lambda a, b: T.stack([a, b], axis=0), [rng.uniform(-2, 2, (3,)), rng.uniform(-2, 2, (3,))]

    @entry("sin")
    def _(rng):
        return lambda a: T.sin(a), [rng.uniform(-2, 2, (3, 4))]

    @entry("cos")
    def _(rng):
        return lambda a: T.cos(a), [rng.uniform(-2, 2, (3, 4))]

    @entry("leaky_relu")
    def _(rng):
        return lambda a: T.leaky_relu(a, 0.1), [_away_from(rng, (3, 4), [0.0])]

    @entry("softplus")
    def _(rng):
        return lambda a: T.softplus(a, beta=10.0), [rng.uniform(-1, 1, (3, 4))]

    @entry("sigmoid")
    def _(rng):
        return lambda a: T.sigmoid(a), [rng.uniform(-3, 3, (3, 4))]

    @entry("tanh")
    def _(rng):
        return lambda a: T.tanh(a), [rng.uniform(-2, 2, (3, 4))]

    @entry("weighted_blend")
    def _(rng):
        return lambda w, t: T.weighted_blend(w, t), [rng.uniform(0, 1, (4, 3)), rng.uniform(-1, 1, (4, 3, 5))]

    @entry("positional_encoding")
    def _(rng):
        # high-frequency bands need a smaller step to keep FD truncation low
        return lambda a: T.positional_encoding(a, octaves=4), [rng.uniform(-1, 1, (5, 3))], 1e-5

    @entry("grid_sample3d")
    def _(rng):
        grid = rng.uniform(-1, 1, (4, 5, 6, 2))
        base = np.stack(
            [rng.integers(0, 3, 7), rng.integers(0, 4, 7), rng.integers(0, 5, 7)], axis=1
        ).astype(np.float64)
        pts = base + rng.uniform(0.2, 0.8, (7, 3))  # interior, off the lattice
        return lambda g, p: T.grid_sample3d(g, p), [grid, pts]

    @entry("image_sample")
    def _(rng):
        img = rng.uniform(0, 1, (5, 6, 3))
        # off texel centers and away from the clamped border band
        iy = rng.integers(1, 4, 9)
        ix = rng.integers(1, 5, 9)
        fy = rng.uniform(0.2, 0.8, 9)
        fx = rng.uniform(0.2, 0.8, 9)
        uv = np.stack([(ix + fx + 0.5) / 6.0, (iy + fy + 0.5) / 5.0], axis=1)
        return lambda im, q: T.image_sample(im, q), [img, uv]

    return R


PRIMITIVES = _registry()


def all_primitives():
    return sorted(PRIMITIVES)


def grad_check(op_name: str, inputs=None, eps: float = 1e-4, seed: int = 0) -> float:
    """Max over input entries of |analytic - central difference| / (|cd| + 1e-8).

    Analytic gradients run on the float32 graph; central differences run the
    same graph in float64 so the oracle is not rounding-limited.
    """
    if op_name not in PRIMITIVES:
        raise KeyError(f"unknown primitive '{op_name}'")
    rng = np.random.default_rng(seed)
    made = PRIMITIVES[op_name](rng)
    build, default_inputs = made[0], made[1]
    if len(made) > 2 and eps == 1e-4:
        eps = made[2]
    arrays = [np.asarray(x, dtype=np.float64) for x in (inputs if inputs is not None else default_inputs)]

    # float64 on both sides: the check targets VJP correctness, not rounding
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    proj = rng.standard_normal(out.data.shape)
    loss = T.reduce_sum(T.mul(out, Tensor(proj)))
    loss.backward()

    def scalar(args) -> float:
        o = build(*[Tensor(a) for a in args])
        return float((o.data.astype(np.float64) * proj).sum())

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = ts[i].grad.data.astype(np.float64) if ts[i].grad is not None else np.zeros_like(base)
        flat = base.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = scalar(arrays)
            flat[j] = orig - eps
            lo = scalar(arrays)
            flat[j] = orig
            num[j] = (hi - lo) / (2 * eps)
        err = np.abs(analytic.reshape(-1) - num) / (np.abs(num) + 1e-8)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
