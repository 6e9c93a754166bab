"""Autodiff substrate: primitives, Adam, checkpoints, gradient checks."""

import numpy as np
import pytest

from avatarforge import diffcore as dc
from avatarforge.diffcore import (
    MissingGradientError,
    NonFiniteError,
    OptimConfig,
    ParamStore,
    Tensor,
    adam_step,
    all_primitives,
    effective_lr,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from avatarforge.diffcore import tensor as T


def test_identity_graph_passes_gradient_through():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    y = T.reshape(T.reshape(x, (6,)), (2, 3))
    up = np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32)
    y.backward(Tensor(up))
    assert np.array_equal(x.grad.data, up)


def test_exp_gradient_matches_finite_difference():
    x = Tensor(np.array([1.0], np.float32), requires_grad=True)
    y = dc.exp(x)
    y.backward()
    analytic = float(x.grad.data[0])
    eps = 1e-4
    fd = (np.exp(1.0 + eps) - np.exp(1.0 - eps)) / (2 * eps)
    assert abs(analytic - np.e) < 1e-5
    assert abs(analytic - fd) / abs(fd) < 1e-5


def test_matmul_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    proj = rng.standard_normal((3, 2))

    ta = Tensor(A.astype(np.float32), requires_grad=True)
    tb = Tensor(B.astype(np.float32), requires_grad=True)
    loss = T.reduce_sum(T.mul(T.matmul(ta, tb), Tensor(proj.astype(np.float32))))
    loss.backward()

    eps = 1e-5
    fd = np.zeros_like(A)
    for i in range(A.shape[0]):
        for j in range(A.shape[1]):
            for s, bucket in ((eps, 1), (-eps, -1)):
                Ap = A.copy()
                Ap[i, j] += s
                fd[i, j] += bucket * float(((Ap @ B) * proj).sum())
    fd /= 2 * eps
    rel = np.abs(ta.grad.data - fd) / (np.abs(fd) + 1e-8)
    assert rel.max() < 1e-4


def test_nan_poisoning_names_the_op():
    x = Tensor(np.array([1.0, 0.0], np.float32), requires_grad=True)
    with pytest.raises(NonFiniteError, match="div"):
        dc.div(x, Tensor(np.array([1.0, 0.0], np.float32)))
    with pytest.raises(NonFiniteError, match="log"):
        dc.log(Tensor(np.array([-1.0], np.float32)))


def test_forward_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((16, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        y = T.softplus(T.matmul(x, w), beta=10.0)
        loss = T.reduce_sum(T.mul(y, y))
        loss.backward()
        return loss.data.copy(), x.grad.data.copy(), w.grad.data.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_second_order_gradients():
    x = Tensor(np.array([2.0], np.float32), requires_grad=True)
    y = T.power(x, 3.0)
    g = dc.grad(y, x, create_graph=True)
    gg = dc.grad(g, x)
    assert np.allclose(gg.data, 12.0, atol=1e-4)


# -- adam --


def test_adam_zero_gradient_is_identity():
    store = ParamStore()
    p = store.add("p", np.array([1.0, -2.0], np.float32))
    p.grad = Tensor(np.zeros(2, np.float32))
    before = p.data.copy()
    adam_step(store, OptimConfig())
    assert np.array_equal(p.data, before)


def test_adam_missing_gradient_lists_name():
    store = ParamStore()
    store.add("weights.w0", np.zeros(3, np.float32))
    store.add("weights.b0", np.zeros(3, np.float32))
    store["weights.b0"].grad = Tensor(np.zeros(3, np.float32))
    with pytest.raises(MissingGradientError, match="weights.w0"):
        adam_step(store, OptimConfig())


def _adam_oracle(steps, lr=5e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar float64 Adam on (x-3)^2 from x0=0."""
    x, m, v = 0.0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = 2.0 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


def test_adam_quadratic_convergence_matches_oracle():
    steps = 20000
    expect = _adam_oracle(steps)
    assert abs(expect - 3.0) < 1e-2  # the oracle itself converges

    store = ParamStore()
    p = store.add("x", np.array([0.0], np.float32))
    cfg = OptimConfig(learning_rate=5e-4)
    for _ in range(steps):
        store.zero_grad()
        loss = T.power(T.sub(p, T.constant(3.0)), 2.0).sum()
        loss.backward()
        adam_step(store, cfg)
    assert abs(float(p.data[0]) - 3.0) < 1e-2
    assert abs(float(p.data[0]) - expect) < 1e-3


def test_effective_lr_decay():
    cfg = OptimConfig(learning_rate=5e-4, decay=0.999)
    assert np.isclose(effective_lr(cfg, 100), 5e-4 * 0.999**100, rtol=1e-12)


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimConfig(decay=1.5)


# -- grad_check --


def test_grad_check_add_is_exact_to_rounding():
    assert grad_check("add") < 1e-6


def test_grad_check_trilinear_interior():
    assert grad_check("grid_sample3d") < 1e-4


def test_grad_check_bilinear_off_center():
    assert grad_check("image_sample") < 1e-4


def test_bilinear_image_gradient_at_texel_centers():
    """At texel centers the image-side gradient is still exact."""
    rng = np.random.default_rng(5)
    img = rng.uniform(0.1, 0.9, (4, 5, 2))
    H, W, _ = img.shape
    iy, ix = np.array([1, 2, 0]), np.array([2, 4, 1])
    uv = np.stack([(ix + 0.5) / W, (iy + 0.5) / H], axis=1)
    proj = rng.standard_normal((3, 2))

    t_img = Tensor(img.astype(np.float32), requires_grad=True)
    out = T.image_sample(t_img, Tensor(uv.astype(np.float32)))
    T.reduce_sum(T.mul(out, Tensor(proj.astype(np.float32)))).backward()

    eps = 1e-4
    fd = np.zeros_like(img)
    base = img.copy()
    for idx in np.ndindex(img.shape):
        for s, sign in ((eps, 1), (-eps, -1)):
            base[idx] += s
            o = T.image_sample(Tensor(base), Tensor(uv)).data
            fd[idx] += sign * float((o * proj).sum())
            base[idx] -= s
    fd /= 2 * eps
    rel = np.abs(t_img.grad.data - fd) / (np.abs(fd) + 1e-8)
    assert rel.max() < 1e-4


@pytest.mark.parametrize("op", all_primitives())
def test_every_primitive_ten_seeds(op):
    worst = max(grad_check(op, seed=s) for s in range(10))
    assert worst < 1e-4, f"{op}: {worst}"


# -- checkpoints --


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    store = ParamStore()
    store.add("net.w0", rng.standard_normal((4, 3)).astype(np.float32))
    store.add("net.b0", rng.standard_normal(3).astype(np.float32))
    store.add("frozen", rng.standard_normal(2).astype(np.float32), trainable=False)
    for name in store.names():
        store[name].grad = Tensor(rng.standard_normal(store[name].shape).astype(np.float32))
    store["frozen"].grad = None
    adam_step(store, OptimConfig())

    path = str(tmp_path / "ck.bin")
    save_checkpoint(store, path)
    loaded = load_checkpoint(path)
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(loaded[name].data, store[name].data)
        assert loaded[name].requires_grad == store[name].requires_grad
        assert np.array_equal(loaded.m[name], store.m[name])
        assert np.array_equal(loaded.v[name], store.v[name])
        assert loaded.steps[name] == store.steps[name]


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTAFILE" + b"\x00" * 16)
    with pytest.raises(dc.CheckpointError):
        load_checkpoint(str(path))
