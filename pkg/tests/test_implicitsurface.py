"""SDF field initialization, density law, normals, and the color field."""

import numpy as np
import pytest

from avatarforge.diffcore import ParamStore, Tensor
from avatarforge.diffcore import tensor as T
from avatarforge.implicitsurface import (
    ColorField,
    DegenerateGradientError,
    DensityParams,
    SdfField,
    density_from_sdf,
    surface_normal,
)


@pytest.fixture(scope="module")
def sphere_field():
    store = ParamStore()
    field = SdfField(store, hidden=64, layers=4, skip_at=(2,), pe_octaves=4, radius=0.5,
                     rng=np.random.default_rng(0), feature_dim=32)
    return store, field


def test_geometric_init_matches_sphere_on_grid(sphere_field):
    _, field = sphere_field
    g = np.linspace(-1, 1, 17)
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    pts = np.stack([X, Y, Z], -1).reshape(-1, 3).astype(np.float32)
    s, z = field(Tensor(pts))
    target = np.linalg.norm(pts, axis=1) - 0.5
    assert np.abs(s.data[:, 0] - target).max() < 0.05
    assert z.data.shape == (len(pts), 32)


def test_sdf_negative_at_origin(sphere_field):
    _, field = sphere_field
    s, _ = field(Tensor(np.zeros((1, 3), np.float32)))
    assert s.data[0, 0] < 0


def test_sdf_gradient_matches_finite_difference(sphere_field):
    store, field = sphere_field
    saved = {n: store[n].data for n in store.names()}
    try:
        for n in store.names():
            store[n].data = store[n].data.astype(np.float64)
        rng = np.random.default_rng(1)
        pts = rng.uniform(-0.8, 0.8, (6, 3))
        x = Tensor(pts, requires_grad=True)
        s, _ = field(x)
        g = T.grad(s, x, seed=Tensor(np.ones_like(s.data)))
        eps = 1e-6
        for i in range(len(pts)):
            for j in range(3):
                p = pts.copy()
                p[i, j] += eps
                hi = field(Tensor(p))[0].data[i, 0]
                p[i, j] -= 2 * eps
                lo = field(Tensor(p))[0].data[i, 0]
                fd = (hi - lo) / (2 * eps)
                assert abs(g.data[i, j] - fd) / (abs(fd) + 1e-8) < 1e-3
    finally:
        for n in store.names():
            store[n].data = saved[n]


# -- density --


def test_density_branch_continuity_exact():
    alpha, beta = 8.0, 0.07
    s0 = Tensor(np.zeros((1, 1), np.float32))
    sigma = density_from_sdf(s0, alpha, beta)
    inside = alpha * (1 - 0.5 * np.exp(0.0 / beta))
    outside = 0.5 * alpha * np.exp(-0.0 / beta)
    assert inside == outside == np.float32(sigma.data[0, 0])


def test_density_at_plus_minus_beta():
    alpha, beta = 3.0, 0.11
    s = Tensor(np.array([[-beta], [beta]], np.float32))
    sigma = density_from_sdf(s, alpha, beta).data[:, 0]
    assert np.isclose(sigma[0], alpha * (1 - 0.5 * np.exp(-1)), rtol=1e-6)
    assert np.isclose(sigma[1], 0.5 * alpha * np.exp(-1), rtol=1e-6)
    assert np.isclose(sigma[0], 0.8161 * alpha, atol=2e-4 * alpha)
    assert np.isclose(sigma[1], 0.1839 * alpha, atol=2e-4 * alpha)


def test_density_monotone_and_asymptotes():
    alpha, beta = 5.0, 0.05
    s = np.linspace(-20 * beta, 20 * beta, 1000, dtype=np.float32)[:, None]
    sigma = density_from_sdf(Tensor(s), alpha, beta).data[:, 0]
    assert (np.diff(sigma) <= 1e-7).all()
    assert abs(sigma[0] - alpha) < 1e-6 * alpha
    assert abs(sigma[-1]) < 1e-6 * alpha


def test_density_params_positive():
    store = ParamStore()
    dp = DensityParams(store, alpha=10.0, beta=0.1)
    assert dp.alpha().item() > 0
    assert np.isclose(dp.alpha().item(), 10.0, rtol=1e-4)
    assert np.isclose(dp.beta().item(), 0.1, rtol=1e-3)
    # even after driving the raw parameters far negative
    store["density.alpha_raw"].data = np.float32(-30.0).reshape(())
    store["density.beta_raw"].data = np.float32(-30.0).reshape(())
    assert dp.alpha().item() >= 0
    assert dp.beta().item() > 0


# -- normals --


def test_normal_on_sphere_init(sphere_field):
    _, field = sphere_field
    n = surface_normal(field, np.array([[0.5, 0.0, 0.0]], np.float32), create_graph=False)
    assert np.linalg.norm(n.data - np.array([1.0, 0, 0])) < 0.05


def test_normal_unit_norm(sphere_field):
    _, field = sphere_field
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.8, 0.8, (50, 3)).astype(np.float32)
    n = surface_normal(field, pts, create_graph=False)
    assert np.abs(np.linalg.norm(n.data, axis=1) - 1.0).max() < 1e-6


def test_normal_exact_on_plane_field():
    nvec = np.array([0.6, 0.8, 0.0], np.float32)

    class PlaneField:
        def __call__(self, x):
            s = T.add(T.dot(x, Tensor(nvec[None, :].repeat(len(x.data), 0))), T.constant(0.1))
            return s, None

    n = surface_normal(PlaneField(), np.array([[0.3, -0.2, 0.5]], np.float32), create_graph=False)
    assert np.allclose(n.data[0], nvec, atol=1e-6)


def test_degenerate_gradient_raises():
    class FlatField:
        def __call__(self, x):
            return T.mul(T.reduce_sum(x, axis=1, keepdims=True), T.constant(0.0)), None

    with pytest.raises(DegenerateGradientError):
        surface_normal(FlatField(), np.array([[0.0, 0.0, 0.0]], np.float32), create_graph=False)


# -- color field --


def test_color_range_and_permutation():
    store = ParamStore()
    cf = ColorField(store, feature_dim=8, latent_dim=4, hidden=32, layers=3,
                    pe_octaves=2, dir_octaves=2, rng=np.random.default_rng(0))
    rng = np.random.default_rng(3)
    n = 1000
    x = Tensor(rng.uniform(-1, 1, (n, 3)).astype(np.float32))
    nrm = Tensor(rng.standard_normal((n, 3)).astype(np.float32))
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v = Tensor(v.astype(np.float32))
    z = Tensor(rng.standard_normal((n, 8)).astype(np.float32))
    psi = Tensor(rng.standard_normal((n, 4)).astype(np.float32))
    rgb = cf(x, nrm, v, z, psi)
    assert rgb.data.shape == (n, 3)
    assert (rgb.data >= 0).all() and (rgb.data <= 1).all()

    perm = rng.permutation(n)
    rgb_perm = cf(
        Tensor(x.data[perm]), Tensor(nrm.data[perm]), Tensor(v.data[perm]),
        Tensor(z.data[perm]), Tensor(psi.data[perm]),
    )
    assert np.allclose(rgb_perm.data, rgb.data[perm], atol=1e-6)


def test_color_parameter_gradients_match_fd():
    store = ParamStore()
    cf = ColorField(store, feature_dim=4, latent_dim=2, hidden=12, layers=2,
                    pe_octaves=1, dir_octaves=1, rng=np.random.default_rng(1))
    for nme in store.names():
        store[nme].data = store[nme].data.astype(np.float64)
    rng = np.random.default_rng(4)
    n = 4
    args = [
        rng.uniform(-1, 1, (n, 3)),
        rng.standard_normal((n, 3)),
        rng.standard_normal((n, 3)),
        rng.standard_normal((n, 4)),
        rng.standard_normal((n, 2)),
    ]
    proj = rng.standard_normal((n, 3))

    def value():
        out = cf(*[Tensor(a) for a in args])
        return out, float((out.data * proj).sum())

    out, _ = value()
    store.zero_grad()
    T.reduce_sum(T.mul(out, Tensor(proj))).backward()

    eps = 1e-6
    for name in store.names():
        p = store[name]
        flat = p.data.reshape(-1)
        analytic = p.grad.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + eps
            hi = value()[1]
            flat[j] = orig - eps
            lo = value()[1]
            flat[j] = orig
            fd = (hi - lo) / (2 * eps)
            assert abs(analytic[j] - fd) / (abs(fd) + 1e-8) < 1e-4, name
