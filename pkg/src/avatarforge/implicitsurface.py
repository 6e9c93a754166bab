"""Canonical-space SDF, geometry feature, and color fields.

The SDF network is geometrically initialized to approximate a sphere
s(x) ~ |x| - radius (softplus activations, raw-xyz passthrough in the first
and skip layers), so freshly constructed fields already carry a sane surface.
Density follows the Laplace-CDF form with learnable alpha/beta kept positive
by softplus reparameterization.
"""

from __future__ import annotations

import numpy as np

from .diffcore import DenseNet, ParamStore, Tensor
from .diffcore import tensor as T


class DegenerateGradientError(RuntimeError):
    """Surface normal requested where the SDF gradient vanishes."""


class SdfField:
    """f_s: encoded x' -> (signed distance, geometry feature)."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str = "sdf",
        feature_dim: int = 256,
        hidden: int = 256,
        layers: int = 8,
        skip_at=(4,),
        pe_octaves: int = 6,
        radius: float = 0.5,
        rng=None,
        geometric_init: bool = True,
    ):
        rng = rng or np.random.default_rng(0)
        self.prefix = prefix
        self.feature_dim = feature_dim
        self.pe_octaves = pe_octaves
        self.radius = radius
        enc_dim = 3 + 6 * pe_octaves
        sizes = [enc_dim] + [hidden] * (layers - 1) + [1 + feature_dim]
        self.net = DenseNet(store, prefix, sizes, activation="softplus", skip_at=skip_at, rng=rng)
        if geometric_init:
            self._geometric_init(rng, enc_dim)

    @classmethod
    def bind(cls, store, prefix="sdf", feature_dim=256, hidden=256, layers=8, skip_at=(4,), pe_octaves=6, radius=0.5):
        field = cls.__new__(cls)
        field.prefix = prefix
        field.feature_dim = feature_dim
        field.pe_octaves = pe_octaves
        field.radius = radius
        enc_dim = 3 + 6 * pe_octaves
        sizes = [enc_dim] + [hidden] * (layers - 1) + [1 + feature_dim]
        field.net = DenseNet.bind(store, prefix, sizes, activation="softplus", skip_at=skip_at)
        return field

    def _geometric_init(self, rng, enc_dim: int) -> None:
        net = self.net
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            fan_in, fan_out = w.data.shape
            wd = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(fan_out), size=(fan_in, fan_out)).astype(np.float32)
            bd = np.zeros(fan_out, dtype=np.float32)
            if i == net.n_layers - 1:
                wd = rng.normal(np.sqrt(np.pi) / np.sqrt(fan_in), 1e-4, size=(fan_in, fan_out)).astype(np.float32)
                bd[:] = -self.radius
            if i == 0:
                wd[3:, :] = 0.0  # encoding channels start silent; raw xyz drives the init
            if i in net.skip_at:
                wd[-(enc_dim - 3):, :] = 0.0  # skip re-concat: silence the encoded part
            w.data = wd
            b.data = bd
        self._calibrate_sphere(rng)

    def _penultimate(self, pts: np.ndarray) -> np.ndarray:
        """Hidden activations feeding the last layer (plain numpy, no graph)."""
        x = np.concatenate(
            [pts]
            + [f(pts * ((2.0**k) * np.pi)) for k in range(self.pe_octaves) for f in (np.sin, np.cos)],
            axis=1,
        ).astype(np.float32)
        h = x
        net = self.net
        for i in range(net.n_layers - 1):
            if i in net.skip_at:
                h = np.concatenate([h, x], axis=1) / np.sqrt(2.0, dtype=np.float32)
            z = 100.0 * (h @ net.weights[i].data + net.biases[i].data)
            h = (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / 100.0
        if (net.n_layers - 1) in net.skip_at:
            h = np.concatenate([h, x], axis=1) / np.sqrt(2.0, dtype=np.float32)
        return h

    def _calibrate_sphere(self, rng) -> None:
        """Least-squares fit of the SDF output row to |x| - radius on probes.

        The random hidden features stay as initialized; only the final layer's
        first column (the signed-distance head) and its bias are solved for.
        """
        extent = 4.0 * self.radius
        pts = np.concatenate(
            [
                rng.uniform(-extent, extent, size=(8192, 3)),
                rng.normal(0.0, 0.15 * self.radius, size=(4096, 3)),  # cone vertex needs density
                rng.normal(0.0, 0.6 * self.radius, size=(4096, 3)),
            ]
        ).astype(np.float32)
        target = np.linalg.norm(pts, axis=1) - self.radius
        H = self._penultimate(pts).astype(np.float64)
        A = np.concatenate([H, np.ones((len(H), 1))], axis=1)
        sol, *_ = np.linalg.lstsq(A, target, rcond=None)
        w_last = self.net.weights[-1]
        b_last = self.net.biases[-1]
        w_last.data[:, 0] = sol[:-1].astype(np.float32)
        b_last.data[0] = np.float32(sol[-1])
        self._polish_sphere(rng)

    def _polish_sphere(self, rng, tol: float = 0.035, max_steps: int = 200) -> None:
        """Short Adam fit to the sphere SDF; stops once the probe max error
        clears `tol`. Cleans up the cone-vertex residual the linear solve
        cannot reach."""
        from .diffcore import OptimConfig, ParamStore, adam_step

        local = ParamStore()
        for i in range(self.net.n_layers):
            local.params[f"w{i}"] = self.net.weights[i]
            local.params[f"b{i}"] = self.net.biases[i]
            local.m[f"w{i}"] = np.zeros_like(self.net.weights[i].data)
            local.m[f"b{i}"] = np.zeros_like(self.net.biases[i].data)
            local.v[f"w{i}"] = np.zeros_like(self.net.weights[i].data)
            local.v[f"b{i}"] = np.zeros_like(self.net.biases[i].data)
            local.steps[f"w{i}"] = 0
            local.steps[f"b{i}"] = 0
        cfg = OptimConfig(learning_rate=1.5e-3)

        axis = np.linspace(-2.0 * self.radius, 2.0 * self.radius, 11, dtype=np.float32)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        lattice = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        check = np.concatenate(
            [lattice, rng.normal(0.0, 0.2 * self.radius, size=(512, 3)).astype(np.float32)]
        )
        check_target = (np.linalg.norm(check, axis=1) - self.radius).astype(np.float32)

        shell = rng.normal(size=(256, 3))
        shell = self.radius * shell / np.linalg.norm(shell, axis=1, keepdims=True)
        shell = shell.astype(np.float32)

        for step in range(max_steps):
            if step % 25 == 0:
                with T.no_grad():
                    s, _ = self(Tensor(check))
                value_ok = np.abs(s.data[:, 0] - check_target).max() < tol
                xs = Tensor(shell, requires_grad=True)
                sh, _ = self(xs)
                g = T.grad(sh, xs, seed=Tensor(np.ones_like(sh.data)))
                gn = g.data / np.maximum(np.linalg.norm(g.data, axis=1, keepdims=True), 1e-12)
                normal_ok = np.percentile(np.linalg.norm(gn - shell / self.radius, axis=1), 95) < 0.045
                if value_ok and normal_ok:
                    break
            batch = np.concatenate(
                [
                    rng.uniform(-2.2 * self.radius, 2.2 * self.radius, size=(640, 3)),
                    rng.normal(0.0, 0.2 * self.radius, size=(256, 3)),
                ]
            ).astype(np.float32)
            tgt = np.linalg.norm(batch, axis=1)[:, None]
            use_grad_term = step % 2 == 0
            xb = Tensor(batch, requires_grad=use_grad_term)
            s, _ = self(xb)
            loss = T.reduce_mean(T.power(T.sub(s, Tensor((tgt - self.radius).astype(np.float32))), 2.0))
            if use_grad_term:
                g = T.grad(s, xb, seed=Tensor(np.ones_like(s.data)), create_graph=True)
                g_tgt = (batch / np.maximum(tgt, 1e-9)).astype(np.float32)
                loss = T.add(loss, T.mul(T.constant(0.05), T.reduce_mean(T.power(T.sub(g, Tensor(g_tgt)), 2.0))))
            local.zero_grad()
            loss.backward()
            # encoding rows stay silent through the polish; they would inject
            # high-frequency wiggle into the init
            w0 = self.net.weights[0]
            if w0.grad is not None:
                w0.grad.data[3:, :] = 0.0
            enc_dim = self.net.sizes[0]
            for i in self.net.skip_at:
                wi = self.net.weights[i]
                if wi.grad is not None:
                    wi.grad.data[-(enc_dim - 3):, :] = 0.0
            adam_step(local, cfg)

    def __call__(self, x: Tensor):
        """Returns (s (N,1), z (N,feature_dim))."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        enc = T.positional_encoding(x, self.pe_octaves)
        out = self.net(enc)
        s = T.getitem(out, (slice(None), slice(0, 1)))
        z = T.getitem(out, (slice(None), slice(1, 1 + self.feature_dim)))
        if not np.isfinite(s.data).all():
            raise RuntimeError("non-finite SDF output")
        return s, z

    def sdf(self, x: Tensor) -> Tensor:
        return self(x)[0]


def surface_normal(field, x, create_graph: bool = True, return_parts: bool = False):
    """n = grad(s)/|grad(s)| via autodiff.

    `x` may be an ndarray (a fresh differentiable leaf is created) or an
    existing graph tensor that requires grad. Raises DegenerateGradientError
    when the gradient norm falls under 1e-8.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    s, z = field(x)
    g = T.grad(s, x, seed=Tensor(np.ones_like(s.data)), create_graph=create_graph)
    gn = np.linalg.norm(g.data, axis=-1)
    if (gn < 1e-8).any():
        raise DegenerateGradientError("SDF gradient vanished at a query point")
    n = T.normalize(g)
    if return_parts:
        return n, g, s, z, x
    return n


class DensityParams:
    """Learnable alpha, beta > 0 via softplus reparameterization."""

    def __init__(self, store: ParamStore, alpha: float = 10.0, beta: float = 0.1, beta_floor: float = 1e-4):
        self.beta_floor = beta_floor
        if "density.alpha_raw" in store:
            self.alpha_raw = store["density.alpha_raw"]
            self.beta_raw = store["density.beta_raw"]
        else:
            self.alpha_raw = store.add("density.alpha_raw", Tensor(np.float32(_inv_softplus(alpha))))
            self.beta_raw = store.add("density.beta_raw", Tensor(np.float32(_inv_softplus(beta - beta_floor))))

    def alpha(self) -> Tensor:
        return T.softplus(self.alpha_raw)

    def beta(self) -> Tensor:
        return T.add(T.softplus(self.beta_raw), T.constant(self.beta_floor))


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(max(y, 1e-6))))


def density_from_sdf(s: Tensor, alpha, beta) -> Tensor:
    """Laplace-CDF density: alpha*(1 - exp(s/beta)/2) inside, alpha*exp(-s/beta)/2 outside.

    Both branches are evaluated with clamped exponents so the unselected side
    stays finite; they agree (alpha/2) exactly at s = 0.
    """
    if not isinstance(alpha, Tensor):
        alpha = T.constant(alpha, s)
    if not isinstance(beta, Tensor):
        beta = T.constant(beta, s)
    neg_exp = T.exp(T.div(T.minimum(s, T.constant(0.0, s)), beta))
    pos_exp = T.exp(T.div(T.neg(T.maximum(s, T.constant(0.0, s))), beta))
    inside = T.mul(alpha, T.sub(T.constant(1.0, s), T.mul(T.constant(0.5, s), neg_exp)))
    outside = T.mul(T.mul(T.constant(0.5, s), alpha), pos_exp)
    return T.where(s.data < 0, inside, outside)


class ColorField:
    """f_c: (x', n, v, z, psi) -> RGB in [0,1] (sigmoid head)."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str = "color",
        feature_dim: int = 256,
        latent_dim: int = 64,
        hidden: int = 256,
        layers: int = 4,
        pe_octaves: int = 6,
        dir_octaves: int = 4,
        rng=None,
    ):
        rng = rng or np.random.default_rng(1)
        self.pe_octaves = pe_octaves
        self.dir_octaves = dir_octaves
        in_dim = (3 + 6 * pe_octaves) + 3 + (3 + 6 * dir_octaves) + feature_dim + latent_dim
        sizes = [in_dim] + [hidden] * (layers - 1) + [3]
        self.net = DenseNet(store, prefix, sizes, activation="leaky_relu", rng=rng)

    @classmethod
    def bind(cls, store, prefix="color", feature_dim=256, latent_dim=64, hidden=256, layers=4, pe_octaves=6, dir_octaves=4):
        field = cls.__new__(cls)
        field.pe_octaves = pe_octaves
        field.dir_octaves = dir_octaves
        in_dim = (3 + 6 * pe_octaves) + 3 + (3 + 6 * dir_octaves) + feature_dim + latent_dim
        sizes = [in_dim] + [hidden] * (layers - 1) + [3]
        field.net = DenseNet.bind(store, prefix, sizes, activation="leaky_relu")
        return field

    def __call__(self, x: Tensor, n: Tensor, v: Tensor, z: Tensor, psi: Tensor) -> Tensor:
        feats = T.concatenate(
            [
                T.positional_encoding(x, self.pe_octaves),
                n,
                T.positional_encoding(v, self.dir_octaves),
                z,
                psi,
            ],
            axis=1,
        )
        return T.sigmoid(self.net(feats))
