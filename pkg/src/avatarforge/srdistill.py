"""Score-distillation texture super-resolution.

Renders of the high-resolution texture are noised to a random diffusion
timestep; a denoiser (analytic for verification, remote over HTTP for a real
teacher) predicts the noise, and w(t)*(eps_pred - eps) is injected as the
gradient of the rendered pixels, flowing through the differentiable renderer
into the texture texels. All diffusion math runs in the [-1, 1] pixel frame.
"""

from __future__ import annotations

import base64
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffcore import OptimConfig, ParamStore, Tensor, adam_step
from .diffcore import tensor as T


@dataclass
class DiffusionSchedule:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alpha_bar: np.ndarray = field(default=None, repr=False)

    def weight(self, t: int) -> float:
        """w(t) = 1 - alpha_bar_t (the common sigma^2 weighting)."""
        return float(1.0 - self.alpha_bar[t])


def build_schedule(timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule; alpha_bar_t = prod_{s<=t} (1 - beta_s), 1-indexed."""
    if timesteps < 1:
        raise ValueError("need at least one timestep")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("invalid beta range")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    # index 0 is a convenience alias for "no noise"
    sched = DiffusionSchedule(timesteps, beta_start, beta_end)
    sched.alpha_bar = np.concatenate([[1.0], alpha_bar])
    return sched


def to_diffusion_frame(x: np.ndarray) -> np.ndarray:
    return x * 2.0 - 1.0


def from_diffusion_frame(x: np.ndarray) -> np.ndarray:
    return (x + 1.0) * 0.5


@dataclass
class NoisedRender:
    render: np.ndarray  # clean render, [0,1]
    noise: np.ndarray  # drawn epsilon
    timestep: int
    noised: np.ndarray  # sqrt(ab)*R' + sqrt(1-ab)*eps in the [-1,1] frame


def noise_render(render: np.ndarray, t: int, schedule: DiffusionSchedule, seed: int = 0) -> NoisedRender:
    """R_t = sqrt(alpha_bar_t) R + sqrt(1 - alpha_bar_t) eps (exact identity).

    The render is mapped from [0,1] into the diffusion frame [-1,1] first;
    eps is standard normal and recorded.
    """
    rng = np.random.default_rng(seed)
    r = np.asarray(render, dtype=np.float32)
    eps = rng.standard_normal(r.shape).astype(np.float32)
    ab = np.float32(schedule.alpha_bar[t])
    noised = np.sqrt(ab) * to_diffusion_frame(r) + np.sqrt(np.float32(1.0) - ab) * eps
    return NoisedRender(r, eps, t, noised.astype(np.float32))


@dataclass
class DenoiserHandle:
    backend: str  # "analytic" | "remote"
    target: np.ndarray = None  # analytic: point-mass target image in [0,1]
    endpoint: str = None  # remote: base URL
    timeout: float = 30.0

    def __post_init__(self):
        if self.backend not in ("analytic", "remote"):
            raise ValueError("backend must be analytic or remote")
        if self.backend == "analytic" and self.target is None:
            raise ValueError("analytic backend needs a target image")
        if self.backend == "remote" and not self.endpoint:
            raise ValueError("remote backend needs an endpoint")


def analytic_denoiser(noised: np.ndarray, t: int, target: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Exact posterior noise when the data distribution is a point mass.

    eps_hat = (R_t - sqrt(alpha_bar) G') / sqrt(1 - alpha_bar), G' in [-1,1].
    """
    ab = schedule.alpha_bar[t]
    if ab >= 1.0:
        raise ValueError(f"timestep {t} has alpha_bar == 1 (division by zero)")
    g = to_diffusion_frame(np.asarray(target, dtype=np.float32))
    return ((noised - np.sqrt(ab) * g) / np.sqrt(1.0 - ab)).astype(np.float32)


def sds_gradient(noised: NoisedRender, denoiser: DenoiserHandle, schedule: DiffusionSchedule,
                 conditioning: np.ndarray = None) -> np.ndarray:
    """w(t) * (eps_pred(R_t, t, cond) - eps): pixel gradient in the [-1,1] frame.

    No gradient flows through the denoiser itself (score distillation).
    Remote failures retry 3 times, then the step is skipped (zero gradient,
    warning emitted).
    """
    cond = noised.render if conditioning is None else conditioning
    if denoiser.backend == "analytic":
        eps_pred = analytic_denoiser(noised.noised, noised.timestep, denoiser.target, schedule)
    else:
        eps_pred = None
        for attempt in range(3):
            try:
                eps_pred = remote_denoise(denoiser, noised.noised, noised.timestep, cond)
                break
            except Exception as exc:  # noqa: BLE001 - network boundary
                last = exc
                time.sleep(min(0.2 * (attempt + 1), 1.0))
        if eps_pred is None:
            warnings.warn(f"remote denoiser unreachable, skipping step: {last}")
            return np.zeros_like(noised.noised)
    w = schedule.weight(noised.timestep)
    return (np.float32(w) * (eps_pred - noised.noise)).astype(np.float32)


# -- wire protocol (shared with the denoiser service) --


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(payload: str, shape) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"), validate=True)
    count = int(np.prod(shape))
    if len(raw) != 4 * count:
        raise ValueError(f"payload holds {len(raw)} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def build_denoise_request(noised: np.ndarray, t: int, conditioning: np.ndarray) -> dict:
    h, w, c = noised.shape
    ch, cw, cc = conditioning.shape
    return {
        "shape": [int(h), int(w), int(c)],
        "r_t_b64": encode_array(noised),
        "t": int(t),
        "cond_b64": encode_array(conditioning),
        "cond_shape": [int(ch), int(cw), int(cc)],
    }


def parse_denoise_response(doc: dict, shape) -> np.ndarray:
    if "epsilon_b64" not in doc:
        raise ValueError("response missing epsilon_b64")
    return decode_array(doc["epsilon_b64"], shape)


def remote_denoise(handle: DenoiserHandle, noised: np.ndarray, t: int, conditioning: np.ndarray) -> np.ndarray:
    import requests

    url = handle.endpoint.rstrip("/") + "/v1/denoise"
    resp = requests.post(url, json=build_denoise_request(noised, t, conditioning), timeout=handle.timeout)
    if resp.status_code != 200:
        raise RuntimeError(f"denoiser returned {resp.status_code}: {resp.text[:200]}")
    return parse_denoise_response(resp.json(), noised.shape)


def protocol_test_vectors(seed: int = 1234) -> dict:
    """Deterministic request/response vectors for protocol conformance."""
    rng = np.random.default_rng(seed)
    schedule = build_schedule(1000)
    vectors = []
    for i, (h, w) in enumerate(((8, 8), (5, 7))):
        render = rng.random((h, w, 3)).astype(np.float32)
        target = rng.random((h, w, 3)).astype(np.float32)
        t = int(rng.integers(100, 900))
        nr = noise_render(render, t, schedule, seed=seed + i)
        eps = analytic_denoiser(nr.noised, t, target, schedule)
        vectors.append(
            {
                "request": build_denoise_request(nr.noised, t, render),
                "analytic_target_b64": encode_array(target),
                "analytic_epsilon_b64": encode_array(eps),
            }
        )
    malformed = [
        {"shape": [8, 8, 3], "t": 10},  # missing payloads
        {"shape": [8, 8, 3], "r_t_b64": encode_array(np.zeros((4, 4, 3), np.float32)),
         "t": 10, "cond_b64": encode_array(np.zeros((8, 8, 3), np.float32)), "cond_shape": [8, 8, 3]},
        {"shape": "bad", "r_t_b64": "", "t": -1, "cond_b64": "", "cond_shape": []},
    ]
    return {"schedule": {"timesteps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
            "valid": vectors, "malformed": malformed}


# -- distillation loop --


@dataclass
class DistillConfig:
    steps: int = 2000
    learning_rate: float = 0.01
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    anneal: bool = True  # max timestep decays linearly over the run
    seed: int = 0
    distill_all_maps: bool = False


def distill_texture(
    mesh,
    atlas,
    textures,  # MaterialTextures with the hi-res kd map (trainable)
    views,  # list of ViewEntry (pseudo/real) at the fusion pose
    env_pre,  # PrefilteredEnv frozen from stage 2
    denoiser: DenoiserHandle,
    schedule: DiffusionSchedule,
    config: DistillConfig = None,
    render_fn=None,
    targets: dict = None,
):
    """SDS loop: render a random fusion view, noise it, inject the scaled
    score as the pixel gradient, Adam-update the texture texels.

    Only texels inside the atlas validity mask receive updates; seam padding
    is re-dilated afterward. `render_fn(view) -> (rgb Tensor (P,3), pixel
    indices)` defaults to the split-sum shader. `targets` optionally maps view
    index -> target image for the analytic backend.
    """
    from .rasterpbr.stage2 import render_view_linear
    from .rasterpbr.shading import linear_to_srgb
    from .uvtex import seam_dilate

    config = config or DistillConfig()
    if config.steps == 0:
        return textures
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    store.params["kd"] = textures.kd
    textures.kd.requires_grad = True
    store.m["kd"] = np.zeros_like(textures.kd.data)
    store.v["kd"] = np.zeros_like(textures.kd.data)
    store.steps["kd"] = 0
    if config.distill_all_maps:
        for name, tex in (("rough", textures.roughness), ("metal", textures.metalness)):
            store.params[name] = tex
            tex.requires_grad = True
            store.m[name] = np.zeros_like(tex.data)
            store.v[name] = np.zeros_like(tex.data)
            store.steps[name] = 0
    optim = OptimConfig(learning_rate=config.learning_rate)

    t_lo = max(int(config.t_min_frac * schedule.timesteps), 1)
    t_hi0 = int(config.t_max_frac * schedule.timesteps)
    valid = textures.validity
    invalid = ~valid
    kd_pad_snapshot = textures.kd.data[invalid].copy()

    for step in range(config.steps):
        vi = int(rng.integers(len(views)))
        view = views[vi]
        rgb_lin, pix, H, W = render_view_linear(mesh, atlas, textures, view.camera, env_pre)
        rgb_srgb = linear_to_srgb(rgb_lin)

        frame = np.zeros((H, W, 3), dtype=np.float32)
        frame[pix[:, 0], pix[:, 1]] = rgb_srgb.data
        t_hi = t_hi0
        if config.anneal:
            t_hi = max(t_lo + 1, int(t_hi0 - (t_hi0 - t_lo) * step / max(config.steps - 1, 1)))
        t = int(rng.integers(t_lo, t_hi + 1))
        nr = noise_render(frame, t, schedule, seed=config.seed * 100003 + step)

        handle = denoiser
        if denoiser.backend == "analytic" and targets is not None:
            handle = DenoiserHandle("analytic", target=targets[vi], timeout=denoiser.timeout)
        grad_frame = sds_gradient(nr, handle, schedule)
        # chain through the [0,1] -> [-1,1] map onto the rendered pixels
        pixel_grad = 2.0 * grad_frame[pix[:, 0], pix[:, 1]]

        store.zero_grad()
        rgb_srgb.backward(Tensor(pixel_grad))
        adam_step(store, optim)
        textures.project()
        # seam taps can bleed gradient into padding texels; freeze them
        if invalid.any():
            textures.kd.data[invalid] = kd_pad_snapshot

    if invalid.any():
        textures.kd.data = seam_dilate(textures.kd.data, valid)
    return textures
