"""Diffusion schedule, forward noising, denoiser backends and sampling.

The denoiser is always treated as a critic: backends expose a single
``predict(z_t, t, prompt)`` and never receive gradients. Schedules keep
float64 sigma/alpha tables so the alpha^2 + sigma^2 = 1 identity holds to
1e-9 regardless of the tensor dtype used downstream.
"""

from __future__ import annotations

import base64
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DegenerateScheduleError, InvalidArgumentError

Tensor = torch.Tensor

SCHEDULE_SHAPES = ("linear-sigma", "cosine")


@dataclass
class DiffusionSchedule:
    """Monotone noise levels sigma_t in (0,1) with alpha_t = sqrt(1-sigma_t^2)."""

    sigma: np.ndarray  # (T+1,) float64, index t = 0..T
    alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim != 1 or s.size < 3:
            raise InvalidArgumentError("schedule needs at least T=2 steps")
        if np.any(s <= 0.0) or np.any(s >= 1.0):
            raise InvalidArgumentError("sigma values must lie strictly in (0,1)")
        if np.any(np.diff(s) <= 0.0):
            raise InvalidArgumentError("sigma must be strictly increasing")
        self.sigma = s
        self.alpha = np.sqrt(1.0 - s * s)

    @property
    def T(self) -> int:
        return self.sigma.size - 1

    def at(self, t: int) -> tuple:
        """(alpha_t, sigma_t) as python floats."""
        return float(self.alpha[t]), float(self.sigma[t])

    def index_for(self, t_cont: float) -> int:
        """Map continuous t in [0,1] to the nearest discrete index."""
        return int(round(min(max(t_cont, 0.0), 1.0) * self.T))


def make_schedule(T: int, shape: str = "linear-sigma",
                  eps: float = 1e-4) -> DiffusionSchedule:
    """Build a schedule with sigma_0 ~ 0 and sigma_T ~ 1."""
    if T < 2:
        raise InvalidArgumentError("T must be >= 2")
    if shape not in SCHEDULE_SHAPES:
        raise InvalidArgumentError(f"unknown schedule shape {shape!r}")
    t = np.arange(T + 1, dtype=np.float64) / T
    if shape == "linear-sigma":
        ramp = t
    else:
        ramp = np.sin(0.5 * math.pi * t)
    sigma = eps + (1.0 - 2.0 * eps) * ramp
    return DiffusionSchedule(sigma=sigma)


def add_noise(schedule: DiffusionSchedule, z0: Tensor, t: int, eps: Tensor) -> Tensor:
    """z_t = alpha_t z_0 + sigma_t eps, exactly."""
    if z0.shape != eps.shape:
        raise InvalidArgumentError("z0 and eps must have the same shape")
    a, s = schedule.at(t)
    return a * z0 + s * eps


class DenoiserBackend:
    """Interface: predict the noise content of a noised latent."""

    def predict(self, z_t: Tensor, t: int, prompt: Optional[str]) -> Tensor:
        raise NotImplementedError


def cfg_predict(backend: DenoiserBackend, z_t: Tensor, t: int,
                prompt: Optional[str], scale: float) -> Tensor:
    """Classifier-free guidance: e_uncond + scale (e_cond - e_uncond)."""
    if scale == 0.0 or prompt is None:
        return backend.predict(z_t, t, None)
    cond = backend.predict(z_t, t, prompt)
    if scale == 1.0:
        return cond
    uncond = backend.predict(z_t, t, None)
    return uncond + scale * (cond - uncond)


def sample(backend: DenoiserBackend, schedule: DiffusionSchedule, zT: Tensor,
           prompt: Optional[str] = None) -> Tensor:
    """Progressively denoise z_T with z_{t-1} = (z_t - sigma_t e(z_t)) / alpha_t."""
    z = zT
    for t in range(schedule.T, 0, -1):
        a, s = schedule.at(t)
        if a == 0.0:
            raise DegenerateScheduleError(f"alpha_{t} is zero")
        z = (z - s * backend.predict(z, t, prompt)) / a
    return z


def denoiser_loss(backend: DenoiserBackend, z0_batch: Sequence[Tensor],
                  schedule: DiffusionSchedule, rng: torch.Generator,
                  prompts: Optional[Sequence[Optional[str]]] = None) -> Tensor:
    """Mean over the batch of ||e_hat(alpha z0 + sigma eps | y) - eps||^2.

    The norm is the full squared L2 norm over latent elements; one (t, eps)
    pair is drawn per batch item.
    """
    if len(z0_batch) == 0:
        raise InvalidArgumentError("batch must be non-empty")
    total = None
    for i, z0 in enumerate(z0_batch):
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=rng).item())
        eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
        z_t = add_noise(schedule, z0, t, eps)
        pred = backend.predict(z_t, t, prompts[i] if prompts else None)
        sq = ((pred - eps) ** 2).sum()
        total = sq if total is None else total + sq
    return total / len(z0_batch)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class TargetMockDenoiser(DenoiserBackend):
    """Oracle built around a fixed clean latent z*: predicts the exact noise
    a sample would contain if its clean part were z*. Offline stand-in for a
    real critic; prompt-independent by construction."""

    def __init__(self, zstar: Tensor, schedule: DiffusionSchedule):
        self.zstar = zstar.detach()
        self.schedule = schedule

    def predict(self, z_t: Tensor, t: int, prompt: Optional[str] = None) -> Tensor:
        a, s = self.schedule.at(t)
        if s == 0.0:
            raise DegenerateScheduleError(f"sigma_{t} is zero")
        return (z_t - a * self.zstar) / s


def target_mock_denoiser(zstar: Tensor, schedule: DiffusionSchedule) -> TargetMockDenoiser:
    return TargetMockDenoiser(zstar, schedule)


class ToyConvDenoiser(nn.Module, DenoiserBackend):
    """Small fully-convolutional denoiser for desk-scale latents.

    Conditioning: sigma_t enters as an extra channel; prompts map to learned
    embeddings in a lazily-built vocabulary (None = unconditional).
    """

    def __init__(self, channels: int, schedule: DiffusionSchedule,
                 hidden: int = 48, embed_dim: int = 8, max_prompts: int = 16):
        super().__init__()
        self.schedule = schedule
        self.embed = nn.Embedding(max_prompts + 1, embed_dim)  # slot 0 = uncond
        nn.init.zeros_(self.embed.weight)
        self.vocab = {}
        self.net = nn.Sequential(
            nn.Conv2d(channels + 1 + embed_dim, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, channels, 3, padding=1),
        )

    def prompt_slot(self, prompt: Optional[str]) -> int:
        if prompt is None:
            return 0
        if prompt not in self.vocab:
            if len(self.vocab) >= self.embed.num_embeddings - 1:
                return 0
            self.vocab[prompt] = len(self.vocab) + 1
        return self.vocab[prompt]

    def forward(self, z_t: Tensor, t: int, prompt: Optional[str] = None) -> Tensor:
        _, s = self.schedule.at(t)
        c, h, w = z_t.shape
        lvl = torch.full((1, h, w), s, dtype=z_t.dtype)
        emb = self.embed(torch.tensor(self.prompt_slot(prompt)))
        emb = emb[:, None, None].expand(-1, h, w).to(z_t.dtype)
        x = torch.cat([z_t, lvl, emb], dim=0)
        return self.net(x[None])[0]

    def predict(self, z_t: Tensor, t: int, prompt: Optional[str] = None) -> Tensor:
        with torch.no_grad():
            return self.forward(z_t, t, prompt)


def train_toy_denoiser(backend: ToyConvDenoiser, z0_batchs: Sequence[Tensor],
                       steps: int, lr: float, rng: torch.Generator,
                       prompts: Optional[Sequence[Optional[str]]] = None,
                       batch_size: int = 8, p_uncond: float = 0.2) -> list:
    """Eq.-style denoising training on a fixed latent set; returns the loss
    trace. Prompt conditioning is dropped at rate p_uncond so the backend
    also learns the unconditional prediction."""
    opt = torch.optim.Adam(backend.parameters(), lr=lr)
    losses = []
    n = len(z0_batchs)
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=rng)
        batch, ps = [], []
        for i in idx.tolist():
            batch.append(z0_batchs[i])
            p = prompts[i] if prompts else None
            if p is not None and torch.rand((), generator=rng).item() < p_uncond:
                p = None
            ps.append(p)
        opt.zero_grad()
        total = None
        for z0, p in zip(batch, ps):
            t = int(torch.randint(1, backend.schedule.T + 1, (1,), generator=rng).item())
            eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
            z_t = add_noise(backend.schedule, z0, t, eps)
            sq = ((backend.forward(z_t, t, p) - eps) ** 2).sum()
            total = sq if total is None else total + sq
        loss = total / len(batch)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


# ---------------------------------------------------------------------------
# Latent codec
# ---------------------------------------------------------------------------

def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are basis vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] *= math.sqrt(0.5)
    return m


class LatentCodec:
    """Interface: encode(image) -> latent, decode(latent) -> image, plus the
    vector-Jacobian product of encode at a given image."""

    def encode(self, image: Tensor) -> Tensor:
        raise NotImplementedError

    def decode(self, latent: Tensor) -> Tensor:
        raise NotImplementedError

    def encode_vjp(self, image: Tensor, cotangent: Tensor) -> Tensor:
        raise NotImplementedError


class OrthonormalBlockCodec(LatentCodec):
    """Fixed orthonormal block-DCT transform with an exact inverse.

    Images (H, W, 3) in [0,1] map to latents (3 b^2, H/b, W/b); spatial size
    shrinks by the block size while all information moves into channels, so
    decode(encode(I)) == I up to float rounding and the encode Jacobian is
    an orthogonal matrix (vjp == decode of the cotangent). Inputs whose size
    is not a multiple of the block are center-cropped first.
    """

    def __init__(self, block: int = 4):
        self.block = block
        m = _dct_matrix(block)
        self.basis = torch.tensor(np.kron(m, m), dtype=torch.float64)  # (b^2, b^2)

    def center_fit(self, image: Tensor) -> Tensor:
        b = self.block
        H, W = image.shape[0], image.shape[1]
        h, w = (H // b) * b, (W // b) * b
        i0, j0 = (H - h) // 2, (W - w) // 2
        return image[i0:i0 + h, j0:j0 + w]

    @property
    def channels(self) -> int:
        return 3 * self.block * self.block

    def encode(self, image: Tensor) -> Tensor:
        if image.dim() != 3 or image.shape[2] != 3:
            raise InvalidArgumentError("codec expects an (H, W, 3) image")
        img = self.center_fit(image)
        b = self.block
        H, W = img.shape[0], img.shape[1]
        x = img.to(torch.float64).reshape(H // b, b, W // b, b, 3)
        x = x.permute(0, 2, 4, 1, 3).reshape(H // b, W // b, 3, b * b)
        z = x @ self.basis.T
        z = z.permute(2, 3, 0, 1).reshape(3 * b * b, H // b, W // b)
        return z.to(image.dtype)

    def decode(self, latent: Tensor) -> Tensor:
        b = self.block
        c, h, w = latent.shape
        if c != self.channels:
            raise InvalidArgumentError("latent channel count mismatch")
        z = latent.to(torch.float64).reshape(3, b * b, h, w).permute(2, 3, 0, 1)
        x = z @ self.basis
        x = x.reshape(h, w, 3, b, b).permute(0, 3, 1, 4, 2).reshape(h * b, w * b, 3)
        return x.to(latent.dtype)

    def encode_vjp(self, image: Tensor, cotangent: Tensor) -> Tensor:
        """Adjoint of the (orthonormal) encode: exactly decode(cotangent),
        zero-padded back to the uncropped image size if center_fit cropped."""
        g = self.decode(cotangent)
        if g.shape == image.shape:
            return g
        out = torch.zeros_like(image)
        H, W = image.shape[0], image.shape[1]
        h, w = g.shape[0], g.shape[1]
        i0, j0 = (H - h) // 2, (W - w) // 2
        out[i0:i0 + h, j0:j0 + w] = g
        return out


# ---------------------------------------------------------------------------
# Remote backend adapter
# ---------------------------------------------------------------------------

ENV_URL = "FARM3D_SD_URL"
ENV_TIMEOUT = "FARM3D_SD_TIMEOUT_S"


def _b64(t: Tensor) -> str:
    return base64.b64encode(t.detach().cpu().numpy().astype("<f4").tobytes()).decode()


def _unb64(data: str, shape) -> Tensor:
    arr = np.frombuffer(base64.b64decode(data), dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.copy())


class RemoteDenoiserBackend(DenoiserBackend):
    """HTTP adapter for an externally-hosted denoiser.

    Wire contract: POST JSON {latent, shape, t, prompt, negative_prompt,
    guidance_scale} -> {noise_prediction, shape}; tensors travel as base64
    float32. URL/timeout come from FARM3D_SD_URL / FARM3D_SD_TIMEOUT_S when
    not given explicitly.
    """

    def __init__(self, url: Optional[str] = None, timeout_s: Optional[float] = None,
                 retries: int = 2, guidance_scale: float = 1.0,
                 negative_prompt: str = ""):
        self.url = url or os.environ.get(ENV_URL)
        if not self.url:
            raise InvalidArgumentError(f"no backend URL; set {ENV_URL}")
        self.timeout_s = timeout_s if timeout_s is not None else \
            float(os.environ.get(ENV_TIMEOUT, "30"))
        self.retries = retries
        self.guidance_scale = guidance_scale
        self.negative_prompt = negative_prompt

    def predict(self, z_t: Tensor, t: int, prompt: Optional[str] = None) -> Tensor:
        import requests
        payload = {
            "latent": _b64(z_t),
            "shape": list(z_t.shape),
            "t": int(t),
            "prompt": prompt,
            "negative_prompt": self.negative_prompt,
            "guidance_scale": self.guidance_scale,
        }
        last = None
        for _ in range(self.retries + 1):
            try:
                r = requests.post(self.url, json=payload, timeout=self.timeout_s)
                r.raise_for_status()
                body = r.json()
                return _unb64(body["noise_prediction"], body.get("shape", z_t.shape)) \
                    .to(z_t.dtype)
            except Exception as exc:  # noqa: BLE001 - retried, then re-raised
                last = exc
        raise last
