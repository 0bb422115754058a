"""Category-level score distillation: virtual views rendered from predicted
shape/appearance are scored by a frozen denoiser, and the noise residual is
chained back through codec and renderer into the encoder parameters.

The sampled viewpoint and light replace the predicted ones before rendering,
so they never appear in the gradient; the weight factor defaults to
w_t = sigma_t^2 (configurable).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .diffusion import DiffusionSchedule, LatentCodec, cfg_predict
from .errors import InvalidArgumentError, SkipSampleError
from .geometry import Mesh
from .params import PhotoGeoParams, StaticShape, subst
from .renderer import (Appearance, Camera, LightDirection, Viewpoint, render,
                       sample_virtual_view)

Tensor = torch.Tensor


@dataclass
class SdsConfig:
    t_min: float = 0.02
    t_max: float = 0.6
    guidance_scale: float = 100.0
    render_size: int = 256
    modes: tuple = ("shaded", "textureless", "albedo")
    weight_mode: str = "sigma2"   # w_t; "sigma2" or "one"
    sharpness: float = 2.0
    background: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise InvalidArgumentError("need 0 <= t_min < t_max <= 1")


@dataclass
class SdsSample:
    t: float
    eps: Tensor
    view: Viewpoint
    light: LightDirection
    mode: str


@dataclass
class SdsGradReport:
    """Gradient contributions per parameter plus scalar diagnostics.

    ``grads`` only ever holds entries for shape/appearance (and shared
    trunk) parameters; viewpoint and light heads are recorded in
    ``excluded`` with no gradient, by construction of the substitution.
    """

    grads: dict
    group_of: dict
    excluded: tuple
    diagnostics: dict

    def grad_norm(self) -> float:
        sq = sum(float((g ** 2).sum()) for g in self.grads.values())
        return math.sqrt(sq)


def sample_t(rng: np.random.Generator, t_min: float = 0.02,
             t_max: float = 0.6) -> float:
    """Noise level t ~ U(t_min, t_max)."""
    if not (0.0 <= t_min < t_max <= 1.0):
        raise InvalidArgumentError("need 0 <= t_min < t_max <= 1")
    return float(rng.uniform(t_min, t_max))


def sds_gradient(model, image, caption: Optional[str], cam: Camera,
                 denoiser, codec: LatentCodec, schedule: DiffusionSchedule,
                 rng: np.random.Generator, config: SdsConfig,
                 view_override: Optional[tuple] = None,
                 t_override: Optional[float] = None,
                 mode_override: Optional[str] = None) -> SdsGradReport:
    """One distillation sample: substitute a random view/light, render, noise
    the latent, query the critic and backpropagate the weighted residual
    through codec and renderer into the shape/appearance parameters."""
    params = model.encode(image)
    view, light = view_override if view_override is not None \
        else sample_virtual_view(rng)
    mode = mode_override if mode_override is not None \
        else config.modes[int(rng.integers(len(config.modes)))]
    virtual = subst(params, view, light)
    sds_cam = Camera(fov_deg=cam.fov_deg,
                     image_size=(config.render_size, config.render_size))
    out = render(virtual, sds_cam, mode=mode, sharpness=config.sharpness,
                 background=config.background)
    z0 = codec.encode(out.rgb)

    t_cont = t_override if t_override is not None \
        else sample_t(rng, config.t_min, config.t_max)
    idx = schedule.index_for(t_cont)
    alpha, sigma = schedule.at(idx)
    eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).to(z0.dtype)
    z_t = alpha * z0 + sigma * eps

    eps_hat = cfg_predict(denoiser, z_t.detach(), idx, caption,
                          config.guidance_scale)
    if not bool(torch.isfinite(eps_hat).all()):
        raise SkipSampleError("non-finite denoiser output", diagnostics={
            "t": t_cont, "sigma": sigma, "alpha": alpha, "mode": mode})
    residual = (eps_hat - eps).detach()
    w_t = sigma * sigma if config.weight_mode == "sigma2" else 1.0
    surrogate = w_t * (residual * z_t).sum()

    groups = model.sds_param_groups()
    included, names, group_of = [], [], {}
    for gname in ("shape", "appearance", "shared"):
        for pname, p in groups.get(gname, {}).items():
            included.append(p)
            names.append(pname)
            group_of[pname] = gname
    excluded_names = tuple(pname for gname in ("viewpoint", "light")
                           for pname in groups.get(gname, {}))
    excluded_params = [p for gname in ("viewpoint", "light")
                       for p in groups.get(gname, {}).values()]

    all_grads = torch.autograd.grad(
        surrogate, included + excluded_params, allow_unused=True)
    grads = {}
    for name, g in zip(names, all_grads[:len(included)]):
        if g is not None:
            grads[name] = g
    for name, g in zip(excluded_names, all_grads[len(included):]):
        if g is not None and float(g.abs().max()) > 0.0:
            raise AssertionError(f"gradient leaked into excluded head {name}")

    diagnostics = {
        "t": t_cont, "sigma": sigma, "alpha": alpha, "mode": mode,
        "residual_norm": float(torch.linalg.vector_norm(residual)),
        "z0_norm": float(torch.linalg.vector_norm(z0.detach())),
    }
    report = SdsGradReport(grads=grads, group_of=group_of,
                           excluded=excluded_names, diagnostics=diagnostics)
    diagnostics["grad_norm"] = report.grad_norm()
    return report


# ---------------------------------------------------------------------------
# Offline descent harness
# ---------------------------------------------------------------------------

class QuadScene(nn.Module):
    """Single textured quad facing the camera; the minimal renderable asset
    for exercising the distillation gradient end to end."""

    def __init__(self, tex_res: int = 16, distance: float = 10.0,
                 half_size: float = 1.8, dtype=torch.float32):
        super().__init__()
        self.albedo_logits = nn.Parameter(torch.zeros(tex_res, tex_res, 3, dtype=dtype))
        s = half_size
        self.mesh = Mesh(
            vertices=torch.tensor([[-s, -s, 0], [s, -s, 0], [s, s, 0], [-s, s, 0]],
                                  dtype=dtype),
            faces=torch.tensor([[0, 1, 2], [0, 2, 3]]),
            uv=torch.tensor([[0.02, 0.02], [0.98, 0.02], [0.98, 0.98], [0.02, 0.98]],
                            dtype=dtype))
        self.view = Viewpoint(rotation=torch.eye(3, dtype=dtype),
                              translation=torch.tensor([0.0, 0.0, distance], dtype=dtype))
        self.light = LightDirection(
            direction=torch.tensor([0.0, 0.0, -1.0], dtype=dtype))

    def encode(self, image=None) -> PhotoGeoParams:
        app = Appearance(albedo=torch.sigmoid(self.albedo_logits),
                         ambient=torch.tensor(1.0), diffuse=torch.tensor(0.0))
        return PhotoGeoParams(shape=StaticShape(self.mesh), appearance=app,
                              viewpoint=self.view, light=self.light)

    def sds_param_groups(self) -> dict:
        return {"shape": {}, "appearance": {"albedo_logits": self.albedo_logits},
                "viewpoint": {}, "light": {}}


def sds_descent_demo(asset, zstar_image: Tensor, steps: int, lr: float,
                     codec: LatentCodec, schedule: DiffusionSchedule,
                     cam: Camera, rng: np.random.Generator,
                     config: Optional[SdsConfig] = None,
                     fixed_t: float = 0.4) -> dict:
    """Descend the distillation gradient against a mock critic whose target
    is the latent of ``zstar_image``, at a fixed viewpoint and noise level.
    Records ||z0 - z*|| per step; divergence (10x growth) is reported, not
    raised."""
    from .diffusion import target_mock_denoiser

    config = config or SdsConfig(render_size=zstar_image.shape[0],
                                 guidance_scale=1.0)
    z_star = codec.encode(zstar_image)
    denoiser = target_mock_denoiser(z_star, schedule)
    opt = torch.optim.Adam([p for g in asset.sds_param_groups().values()
                            for p in g.values()], lr=lr)
    fixed_view = (asset.encode(None).viewpoint, asset.encode(None).light)

    def latent_gap() -> float:
        with torch.no_grad():
            out = render(asset.encode(None), cam, mode="albedo",
                         sharpness=config.sharpness, background=config.background)
            return float(torch.linalg.vector_norm(codec.encode(out.rgb) - z_star))

    trace = [latent_gap()]
    params_by_name = {n: p for g in asset.sds_param_groups().values()
                      for n, p in g.items()}
    for _ in range(steps):
        report = sds_gradient(asset, None, None, cam, denoiser, codec, schedule,
                              rng, config, view_override=fixed_view,
                              t_override=fixed_t, mode_override="albedo")
        opt.zero_grad()
        for name, g in report.grads.items():
            params_by_name[name].grad = g
        if lr > 0:
            opt.step()
        trace.append(latent_gap())
    return {"trace": trace,
            "diverged": trace[-1] > 10.0 * max(trace[0], 1e-12)}
