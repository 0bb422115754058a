"""Photo-geometric autoencoder: encoder network, reconstruction losses,
regularizers, the training loop, and test-time adaptation.

The encoder maps an image to (shape, appearance, viewpoint, light). Shape
combines the shared category prior (a learnable SDF grid, part of theta)
with per-image deformation offsets and skeleton pose. The viewpoint head
keeps four rotation hypotheses with a score each; training renders all
hypotheses at low resolution, optimizes the best one and regresses the
scores onto the per-hypothesis losses, so inference can pick by score.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import distill
from .diffusion import DiffusionSchedule, LatentCodec
from .errors import InvalidArgumentError, SkipSampleError
from .geometry import (Mesh, Pose, SdfGrid, Skeleton, SkinWeights,
                       axis_angle_to_quat, build_quadruped_skeleton,
                       compute_skin_weights, eikonal_loss, extract_mesh,
                       make_ellipsoid_prior)
from .params import ArticulatedShape, PhotoGeoParams
from .renderer import (Appearance, Camera, LightDirection, RenderOutput,
                       Viewpoint, rasterize, render, sample_texture)

Tensor = torch.Tensor


@dataclass
class TrainSample:
    image: Tensor                      # (H, W, 3) in [0,1]
    mask: Tensor                       # (H, W) in {0,1}
    caption: str = ""
    category: str = ""
    features: Optional[Tensor] = None  # (H, W, C) optional feature map

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise InvalidArgumentError("image and mask sizes differ")
        with torch.no_grad():
            bad = ((self.mask != 0) & (self.mask != 1)).any()
        if bool(bad):
            raise InvalidArgumentError("mask must be binary")


@dataclass
class TrainConfig:
    image_size: int = 128
    grid_res: int = 20
    prior_axes: tuple = (2.1, 2.1, 1.05)
    texture_res: int = 16
    feature_dim: int = 0
    n_hypotheses: int = 4
    deform_budget: float = 0.3
    max_bone_angle: float = 0.5

    lr: float = 1e-4
    iterations: int = 2000
    batch_size: int = 4
    sharpness: float = 2.0
    background: float = 0.5
    hyp_render_size: int = 48

    w_photo: float = 1.0
    w_mask: float = 3.0
    w_feat: float = 1.0
    w_eik: float = 0.1
    w_def: float = 1.0
    w_art: float = 0.3
    w_score: float = 0.1

    sds_weight: float = 1e-4
    sds_every: int = 2
    sds_batch_fraction: float = 0.5
    sds_render_size: int = 256
    t_min: float = 0.02
    t_max: float = 0.6
    guidance_scale: float = 100.0

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise InvalidArgumentError("need 0 <= t_min < t_max <= 1")
        if self.sds_every < 1:
            raise InvalidArgumentError("sds_every must be >= 1")
        for name in ("w_photo", "w_mask", "w_feat", "w_eik", "w_def", "w_art",
                     "sds_weight"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")

    def sds_config(self) -> distill.SdsConfig:
        return distill.SdsConfig(
            t_min=self.t_min, t_max=self.t_max,
            guidance_scale=self.guidance_scale,
            render_size=self.sds_render_size, sharpness=self.sharpness,
            background=self.background)


def _gram_schmidt_rotation(six: Tensor) -> Tensor:
    """6D rotation parameterization -> orthonormal matrix with det +1."""
    a, b = six[..., :3], six[..., 3:]
    r1 = a / torch.linalg.norm(a, dim=-1, keepdim=True).clamp_min(1e-8)
    b = b - (r1 * b).sum(-1, keepdim=True) * r1
    r2 = b / torch.linalg.norm(b, dim=-1, keepdim=True).clamp_min(1e-8)
    r3 = torch.cross(r1, r2, dim=-1)
    return torch.stack([r1, r2, r3], dim=-2)  # rows


class EncoderModel(nn.Module):
    """f_theta: image -> photo-geometric parameters, plus the category prior."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        prior = make_ellipsoid_prior(config.prior_axes, config.grid_res)
        self.prior_raw = nn.Parameter(prior.values.clone())
        self.prior_lo = prior.lo
        self.prior_hi = prior.hi

        ch = (32, 64, 128, 128)
        layers, prev = [], 3
        for c in ch:
            layers += [nn.Conv2d(prev, c, 4, stride=2, padding=1),
                       nn.GroupNorm(4, c), nn.GELU()]
            prev = c
        layers += [nn.AdaptiveAvgPool2d(2), nn.Flatten(),
                   nn.Linear(ch[-1] * 4, 256), nn.GELU()]
        self.trunk = nn.Sequential(*layers)

        def zero_head(out_dim, bias=None):
            lin = nn.Linear(256, out_dim)
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
            if bias is not None:
                with torch.no_grad():
                    lin.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))
            return lin

        self.offset_latent = zero_head(32)
        self.offset_field = nn.Sequential(
            nn.Linear(3 + 32, 64), nn.GELU(), nn.Linear(64, 64), nn.GELU(),
            nn.Linear(64, 3))
        nn.init.zeros_(self.offset_field[-1].weight)
        nn.init.zeros_(self.offset_field[-1].bias)

        self.num_bones = 20
        self.pose_head = zero_head(self.num_bones * 3)

        tr = config.texture_res
        self.tex_head = zero_head(tr * tr * 3)
        self.gain_head = zero_head(2)
        if config.feature_dim > 0:
            self.feature_tex = nn.Parameter(torch.zeros(tr, tr, config.feature_dim))
        else:
            self.feature_tex = None

        nh = config.n_hypotheses
        view_bias = []
        for k in range(nh):
            view_bias += [1, 0, 0, 0, 1, 0] + [0.0] + [0, 0, 0]  # identity 6d, score, trans
        self.view_head = zero_head(nh * 10, bias=view_bias)
        self.light_head = zero_head(3, bias=[0.2, 0.2, 0.8])

        rot_bias = []
        for k in range(nh):
            from .renderer import look_at
            az = math.radians(90.0 * k)
            pos = 10.0 * np.array([math.cos(az) * math.cos(math.radians(15)),
                                   math.sin(az) * math.cos(math.radians(15)),
                                   math.sin(math.radians(15))])
            rot_bias.append(look_at(pos).rotation)
        self.register_buffer("rot_bias", torch.stack(rot_bias), persistent=False)

    # -- category-level geometry -------------------------------------------

    def prior_grid(self) -> SdfGrid:
        """Learned prior field, kept bilaterally symmetric across y=0."""
        sym = 0.5 * (self.prior_raw + torch.flip(self.prior_raw, dims=(1,)))
        return SdfGrid(values=sym, lo=self.prior_lo, hi=self.prior_hi)

    def category_geometry(self):
        """(rest mesh, skeleton, skin weights) for the current prior."""
        prior = self.prior_grid()
        rest = extract_mesh(prior, 0.0)
        skeleton = build_quadruped_skeleton(rest.detach())
        weights = compute_skin_weights(rest.detach(), skeleton)
        return prior, rest, skeleton, weights

    # -- per-image prediction ------------------------------------------------

    def forward(self, images: Tensor) -> dict:
        """images: (B, 3, H, W). Returns raw head outputs."""
        feats = self.trunk(images)
        B = feats.shape[0]
        nh = self.config.n_hypotheses
        view = self.view_head(feats).reshape(B, nh, 10)
        rot = _gram_schmidt_rotation(view[..., :6]) @ self.rot_bias[None]
        score = view[..., 6]
        t_raw = view[..., 7:]
        trans = torch.stack([
            0.8 * torch.tanh(t_raw[..., 0]),
            0.8 * torch.tanh(t_raw[..., 1]),
            10.0 * torch.exp(0.25 * torch.tanh(t_raw[..., 2])),
        ], dim=-1)
        light = self.light_head(feats)
        light = light / torch.linalg.norm(light, dim=-1, keepdim=True).clamp_min(1e-6)
        tr = self.config.texture_res
        return {
            "feats": feats,
            "offset_latent": self.offset_latent(feats),
            "pose_aa": self.config.max_bone_angle *
                       torch.tanh(self.pose_head(feats).reshape(B, self.num_bones, 3)),
            "texture": torch.sigmoid(self.tex_head(feats).reshape(B, tr, tr, 3)),
            "gains": 0.05 + 0.9 * torch.sigmoid(self.gain_head(feats)),
            "rotations": rot, "scores": score, "translations": trans,
            "light": light,
        }

    def predict_offsets(self, latent: Tensor, rest_vertices: Tensor) -> Tensor:
        """Deformation field evaluated at the rest vertices."""
        v = rest_vertices.detach()
        x = torch.cat([v, latent[None].expand(v.shape[0], -1)], dim=-1)
        return self.config.deform_budget * torch.tanh(self.offset_field(x))

    def build_params(self, out: dict, i: int, hyp: int, prior: SdfGrid,
                     rest: Mesh, skeleton: Skeleton,
                     weights: SkinWeights) -> PhotoGeoParams:
        offsets = self.predict_offsets(out["offset_latent"][i], rest.vertices)
        pose = Pose(quats=axis_angle_to_quat(out["pose_aa"][i]))
        shape = ArticulatedShape(
            prior=prior, rest_mesh=rest, skeleton=skeleton, skin_weights=weights,
            offsets=offsets, pose=pose, deform_budget=self.config.deform_budget)
        app = Appearance(albedo=out["texture"][i], ambient=out["gains"][i, 0],
                         diffuse=out["gains"][i, 1])
        view = Viewpoint(rotation=out["rotations"][i, hyp],
                         translation=out["translations"][i, hyp])
        light = LightDirection(direction=out["light"][i])
        params = PhotoGeoParams(shape=shape, appearance=app, viewpoint=view,
                                light=light)
        if self.feature_tex is not None:
            params.features = self.feature_tex
        return params

    def encode(self, image: Tensor) -> PhotoGeoParams:
        """Single (H, W, 3) image -> parameters of the best-scoring
        hypothesis. Deterministic given the model state; gradients flow."""
        out = self.forward(image.permute(2, 0, 1)[None])
        hyp = int(out["scores"][0].argmin())
        prior, rest, skeleton, weights = self.category_geometry()
        return self.build_params(out, 0, hyp, prior, rest, skeleton, weights)

    # -- parameter bookkeeping ----------------------------------------------

    def sds_param_groups(self) -> dict:
        groups = {
            "shape": dict(
                {"prior_raw": self.prior_raw},
                **{f"offset_latent.{n}": p for n, p in self.offset_latent.named_parameters()},
                **{f"offset_field.{n}": p for n, p in self.offset_field.named_parameters()},
                **{f"pose_head.{n}": p for n, p in self.pose_head.named_parameters()}),
            "appearance": dict(
                {f"tex_head.{n}": p for n, p in self.tex_head.named_parameters()},
                **{f"gain_head.{n}": p for n, p in self.gain_head.named_parameters()}),
            "shared": {f"trunk.{n}": p for n, p in self.trunk.named_parameters()},
            "viewpoint": {f"view_head.{n}": p for n, p in self.view_head.named_parameters()},
            "light": {f"light_head.{n}": p for n, p in self.light_head.named_parameters()},
        }
        if self.feature_tex is not None:
            groups["appearance"]["feature_tex"] = self.feature_tex
        return groups

    def appearance_parameters(self):
        return list(self.tex_head.parameters()) + list(self.gain_head.parameters())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def recon_loss(params: PhotoGeoParams, sample: TrainSample, cam: Camera,
               config: TrainConfig,
               render_out: Optional[RenderOutput] = None) -> tuple:
    """Weighted reconstruction terms: masked photometric L1 on rgb, MSE on
    the silhouette against the mask, masked L2 on feature maps when both
    sides carry features. Returns (total, breakdown)."""
    if render_out is None:
        render_out = render(params, cam, mode="shaded",
                            sharpness=config.sharpness,
                            background=config.background)
    m = sample.mask
    msum = m.sum().clamp_min(1.0)
    photo = ((render_out.rgb - sample.image).abs() * m[..., None]).sum() / (msum * 3.0)
    mask_term = ((render_out.silhouette - m) ** 2).mean()
    parts = {"photo": photo, "mask": mask_term}
    feats = getattr(params, "features", None)
    if sample.features is not None and feats is not None:
        fmap = sample_texture(feats, render_out.canon) * render_out.coverage[..., None]
        c = fmap.shape[-1]
        feat = (((fmap - sample.features) ** 2) * m[..., None]).sum() / (msum * c)
        parts["feat"] = feat
    total = config.w_photo * photo + config.w_mask * mask_term \
        + config.w_feat * parts.get("feat", torch.zeros(()))
    return total, parts


def regularizer(params: PhotoGeoParams, prior: SdfGrid,
                config: TrainConfig) -> tuple:
    """Eikonal smoothness of the prior + deformation and articulation
    magnitude penalties. Returns (total, breakdown)."""
    eik = eikonal_loss(prior)
    shape = params.shape
    deform = shape.deform_regularizer() if hasattr(shape, "deform_regularizer") \
        else torch.zeros(())
    if hasattr(shape, "pose"):
        art = (shape.pose.angles() ** 2).mean()
    else:
        art = torch.zeros(())
    total = config.w_eik * eik + config.w_def * deform + config.w_art * art
    return total, {"eik": eik, "def": deform, "art": art}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: EncoderModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    schedule: Optional[DiffusionSchedule] = None
    lr_schedule: Optional[object] = None


def make_train_state(config: TrainConfig,
                     schedule: Optional[DiffusionSchedule] = None) -> TrainState:
    model = EncoderModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(config.iterations, 1))
    return TrainState(model=model, optimizer=opt, config=config,
                      schedule=schedule, lr_schedule=lr_sched)


def train_step(state: TrainState, batch: Sequence[TrainSample], iteration: int,
               denoiser=None, codec: Optional[LatentCodec] = None,
               rng: Optional[np.random.Generator] = None) -> dict:
    """One optimization step on recon_loss + regularizer; on iterations that
    are multiples of ``sds_every`` (and when a denoiser is wired in), the
    weighted distillation gradient is accumulated on top. Non-finite
    gradients abort the step and leave the model unchanged."""
    if len(batch) == 0:
        raise InvalidArgumentError("batch must be non-empty")
    model, config = state.model, state.config
    rng = rng or np.random.default_rng(iteration)
    opt = state.optimizer
    opt.zero_grad(set_to_none=True)

    prior, rest, skeleton, weights = model.category_geometry()
    H = config.image_size
    cam = Camera(image_size=(H, H))
    cam_low = Camera(image_size=(config.hyp_render_size, config.hyp_render_size))

    images = torch.stack([s.image.permute(2, 0, 1) for s in batch])
    out = model.forward(images)

    total = torch.zeros(())
    metrics = {"iter": iteration, "loss_photo": 0.0, "loss_mask": 0.0,
               "loss_feat": 0.0, "loss_sds": 0.0, "aborted": False,
               "denoiser_calls": 0}
    score_loss = torch.zeros(())
    for i, sample in enumerate(batch):
        base = model.build_params(out, i, 0, prior, rest, skeleton, weights)
        posed = base.shape.posed_mesh()
        m_low = F.interpolate(sample.mask[None, None], size=cam_low.image_size,
                              mode="area")[0, 0]
        hyp_losses = []
        for k in range(config.n_hypotheses):
            view = Viewpoint(rotation=out["rotations"][i, k],
                             translation=out["translations"][i, k])
            sil = rasterize(posed, view, cam_low, sharpness=config.sharpness).silhouette
            hyp_losses.append(((sil - m_low) ** 2).mean())
        hyp_stack = torch.stack(hyp_losses)
        best = int(hyp_stack.argmin())
        score_loss = score_loss + ((out["scores"][i] - hyp_stack.detach()) ** 2).mean()

        params = model.build_params(out, i, best, prior, rest, skeleton, weights)
        loss_i, parts = recon_loss(params, sample, cam, config)
        # low-res hypothesis losses keep gradients flowing into every head
        total = total + loss_i + 0.1 * hyp_stack[best]
        metrics["loss_photo"] += float(parts["photo"]) / len(batch)
        metrics["loss_mask"] += float(parts["mask"]) / len(batch)
        metrics["loss_feat"] += float(parts.get("feat", 0.0)) / len(batch)

    total = total / len(batch)
    reg, reg_parts = regularizer(
        model.build_params(out, 0, 0, prior, rest, skeleton, weights),
        prior, config)
    objective = total + reg + config.w_score * score_loss / len(batch)
    objective.backward()
    metrics["loss_eik"] = float(reg_parts["eik"])
    metrics["loss_def"] = float(reg_parts["def"])
    metrics["loss_total"] = float(objective)

    use_sds = (denoiser is not None and codec is not None
               and state.schedule is not None and config.sds_weight > 0
               and iteration % config.sds_every == 0)
    sds_diag = []
    if use_sds:
        params_by_name = {n: p for g in model.sds_param_groups().values()
                          for n, p in g.items()}
        n_sds = max(1, int(round(len(batch) * config.sds_batch_fraction)))
        for sample in batch[:n_sds]:
            caption = f"a {sample.category}" if sample.category else None
            try:
                report = distill.sds_gradient(
                    model, sample.image, caption, cam,
                    denoiser(sample) if callable(denoiser) else denoiser,
                    codec, state.schedule, rng, config.sds_config())
            except SkipSampleError as exc:
                sds_diag.append({"skipped": True, **exc.diagnostics})
                continue
            metrics["denoiser_calls"] += 2 if config.guidance_scale not in (0.0, 1.0) else 1
            for name, g in report.grads.items():
                p = params_by_name[name]
                scaled = config.sds_weight * g
                p.grad = scaled if p.grad is None else p.grad + scaled
            sds_diag.append(report.diagnostics)
            metrics["loss_sds"] += report.diagnostics["residual_norm"] / n_sds
    metrics["sds_diagnostics"] = sds_diag

    finite = all(p.grad is None or bool(torch.isfinite(p.grad).all())
                 for p in model.parameters())
    if not finite:
        opt.zero_grad(set_to_none=True)
        metrics["aborted"] = True
        return metrics

    opt.step()
    if state.lr_schedule is not None:
        state.lr_schedule.step()
    return metrics


def train_loop(state: TrainState, dataset: Sequence[TrainSample],
               iterations: int, denoiser=None,
               codec: Optional[LatentCodec] = None,
               seed: int = 0,
               metrics_writer: Optional[Callable[[dict], None]] = None,
               start_iteration: int = 1) -> list:
    rng = np.random.default_rng(seed)
    history = []
    for it in range(start_iteration, start_iteration + iterations):
        idx = rng.choice(len(dataset), size=min(state.config.batch_size,
                                                len(dataset)), replace=False)
        batch = [dataset[int(i)] for i in idx]
        metrics = train_step(state, batch, it, denoiser=denoiser, codec=codec,
                             rng=rng)
        history.append(metrics)
        if metrics_writer is not None:
            metrics_writer(metrics)
    return history


# ---------------------------------------------------------------------------
# Test-time adaptation
# ---------------------------------------------------------------------------

def finetune_texture(model: EncoderModel, image: Tensor, iterations: int = 100,
                     lr: float = 1e-2, mask: Optional[Tensor] = None) -> list:
    """Adapt only the appearance head to one image; geometry, viewpoint and
    light predictions are untouched (their parameters never receive a step).
    Returns the photometric loss trace."""
    if iterations == 0:
        return []
    config = model.config
    cam = Camera(image_size=(image.shape[0], image.shape[1]))
    with torch.no_grad():
        feats = model.trunk(image.permute(2, 0, 1)[None])
        params0 = model.encode(image)
        base_render = render(params0, cam, sharpness=config.sharpness,
                             background=config.background)
        m = mask if mask is not None else (base_render.coverage).float()
    frozen = PhotoGeoParams(
        shape=params0.shape, appearance=params0.appearance,
        viewpoint=Viewpoint(rotation=params0.viewpoint.rotation.detach(),
                            translation=params0.viewpoint.translation.detach()),
        light=LightDirection(direction=params0.light.direction.detach()))
    frozen_shape = frozen.shape.posed_mesh().detach()
    from .params import StaticShape
    opt = torch.optim.Adam(model.appearance_parameters(), lr=lr)
    trace = []
    tr = config.texture_res
    msum = m.sum().clamp_min(1.0)
    for _ in range(iterations):
        opt.zero_grad()
        tex = torch.sigmoid(model.tex_head(feats).reshape(tr, tr, 3))
        gains = 0.05 + 0.9 * torch.sigmoid(model.gain_head(feats))[0]
        app = Appearance(albedo=tex, ambient=gains[0], diffuse=gains[1])
        p = PhotoGeoParams(shape=StaticShape(frozen_shape), appearance=app,
                           viewpoint=frozen.viewpoint, light=frozen.light)
        out = render(p, cam, sharpness=config.sharpness,
                     background=config.background)
        loss = ((out.rgb - image).abs() * m[..., None]).sum() / (msum * 3.0)
        loss.backward()
        opt.step()
        trace.append(float(loss))
    return trace


def adapt_shape(model: EncoderModel, image: Tensor,
                mask: Optional[Tensor] = None, budget_s: float = 30.0,
                lr: float = 3e-4, max_iterations: int = 10000) -> dict:
    """Fine-tune the whole model on one image with recon_loss only, within a
    wall-clock budget. Other images' predictions will shift (shared
    weights); that is the documented cost of adaptation."""
    start = time.monotonic()
    result = {"iterations": 0, "timed_out": False, "losses": []}
    if budget_s <= 0:
        return result
    config = model.config
    cam = Camera(image_size=(image.shape[0], image.shape[1]))
    if mask is None:
        with torch.no_grad():
            mask = (render(model.encode(image), cam,
                           sharpness=config.sharpness).silhouette > 0.5).float()
    sample = TrainSample(image=image, mask=mask)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for it in range(max_iterations):
        if time.monotonic() - start > budget_s:
            result["timed_out"] = True
            break
        opt.zero_grad()
        params = model.encode(image)
        loss, _ = recon_loss(params, sample, cam, config)
        loss.backward()
        if not all(p.grad is None or bool(torch.isfinite(p.grad).all())
                   for p in model.parameters()):
            opt.zero_grad(set_to_none=True)
            continue
        opt.step()
        result["iterations"] = it + 1
        result["losses"].append(float(loss))
    return result


# ---------------------------------------------------------------------------
# Checkpointing and metrics
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState, iteration: int,
                    rng_state: Optional[dict] = None) -> None:
    torch.save({
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "config": dataclasses.asdict(state.config),
        "iteration": iteration,
        "rng_state": rng_state,
        "torch_rng": torch.get_rng_state(),
    }, path)


def load_checkpoint(path) -> tuple:
    # our own trusted artifact; it stores plain dicts + tensors
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig(**blob["config"])
    state = make_train_state(config)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    return state, blob["iteration"], blob.get("rng_state")


class MetricsWriter:
    """Newline-delimited JSON metrics stream."""

    KEYS = ("iter", "loss_total", "loss_photo", "loss_mask", "loss_feat",
            "loss_eik", "loss_def", "loss_sds")

    def __init__(self, path):
        self.fh = open(path, "a")

    def __call__(self, metrics: dict) -> None:
        row = {k: metrics.get(k, 0.0) for k in self.KEYS}
        if metrics.get("sds_diagnostics"):
            row["sds"] = [
                {k: d.get(k) for k in ("t", "sigma", "alpha", "mode",
                                       "residual_norm", "grad_norm")}
                for d in metrics["sds_diagnostics"] if not d.get("skipped")]
        self.fh.write(json.dumps(row) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
