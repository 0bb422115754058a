"""Procedural toy quadrupeds: articulated, textured, watertight assets with
known ground truth, used as the built-in image generator backend and as the
benchmark asset source.

Everything is deterministic given a seed; a sample stores enough of its own
inputs to be re-rendered bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .geometry import (Bone, Mesh, Pose, SdfGrid, Skeleton, SkinWeights,
                       apply_skinning, axis_angle_to_quat,
                       compute_skin_weights, extract_mesh)
from .renderer import (Appearance, Camera, LightDirection, RenderOutput,
                       Viewpoint, look_at, rasterize, shade)

Tensor = torch.Tensor

CATEGORY_SEEDS = {"cow": 11, "horse": 23, "sheep": 37, "pig": 51, "dog": 67}


@dataclass
class ToyAsset:
    category: str
    rest_mesh: Mesh
    skeleton: Skeleton
    skin_weights: SkinWeights
    gait_amplitude: float
    n_frames: int = 24

    def pose_at(self, frame: float) -> Pose:
        """Walk-cycle pose; diagonal leg pairs move in anti-phase."""
        phase = 2.0 * math.pi * frame / self.n_frames
        amp = self.gait_amplitude
        aa = torch.zeros(len(self.skeleton), 3)
        chain_phase = {"legfl": 0.0, "legbr": 0.0, "legfr": math.pi, "legbl": math.pi}
        for b, bone in enumerate(self.skeleton.bones):
            chain = bone.name.split("_")[0]
            if chain in chain_phase:
                seg = int(bone.name.split("_")[1])
                swing = amp * math.sin(phase + chain_phase[chain])
                aa[b, 1] = swing * (1.0 if seg == 0 else -0.5)
            elif chain == "tail":
                aa[b, 2] = 0.5 * amp * math.sin(phase * 2.0)
            elif chain == "neck":
                aa[b, 1] = 0.15 * amp * math.sin(phase * 2.0)
        return Pose(quats=axis_angle_to_quat(aa))

    def posed_mesh(self, frame: float) -> Mesh:
        return apply_skinning(self.rest_mesh, self.skeleton, self.skin_weights,
                              self.pose_at(frame))


def _capsule_sdf(p: np.ndarray, a, b, r: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    l2 = float(d @ d)
    t = np.clip(((p - a) @ d) / max(l2, 1e-12), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * d), axis=-1) - r


def _ellipsoid_sdf(p: np.ndarray, center, axes) -> np.ndarray:
    q = (p - np.asarray(center)) / np.asarray(axes)
    k0 = np.linalg.norm(q, axis=-1)
    k1 = np.linalg.norm(q / np.asarray(axes), axis=-1)
    out = np.where(k0 > 1e-9, k0 * (k0 - 1.0) / np.maximum(k1, 1e-12),
                   -float(min(axes)))
    return out


def make_toy_quadruped(category: str, grid_res: int = 40,
                       variant_seed: int = 0) -> ToyAsset:
    """Watertight quadruped built from an SDF union of simple parts, with a
    skeleton placed at the construction points."""
    seed = CATEGORY_SEEDS.get(category, abs(hash(category)) % 1000) + variant_seed
    rng = np.random.default_rng(seed)

    body_len = rng.uniform(1.25, 1.45)
    body_rad = rng.uniform(0.5, 0.62)
    body_h = rng.uniform(0.5, 0.6)
    body_z = 0.25
    leg_r = rng.uniform(0.3, 0.38)
    foot_z = -1.25
    hip_x, hip_y = 0.72 * body_len, 0.55 * body_rad
    neck_dir = np.array([0.55, 0.0, 0.55])
    neck_base = np.array([body_len * 0.92, 0.0, body_z + 0.3 * body_h])
    head_c = neck_base + rng.uniform(0.75, 0.9) * neck_dir
    head_r = rng.uniform(0.3, 0.38)
    tail_end = np.array([-body_len - 0.55, 0.0, body_z + 0.15])

    ext = np.array([body_len + 1.0, body_rad + 0.75, 1.45])
    lo, hi = -ext, ext
    lo[2], hi[2] = foot_z - 0.18, body_z + body_h + 0.75
    coords = [np.linspace(lo[d], hi[d], grid_res) for d in range(3)]
    g = np.stack(np.meshgrid(*coords, indexing="ij"), axis=-1).reshape(-1, 3)

    parts = [_ellipsoid_sdf(g, (0, 0, body_z), (body_len, body_rad, body_h))]
    parts.append(_capsule_sdf(g, neck_base, head_c, 0.55 * head_r))
    parts.append(_ellipsoid_sdf(g, head_c, (head_r * 1.25, head_r * 0.8, head_r)))
    for sx in (1, -1):
        for sy in (1, -1):
            hip = np.array([sx * hip_x, sy * hip_y, body_z])
            foot = np.array([sx * hip_x, sy * hip_y, foot_z])
            parts.append(_capsule_sdf(g, hip, foot, leg_r))
    parts.append(_capsule_sdf(g, np.array([-body_len * 0.95, 0, body_z + 0.1]),
                              tail_end, 0.1))
    sdf_vals = np.minimum.reduce(parts).reshape(grid_res, grid_res, grid_res)
    grid = SdfGrid(values=torch.tensor(sdf_vals, dtype=torch.float32), lo=lo, hi=hi)
    rest = extract_mesh(grid, 0.0)

    pelvis = np.array([-hip_x, 0.0, body_z + 0.15])
    chest = np.array([hip_x, 0.0, body_z + 0.15])
    mid = 0.5 * (pelvis + chest)
    bones = [
        Bone("spine_1", None, pelvis, mid),
        Bone("spine_2", 0, mid, chest),
        Bone("spine_3", 1, chest, neck_base),
        Bone("neck", 2, neck_base, neck_base + 0.5 * (head_c - neck_base)),
        Bone("head", 3, neck_base + 0.5 * (head_c - neck_base), head_c),
        Bone("nose", 4, head_c, head_c + np.array([head_r, 0, 0])),
    ]
    for name, sx, sy, parent in (("legfl", 1, 1, 2), ("legfr", 1, -1, 2),
                                 ("legbl", -1, 1, 0), ("legbr", -1, -1, 0)):
        top = np.array([sx * hip_x, sy * hip_y, body_z - 0.1])
        foot = np.array([sx * hip_x, sy * hip_y, foot_z])
        pts = [top + (foot - top) * f for f in (0.0, 0.4, 0.75, 1.0)]
        for s in range(3):
            bones.append(Bone(f"{name}_{s}", parent if s == 0 else len(bones) - 1,
                              pts[s], pts[s + 1]))
    bones.append(Bone("tail_1", 0, pelvis, 0.5 * (pelvis + tail_end)))
    bones.append(Bone("tail_2", len(bones) - 1, 0.5 * (pelvis + tail_end), tail_end))
    skeleton = Skeleton(bones=bones)
    weights = compute_skin_weights(rest, skeleton)
    return ToyAsset(category=category, rest_mesh=rest, skeleton=skeleton,
                    skin_weights=weights,
                    gait_amplitude=float(rng.uniform(0.25, 0.4)))


def procedural_albedo(rng: np.random.Generator, res: int = 32) -> Tensor:
    """Two-tone body/belly texture with random blotches."""
    base = rng.uniform(0.15, 0.75, size=3)
    belly = np.clip(base + rng.uniform(0.15, 0.35), 0.0, 1.0)
    v = np.linspace(0.0, 1.0, res)[:, None, None]
    tex = base[None, None, :] * v + belly[None, None, :] * (1.0 - v)
    tex = np.broadcast_to(tex, (res, res, 3)).copy()
    for _ in range(int(rng.integers(2, 7))):
        cu, cv = rng.uniform(0, 1, size=2)
        rad = rng.uniform(0.05, 0.2)
        col = rng.uniform(0.05, 0.95, size=3)
        uu, vv = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res))
        du = np.minimum(np.abs(uu - cu), 1.0 - np.abs(uu - cu))  # u wraps
        blob = np.exp(-((du ** 2 + (vv - cv) ** 2) / (2 * rad ** 2)))
        tex = tex * (1 - blob[..., None]) + col[None, None, :] * blob[..., None]
    return torch.tensor(np.clip(tex, 0, 1), dtype=torch.float32)


def environment_background(env_id: int, azimuth_deg: float, H: int, W: int) -> Tensor:
    """Procedural gradient environment standing in for HDRI backgrounds."""
    rng = np.random.default_rng(1000 + env_id)
    sky = rng.uniform(0.45, 0.95, size=3)
    ground = rng.uniform(0.1, 0.5, size=3)
    ang = math.radians(azimuth_deg % 360.0)
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    ramp = 0.5 * (1.0 + np.clip(math.cos(ang) * yy + math.sin(ang) * xx, -1, 1))
    img = sky[None, None, :] * (1 - ramp[..., None]) + ground[None, None, :] * ramp[..., None]
    return torch.tensor(img, dtype=torch.float32)


@dataclass
class ToySample:
    """One rendered scene plus everything needed to reproduce or score it."""

    image: Tensor          # (H, W, 3) float in [0,1]
    mask: Tensor           # (H, W) float {0,1}
    gt_mesh: Mesh          # posed, world/model coordinates
    camera: Camera
    view: Viewpoint
    light: LightDirection
    appearance: Appearance
    category: str
    frame: int
    env_id: int
    env_azimuth: float
    seed: int


class ToyQuadrupedGenerator:
    """Deterministic image generator over procedural quadruped assets."""

    def __init__(self, image_size: int = 256, grid_res: int = 40,
                 n_environments: int = 28):
        self.image_size = image_size
        self.grid_res = grid_res
        self.n_environments = n_environments
        self._assets = {}

    def asset(self, category: str) -> ToyAsset:
        if category not in self._assets:
            self._assets[category] = make_toy_quadruped(category, self.grid_res)
        return self._assets[category]

    def render_sample(self, category: str, seed: int,
                      frame: Optional[int] = None) -> ToySample:
        rng = np.random.default_rng(seed)
        asset = self.asset(category)
        frame = int(rng.integers(asset.n_frames)) if frame is None else frame
        mesh = asset.posed_mesh(frame)

        elev = math.radians(rng.uniform(0.0, 35.0))
        azim = math.radians(rng.uniform(0.0, 360.0))
        dist = rng.uniform(9.0, 11.0)
        pos = dist * np.array([math.cos(elev) * math.cos(azim),
                               math.cos(elev) * math.sin(azim), math.sin(elev)])
        view = look_at(pos)
        ldir = rng.normal(loc=pos / np.linalg.norm(pos), scale=0.6, size=3)
        ldir = ldir / max(np.linalg.norm(ldir), 1e-6)
        light = LightDirection(direction=torch.tensor(ldir, dtype=torch.float32))
        app = Appearance(albedo=procedural_albedo(rng),
                         ambient=torch.tensor(float(rng.uniform(0.25, 0.4))),
                         diffuse=torch.tensor(float(rng.uniform(0.5, 0.7))))
        env_id = int(rng.integers(self.n_environments))
        env_az = float(rng.uniform(0.0, 360.0))

        H = W = self.image_size
        cam = Camera(fov_deg=25.0, image_size=(H, W))
        geom = rasterize(mesh, view, cam, sharpness=4.0)
        lit = shade(geom, app, light, mode="shaded", background=0.0)
        bg = environment_background(env_id, env_az, H, W)
        image = (lit.rgb + bg * (1.0 - geom.silhouette[..., None])).clamp(0.0, 1.0)
        mask = geom.coverage.float()
        return ToySample(image=image.detach(), mask=mask, gt_mesh=mesh.detach(),
                         camera=cam, view=view, light=light, appearance=app,
                         category=category, frame=frame, env_id=env_id,
                         env_azimuth=env_az, seed=seed)

    def generate(self, category: str, n: int, rng: np.random.Generator) -> list:
        seeds = rng.integers(0, 2 ** 31 - 1, size=n)
        return [self.render_sample(category, int(s)) for s in seeds]
