"""Handcrafted differentiable renderer: soft-silhouette rasterization,
Lambertian shading and virtual-view sampling.

Camera space follows the usual vision convention: +x right, +y down, +z
forward (into the scene). A Viewpoint maps model coordinates into camera
coordinates, ``x_cam = R x + t``. Images are (H, W, ...) float tensors with
values in [0, 1]; pixel (i, j) has its center at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import InvalidArgumentError
from .geometry import Mesh, vertex_normals
from .raster_kernel import run_cover, run_nearest_segment

Tensor = torch.Tensor

SHADING_MODES = ("shaded", "textureless", "albedo")
DEFAULT_SHARPNESS = 2.0   # sigmoid slope, 1/pixels
DEFAULT_BACKGROUND = 0.5


@dataclass
class Viewpoint:
    rotation: Tensor      # (3,3)
    translation: Tensor   # (3,)

    def __post_init__(self):
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.float32) \
            if not torch.is_tensor(self.rotation) else self.rotation
        self.translation = torch.as_tensor(self.translation, dtype=torch.float32) \
            if not torch.is_tensor(self.translation) else self.translation
        R = self.rotation.detach()
        if not torch.allclose(R @ R.T, torch.eye(3, dtype=R.dtype), atol=1e-5):
            raise InvalidArgumentError("viewpoint rotation must be orthonormal")
        if abs(float(torch.linalg.det(R)) - 1.0) > 1e-5:
            raise InvalidArgumentError("viewpoint rotation must have det +1")


@dataclass
class LightDirection:
    direction: Tensor  # (3,), unit norm

    def __post_init__(self):
        if not torch.is_tensor(self.direction):
            self.direction = torch.as_tensor(self.direction, dtype=torch.float32)
        n = float(torch.linalg.norm(self.direction.detach()))
        if abs(n - 1.0) > 1e-5:
            raise InvalidArgumentError(f"light direction must be unit norm, got {n}")


@dataclass
class Appearance:
    """Albedo texture over canonical uv plus scalar ambient/diffuse gains."""

    albedo: Tensor   # (Tv, Tu, 3) in [0,1]
    ambient: Tensor  # scalar >= 0
    diffuse: Tensor  # scalar >= 0

    def __post_init__(self):
        if not torch.is_tensor(self.albedo):
            self.albedo = torch.as_tensor(self.albedo, dtype=torch.float32)
        if not torch.is_tensor(self.ambient):
            self.ambient = torch.as_tensor(float(self.ambient))
        if not torch.is_tensor(self.diffuse):
            self.diffuse = torch.as_tensor(float(self.diffuse))

    def validate(self) -> None:
        a = self.albedo.detach()
        if float(a.min()) < -1e-6 or float(a.max()) > 1 + 1e-6:
            raise InvalidArgumentError("albedo values must lie in [0,1]")
        for k in (self.ambient, self.diffuse):
            if not bool(torch.isfinite(k)) or float(k) < 0:
                raise InvalidArgumentError("shading gains must be finite and >= 0")


@dataclass
class Camera:
    fov_deg: float = 25.0
    image_size: tuple = (256, 256)  # (H, W)

    def __post_init__(self):
        if not (0.0 < self.fov_deg < 180.0):
            raise InvalidArgumentError("fov must be in (0, 180) degrees")
        H, W = self.image_size
        if H < 16 or W < 16:
            raise InvalidArgumentError("image size must be at least 16 pixels")

    @property
    def tan_half_fov(self) -> float:
        return math.tan(math.radians(self.fov_deg) / 2.0)


@dataclass
class RenderOutput:
    rgb: Tensor          # (H, W, 3)
    silhouette: Tensor   # (H, W)
    depth: Tensor        # (H, W), 0 where uncovered
    canon: Tensor        # (H, W, 2) canonical uv, 0 where uncovered
    normals: Tensor      # (H, W, 3) model-space normals, 0 where uncovered
    coverage: Tensor     # (H, W) bool, hard interior coverage

    @property
    def image_size(self):
        return tuple(self.silhouette.shape)


def project_vertices(vertices: Tensor, view: Viewpoint, cam: Camera):
    """Model space -> (pixel xy (V,2), camera z (V,))."""
    vc = vertices @ view.rotation.T + view.translation
    H, W = cam.image_size
    z = vc[:, 2]
    tanf = cam.tan_half_fov
    aspect = W / H
    safe_z = torch.where(z.abs() < 1e-6, torch.full_like(z, 1e-6), z)
    x_ndc = vc[:, 0] / (safe_z * tanf * aspect)
    y_ndc = vc[:, 1] / (safe_z * tanf)
    px = (x_ndc + 1.0) * 0.5 * W
    py = (y_ndc + 1.0) * 0.5 * H
    return torch.stack([px, py], dim=-1), z


def _point_seg_dist(p: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Differentiable 2D point-to-segment distance."""
    d = b - a
    l2 = (d * d).sum(-1).clamp_min(1e-20)
    t = (((p - a) * d).sum(-1) / l2).clamp(0.0, 1.0)
    e = p - (a + t[..., None] * d)
    return torch.sqrt((e * e).sum(-1) + 1e-12)


def _contour_segments(faces: Tensor, xy: Tensor, num_verts: int,
                      coverage: np.ndarray) -> Tensor:
    """Vertex-index pairs (E,2) of silhouette-contour edges.

    A mesh edge is on the contour when its two adjacent faces project with
    opposite winding (front/back transition) or it borders a single face.
    Contours interior to the covered region (occluded limb rims and the
    like) are then discarded by probing the coverage map on both sides.
    """
    e01 = faces[:, (0, 1)]
    e12 = faces[:, (1, 2)]
    e20 = faces[:, (2, 0)]
    edges = torch.cat([e01, e12, e20], dim=0)
    lo = torch.minimum(edges[:, 0], edges[:, 1])
    hi = torch.maximum(edges[:, 0], edges[:, 1])
    key = lo * num_verts + hi
    uniq, inv, counts = torch.unique(key, return_inverse=True, return_counts=True)

    a, b, c = xy[faces[:, 0]], xy[faces[:, 1]], xy[faces[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - \
            (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    orient = torch.sign(area2).repeat(3)
    sign_sum = torch.zeros(uniq.shape[0], dtype=orient.dtype).index_add(0, inv, orient)
    contour = (counts == 1) | (sign_sum.abs() < counts.to(orient.dtype))
    if not bool(contour.any()):
        return torch.empty(0, 2, dtype=torch.long)
    va = (uniq[contour] // num_verts).long()
    vb = (uniq[contour] % num_verts).long()

    # keep only union-boundary contours: one probe side covered, or a
    # feature thinner than the probe with its midpoint covered
    H, W = coverage.shape
    pa = xy[va].detach().cpu().numpy()
    pb = xy[vb].detach().cpu().numpy()
    mid = 0.5 * (pa + pb)
    d = pb - pa
    n = np.stack([-d[:, 1], d[:, 0]], axis=-1)
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-9) * 2.5

    def covered_at(p):
        jj = np.clip(np.round(p[:, 0] - 0.5).astype(np.int64), 0, W - 1)
        ii = np.clip(np.round(p[:, 1] - 0.5).astype(np.int64), 0, H - 1)
        inside_img = (p[:, 0] >= 0) & (p[:, 0] < W) & (p[:, 1] >= 0) & (p[:, 1] < H)
        return coverage[ii, jj] & inside_img

    cp, cm, cmid = covered_at(mid + n), covered_at(mid - n), covered_at(mid)
    keep = (cp != cm) | (cmid & ~cp & ~cm)
    keep = torch.from_numpy(keep)
    return torch.stack([va[keep], vb[keep]], dim=-1)


def rasterize(mesh: Mesh, view: Viewpoint, cam: Camera,
              sharpness: float = DEFAULT_SHARPNESS) -> RenderOutput:
    """Geometry channels only: soft silhouette from a sigmoid of the signed
    pixel-to-contour distance, hard z-buffer interior attribution with
    perspective-correct barycentric interpolation. Differentiable w.r.t.
    mesh vertices and the viewpoint."""
    if sharpness <= 0:
        raise InvalidArgumentError("sharpness must be positive")
    if mesh.faces.numel() == 0:
        raise InvalidArgumentError("mesh must be non-empty")
    H, W = cam.image_size
    dt = mesh.vertices.dtype
    xy, z = project_vertices(mesh.vertices, view, cam)

    znear = 1e-3
    fz = z[mesh.faces]                      # (F,3)
    keep = (fz > znear).all(dim=-1)
    faces = mesh.faces[keep]
    empty = RenderOutput(
        rgb=torch.zeros(H, W, 3, dtype=dt), silhouette=torch.zeros(H, W, dtype=dt),
        depth=torch.zeros(H, W, dtype=dt), canon=torch.zeros(H, W, 2, dtype=dt),
        normals=torch.zeros(H, W, 3, dtype=dt),
        coverage=torch.zeros(H, W, dtype=torch.bool))
    if faces.shape[0] == 0:
        return empty

    with torch.no_grad():
        xy_np = xy[faces].detach().cpu().numpy()
        z_np = z[faces].detach().cpu().numpy()
    cov_face_np, _ = run_cover(xy_np, z_np, H, W)
    cov_face = torch.from_numpy(cov_face_np)

    margin = max(2.0, 16.0 / sharpness)
    segs = _contour_segments(faces, xy, mesh.vertices.shape[0], cov_face_np >= 0)
    covered_t = (cov_face >= 0)
    if segs.shape[0] == 0:
        silhouette = covered_t.to(dt)
    else:
        with torch.no_grad():
            segs_np = torch.stack([xy[segs[:, 0]], xy[segs[:, 1]]], dim=1) \
                .detach().cpu().numpy()
        seg_idx = torch.from_numpy(run_nearest_segment(segs_np, H, W, margin))
        silhouette = covered_t.to(dt)
        has_seg = seg_idx >= 0
        if bool(has_seg.any()):
            sel = segs[seg_idx[has_seg]]
            ii, jj = torch.nonzero(has_seg, as_tuple=True)
            p = torch.stack([jj.to(dt) + 0.5, ii.to(dt) + 0.5], dim=-1)
            d = _point_seg_dist(p, xy[sel[:, 0]], xy[sel[:, 1]])
            sign = torch.where(covered_t[ii, jj],
                               torch.ones((), dtype=dt), -torch.ones((), dtype=dt))
            silhouette = silhouette.index_put(
                (ii, jj), torch.sigmoid(sharpness * sign * d))

    coverage = cov_face >= 0
    depth = torch.zeros(H, W, dtype=dt)
    canon = torch.zeros(H, W, 2, dtype=dt)
    normals_img = torch.zeros(H, W, 3, dtype=dt)
    if bool(coverage.any()):
        fsel = faces[cov_face[coverage]]
        ii, jj = torch.nonzero(coverage, as_tuple=True)
        p = torch.stack([jj.to(dt) + 0.5, ii.to(dt) + 0.5], dim=-1)
        a, b, c = xy[fsel[:, 0]], xy[fsel[:, 1]], xy[fsel[:, 2]]
        den = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + \
              (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
        den = torch.where(den.abs() < 1e-9, torch.full_like(den, 1e-9), den)
        w0 = ((b[:, 1] - c[:, 1]) * (p[:, 0] - c[:, 0]) +
              (c[:, 0] - b[:, 0]) * (p[:, 1] - c[:, 1])) / den
        w1 = ((c[:, 1] - a[:, 1]) * (p[:, 0] - c[:, 0]) +
              (a[:, 0] - c[:, 0]) * (p[:, 1] - c[:, 1])) / den
        w2 = 1.0 - w0 - w1
        zs = z[fsel]                                        # (N,3)
        wz = torch.stack([w0, w1, w2], dim=-1) / zs.clamp_min(znear)
        wz = wz / wz.sum(-1, keepdim=True)
        depth_v = 1.0 / (torch.stack([w0, w1, w2], dim=-1) / zs.clamp_min(znear)).sum(-1)
        depth = depth.index_put((ii, jj), depth_v)
        vn = vertex_normals(mesh.vertices, mesh.faces)
        n = (wz[..., None] * vn[fsel]).sum(1)
        n = n / torch.linalg.norm(n, dim=-1, keepdim=True).clamp_min(1e-12)
        normals_img = normals_img.index_put((ii, jj), n)
        if mesh.uv is not None:
            uv = (wz[..., None] * mesh.uv[fsel]).sum(1)
            canon = canon.index_put((ii, jj), uv)

    return RenderOutput(rgb=torch.zeros(H, W, 3, dtype=dt), silhouette=silhouette,
                        depth=depth, canon=canon, normals=normals_img,
                        coverage=coverage)


def sample_texture(tex: Tensor, uv: Tensor) -> Tensor:
    """Bilinear texture lookup; u wraps (azimuth seam), v clamps."""
    Tv, Tu = tex.shape[0], tex.shape[1]
    x = uv[..., 0] * Tu - 0.5
    y = uv[..., 1] * Tv - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0l, x1l = x0.long() % Tu, (x0.long() + 1) % Tu
    y0l = y0.long().clamp(0, Tv - 1)
    y1l = (y0.long() + 1).clamp(0, Tv - 1)
    t00, t01 = tex[y0l, x0l], tex[y0l, x1l]
    t10, t11 = tex[y1l, x0l], tex[y1l, x1l]
    return (t00 * (1 - fx) * (1 - fy) + t01 * fx * (1 - fy)
            + t10 * (1 - fx) * fy + t11 * fx * fy)


def shade(geom: RenderOutput, app: Appearance, light: LightDirection,
          mode: str = "shaded", background: float = DEFAULT_BACKGROUND) -> RenderOutput:
    """Fill the rgb channel: albedo(uv) * clamp(k_a + k_d max(0, n.l), 0, 1).

    ``textureless`` swaps the albedo for constant 0.5 gray; ``albedo``
    ignores lighting entirely. The result is composited over a constant
    background using the soft silhouette as alpha.
    """
    if mode not in SHADING_MODES:
        raise InvalidArgumentError(f"unknown shading mode {mode!r}")
    alb = sample_texture(app.albedo, geom.canon)
    if mode == "textureless":
        alb = torch.full_like(alb, 0.5)
    if mode == "albedo":
        fg = alb
    else:
        ndotl = (geom.normals * light.direction).sum(-1)
        lam = (app.ambient + app.diffuse * ndotl.clamp_min(0.0)).clamp(0.0, 1.0)
        fg = alb * lam[..., None]
    fg = fg * geom.coverage[..., None]
    sil = geom.silhouette[..., None]
    rgb = fg * sil + background * (1.0 - sil)
    return RenderOutput(rgb=rgb, silhouette=geom.silhouette, depth=geom.depth,
                        canon=geom.canon, normals=geom.normals,
                        coverage=geom.coverage)


def render(params, cam: Camera, mode: str = "shaded",
           sharpness: float = DEFAULT_SHARPNESS,
           background: float = DEFAULT_BACKGROUND) -> RenderOutput:
    """Full image formation: posed mesh -> rasterize -> shade.

    ``params`` carries .shape (with .posed_mesh()), .appearance, .viewpoint
    and .light. Deterministic given its inputs.
    """
    mesh = params.shape.posed_mesh()
    geom = rasterize(mesh, params.viewpoint, cam, sharpness=sharpness)
    return shade(geom, params.appearance, params.light, mode=mode,
                 background=background)


# ---------------------------------------------------------------------------
# virtual view sampling
# ---------------------------------------------------------------------------

def look_at(position: np.ndarray, target: np.ndarray = None,
            up: np.ndarray = None) -> Viewpoint:
    """Viewpoint for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    if abs(float(fwd @ up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: world -> camera axes
    t = -R @ position
    return Viewpoint(rotation=torch.tensor(R, dtype=torch.float32),
                     translation=torch.tensor(t, dtype=torch.float32))


def sample_virtual_view(rng: np.random.Generator,
                        elevation_range=(-10.0, 90.0),
                        distance_range=(9.0, 11.0)) -> tuple:
    """Random camera on a sphere looking at the origin, plus a light
    direction drawn around the camera direction so the visible side is lit."""
    elev = math.radians(rng.uniform(*elevation_range))
    azim = math.radians(rng.uniform(0.0, 360.0))
    dist = rng.uniform(*distance_range)
    pos = dist * np.array([math.cos(elev) * math.cos(azim),
                           math.cos(elev) * math.sin(azim),
                           math.sin(elev)])
    view = look_at(pos)
    g = rng.normal(loc=pos / np.linalg.norm(pos), scale=1.0, size=3)
    n = np.linalg.norm(g)
    while n < 1e-6:
        g = rng.normal(loc=pos / np.linalg.norm(pos), scale=1.0, size=3)
        n = np.linalg.norm(g)
    light = LightDirection(direction=torch.tensor(g / n, dtype=torch.float32))
    return view, light


# ---------------------------------------------------------------------------
# debug exports
# ---------------------------------------------------------------------------

def save_png(path, array: Tensor) -> None:
    """Save an (H,W) or (H,W,3) float tensor in [0,1] as PNG."""
    from PIL import Image
    a = (array.detach().clamp(0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(a).save(path)


def load_png(path) -> Tensor:
    from PIL import Image
    a = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return torch.from_numpy(a)


_FLT_MAGIC = b"FLT1"


def save_float_channels(path, array: Tensor) -> None:
    """Raw float32 image blob for depth/canon debugging: magic, H, W, C."""
    import struct
    a = array.detach().cpu().numpy().astype("<f4")
    if a.ndim == 2:
        a = a[..., None]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4siii", _FLT_MAGIC, *a.shape))
        fh.write(a.tobytes())


def load_float_channels(path) -> Tensor:
    import struct
    with open(path, "rb") as fh:
        magic, h, w, c = struct.unpack("<4siii", fh.read(16))
        if magic != _FLT_MAGIC:
            raise InvalidArgumentError("not a float-channel blob")
        data = np.frombuffer(fh.read(h * w * c * 4), dtype="<f4").reshape(h, w, c)
    return torch.from_numpy(data.copy()).squeeze(-1)
