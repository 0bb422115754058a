"""Category shape prior, instance deformation, skeleton and skinning.

Conventions used throughout the package: the canonical body frame has +x
pointing forward (head), +y to the animal's left and +z up. Meshes store
vertices in model units; canonical surface coordinates (uv) live in [0,1]^2
and are derived from the direction of each rest vertex seen from the origin,
so they are shared by every instance built from the same prior.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import EmptySurfaceError, InvalidArgumentError

Tensor = torch.Tensor


# ---------------------------------------------------------------------------
# SDF grid
# ---------------------------------------------------------------------------

@dataclass
class SdfGrid:
    """Scalar field sampled on a regular axis-aligned lattice.

    ``values[i, j, k]`` is the field at ``(x_i, y_j, z_k)`` with each axis
    sampled uniformly from ``lo`` to ``hi`` inclusive.
    """

    values: Tensor
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if not torch.is_tensor(self.values):
            self.values = torch.as_tensor(self.values, dtype=torch.float32)
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.values.dim() != 3:
            raise InvalidArgumentError("SdfGrid values must be a 3D lattice")
        if min(self.values.shape) < 8:
            raise InvalidArgumentError("SdfGrid needs resolution >= 8 per axis")
        if not np.all(self.hi > self.lo):
            raise InvalidArgumentError("SdfGrid extent must have positive volume")
        if not bool(torch.isfinite(self.values).all()):
            raise InvalidArgumentError("SdfGrid values must be finite")

    @property
    def resolution(self) -> tuple:
        return tuple(self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.resolution) - 1)

    def axis_coords(self, dtype=torch.float32) -> list:
        return [
            torch.linspace(float(self.lo[d]), float(self.hi[d]), self.resolution[d], dtype=dtype)
            for d in range(3)
        ]


def make_ellipsoid_prior(axes: Sequence[float], resolution: int, margin: float = 1.3) -> SdfGrid:
    """Approximate signed-distance field of an axis-aligned ellipsoid.

    The zero level set is exactly the ellipsoid surface; away from it the
    field uses the usual first-order distance normalization (exact for a
    sphere). Mirror-symmetric across every coordinate plane by construction.
    """
    axes = np.asarray(axes, dtype=np.float64)
    if axes.shape != (3,) or np.any(axes <= 0):
        raise InvalidArgumentError("axes must be 3 positive lengths")
    if resolution < 8:
        raise InvalidArgumentError("resolution must be >= 8")
    hi = axes * margin
    lo = -hi
    coords = [torch.linspace(float(lo[d]), float(hi[d]), resolution, dtype=torch.float64) for d in range(3)]
    x, y, z = torch.meshgrid(*coords, indexing="ij")
    a = torch.as_tensor(axes)
    k0 = torch.sqrt((x / a[0]) ** 2 + (y / a[1]) ** 2 + (z / a[2]) ** 2)
    k1 = torch.sqrt((x / a[0] ** 2) ** 2 + (y / a[1] ** 2) ** 2 + (z / a[2] ** 2) ** 2)
    vals = torch.where(k0 > 1e-9, k0 * (k0 - 1.0) / k1.clamp_min(1e-30), torch.full_like(k0, -float(axes.min())))
    return SdfGrid(values=vals.to(torch.float32), lo=lo, hi=hi)


def eikonal_loss(sdf: SdfGrid) -> Tensor:
    """Mean over interior lattice points of (||grad phi|| - 1)^2."""
    v = sdf.values
    if min(v.shape) < 3:
        raise InvalidArgumentError("need >= 3 samples per axis for central differences")
    hx, hy, hz = (float(s) for s in sdf.spacing)
    gx = (v[2:, 1:-1, 1:-1] - v[:-2, 1:-1, 1:-1]) / (2 * hx)
    gy = (v[1:-1, 2:, 1:-1] - v[1:-1, :-2, 1:-1]) / (2 * hy)
    gz = (v[1:-1, 1:-1, 2:] - v[1:-1, 1:-1, :-2]) / (2 * hz)
    norm = torch.sqrt(gx * gx + gy * gy + gz * gz + 1e-12)
    return ((norm - 1.0) ** 2).mean()


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    """Triangle mesh; ``uv`` holds optional canonical surface coordinates."""

    vertices: Tensor            # (V, 3) float
    faces: Tensor               # (F, 3) int64
    uv: Optional[Tensor] = None  # (V, 2) in [0,1]^2

    def validate(self) -> None:
        v, f = self.vertices, self.faces
        if v.dim() != 2 or v.shape[1] != 3 or f.dim() != 2 or f.shape[1] != 3:
            raise InvalidArgumentError("mesh arrays have wrong shape")
        if not bool(torch.isfinite(v).all()):
            raise InvalidArgumentError("mesh vertices must be finite")
        if f.numel() and (int(f.min()) < 0 or int(f.max()) >= v.shape[0]):
            raise InvalidArgumentError("face index out of range")
        if self.uv is not None and self.uv.shape != (v.shape[0], 2):
            raise InvalidArgumentError("uv must be per-vertex 2D")

    def detach(self) -> "Mesh":
        return Mesh(self.vertices.detach(), self.faces,
                    None if self.uv is None else self.uv.detach())

    def numpy_vertices(self) -> np.ndarray:
        return self.vertices.detach().cpu().numpy().astype(np.float64)

    def numpy_faces(self) -> np.ndarray:
        return self.faces.detach().cpu().numpy().astype(np.int64)


def mesh_volume(mesh: Mesh) -> float:
    """Enclosed volume by the divergence theorem (signed; positive if outward)."""
    v = mesh.numpy_vertices()
    f = mesh.numpy_faces()
    tri = v[f]  # (F,3,3)
    return float(np.einsum("fi,fi->f", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def face_areas(vertices: Tensor, faces: Tensor) -> Tensor:
    tri = vertices[faces]
    return 0.5 * torch.linalg.norm(
        torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1), dim=-1)


def vertex_normals(vertices: Tensor, faces: Tensor) -> Tensor:
    """Area-weighted average of geometric face normals, renormalized."""
    tri = vertices[faces]
    fn = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1)  # area-weighted
    vn = torch.zeros_like(vertices)
    vn = vn.index_add(0, faces.reshape(-1), fn.repeat_interleave(3, dim=0))
    return vn / torch.linalg.norm(vn, dim=-1, keepdim=True).clamp_min(1e-12)


def spherical_uv(vertices: Tensor) -> Tensor:
    """Canonical uv from the direction of each point seen from the origin."""
    v = vertices
    r = torch.linalg.norm(v, dim=-1).clamp_min(1e-9)
    u = torch.atan2(v[:, 1], v[:, 0]) / (2 * math.pi) + 0.5
    w = torch.asin((v[:, 2] / r).clamp(-1.0, 1.0)) / math.pi + 0.5
    return torch.stack([u.clamp(0.0, 1.0 - 1e-6), w.clamp(0.0, 1.0)], dim=-1)


# ---------------------------------------------------------------------------
# Isosurface extraction (marching tetrahedra on the lattice)
# ---------------------------------------------------------------------------

# Freudenthal split: six tetrahedra per cube, all sharing the main diagonal
# corner0-corner7, so neighbouring cubes tile consistently.
_CUBE_TETS = ((0, 1, 3, 7), (0, 3, 2, 7), (0, 2, 6, 7),
              (0, 6, 4, 7), (0, 4, 5, 7), (0, 5, 1, 7))
_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def _tet_case_table():
    """Triangles (as tet-edge indices) for each of the 16 inside/outside cases."""
    table = []
    for case in range(16):
        inside = [v for v in range(4) if case >> v & 1]
        outside = [v for v in range(4) if v not in inside]
        cross = [i for i, (a, b) in enumerate(_TET_EDGES)
                 if (a in inside) != (b in inside)]
        if len(cross) == 3:
            table.append([tuple(cross)])
        elif len(cross) == 4:
            a, b = inside
            c, d = outside
            def eidx(p, q):
                return _TET_EDGES.index((min(p, q), max(p, q)))
            ring = [eidx(a, c), eidx(a, d), eidx(b, d), eidx(b, c)]
            table.append([(ring[0], ring[1], ring[2]), (ring[0], ring[2], ring[3])])
        else:
            table.append([])
    return table


_TET_CASES = _tet_case_table()


def extract_mesh(sdf: SdfGrid, iso: float = 0.0) -> Mesh:
    """Extract the iso-level set as a triangle mesh.

    Vertex positions are differentiable with respect to ``sdf.values``
    (linear interpolation along crossing lattice edges); the connectivity
    itself is a discrete function of the sign pattern. Faces are oriented
    outward (normals point toward increasing field values) and zero-area
    faces are dropped.
    """
    vals = sdf.values
    with torch.no_grad():
        vmin, vmax = float(vals.min()), float(vals.max())
    if not (vmin <= iso <= vmax):
        raise EmptySurfaceError(f"iso {iso} outside field range [{vmin:.4g}, {vmax:.4g}]")

    nx, ny, nz = vals.shape
    flat = vals.reshape(-1)
    dev = vals.device

    ii, jj, kk = torch.meshgrid(
        torch.arange(nx - 1, device=dev),
        torch.arange(ny - 1, device=dev),
        torch.arange(nz - 1, device=dev), indexing="ij")
    base = (ii * ny + jj) * nz + kk  # flat index of cube corner (i,j,k)
    base = base.reshape(-1)
    corner_off = torch.tensor(
        [(di * ny + dj) * nz + dk
         for di in (0, 1) for dj in (0, 1) for dk in (0, 1)], device=dev)
    # corner order: bit0 -> dk, bit1 -> dj, bit2 -> di; remap to the cube
    # numbering used by _CUBE_TETS (c1=+x, c2=+y, c4=+z).
    remap = torch.tensor([0, 4, 2, 6, 1, 5, 3, 7], device=dev)
    corners = base[:, None] + corner_off[None, remap]  # (C, 8)

    tets = torch.cat([corners[:, list(t)] for t in _CUBE_TETS], dim=0)  # (6C, 4)

    with torch.no_grad():
        inside = (flat[tets] < iso)
        case = (inside[:, 0].long() + inside[:, 1].long() * 2
                + inside[:, 2].long() * 4 + inside[:, 3].long() * 8)

    tri_edge_rows = []  # rows of (vertex_a_flat, vertex_b_flat) per triangle corner
    for c in range(1, 15):
        sel = tets[case == c]
        if sel.numel() == 0:
            continue
        for tri in _TET_CASES[c]:
            ends = []
            for e in tri:
                a, b = _TET_EDGES[e]
                ends.append(torch.stack([sel[:, a], sel[:, b]], dim=-1))
            tri_edge_rows.append(torch.stack(ends, dim=1))  # (n, 3, 2)
    if not tri_edge_rows:
        raise EmptySurfaceError("no zero crossing on the lattice")

    tri_edges = torch.cat(tri_edge_rows, dim=0)  # (T, 3, 2) lattice endpoints
    lo = torch.minimum(tri_edges[..., 0], tri_edges[..., 1])
    hi = torch.maximum(tri_edges[..., 0], tri_edges[..., 1])
    n_total = nx * ny * nz
    edge_key = lo * n_total + hi
    uniq, inv = torch.unique(edge_key.reshape(-1), return_inverse=True)
    ea, eb = uniq // n_total, uniq % n_total

    coords = sdf.axis_coords()
    def lattice_pos(idx):
        i = idx // (ny * nz)
        j = (idx // nz) % ny
        k = idx % nz
        return torch.stack([coords[0][i], coords[1][j], coords[2][k]], dim=-1)

    fa, fb = flat[ea], flat[eb]
    denom = fb - fa
    denom = torch.where(denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom)
    t = ((iso - fa) / denom).clamp(0.0, 1.0)
    pa, pb = lattice_pos(ea), lattice_pos(eb)
    verts = pa + t[:, None] * (pb - pa)

    faces = inv.reshape(-1, 3)

    # Orient outward: flip faces whose normal disagrees with the local field
    # gradient, then drop degenerate faces.
    with torch.no_grad():
        v_np = verts.detach()
        tri = v_np[faces]
        fn = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1)
        centroid = tri.mean(dim=1)
        grad = _sample_field_gradient(sdf, centroid)
        flip = (fn * grad).sum(-1) < 0
        area2 = torch.linalg.norm(fn, dim=-1)
        keep = area2 > 1e-12
    faces = torch.where(flip[:, None], faces[:, [0, 2, 1]], faces)
    faces = faces[keep]
    if faces.numel() == 0:
        raise EmptySurfaceError("all extracted faces degenerate")

    return Mesh(vertices=verts, faces=faces, uv=spherical_uv(verts.detach()))


def _sample_field_gradient(sdf: SdfGrid, points: Tensor) -> Tensor:
    """Central-difference field gradient at the nearest lattice points."""
    res = torch.tensor(sdf.resolution, dtype=torch.float32)
    lo = torch.as_tensor(sdf.lo, dtype=torch.float32)
    hi = torch.as_tensor(sdf.hi, dtype=torch.float32)
    h = (hi - lo) / (res - 1)
    idx = torch.round((points - lo) / h).long()
    idx = torch.minimum(torch.maximum(idx, torch.ones(3, dtype=torch.long)),
                        (res - 2).long())
    v = sdf.values
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    gx = (v[i + 1, j, k] - v[i - 1, j, k]) / (2 * h[0])
    gy = (v[i, j + 1, k] - v[i, j - 1, k]) / (2 * h[1])
    gz = (v[i, j, k + 1] - v[i, j, k - 1]) / (2 * h[2])
    return torch.stack([gx, gy, gz], dim=-1)


# ---------------------------------------------------------------------------
# Skeleton, pose, skinning
# ---------------------------------------------------------------------------

@dataclass
class Bone:
    name: str
    parent: Optional[int]
    head: np.ndarray
    tail: np.ndarray


@dataclass
class Skeleton:
    bones: list
    topology: str = "quadruped"

    def __post_init__(self):
        roots = [i for i, b in enumerate(self.bones) if b.parent is None]
        if len(roots) != 1 or roots[0] != 0:
            raise InvalidArgumentError("skeleton must have exactly bone 0 as root")
        for i, b in enumerate(self.bones):
            if b.parent is not None and not (0 <= b.parent < i):
                raise InvalidArgumentError("bones must be topologically ordered")
        if self.topology == "quadruped":
            legs = {b.name.split("_")[0] for b in self.bones if b.name.startswith("leg")}
            if len(legs) != 4:
                raise InvalidArgumentError("quadruped topology needs exactly 4 leg chains")

    def __len__(self):
        return len(self.bones)

    def chain_names(self) -> dict:
        groups: dict = {}
        for i, b in enumerate(self.bones):
            groups.setdefault(b.name.split("_")[0], []).append(i)
        return groups


# Fractional bounding-box coordinates (fx: back->front, fy: right->left,
# fz: bottom->top) for the fixed 20-bone template: 6 spine/neck/head bones,
# 3 per leg, 2 tail bones.
_QUADRUPED_JOINTS = {
    "pelvis":     (0.22, 0.50, 0.62),
    "spine_mid":  (0.42, 0.50, 0.66),
    "chest":      (0.62, 0.50, 0.66),
    "neck_base":  (0.78, 0.50, 0.68),
    "neck_top":   (0.88, 0.50, 0.80),
    "head":       (0.95, 0.50, 0.84),
    "nose":       (1.00, 0.50, 0.82),
    "tail_1":     (0.12, 0.50, 0.60),
    "tail_2":     (0.02, 0.50, 0.55),
}
_LEG_ANCHORS = {  # (fx, fy) of hip/shoulder; chains go hip->knee->ankle->foot
    "legbl": (0.26, 0.30), "legbr": (0.26, 0.70),
    "legfl": (0.66, 0.30), "legfr": (0.66, 0.70),
}
_LEG_Z = (0.42, 0.26, 0.12, 0.00)


def build_quadruped_skeleton(mesh: Mesh) -> Skeleton:
    """Fixed quadruped template embedded by fractional bounding-box coords."""
    v = mesh.numpy_vertices()
    lo, hi = v.min(axis=0), v.max(axis=0)

    def at(fx, fy, fz):
        return lo + np.array([fx, fy, fz]) * (hi - lo)

    J = {k: at(*f) for k, f in _QUADRUPED_JOINTS.items()}
    bones = [
        Bone("spine_1", None, J["pelvis"], J["spine_mid"]),
        Bone("spine_2", 0, J["spine_mid"], J["chest"]),
        Bone("spine_3", 1, J["chest"], J["neck_base"]),
        Bone("neck", 2, J["neck_base"], J["neck_top"]),
        Bone("head", 3, J["neck_top"], J["head"]),
        Bone("nose", 4, J["head"], J["nose"]),
    ]
    for leg, (fx, fy) in _LEG_ANCHORS.items():
        parent = 0 if leg.startswith("legb") else 2
        pts = [at(fx, fy, z) for z in _LEG_Z]
        for s in range(3):
            bones.append(Bone(f"{leg}_{s}", parent if s == 0 else len(bones) - 1,
                              pts[s], pts[s + 1]))
    bones.append(Bone("tail_1", 0, J["pelvis"], J["tail_1"]))
    bones.append(Bone("tail_2", len(bones) - 1, J["tail_1"], J["tail_2"]))
    return Skeleton(bones=bones)


@dataclass
class SkinWeights:
    weights: Tensor  # (V, B), rows sum to 1

    def __post_init__(self):
        w = self.weights
        if bool((w < -1e-9).any()):
            raise InvalidArgumentError("skin weights must be non-negative")
        if not bool(torch.allclose(w.sum(-1), torch.ones(w.shape[0]), atol=1e-6)):
            raise InvalidArgumentError("skin weights must sum to 1 per vertex")


def _segment_distances(points: Tensor, heads: Tensor, tails: Tensor) -> Tensor:
    """Distance from each point to each bone segment. (V, B)."""
    d = tails - heads                                  # (B,3)
    pv = points[:, None, :] - heads[None, :, :]        # (V,B,3)
    tt = (pv * d[None]).sum(-1) / (d * d).sum(-1).clamp_min(1e-12)
    tt = tt.clamp(0.0, 1.0)
    closest = heads[None] + tt[..., None] * d[None]
    return torch.linalg.norm(points[:, None, :] - closest, dim=-1)


def compute_skin_weights(mesh: Mesh, skeleton: Skeleton, k: int = 4,
                         power: float = 2.0) -> SkinWeights:
    """Inverse-distance weights to the nearest ``k`` bone segments."""
    pts = mesh.vertices.detach()
    heads = torch.tensor(np.stack([b.head for b in skeleton.bones]), dtype=pts.dtype)
    tails = torch.tensor(np.stack([b.tail for b in skeleton.bones]), dtype=pts.dtype)
    dist = _segment_distances(pts, heads, tails)
    k = min(k, len(skeleton))
    top = torch.topk(dist, k, dim=-1, largest=False)
    w = 1.0 / (top.values + 1e-4) ** power
    w = w / w.sum(-1, keepdim=True)
    full = torch.zeros_like(dist)
    full.scatter_(1, top.indices, w)
    return SkinWeights(weights=full)


@dataclass
class Pose:
    """Per-bone local rotations plus a global root transform."""

    quats: Tensor                       # (B, 4) wxyz unit quaternions
    root_rotation: Tensor = field(default_factory=lambda: torch.eye(3))
    root_translation: Tensor = field(default_factory=lambda: torch.zeros(3))

    @classmethod
    def identity(cls, num_bones: int) -> "Pose":
        q = torch.zeros(num_bones, 4)
        q[:, 0] = 1.0
        return cls(quats=q)

    def validate(self) -> None:
        n = torch.linalg.norm(self.quats, dim=-1)
        if not bool(torch.allclose(n, torch.ones_like(n), atol=1e-6)):
            raise InvalidArgumentError("pose quaternions must be unit norm")
        R = self.root_rotation
        if not bool(torch.allclose(R @ R.T, torch.eye(3), atol=1e-6)) or \
                abs(float(torch.linalg.det(R)) - 1.0) > 1e-6:
            raise InvalidArgumentError("root rotation must be in SO(3)")

    def angles(self) -> Tensor:
        """Rotation angle per bone in radians."""
        w = self.quats[:, 0].abs().clamp(max=1.0)
        xyz = torch.linalg.norm(self.quats[:, 1:], dim=-1)
        return 2.0 * torch.atan2(xyz, w)


def quat_normalize(q: Tensor) -> Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True).clamp_min(1e-12)


def quat_to_matrix(q: Tensor) -> Tensor:
    """Unit quaternion(s) (..., 4) wxyz to rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(*q.shape[:-1], 3, 3)


def axis_angle_to_quat(v: Tensor) -> Tensor:
    """Axis-angle vectors (..., 3) to unit quaternions; angle = ||v||."""
    angle = torch.linalg.norm(v, dim=-1, keepdim=True)
    half = 0.5 * angle
    # sin(x)/x, stable near zero
    sinc = torch.where(angle > 1e-8, torch.sin(half) / angle.clamp_min(1e-12),
                       torch.full_like(angle, 0.5))
    return torch.cat([torch.cos(half), v * sinc], dim=-1)


def bone_transforms(skeleton: Skeleton, pose: Pose) -> tuple:
    """Forward kinematics: world rotation (B,3,3) and head position (B,3).

    Bone ``b`` rotates about its own head; the world transform chains from
    the root. The global root SE(3) is *not* folded in here.
    """
    B = len(skeleton)
    dtype = pose.quats.dtype
    local = quat_to_matrix(pose.quats)
    heads_rest = torch.tensor(np.stack([b.head for b in skeleton.bones]), dtype=dtype)
    rots, heads = [], []
    for b in range(B):
        p = skeleton.bones[b].parent
        if p is None:
            rots.append(local[b])
            heads.append(heads_rest[b])
        else:
            off = heads_rest[b] - heads_rest[p]
            heads.append(heads[p] + rots[p] @ off)
            rots.append(rots[p] @ local[b])
    return torch.stack(rots), torch.stack(heads)


def skinning_matrices(skeleton: Skeleton, pose: Pose) -> Tensor:
    """Rest-to-posed transform per bone as (B, 3, 4) affine matrices."""
    rots, heads = bone_transforms(skeleton, pose)
    heads_rest = torch.tensor(np.stack([b.head for b in skeleton.bones]),
                              dtype=pose.quats.dtype)
    trans = heads - torch.einsum("bij,bj->bi", rots, heads_rest)
    return torch.cat([rots, trans[..., None]], dim=-1)


def lbs_apply(vertices: Tensor, weights: Tensor, matrices: Tensor) -> Tensor:
    """Linear blend skinning: v' = sum_b w_vb (R_b v + t_b)."""
    if weights.shape[0] != vertices.shape[0] or weights.shape[1] != matrices.shape[0]:
        raise InvalidArgumentError("skinning dimension mismatch")
    per_bone = torch.einsum("bij,vj->vbi", matrices[..., :3], vertices) + matrices[..., 3]
    return (weights[..., None] * per_bone).sum(dim=1)


def apply_skinning(mesh: Mesh, skeleton: Skeleton, weights: SkinWeights,
                   pose: Pose) -> Mesh:
    """Pose a rest mesh; topology and uv are unchanged."""
    if weights.weights.shape[0] != mesh.vertices.shape[0]:
        raise InvalidArgumentError("weights must be defined for every vertex")
    if weights.weights.shape[1] != len(skeleton) or pose.quats.shape[0] != len(skeleton):
        raise InvalidArgumentError("pose/weights must cover every bone")
    mats = skinning_matrices(skeleton, pose)
    v = lbs_apply(mesh.vertices, weights.weights, mats)
    v = v @ pose.root_rotation.T + pose.root_translation
    return Mesh(vertices=v, faces=mesh.faces, uv=mesh.uv)


def instance_deform(mesh: Mesh, offsets: Tensor, budget: float = math.inf) -> tuple:
    """Displace vertices; returns (mesh, mean squared offset norm).

    ``budget`` caps the per-vertex displacement norm (soft training budget);
    offsets within budget pass through unchanged. The returned regularizer is
    the mean squared norm of the applied displacements.
    """
    if offsets.shape != mesh.vertices.shape:
        raise InvalidArgumentError("need one 3D offset per vertex")
    if math.isfinite(budget):
        norm = torch.linalg.norm(offsets, dim=-1, keepdim=True)
        scale = (budget / norm.clamp_min(1e-12)).clamp(max=1.0)
        offsets = offsets * scale
    reg = (offsets ** 2).sum(-1).mean()
    return Mesh(vertices=mesh.vertices + offsets, faces=mesh.faces, uv=mesh.uv), reg


# ---------------------------------------------------------------------------
# External formats: OBJ text and the SDF binary blob
# ---------------------------------------------------------------------------

def save_obj(path, mesh: Mesh) -> None:
    v = mesh.numpy_vertices()
    f = mesh.numpy_faces()
    lines = [f"v {p[0]:.8g} {p[1]:.8g} {p[2]:.8g}" for p in v]
    if mesh.uv is not None:
        uv = mesh.uv.detach().cpu().numpy()
        lines += [f"vt {p[0]:.8g} {p[1]:.8g}" for p in uv]
        lines += [f"f {a+1}/{a+1} {b+1}/{b+1} {c+1}/{c+1}" for a, b, c in f]
    else:
        lines += [f"f {a+1} {b+1} {c+1}" for a, b, c in f]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, uvs, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    uv = torch.tensor(uvs, dtype=torch.float32) if len(uvs) == len(verts) and uvs else None
    mesh = Mesh(vertices=torch.tensor(verts, dtype=torch.float32),
                faces=torch.tensor(faces, dtype=torch.int64), uv=uv)
    mesh.validate()
    return mesh


_SDF_MAGIC = b"SDF1"


def save_sdf_blob(path, sdf: SdfGrid) -> None:
    """Little-endian blob: 32-byte header (magic, resolution triple, extent
    bounds) followed by float32 values in C order. Resolution is capped at
    255 per axis by the header layout."""
    nx, ny, nz = sdf.resolution
    if max(nx, ny, nz) > 255:
        raise InvalidArgumentError("blob format supports resolution <= 255 per axis")
    header = struct.pack("<4s3Bb6f", _SDF_MAGIC, nx, ny, nz, 1,
                         *sdf.lo.astype(np.float32), *sdf.hi.astype(np.float32))
    assert len(header) == 32
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(sdf.values.detach().cpu().numpy().astype("<f4").tobytes())


def load_sdf_blob(path) -> SdfGrid:
    with open(path, "rb") as fh:
        header = fh.read(32)
        magic, nx, ny, nz, _ver, *bounds = struct.unpack("<4s3Bb6f", header)
        if magic != _SDF_MAGIC:
            raise InvalidArgumentError("not an SDF blob")
        data = np.frombuffer(fh.read(nx * ny * nz * 4), dtype="<f4")
    values = torch.tensor(data.reshape(nx, ny, nz))
    return SdfGrid(values=values, lo=np.array(bounds[:3]), hi=np.array(bounds[3:]))
