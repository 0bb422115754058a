"""Photo-geometric parameter tuple shared by the renderer, the encoder and
the distillation machinery."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import torch

from .geometry import (Mesh, Pose, SdfGrid, Skeleton, SkinWeights,
                       apply_skinning, instance_deform)
from .renderer import Appearance, LightDirection, Viewpoint

Tensor = torch.Tensor


@dataclass
class StaticShape:
    """A fixed mesh standing in for an articulated shape (test scenes)."""

    mesh: Mesh

    def posed_mesh(self) -> Mesh:
        return self.mesh


@dataclass
class ArticulatedShape:
    """Category prior + instance deformation + skeleton pose.

    ``rest_mesh`` is the mesh extracted from the prior; it is shared between
    instances of the same category and must carry canonical uv.
    """

    prior: SdfGrid
    rest_mesh: Mesh
    skeleton: Skeleton
    skin_weights: SkinWeights
    offsets: Tensor               # (V,3) instance deformation
    pose: Pose
    deform_budget: float = float("inf")

    def posed_mesh(self) -> Mesh:
        deformed, _ = instance_deform(self.rest_mesh, self.offsets,
                                      budget=self.deform_budget)
        return apply_skinning(deformed, self.skeleton, self.skin_weights, self.pose)

    def deform_regularizer(self) -> Tensor:
        _, reg = instance_deform(self.rest_mesh, self.offsets,
                                 budget=self.deform_budget)
        return reg


@dataclass
class PhotoGeoParams:
    """The (shape, appearance, viewpoint, light) tuple produced by the
    encoder and consumed by the renderer. ``features`` optionally carries a
    canonical feature field used by the feature reconstruction term."""

    shape: object                # StaticShape or ArticulatedShape
    appearance: Appearance
    viewpoint: Viewpoint
    light: LightDirection
    features: Optional[Tensor] = None


def subst(params: PhotoGeoParams, view: Viewpoint,
          light: LightDirection) -> PhotoGeoParams:
    """Swap in a new viewpoint and light; shape and appearance are shared
    (same objects, not copies), so gradients keep flowing only through the
    shape/appearance path."""
    return replace(params, viewpoint=view, light=light)
