"""Differentiable tile-based rasterizer for 2D Gaussian surfels."""

from .render import (
    DEFAULT_SETTINGS,
    BlendState,
    BufferAdjoints,
    ProjectedSplats,
    RenderGradients,
    RenderOutput,
    RenderSettings,
    compute_homography,
    project_splats,
    ray_splat_intersect,
    render,
    render_backward,
    render_reference,
    splat_weight,
    world_to_screen,
)

__all__ = [
    "DEFAULT_SETTINGS",
    "BlendState",
    "BufferAdjoints",
    "ProjectedSplats",
    "RenderGradients",
    "RenderOutput",
    "RenderSettings",
    "compute_homography",
    "project_splats",
    "ray_splat_intersect",
    "render",
    "render_backward",
    "render_reference",
    "splat_weight",
    "world_to_screen",
]
