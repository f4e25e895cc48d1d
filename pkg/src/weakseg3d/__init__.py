"""Click-level weakly supervised instance segmentation on synthetic point clouds."""

from weakseg3d.pointcloud import (
    SENTINEL_NONE,
    ClickAnnotation,
    Scene,
    SceneSpec,
    generate_scene,
    read_clicks,
    read_scene,
    simulate_clicks,
    write_clicks,
    write_scene,
)

__all__ = [
    "SENTINEL_NONE",
    "ClickAnnotation",
    "Scene",
    "SceneSpec",
    "generate_scene",
    "read_clicks",
    "read_scene",
    "simulate_clicks",
    "write_clicks",
    "write_scene",
]

__version__ = "0.1.0"
