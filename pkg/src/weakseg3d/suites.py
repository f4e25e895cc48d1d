"""Seed-pinned scene collections used by the end-to-end checks.

Every suite has a training split (scenes the model is fitted on, with their
clicks) and an evaluation split of unseen scenes that metrics are reported on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from weakseg3d.model import Hyperparams
from weakseg3d.pipeline import SupervoxelParams
from weakseg3d.pointcloud import ClickAnnotation, Scene, SceneSpec, generate_scene, simulate_clicks

SPLITS = ("train", "eval")


@dataclass(frozen=True)
class Suite:
    name: str
    scene: dict = field(default_factory=dict)
    num_scenes: int = 20
    instances: tuple[int, int] = (3, 6)
    train_seed: int = 5000
    eval_seed: int = 1000
    clicks_per_instance: int = 1
    boundary_fraction: float | None = None

    def seed(self, split: str, i: int) -> int:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return (self.train_seed if split == "train" else self.eval_seed) + i

    def spec(self, split: str, i: int) -> SceneSpec:
        seed = self.seed(split, i)
        lo, hi = self.instances
        k = int(np.random.default_rng(seed).integers(lo, hi + 1))
        return SceneSpec(num_instances=k, seed=seed, **self.scene)

    def scenes(self, split: str) -> list[Scene]:
        return [generate_scene(self.spec(split, i)) for i in range(self.num_scenes)]

    def clicks(self, split: str, scenes: list[Scene]) -> list[ClickAnnotation]:
        return [simulate_clicks(s, self.clicks_per_instance, self.seed(split, i), self.boundary_fraction)
                for i, s in enumerate(scenes)]

    def load(self, split: str) -> tuple[list[Scene], list[ClickAnnotation]]:
        scenes = self.scenes(split)
        return scenes, self.clicks(split, scenes)


_OBJECTS = {"points_per_instance": (60, 100), "classes": ("crate", "ball", "drum")}

EASY = Suite("easy", {**_OBJECTS, "min_gap": 1.0})
HARD = Suite("hard", {"points_per_instance": (60, 100), "classes": ("crate", "ball", "drum", "stool", "lamp"),
                      "touching": True, "min_gap": 0.8, "instance_color_jitter": 0.1})
BOUNDARY = Suite("boundary", {**_OBJECTS, "min_gap": 0.2}, train_seed=3000, eval_seed=7000,
                 boundary_fraction=0.1)
SUITES = {s.name: s for s in (EASY, HARD, BOUNDARY)}

# settings shared by every end-to-end run
ACCEPTANCE_HP = Hyperparams(optimizer="gd", lr=0.1)
ACCEPTANCE_SV = SupervoxelParams()
