"""Scenes, synthetic scene generation, click simulation and scene file I/O.

A scene is a set of surface samples of simple primitives resting on the
ground plane, with per-point colour, normal, semantic class and instance id.
Objects of the two-part classes are built from two primitives painted in
different colours (e.g. a stool: yellow seat on a brown pedestal).
"""

from __future__ import annotations

import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SENTINEL_NONE = -1

SCENE_MAGIC = "CSCENE"
SCENE_VERSION = "v1"


@dataclass(frozen=True)
class ClassInfo:
    name: str
    parts: tuple[tuple[str, tuple[float, float, float]], ...]
    stuff: bool = False


# Fixed class catalogue so that class ids mean the same thing in every scene.
CLASSES: tuple[ClassInfo, ...] = (
    ClassInfo("crate", (("box", (0.80, 0.25, 0.20)),)),
    ClassInfo("ball", (("sphere", (0.25, 0.70, 0.30)),)),
    ClassInfo("drum", (("cylinder", (0.20, 0.35, 0.80)),)),
    ClassInfo("stool", (("seat", (0.90, 0.80, 0.25)), ("pedestal", (0.45, 0.28, 0.12)))),
    ClassInfo("lamp", (("shade", (0.85, 0.85, 0.95)), ("pole", (0.30, 0.30, 0.35)))),
    ClassInfo("floor", (("plane", (0.55, 0.55, 0.50)),), stuff=True),
    ClassInfo("wall", (("plane", (0.70, 0.62, 0.55)),), stuff=True),
)
CLASS_IDS = {c.name: i for i, c in enumerate(CLASSES)}
NUM_CLASSES = len(CLASSES)
STUFF_CLASSES = tuple(i for i, c in enumerate(CLASSES) if c.stuff)


class SceneFormatError(ValueError):
    """Malformed scene or clicks file. Carries the byte offset and row of the fault."""

    def __init__(self, message: str, offset: int, row: int | None = None):
        where = f"byte {offset}" if row is None else f"row {row}, byte {offset}"
        super().__init__(f"{message} ({where})")
        self.offset = offset
        self.row = row


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scene:
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    gt_semantic: np.ndarray
    gt_instance: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        for name, dtype in (("positions", np.float64), ("colors", np.float64), ("normals", np.float64),
                            ("gt_semantic", np.int64), ("gt_instance", np.int64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        n = len(self.positions)
        if n < 1:
            raise ValueError("scene must contain at least one point")
        for name in ("positions", "colors", "normals"):
            if getattr(self, name).shape != (n, 3):
                raise ValueError(f"{name} must have shape ({n}, 3), got {getattr(self, name).shape}")
        for name in ("gt_semantic", "gt_instance"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        lengths = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(lengths - 1.0)))
            raise ValueError(f"normal of point {bad} has length {lengths[bad]:.9f}, expected 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.gt_semantic.min() < 0 or self.gt_semantic.max() >= self.num_classes:
            raise ValueError(f"gt_semantic outside [0, {self.num_classes})")
        if self.gt_instance.min() < SENTINEL_NONE:
            raise ValueError("gt_instance ids must be >= 0 or SENTINEL_NONE")
        for inst in self.instance_ids:
            classes = np.unique(self.gt_semantic[self.gt_instance == inst])
            if len(classes) != 1:
                raise ValueError(f"instance {inst} spans semantic classes {classes.tolist()}")

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return self.num_classes == other.num_classes and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("positions", "colors", "normals", "gt_semantic", "gt_instance"))

    __hash__ = None

    @property
    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.gt_instance)
        return ids[ids != SENTINEL_NONE]

    @property
    def num_instances(self) -> int:
        return len(self.instance_ids)

    def instance_class(self, inst: int) -> int:
        return int(self.gt_semantic[np.flatnonzero(self.gt_instance == inst)[0]])

    def permuted(self, order) -> "Scene":
        order = np.asarray(order)
        return Scene(self.positions[order], self.colors[order], self.normals[order],
                     self.gt_semantic[order], self.gt_instance[order], self.num_classes)


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic scene. Generation is a pure function of this value."""

    num_instances: int = 4
    points_per_instance: tuple[int, int] = (80, 120)
    classes: tuple[str, ...] = ("crate", "ball", "drum")
    color_noise: float = 0.03
    instance_color_jitter: float = 0.04
    background: bool = False
    background_points: int = 200
    noise: float = 0.0
    min_gap: float = 1.0
    size_scale: float = 1.0
    touching: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "points_per_instance", tuple(int(v) for v in self.points_per_instance))
        object.__setattr__(self, "classes", tuple(self.classes))
        self.validate()

    def validate(self):
        lo, hi = self.points_per_instance
        if self.num_instances < 1:
            raise ValueError("num_instances must be positive")
        if lo < 1 or hi < lo:
            raise ValueError(f"points_per_instance must satisfy 1 <= lo <= hi, got {self.points_per_instance}")
        if not self.classes:
            raise ValueError("classes must be nonempty")
        for name in self.classes:
            if name not in CLASS_IDS or CLASSES[CLASS_IDS[name]].stuff:
                raise ValueError(f"unknown object class {name!r}")
        if self.background and self.background_points < 1:
            raise ValueError("background_points must be positive")
        if self.size_scale <= 0:
            raise ValueError("size_scale must be positive")
        for name in ("color_noise", "instance_color_jitter", "noise", "min_gap"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown SceneSpec field(s): {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["points_per_instance"] = list(self.points_per_instance)
        d["classes"] = list(self.classes)
        return d


# ---------------------------------------------------------------------------
# primitives

@dataclass(frozen=True)
class Primitive:
    """One analytic surface piece. ``kind`` is box, sphere, cylinder or plane.

    box: center, half extents, open_bottom.  sphere: center, radius.
    cylinder: base center, radius, height (top cap included, no bottom cap).
    plane: origin, two in-plane axes spanning the patch, normal.
    """

    kind: str
    params: dict
    color: tuple[float, float, float]
    semantic: int
    instance: int

    def area(self) -> float:
        p = self.params
        if self.kind == "box":
            a, b, c = 2 * np.asarray(p["half"])
            top_bottom = a * b * (1 if p.get("open_bottom", True) else 2)
            return float(top_bottom + 2 * a * c + 2 * b * c)
        if self.kind == "sphere":
            return float(4 * np.pi * p["radius"] ** 2)
        if self.kind == "cylinder":
            r, h = p["radius"], p["height"]
            return float(2 * np.pi * r * h + np.pi * r * r)
        if self.kind == "plane":
            return float(np.linalg.norm(p["u"]) * np.linalg.norm(p["v"]))
        raise ValueError(self.kind)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        if self.kind == "box":
            return _sample_box(np.asarray(p["center"]), np.asarray(p["half"]), p.get("open_bottom", True), n, rng)
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return np.asarray(p["center"]) + p["radius"] * d, d
        if self.kind == "cylinder":
            return _sample_cylinder(np.asarray(p["base"]), p["radius"], p["height"], n, rng)
        if self.kind == "plane":
            uv = rng.uniform(0.0, 1.0, size=(n, 2))
            pts = np.asarray(p["origin"]) + uv[:, :1] * np.asarray(p["u"]) + uv[:, 1:] * np.asarray(p["v"])
            return pts, np.tile(np.asarray(p["normal"], dtype=float), (n, 1))
        raise ValueError(self.kind)


def _sample_box(center, half, open_bottom, n, rng):
    a, b, c = 2 * half
    # faces: +z, -z, +x, -x, +y, -y
    areas = np.array([a * b, 0.0 if open_bottom else a * b, b * c, b * c, a * c, a * c])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    normals = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    # axis index of each face normal: z for faces 0/1, x for 2/3, y for 4/5
    normal_axis = np.array([2, 0, 1])[axis]
    local[np.arange(n), normal_axis] = sign * half[normal_axis]
    normals[np.arange(n), normal_axis] = sign
    return center + local, normals


def _sample_cylinder(base, r, h, n, rng):
    lateral = 2 * np.pi * r * h
    cap = np.pi * r * r
    on_cap = rng.uniform(size=n) < cap / (lateral + cap)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    rad = np.where(on_cap, r * np.sqrt(rng.uniform(size=n)), r)
    z = np.where(on_cap, h, rng.uniform(0, h, size=n))
    pts[:, 0] = base[0] + rad * np.cos(theta)
    pts[:, 1] = base[1] + rad * np.sin(theta)
    pts[:, 2] = base[2] + z
    normals[:, 0] = np.where(on_cap, 0.0, np.cos(theta))
    normals[:, 1] = np.where(on_cap, 0.0, np.sin(theta))
    normals[:, 2] = np.where(on_cap, 1.0, 0.0)
    return pts, normals


def _object_parts(cls: int, rng) -> tuple[list[tuple[str, dict]], float]:
    """Primitive pieces of one object centred at the origin, plus its half width along x."""
    name = CLASSES[cls].name
    if name == "crate":
        half = np.array([rng.uniform(0.18, 0.32), rng.uniform(0.18, 0.32), rng.uniform(0.15, 0.30)])
        return [("box", {"center": np.array([0, 0, half[2]]), "half": half, "open_bottom": True})], half[0]
    if name == "ball":
        r = rng.uniform(0.18, 0.30)
        return [("sphere", {"center": np.array([0, 0, r]), "radius": r})], r
    if name == "drum":
        r, h = rng.uniform(0.15, 0.25), rng.uniform(0.35, 0.6)
        return [("cylinder", {"base": np.zeros(3), "radius": r, "height": h})], r
    if name == "stool":
        leg_h = rng.uniform(0.35, 0.5)
        half = np.array([rng.uniform(0.2, 0.28), rng.uniform(0.2, 0.28), 0.04])
        seat = {"center": np.array([0, 0, leg_h + half[2]]), "half": half, "open_bottom": False}
        pedestal = {"base": np.zeros(3), "radius": rng.uniform(0.06, 0.09), "height": leg_h}
        return [("box", seat), ("cylinder", pedestal)], half[0]
    if name == "lamp":
        pole_h = rng.uniform(0.45, 0.7)
        r = rng.uniform(0.14, 0.2)
        pole = {"base": np.zeros(3), "radius": rng.uniform(0.03, 0.05), "height": pole_h}
        shade = {"center": np.array([0, 0, pole_h + r * 0.8]), "radius": r}
        return [("sphere", shade), ("cylinder", pole)], r
    raise ValueError(name)


def _scale_parts(parts, k: float):
    scaled = []
    for kind, params in parts:
        params = {key: (v if isinstance(v, bool) else np.asarray(v, dtype=float) * k) for key, v in params.items()}
        scaled.append((kind, params))
    return scaled


def _translate(kind: str, params: dict, dx: np.ndarray) -> dict:
    params = dict(params)
    key = {"box": "center", "sphere": "center", "cylinder": "base"}[kind]
    params[key] = np.asarray(params[key], dtype=float) + dx
    return params


def layout_scene(spec: SceneSpec) -> tuple[list[Primitive], np.random.Generator]:
    """Place the scene's primitives. Returns them with the rng positioned for sampling."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    class_ids = [CLASS_IDS[c] for c in spec.classes]
    objects = []
    for inst in range(spec.num_instances):
        cls = class_ids[int(rng.integers(len(class_ids)))]
        parts, half_x = _object_parts(cls, rng)
        if spec.size_scale != 1.0:
            parts, half_x = _scale_parts(parts, spec.size_scale), half_x * spec.size_scale
        radius = max(_footprint_radius(k, p) for k, p in parts)
        objects.append((cls, parts, half_x, radius))

    # groups of objects placed together: singletons, or touching pairs along x
    groups = []
    i = 0
    while i < len(objects):
        if spec.touching and i + 1 < len(objects):
            a, b = objects[i], objects[i + 1]
            offsets = [np.zeros(3), np.array([a[2] + b[2], 0.0, 0.0])]
            members = [(i, offsets[0]), (i + 1, offsets[1])]
            centre = offsets[1] / 2
            radius = max(a[3] + np.linalg.norm(centre), b[3] + np.linalg.norm(offsets[1] - centre))
            groups.append((members, centre, radius))
            i += 2
        else:
            groups.append(([(i, np.zeros(3))], np.zeros(3), objects[i][3]))
            i += 1

    extent = 1.0 + 0.9 * np.sqrt(len(groups)) * (1.0 + spec.min_gap)
    placed: list[tuple[np.ndarray, float]] = []
    prims: list[Primitive] = []
    for members, centre, radius in groups:
        for attempt in range(10000):
            xy = rng.uniform(-extent, extent, size=2)
            ok = all(np.linalg.norm(xy - q) >= radius + r + spec.min_gap for q, r in placed)
            if ok:
                break
            if attempt % 500 == 499:
                extent *= 1.1
        placed.append((xy, radius))
        shift = np.array([xy[0], xy[1], 0.0]) - centre
        for idx, off in members:
            cls, parts, _, _ = objects[idx]
            colors = CLASSES[cls].parts
            jitter = rng.uniform(-spec.instance_color_jitter, spec.instance_color_jitter, size=3)
            for (kind, params), (_, base_color) in zip(parts, colors):
                color = tuple(np.clip(np.asarray(base_color) + jitter, 0.0, 1.0))
                prims.append(Primitive(kind, _translate(kind, params, shift + off), color, cls, idx))

    if spec.background:
        lo = -extent - 0.5
        size = 2 * (extent + 0.5)
        floor = {"origin": np.array([lo, lo, 0.0]), "u": np.array([size, 0, 0]), "v": np.array([0, size, 0]),
                 "normal": np.array([0.0, 0.0, 1.0])}
        wall = {"origin": np.array([lo, lo, 0.0]), "u": np.array([0, size, 0]), "v": np.array([0, 0, 1.5]),
                "normal": np.array([1.0, 0.0, 0.0])}
        for name, params in (("floor", floor), ("wall", wall)):
            cls = CLASS_IDS[name]
            prims.append(Primitive("plane", params, CLASSES[cls].parts[0][1], cls, SENTINEL_NONE))
    return prims, rng


def _footprint_radius(kind, params) -> float:
    if kind == "box":
        return float(np.hypot(params["half"][0], params["half"][1]))
    return float(params["radius"])


def generate_scene(spec: SceneSpec) -> Scene:
    prims, rng = layout_scene(spec)
    lo, hi = spec.points_per_instance
    chunks = []
    instances = sorted({p.instance for p in prims if p.instance != SENTINEL_NONE})
    for inst in instances:
        parts = [p for p in prims if p.instance == inst]
        n = int(rng.integers(lo, hi + 1))
        areas = np.array([p.area() for p in parts])
        counts = _split_counts(n, areas)
        for prim, k in zip(parts, counts):
            chunks.append((prim, k))
    background = [p for p in prims if p.instance == SENTINEL_NONE]
    if background:
        areas = np.array([p.area() for p in background])
        for prim, k in zip(background, _split_counts(spec.background_points, areas)):
            chunks.append((prim, k))

    pos, col, nrm, sem, ins = [], [], [], [], []
    for prim, k in chunks:
        if k == 0:
            continue
        pts, normals = prim.sample(k, rng)
        colors = np.asarray(prim.color) + rng.normal(scale=spec.color_noise, size=(k, 3))
        pos.append(pts)
        nrm.append(normals)
        col.append(np.clip(colors, 0.0, 1.0))
        sem.append(np.full(k, prim.semantic))
        ins.append(np.full(k, prim.instance))
    positions = np.concatenate(pos)
    if spec.noise > 0:
        positions = positions + rng.normal(scale=spec.noise, size=positions.shape)
    return Scene(positions, np.concatenate(col), np.concatenate(nrm), np.concatenate(sem),
                 np.concatenate(ins), NUM_CLASSES)


def _split_counts(n: int, areas: np.ndarray) -> list[int]:
    """Split n points over pieces proportionally to area; every piece gets at least one."""
    k = len(areas)
    if k == 1:
        return [n]
    raw = areas / areas.sum() * n
    counts = np.maximum(np.floor(raw).astype(int), 1)
    while counts.sum() > n:
        counts[np.argmax(counts)] -= 1
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    j = 0
    while counts.sum() < n:
        counts[order[j % k]] += 1
        j += 1
    return counts.tolist()


# ---------------------------------------------------------------------------
# clicks

@dataclass(frozen=True, eq=False)
class ClickAnnotation:
    """Sparse supervision. ``clicks`` rows are (point_index, instance_id, semantic_class).

    Rows with instance_id == SENTINEL_NONE are semantic-only clicks on
    background structure.
    """

    clicks: np.ndarray
    clicks_per_instance: int = 1

    def __post_init__(self):
        c = np.array(self.clicks, dtype=np.int64, copy=True).reshape(-1, 3)
        c.setflags(write=False)
        object.__setattr__(self, "clicks", c)
        if self.clicks_per_instance < 1:
            raise ValueError("clicks_per_instance must be positive")
        if len(np.unique(c[:, 0])) != len(c):
            raise ValueError("duplicate click point indices")
        ids, counts = np.unique(self.instance_id[self.instance_id != SENTINEL_NONE], return_counts=True)
        if np.any(counts > self.clicks_per_instance):
            raise ValueError(f"instance {ids[np.argmax(counts)]} has more than {self.clicks_per_instance} clicks")

    def __eq__(self, other):
        if not isinstance(other, ClickAnnotation):
            return NotImplemented
        return self.clicks_per_instance == other.clicks_per_instance and np.array_equal(self.clicks, other.clicks)

    __hash__ = None

    def __len__(self):
        return len(self.clicks)

    @property
    def point_index(self) -> np.ndarray:
        return self.clicks[:, 0]

    @property
    def instance_id(self) -> np.ndarray:
        return self.clicks[:, 1]

    @property
    def semantic_class(self) -> np.ndarray:
        return self.clicks[:, 2]

    def instance_clicks(self) -> "ClickAnnotation":
        keep = self.instance_id != SENTINEL_NONE
        return ClickAnnotation(self.clicks[keep], self.clicks_per_instance)

    @property
    def instances(self) -> np.ndarray:
        ids = np.unique(self.instance_id)
        return ids[ids != SENTINEL_NONE]

    def check(self, scene: Scene) -> None:
        """Verify the annotation against the scene it labels."""
        n = len(scene)
        idx = self.point_index
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("click point index out of range")
        if np.any(scene.gt_semantic[idx] != self.semantic_class):
            bad = int(idx[np.flatnonzero(scene.gt_semantic[idx] != self.semantic_class)[0]])
            raise ValueError(f"click on point {bad} has the wrong semantic class")
        if np.any(scene.gt_instance[idx] != self.instance_id):
            raise ValueError("click instance ids disagree with the scene")
        missing = set(scene.instance_ids.tolist()) - set(self.instances.tolist())
        if missing:
            raise ValueError(f"instances without clicks: {sorted(missing)}")

    def ratio(self, scene: Scene) -> float:
        return len(self.clicks) / len(scene)


def simulate_clicks(scene: Scene, m: int = 1, seed: int = 0, boundary_fraction: float | None = None,
                    background_clicks: int = 0) -> ClickAnnotation:
    """Click m distinct uniformly drawn points of every ground-truth instance.

    With ``boundary_fraction`` the draw is restricted to that fraction of each
    instance's points farthest from the instance centroid. ``background_clicks``
    adds that many semantic-only clicks per background class present.
    """
    if m < 1:
        raise ValueError("m must be positive")
    rng = np.random.default_rng(seed)
    rows = []
    for inst in scene.instance_ids:
        members = np.flatnonzero(scene.gt_instance == inst)
        if len(members) < m:
            raise ValueError(f"instance {inst} has {len(members)} points, fewer than m={m}")
        pool = members
        if boundary_fraction is not None:
            d = np.linalg.norm(scene.positions[members] - scene.positions[members].mean(axis=0), axis=1)
            k = max(m, int(np.ceil(boundary_fraction * len(members))))
            pool = members[np.argsort(-d, kind="stable")[:k]]
        chosen = np.sort(rng.choice(pool, size=m, replace=False))
        rows.extend((int(i), int(inst), int(scene.gt_semantic[i])) for i in chosen)
    if background_clicks:
        bg = scene.gt_instance == SENTINEL_NONE
        for cls in np.unique(scene.gt_semantic[bg]):
            members = np.flatnonzero(bg & (scene.gt_semantic == cls))
            k = min(background_clicks, len(members))
            for i in np.sort(rng.choice(members, size=k, replace=False)):
                rows.append((int(i), SENTINEL_NONE, int(cls)))
    return ClickAnnotation(np.array(rows, dtype=np.int64).reshape(-1, 3), m)


# ---------------------------------------------------------------------------
# file I/O

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_scene(scene: Scene) -> str:
    out = io.StringIO()
    out.write(f"{SCENE_MAGIC} {SCENE_VERSION} N={len(scene)} K={scene.num_classes}\n")
    for p, c, n, s, i in zip(scene.positions.tolist(), scene.colors.tolist(), scene.normals.tolist(),
                             scene.gt_semantic.tolist(), scene.gt_instance.tolist()):
        out.write(" ".join(map(_fmt, p + c + n)) + f" {s} {i}\n")
    return out.getvalue()


def write_scene(scene: Scene, path) -> None:
    atomic_write_text(path, format_scene(scene))


def _lines_with_offsets(data: bytes):
    offset = 0
    for raw in data.splitlines(keepends=True):
        yield offset, raw.decode("utf-8").strip()
        offset += len(raw)


def parse_scene(data: bytes) -> Scene:
    lines = list(_lines_with_offsets(data))
    if not lines or not lines[0][1]:
        raise SceneFormatError("missing header", 0)
    header = lines[0][1].split()
    try:
        if len(header) != 4 or header[0] != SCENE_MAGIC or header[1] != SCENE_VERSION:
            raise ValueError
        if not header[2].startswith("N=") or not header[3].startswith("K="):
            raise ValueError
        n, k = int(header[2][2:]), int(header[3][2:])
    except ValueError:
        raise SceneFormatError(f"malformed header {lines[0][1]!r}", 0) from None
    if n < 1 or k < 1:
        raise SceneFormatError("header counts must be positive", 0)

    body = [(off, text) for off, text in lines[1:] if text]
    if len(body) < n:
        raise SceneFormatError(f"truncated body: header declares N={n} but only {len(body)} rows follow",
                               len(data), row=len(body) + 1)
    if len(body) > n:
        raise SceneFormatError(f"count mismatch: header declares N={n} but more rows follow",
                               body[n][0], row=n + 1)
    floats = np.empty((n, 9))
    ints = np.empty((n, 2), dtype=np.int64)
    for r, (off, text) in enumerate(body):
        cols = text.split()
        if len(cols) != 11:
            raise SceneFormatError(f"expected 11 columns, got {len(cols)}", off, row=r + 1)
        try:
            floats[r] = [float(v) for v in cols[:9]]
            ints[r] = [int(cols[9]), int(cols[10])]
        except ValueError:
            raise SceneFormatError("non-numeric field", off, row=r + 1) from None
    return Scene(floats[:, 0:3], floats[:, 3:6], floats[:, 6:9], ints[:, 0], ints[:, 1], k)


def read_scene(path) -> Scene:
    return parse_scene(Path(path).read_bytes())


def format_clicks(clicks: ClickAnnotation) -> str:
    rows = [f"# clicks_per_instance={clicks.clicks_per_instance}"]
    rows += [f"{p} {i} {s}" for p, i, s in clicks.clicks.tolist()]
    return "\n".join(rows) + "\n"


def write_clicks(clicks: ClickAnnotation, path) -> None:
    atomic_write_text(path, format_clicks(clicks))


def parse_clicks(data: bytes) -> ClickAnnotation:
    m = 1
    rows = []
    for r, (off, text) in enumerate(_lines_with_offsets(data)):
        if not text:
            continue
        if text.startswith("#"):
            if "clicks_per_instance=" in text:
                try:
                    m = int(text.split("clicks_per_instance=")[1].split()[0])
                except ValueError:
                    raise SceneFormatError("malformed clicks_per_instance", off, row=r + 1) from None
            continue
        cols = text.split()
        if len(cols) != 3:
            raise SceneFormatError(f"expected 3 columns, got {len(cols)}", off, row=r + 1)
        try:
            rows.append([int(c) for c in cols])
        except ValueError:
            raise SceneFormatError("non-integer field", off, row=r + 1) from None
    return ClickAnnotation(np.array(rows, dtype=np.int64).reshape(-1, 3), m)


def read_clicks(path) -> ClickAnnotation:
    return parse_clicks(Path(path).read_bytes())
