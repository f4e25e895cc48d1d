"""Pseudo-label generation, the training loop and inference.

Three training versions share one loop:

* ``weak``: discriminative + cross-entropy losses on supervoxel-expanded clicks only.
* ``baseline``: from epoch ``pseudo_start`` the model's own mean-shift clusters
  are added as confidence-filtered pseudo instance labels, regenerated every
  ``regen_period`` epochs.
* ``click``: from epoch ``pseudo_start`` every scene gets fresh pseudo labels
  each epoch from k-means seeded at the clicks; semantic pseudo labels are
  copied from the matched click where the similarity reaches ``theta``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from weakseg3d import evaluation
from weakseg3d.clustering import (ClusterAssignment, kmeans_fixed_seeds, mean_shift, nearest_seed_assignment,
                                  nn_assign_multiclick)
from weakseg3d.losses import TERMS, total_loss
from weakseg3d.model import (Hyperparams, ModelOutput, ModelParams, OutputGrads, backward, forward, init_params,
                            make_optimizer)
from weakseg3d.pointcloud import SENTINEL_NONE, STUFF_CLASSES, ClickAnnotation, Scene
from weakseg3d.similarity import SimilarityConfig, point_features, similarity_matrix
from weakseg3d.supervoxel import SupervoxelPartition, WeakLabels, build_partition, expand_labels

log = logging.getLogger(__name__)

VERSIONS = ("weak", "baseline", "click")


@dataclass(frozen=True, eq=False)
class PseudoLabels:
    """Per-point pseudo instance and semantic labels.

    ``similarity`` is each point's similarity to its matched clicked point
    (NaN where undefined). ``filtered`` marks mean-shift labels that need the
    alpha/beta confidence masks; ``aligned`` says instance ids are click ids.
    """

    instance: np.ndarray
    semantic: np.ndarray
    similarity: np.ndarray
    filtered: bool = False
    aligned: bool = True

    @property
    def num_labeled(self) -> int:
        return int(np.sum(self.instance != SENTINEL_NONE))

    def __eq__(self, other):
        if not isinstance(other, PseudoLabels):
            return NotImplemented
        return (self.filtered == other.filtered and self.aligned == other.aligned
                and np.array_equal(self.instance, other.instance)
                and np.array_equal(self.semantic, other.semantic)
                and np.array_equal(self.similarity, other.similarity, equal_nan=True))

    __hash__ = None


@dataclass(frozen=True)
class SupervoxelParams:
    k_neighbors: int = 8
    merge_threshold: float = 0.1
    min_size: int = 3
    color_scale: float = 1.0
    normal_scale: float = 1.0

    def build(self, scene: Scene) -> SupervoxelPartition:
        return build_partition(scene, self.k_neighbors, self.merge_threshold, self.min_size,
                               self.color_scale, self.normal_scale)


def default_pseudo_config(hp: Hyperparams, **toggles) -> SimilarityConfig:
    return SimilarityConfig("composite", hp.sigma_e, hp.sigma_p, **toggles)


def inference_config(version: str, hp: Hyperparams) -> SimilarityConfig:
    """Offsets are only trained by the click version; the others group by embeddings alone."""
    if version == "click":
        return SimilarityConfig("full", hp.sigma_e, hp.sigma_p, use_offsets=True)
    return SimilarityConfig("weak")


def fusion_config(version: str, hp: Hyperparams) -> SimilarityConfig:
    """The click version fuses with the same composite metric that generated its pseudo labels."""
    if version == "click":
        return default_pseudo_config(hp).replace(use_offsets=True)
    return SimilarityConfig("weak")


def assignable_points(output: ModelOutput, weak: WeakLabels | None, stuff_classes=STUFF_CLASSES,
                      background_as_instances: bool = False) -> np.ndarray:
    """Points that take part in instance grouping: not predicted as background structure."""
    n = len(output)
    if background_as_instances or not stuff_classes:
        return np.arange(n)
    pred = np.argmax(output.semantic_probs, axis=1)
    keep = ~np.isin(pred, stuff_classes)
    if weak is not None:
        keep |= weak.instance != SENTINEL_NONE
    return np.flatnonzero(keep)


def pseudo_gen_click(output: ModelOutput, scene: Scene, clicks: ClickAnnotation, weak: WeakLabels | None,
                     cfg: SimilarityConfig, hp: Hyperparams, points=None, method: str = "kmeans",
                     max_iters: int = 20, centroid_mode: str = "tuple") -> PseudoLabels:
    """Pseudo labels of the click version.

    ``method`` is ``kmeans`` (seeded k-means) or ``nearest`` (nearest click).
    Annotations with several clicks on an instance always use the mean
    similarity to that instance's clicks.
    """
    inst_clicks = clicks.instance_clicks()
    multi = len(np.unique(inst_clicks.instance_id)) != len(inst_clicks)
    if multi:
        assignment = nn_assign_multiclick(output, scene, cfg, inst_clicks, points=points)
    elif method == "kmeans":
        assignment = kmeans_fixed_seeds(output, scene, cfg, inst_clicks, max_iters=max_iters, points=points,
                                        centroid_mode=centroid_mode)
    elif method == "nearest":
        assignment = nearest_seed_assignment(output, scene, cfg, inst_clicks, points=points)
    else:
        raise ValueError(f"unknown pseudo-label method {method!r}")
    return _labels_from_assignment(assignment, output, scene, inst_clicks, weak, cfg, hp)


def _labels_from_assignment(assignment: ClusterAssignment, output, scene, clicks, weak, cfg, hp) -> PseudoLabels:
    n = len(scene)
    instance = assignment.instance_labels()
    semantic = np.full(n, SENTINEL_NONE, dtype=np.int64)
    sim = np.full(n, np.nan)
    labeled = np.flatnonzero(instance != SENTINEL_NONE)
    if len(labeled):
        f = point_features(output, scene, cfg)
        table = clicks.clicks
        s = similarity_matrix(f.take(labeled), f.take(table[:, 0]), cfg)
        # best similarity among the clicks of the matched instance
        same = instance[labeled][:, None] == table[None, :, 1]
        best = np.where(same, s, -np.inf).argmax(axis=1)
        sim[labeled] = s[np.arange(len(labeled)), best]
        ok = sim[labeled] >= hp.theta
        semantic[labeled[ok]] = table[best[ok], 2]
    if weak is not None:
        w_inst = weak.instance != SENTINEL_NONE
        instance[w_inst] = weak.instance[w_inst]
        sim[w_inst] = 1.0
        w_sem = weak.semantic != SENTINEL_NONE
        semantic[w_sem] = weak.semantic[w_sem]
    return PseudoLabels(instance, semantic, sim, filtered=False, aligned=True)


def pseudo_gen_baseline(output: ModelOutput, scene: Scene, cfg: SimilarityConfig, hp: Hyperparams,
                        points=None, **ms_kwargs) -> PseudoLabels:
    """Mean-shift clusters as pseudo instances; the losses apply the alpha/beta filters."""
    assignment = mean_shift(output, scene, cfg, points=points, **ms_kwargs)
    n = len(scene)
    return PseudoLabels(assignment.cluster_id.copy(), np.full(n, SENTINEL_NONE, dtype=np.int64),
                        np.full(n, np.nan), filtered=True, aligned=False)


@dataclass
class EpochRecord:
    epoch: int
    terms: dict[str, float]
    pseudo_acc: float | None
    n_pseudo: int
    wall_time: float = field(default=0.0, compare=False)

    def log_line(self) -> str:
        t = self.terms
        acc = "nan" if self.pseudo_acc is None else f"{self.pseudo_acc:.6f}"
        return (f"{self.epoch} {t['weak_var'] + t['pseudo_var']:.6f} {t['weak_dist'] + t['pseudo_dist']:.6f} "
                f"{t['weak_ce'] + t['pseudo_ce']:.6f} {t['pseudo_reg']:.6f} {acc} {self.n_pseudo}")


LOG_HEADER = "epoch loss_var loss_dist loss_ce loss_reg pseudo_acc n_pseudo"


@dataclass
class TrainingRun:
    version: str
    records: list[EpochRecord]
    params: ModelParams
    config: dict

    def pseudo_curve(self) -> list[tuple[int, float]]:
        return [(r.epoch, r.pseudo_acc) for r in self.records if r.pseudo_acc is not None]

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + [r.log_line() for r in self.records]) + "\n"


def prepare_weak_labels(scenes, clicks, sv: SupervoxelParams) -> list[WeakLabels]:
    return [expand_labels(sv.build(s), c) for s, c in zip(scenes, clicks)]


def train(scenes: list[Scene], clicks: list[ClickAnnotation], hp: Hyperparams, version: str = "click",
          cfg: SimilarityConfig | None = None, sv: SupervoxelParams | None = None,
          weak_labels: list[WeakLabels] | None = None, stuff_classes=STUFF_CLASSES,
          background_as_instances: bool = False, pseudo_method: str = "kmeans", centroid_mode: str = "tuple",
          callback=None) -> TrainingRun:
    """Full-batch training over a set of scenes.

    Gradients of every scene are averaged in scene order before each update.
    ``callback(epoch, scene_index, pseudo_labels)`` sees every generated pseudo label set.
    """
    if version not in VERSIONS:
        raise ValueError(f"unknown version {version!r}; expected one of {VERSIONS}")
    if len(scenes) != len(clicks) or not scenes:
        raise ValueError("need one click annotation per scene")
    hp.validate()
    for s, c in zip(scenes, clicks):
        c.check(s)
    sv = sv or SupervoxelParams()
    cfg = cfg or default_pseudo_config(hp)
    weak_labels = weak_labels if weak_labels is not None else prepare_weak_labels(scenes, clicks, sv)
    loss_hp = hp if version != "weak" else hp.replace(pseudo_start=hp.epochs + 1)

    params = init_params(hp.embed_dim, scenes[0].num_classes, hp.hidden, hp.seed)
    opt = make_optimizer(hp)
    records = []
    pseudo: list[PseudoLabels | None] = [None] * len(scenes)
    for epoch in range(hp.epochs):
        t0 = time.perf_counter()
        use_pseudo = epoch >= loss_hp.pseudo_start
        terms = dict.fromkeys(TERMS, 0.0)
        n_correct = n_labeled = 0
        for step in range(hp.steps_per_epoch):
            grads_acc = None
            for k, scene in enumerate(scenes):
                out = forward(params, scene)
                if step == 0 and use_pseudo:
                    pseudo[k] = _regenerate(version, epoch, pseudo[k], out, scene, clicks[k], weak_labels[k], cfg,
                                            hp, stuff_classes, background_as_instances, pseudo_method,
                                            centroid_mode)
                    if callback is not None:
                        callback(epoch, k, pseudo[k])
                    c, m = evaluation.pseudo_counts(pseudo[k], scene)
                    n_correct += c
                    n_labeled += m
                breakdown, g = total_loss(out, scene, weak_labels[k], pseudo[k], loss_hp, epoch)
                if step == 0:
                    for name in TERMS:
                        terms[name] += breakdown.terms[name] / len(scenes)
                pg = backward(params, scene, g)
                if grads_acc is None:
                    grads_acc = pg
                else:
                    for name in grads_acc:
                        grads_acc[name] = grads_acc[name] + pg[name]
            opt.step(params, {name: v / len(scenes) for name, v in grads_acc.items()})
        acc = n_correct / n_labeled if use_pseudo and n_labeled else (0.0 if use_pseudo else None)
        records.append(EpochRecord(epoch, terms, acc, n_labeled, time.perf_counter() - t0))
        log.debug("%s", records[-1].log_line())

    config = {"version": version, "hyperparams": hp.to_dict(), "similarity": cfg.__dict__.copy(),
              "supervoxel": sv.__dict__.copy(), "pseudo_method": pseudo_method, "centroid_mode": centroid_mode,
              "background_as_instances": background_as_instances}
    return TrainingRun(version, records, params, config)


def _regenerate(version, epoch, previous, out, scene, clicks, weak, cfg, hp, stuff_classes,
                background_as_instances, pseudo_method, centroid_mode):
    points = assignable_points(out, weak, stuff_classes, background_as_instances)
    if version == "click":
        epoch_cfg = cfg.replace(use_offsets=cfg.use_offsets or epoch >= hp.offset_epoch)
        return pseudo_gen_click(out, scene, clicks, weak, epoch_cfg, hp, points=points, method=pseudo_method,
                                centroid_mode=centroid_mode)
    if previous is None or (epoch - hp.pseudo_start) % hp.regen_period == 0:
        return pseudo_gen_baseline(out, scene, SimilarityConfig("weak"), hp, points=points)
    return previous


@dataclass(frozen=True, eq=False)
class InstancePrediction:
    assignment: ClusterAssignment
    classes: np.ndarray
    confidences: np.ndarray

    def instances(self) -> list[tuple[np.ndarray, int, float]]:
        return [(self.assignment.members(c), int(self.classes[c]), float(self.confidences[c]))
                for c in range(self.assignment.num_clusters)]


def infer_instances(params: ModelParams, scene: Scene, cfg: SimilarityConfig, hp: Hyperparams | None = None,
                    stuff_classes=STUFF_CLASSES, min_points: int = 1, output: ModelOutput | None = None,
                    **ms_kwargs) -> InstancePrediction:
    """Mean-shift instances with a semantic class and confidence per instance.

    Points predicted as background structure are left out. Clusters with fewer
    than ``min_points`` points are dropped (their points become SENTINEL_NONE).
    """
    out = output if output is not None else forward(params, scene)
    points = assignable_points(out, None, stuff_classes)
    a = mean_shift(out, scene, cfg, points=points, **ms_kwargs)
    cid = a.cluster_id.copy()
    sizes = np.bincount(cid[cid >= 0], minlength=a.num_clusters)
    keep = np.flatnonzero(sizes >= min_points)
    remap = np.full(a.num_clusters, SENTINEL_NONE, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    cid[cid >= 0] = remap[cid[cid >= 0]]
    a = ClusterAssignment(cid, len(keep), iterations=a.iterations, converged=a.converged,
                          stop_reason=a.stop_reason)
    classes = np.zeros(len(keep), dtype=np.int64)
    conf = np.zeros(len(keep))
    for c in range(len(keep)):
        probs = out.semantic_probs[cid == c]
        classes[c] = int(np.argmax(probs.sum(axis=0)))
        conf[c] = float(probs[:, classes[c]].mean())
    return InstancePrediction(a, classes, conf)


def fused_probabilities(output: ModelOutput, scene: Scene, cfg: SimilarityConfig, gamma: float) -> np.ndarray:
    """Similarity-weighted average of semantic probabilities over points with similarity above gamma."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    f = point_features(output, scene, cfg)
    s = similarity_matrix(f, f, cfg)
    w = np.where(s > gamma, s, 0.0)
    # the point itself always takes part, also for gamma = 1
    np.fill_diagonal(w, 1.0)
    return (w @ output.semantic_probs) / w.sum(axis=1, keepdims=True)


def fuse_semantics(params: ModelParams, scene: Scene, cfg: SimilarityConfig, gamma: float,
                   output: ModelOutput | None = None) -> np.ndarray:
    out = output if output is not None else forward(params, scene)
    return np.argmax(fused_probabilities(out, scene, cfg, gamma), axis=1)


@dataclass
class SceneResult:
    instances: InstancePrediction
    semantic: np.ndarray
    semantic_unfused: np.ndarray
    map50: float
    miou: float
    miou_unfused: float


def evaluate_scene(params: ModelParams, scene: Scene, version: str, hp: Hyperparams, stuff_classes=STUFF_CLASSES,
                   min_points: int = 1) -> SceneResult:
    cfg = inference_config(version, hp)
    out = forward(params, scene)
    pred = infer_instances(params, scene, cfg, hp, stuff_classes, min_points=min_points, output=out)
    fused = fuse_semantics(params, scene, fusion_config(version, hp), hp.gamma, output=out)
    plain = np.argmax(out.semantic_probs, axis=1)
    ignore = np.flatnonzero(scene.gt_instance == SENTINEL_NONE)
    _, ap = evaluation.map50(pred.instances(), evaluation.gt_instances(scene), ignore)
    _, m_f = evaluation.miou(fused, scene.gt_semantic, scene.num_classes)
    _, m_u = evaluation.miou(plain, scene.gt_semantic, scene.num_classes)
    return SceneResult(pred, fused, plain, ap, m_f, m_u)


def evaluate_run(run: TrainingRun, scenes: list[Scene], hp: Hyperparams | None = None, fuse: bool = True,
                 stuff_classes=STUFF_CLASSES, min_points: int = 1):
    """Pooled report over ``scenes`` and the per-scene results behind it."""
    hp = hp or Hyperparams.from_dict(run.config["hyperparams"])
    results = [evaluate_scene(run.params, s, run.version, hp, stuff_classes, min_points) for s in scenes]
    curve = run.pseudo_curve()
    report = evaluation.evaluate_predictions(
        scenes, [r.instances.instances() for r in results],
        [r.semantic if fuse else r.semantic_unfused for r in results], scenes[0].num_classes,
        pseudo_acc=curve[-1][1] if curve else None,
        meta={"version": run.version, "fused": fuse, "seed": hp.seed,
              "similarity": run.config.get("similarity_label", "")})
    return report, results
