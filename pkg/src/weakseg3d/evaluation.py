"""Segmentation metrics: mIoU, mAP@50 and pseudo-label accuracy, plus report files."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from weakseg3d.pointcloud import SENTINEL_NONE, Scene, atomic_write_text

IOU_THRESHOLD = 0.5


def iou_counts(pred, gt, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union point counts."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.shape} entries, ground truth {gt.shape}")
    inter = np.bincount(gt[pred == gt], minlength=num_classes)[:num_classes]
    union = (np.bincount(pred, minlength=num_classes)[:num_classes]
             + np.bincount(gt, minlength=num_classes)[:num_classes] - inter)
    return inter.astype(np.int64), union.astype(np.int64)


def iou_from_counts(inter, union) -> tuple[np.ndarray, float]:
    present = union > 0
    iou = np.full(len(union), np.nan)
    iou[present] = inter[present] / union[present]
    return iou, float(np.mean(iou[present])) if present.any() else 0.0


def miou(pred, gt, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    return iou_from_counts(*iou_counts(pred, gt, num_classes))


def gt_instances(scene: Scene) -> list[tuple[np.ndarray, int]]:
    return [(np.flatnonzero(scene.gt_instance == i), scene.instance_class(i)) for i in scene.instance_ids]


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = len(np.intersect1d(a, b, assume_unique=True))
    union = len(a) + len(b) - inter
    return inter / union if union else 0.0


def match_predictions(predictions, gts, ignore=None, threshold: float = IOU_THRESHOLD):
    """Greedy matching in order of decreasing confidence.

    Returns ``(entries, n_gt)``: one ``(class, confidence, is_true_positive)``
    per prediction, and the number of ground-truth instances per class.
    Points in ``ignore`` (unassigned ground truth) are removed from the
    predictions before computing overlaps.
    """
    n_gt: dict[int, int] = {}
    for _, cls in gts:
        n_gt[cls] = n_gt.get(cls, 0) + 1
    ignore = np.asarray([] if ignore is None else ignore, dtype=np.int64)
    order = sorted(range(len(predictions)), key=lambda k: -predictions[k][2])
    matched = [False] * len(gts)
    entries = [None] * len(predictions)
    for k in order:
        pts, cls, conf = predictions[k]
        pts = np.setdiff1d(np.asarray(pts, dtype=np.int64), ignore)
        best, best_iou = -1, threshold
        for g, (gpts, gcls) in enumerate(gts):
            if matched[g] or gcls != cls:
                continue
            v = _iou(pts, gpts)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            matched[best] = True
        entries[k] = (int(cls), float(conf), best >= 0)
    return entries, n_gt


def average_precision(confidences, tps, n_gt: int) -> float:
    """Area under the precision-recall curve with the running-max precision envelope."""
    if n_gt == 0:
        return float("nan")
    if len(confidences) == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=float), kind="stable")
    tp = np.asarray(tps, dtype=float)[order]
    tp_cum = np.cumsum(tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def ap_from_entries(entries, n_gt: dict[int, int]) -> tuple[dict[int, float], float]:
    per_class = {}
    for cls in sorted(n_gt):
        sel = [(c, t) for k, c, t in entries if k == cls]
        per_class[cls] = average_precision([c for c, _ in sel], [t for _, t in sel], n_gt[cls])
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def map50(predictions, gts, ignore=None) -> tuple[dict[int, float], float]:
    """Per-class AP at IoU 0.5 and their mean over classes with ground truth.

    ``predictions``: list of (point indices, class, confidence);
    ``gts``: list of (point indices, class).
    """
    entries, n_gt = match_predictions(predictions, gts, ignore)
    return ap_from_entries(entries, n_gt)


def pseudo_counts(pseudo, scene: Scene) -> tuple[int, int]:
    """(correct, labelled) point counts of pseudo instance labels against ground truth.

    Labels not tied to click instances are mapped to the majority ground-truth
    instance of their cluster.
    """
    lab = np.asarray(pseudo.instance)
    mask = lab != SENTINEL_NONE
    n = int(mask.sum())
    if n == 0:
        return 0, 0
    if getattr(pseudo, "aligned", True):
        return int(np.sum(lab[mask] == scene.gt_instance[mask])), n
    correct = 0
    for c in np.unique(lab[mask]):
        gt = scene.gt_instance[lab == c]
        ids, counts = np.unique(gt, return_counts=True)
        best = ids[np.argmax(counts)]
        if best != SENTINEL_NONE:
            correct += int(counts.max())
    return correct, n


def pseudo_accuracy(pseudo, scene: Scene) -> float:
    correct, n = pseudo_counts(pseudo, scene)
    if n == 0:
        warnings.warn("no pseudo-labelled points; accuracy defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return correct / n


@dataclass
class EvalReport:
    per_class_iou: dict[int, float]
    miou: float
    per_class_ap: dict[int, float]
    map50: float
    pseudo_acc: float | None = None
    meta: dict = field(default_factory=dict)

    def flat(self) -> dict[str, object]:
        out = {"map50": self.map50, "miou": self.miou}
        if self.pseudo_acc is not None:
            out["pseudo_acc"] = self.pseudo_acc
        for k, v in sorted(self.per_class_ap.items()):
            out[f"ap50.class{k}"] = v
        for k, v in sorted(self.per_class_iou.items()):
            out[f"iou.class{k}"] = v
        for k, v in sorted(self.meta.items()):
            out[f"meta.{k}"] = v
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.flat().items())

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in sorted(self.per_class_iou.items())}
        d["per_class_ap"] = {str(k): v for k, v in sorted(self.per_class_ap.items())}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["per_class_iou"] = {int(k): v for k, v in d["per_class_iou"].items()}
        d["per_class_ap"] = {int(k): v for k, v in d["per_class_ap"].items()}
        return cls(**d)

    def write(self, stem) -> None:
        atomic_write_text(f"{stem}.txt", self.to_text())
        atomic_write_text(f"{stem}.json", self.to_json())


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def evaluate_predictions(scenes, instance_preds, semantic_preds, num_classes: int, pseudo_acc=None,
                         meta=None) -> EvalReport:
    """Pool metrics over scenes: one confusion count and one AP ranking for the whole set."""
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    entries, n_gt = [], {}
    for scene, inst, sem in zip(scenes, instance_preds, semantic_preds):
        i, u = iou_counts(sem, scene.gt_semantic, num_classes)
        inter += i
        union += u
        e, g = match_predictions(inst, gt_instances(scene), ignore=np.flatnonzero(scene.gt_instance == SENTINEL_NONE))
        entries += e
        for k, v in g.items():
            n_gt[k] = n_gt.get(k, 0) + v
    iou, mean_iou = iou_from_counts(inter, union)
    per_ap, mean_ap = ap_from_entries(entries, n_gt)
    per_iou = {k: float(v) for k, v in enumerate(iou) if not np.isnan(v)}
    return EvalReport(per_iou, mean_iou, per_ap, mean_ap, pseudo_acc, dict(meta or {}))


REPORT_COLUMNS = ("run", "version", "similarity", "map50", "miou", "pseudo_acc")


def ablation_table(reports: list[EvalReport], names: list[str]) -> str:
    """Tab-separated table, one row per run, identical columns for every row."""
    rows = ["\t".join(REPORT_COLUMNS)]
    for name, r in zip(names, reports):
        vals = [name, str(r.meta.get("version", "")), str(r.meta.get("similarity", "")),
                _fmt(float(r.map50)), _fmt(float(r.miou)),
                "nan" if r.pseudo_acc is None else _fmt(float(r.pseudo_acc))]
        rows.append("\t".join(vals))
    return "\n".join(rows) + "\n"
